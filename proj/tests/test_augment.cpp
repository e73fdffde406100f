#include <gtest/gtest.h>

#include <map>
#include <random>

#include "affkit/augment.hpp"
#include "affkit/error.hpp"
#include "affkit/fileio.hpp"
#include "test_util.hpp"

using namespace affkit;
using namespace affkit::augment;
using affkit::testing::TempDir;

namespace {

Image random_image(std::size_t w, std::size_t h, std::uint64_t seed) {
  std::mt19937_64 rng(seed);
  Image img(w, h);
  for (auto& v : img.rgb) v = std::uint8_t(rng() % 256);
  return img;
}

constexpr TransformKind kAll[] = {
    TransformKind::identity,   TransformKind::auto_contrast, TransformKind::rotate,     TransformKind::posterize,
    TransformKind::color,      TransformKind::contrast,      TransformKind::brightness, TransformKind::sharpness,
    TransformKind::shear_x,    TransformKind::shear_y,       TransformKind::translate_x, TransformKind::translate_y};

}  // namespace

TEST(MagnitudeMap, Table) {
  EXPECT_EQ(magnitude_map(TransformKind::rotate, 9, 1), 9.0);
  EXPECT_EQ(magnitude_map(TransformKind::rotate, 9, -1), -9.0);
  EXPECT_EQ(magnitude_map(TransformKind::posterize, 9, 1), 7.0);
  EXPECT_EQ(magnitude_map(TransformKind::posterize, 30, 1), 4.0);
  EXPECT_NEAR(magnitude_map(TransformKind::shear_x, 9, -1), -0.09, 1e-15);
  EXPECT_NEAR(magnitude_map(TransformKind::translate_y, 30, 1, 100), 33.0, 1e-12);
  EXPECT_NEAR(magnitude_map(TransformKind::contrast, 9, 1), 1.27, 1e-15);
  EXPECT_NEAR(magnitude_map(TransformKind::sharpness, 9, -1), 0.73, 1e-15);
  EXPECT_THROW(magnitude_map(TransformKind::rotate, 31, 1), ValidationError);
  EXPECT_THROW(magnitude_map(TransformKind::rotate, -1, 1), ValidationError);
}

TEST(MagnitudeMap, ZeroMagnitudeIsIdentity) {
  auto img = random_image(9, 7, 1);
  for (auto kind : kAll) {
    if (kind == TransformKind::auto_contrast) continue;
    for (int dir : {1, -1}) {
      const double p = magnitude_map(kind, 0, dir, 9);
      EXPECT_EQ(apply_transform(img, kind, p), img) << transform_name(kind);
    }
  }
}

TEST(ApplyTransform, PosterizeMatchesBitMask) {
  Image img(2, 2);
  img.rgb = {255, 1, 128, 3, 64, 77, 200, 201, 0, 13, 254, 99};
  auto out = apply_transform(img, TransformKind::posterize, 7.0);
  for (std::size_t i = 0; i < img.rgb.size(); ++i) EXPECT_EQ(out.rgb[i], img.rgb[i] & 0xFE);
  auto four = apply_transform(img, TransformKind::posterize, 4.0);
  for (std::size_t i = 0; i < img.rgb.size(); ++i) EXPECT_EQ(four.rgb[i], img.rgb[i] & 0xF0);
}

TEST(ApplyTransform, ShapePreservedAtEveryMagnitude) {
  auto img = random_image(11, 6, 2);
  for (auto kind : kAll)
    for (int m : {1, 9, 30}) {
      auto out = apply_transform(img, kind, magnitude_map(kind, m, m % 2 ? 1 : -1, 11));
      EXPECT_EQ(out.width, img.width);
      EXPECT_EQ(out.height, img.height);
      EXPECT_EQ(out.rgb.size(), img.rgb.size());
    }
}

TEST(ApplyTransform, TranslateMovesPixelsAndFillsBlack) {
  Image img(4, 1);
  img.rgb = {10, 10, 10, 20, 20, 20, 30, 30, 30, 40, 40, 40};
  auto out = apply_transform(img, TransformKind::translate_x, 1.0);
  EXPECT_EQ(out.rgb, (std::vector<std::uint8_t>{0, 0, 0, 10, 10, 10, 20, 20, 20, 30, 30, 30}));
}

TEST(ApplyTransform, BrightnessScalesAndClamps) {
  Image img(1, 1);
  img.rgb = {100, 200, 0};
  auto out = apply_transform(img, TransformKind::brightness, 1.5);
  EXPECT_EQ(out.rgb, (std::vector<std::uint8_t>{150, 255, 0}));
}

TEST(ApplyTransform, AutoContrastStretchesChannels) {
  Image img(2, 1);
  img.rgb = {50, 7, 9, 150, 7, 10};
  auto out = apply_transform(img, TransformKind::auto_contrast, 0);
  EXPECT_EQ(out.rgb, (std::vector<std::uint8_t>{0, 7, 0, 255, 7, 255}));
}

TEST(ApplyTransform, RotateQuarterTurnOnSquare) {
  auto img = random_image(5, 5, 3);
  auto out = apply_transform(img, TransformKind::rotate, 90.0);
  // Centre pixel is a fixed point.
  for (std::size_t c = 0; c < 3; ++c) EXPECT_EQ(out.at(2, 2, c), img.at(2, 2, c));
  auto back = apply_transform(out, TransformKind::rotate, -90.0);
  EXPECT_EQ(back, img);
}

TEST(RandAugment, DeterministicAndNumOpsZero) {
  auto img = random_image(16, 16, 4);
  AugmentPolicy policy{2, 9, 77};
  EXPECT_EQ(rand_augment(img, policy, 5), rand_augment(img, policy, 5));
  EXPECT_EQ(encode_png(rand_augment(img, policy, 5)), encode_png(rand_augment(img, policy, 5)));
  AugmentPolicy none{0, 9, 77};
  EXPECT_EQ(rand_augment(img, none, 5), img);
  EXPECT_THROW(rand_augment(img, AugmentPolicy{2, 31, 0}, 0), ValidationError);
}

TEST(RandAugment, KindsDrawnUniformly) {
  AugmentPolicy policy{1, 9, 123};
  std::map<TransformKind, int> counts;
  int positive = 0;
  for (std::uint64_t s = 0; s < 12000; ++s) {
    auto op = draw_ops(policy, s).at(0);
    ++counts[op.kind];
    positive += op.direction == 1;
  }
  EXPECT_EQ(counts.size(), kNumTransforms);
  for (auto [kind, n] : counts) EXPECT_NEAR(n, 1000, 100) << transform_name(kind);
  EXPECT_NEAR(positive, 6000, 300);
}

TEST(RandAugment, OutputsStayInRange) {
  // Bytes cannot leave [0,255]; what matters is no wraparound, so check that
  // a saturated image brightened stays saturated.
  Image white(6, 6, 255);
  auto out = apply_transform(white, TransformKind::brightness, 1.27);
  for (auto v : out.rgb) EXPECT_EQ(v, 255);
  auto contrast = apply_transform(white, TransformKind::sharpness, 1.27);
  for (auto v : contrast.rgb) EXPECT_EQ(v, 255);
}

namespace {

std::vector<data::SampleRecord> lsd_records(const std::vector<std::size_t>& counts) {
  std::vector<data::SampleRecord> recs;
  for (std::size_t c = 0; c < counts.size(); ++c)
    for (std::size_t k = 0; k < counts[c]; ++k)
      recs.push_back({"img/r" + std::to_string(recs.size()) + ".png", data::kVaUnlabeled, data::kVaUnlabeled, int(c), {}});
  return recs;
}

}  // namespace

TEST(BalancePlan, Arithmetic) {
  auto balanced = balance_plan(lsd_records({3, 3, 3, 3, 3, 3}), data::Task::lsd, 1);
  EXPECT_TRUE(balanced.copies.empty());

  auto recs = lsd_records({5, 10, 10, 10, 10, 10});
  auto plan = balance_plan(recs, data::Task::lsd, 1);
  EXPECT_EQ(plan.extra[0], 5u);
  ASSERT_EQ(plan.copies.size(), 5u);
  std::map<std::size_t, int> uses;
  for (const auto& c : plan.copies) {
    ++uses[c.source];
    EXPECT_EQ(c.copy_index, 0u);
  }
  EXPECT_EQ(uses.size(), 5u);

  auto skew = lsd_records({3, 10, 10, 10, 10, 10});
  auto p2 = balance_plan(skew, data::Task::lsd, 9);
  std::map<std::size_t, int> u2;
  for (const auto& c : p2.copies) ++u2[c.source];
  for (auto [src, n] : u2) EXPECT_TRUE(n == 2 || n == 3);
  EXPECT_THROW(balance_plan(lsd_records({0, 1, 1, 1, 1, 1}), data::Task::lsd, 0), ValidationError);
}

TEST(BalancePlan, LargeScaleExtra) {
  // Only the arithmetic matters here; build the count table directly.
  auto d = data::ClassDistribution::from_counts({100000, 90000, 14463, 120000, 144631, 80000});
  EXPECT_EQ(d.max_count - d.counts[2], 130168u);
}

TEST(Materialize, BalancesLabelsAndIsReproducible) {
  TempDir src, out1, out2;
  auto recs = lsd_records({5, 10, 40, 40, 40, 40});
  for (std::size_t i = 0; i < recs.size(); ++i) write_png(src / recs[i].image_path, random_image(8, 8, i));
  data::write_manifest(src / "manifest.csv", recs, data::Task::lsd);
  AugmentPolicy policy{2, 9, 42};
  auto plan = balance_plan(recs, data::Task::lsd, policy.seed);
  auto a = materialize(recs, data::Task::lsd, plan, policy, src.path(), out1.path());
  auto b = materialize(recs, data::Task::lsd, plan, policy, src.path(), out2.path());
  EXPECT_EQ(a.size(), recs.size() + plan.copies.size());
  EXPECT_EQ(data::class_distribution(a, data::Task::lsd).counts, std::vector<std::size_t>(6, 40));
  EXPECT_EQ(a, b);
  EXPECT_EQ(read_file_bytes(out1 / "manifest.csv"), read_file_bytes(out2 / "manifest.csv"));
  for (const auto& r : a) EXPECT_EQ(read_file_bytes(out1 / r.image_path), read_file_bytes(out2 / r.image_path));
  for (std::size_t i = 0; i < plan.copies.size(); ++i) {
    const auto& copy = a[recs.size() + i];
    EXPECT_EQ(copy.expression, recs[plan.copies[i].source].expression);
  }
  EXPECT_EQ(a[recs.size()].image_path.find("_aug"), a[recs.size()].image_path.size() - 9);
  EXPECT_NE(read_file_text(out1 / "augment_policy.txt").find("table_version=1"), std::string::npos);

  TempDir out3;
  auto empty = materialize(recs, data::Task::lsd, BalancePlan{}, policy, src.path(), out3.path());
  EXPECT_EQ(empty, recs);
  EXPECT_EQ(read_file_bytes(out3 / "manifest.csv"), read_file_bytes(src / "manifest.csv"));
}

TEST(Materialize, LabelsCopiedForMtl) {
  TempDir src, out;
  std::vector<data::SampleRecord> recs;
  for (int c = 0; c < 8; ++c)
    for (int k = 0; k < (c == 0 ? 1 : 2); ++k) {
      data::SampleRecord r{"p" + std::to_string(recs.size()) + ".png", 0.1 * c, -0.05 * k, c, {}};
      r.aus = data::SampleRecord::filled_aus(k);
      recs.push_back(r);
      write_png(src / r.image_path, random_image(8, 8, recs.size()));
    }
  auto plan = balance_plan(recs, data::Task::mtl, 0);
  auto result = materialize(recs, data::Task::mtl, plan, AugmentPolicy{}, src.path(), out.path());
  ASSERT_EQ(result.size(), recs.size() + 1);
  auto copy = result.back();
  copy.image_path = recs[0].image_path;
  EXPECT_EQ(copy, recs[0]);
}

TEST(Preprocess, Examples) {
  auto img = random_image(4, 4, 5);
  data::NormStats unit{{0, 0, 0}, {1, 1, 1}};
  auto t = preprocess(img, unit, 4);
  for (std::size_t c = 0; c < 3; ++c)
    for (std::size_t y = 0; y < 4; ++y)
      for (std::size_t x = 0; x < 4; ++x) EXPECT_FLOAT_EQ(t[(c * 4 + y) * 4 + x], img.at(x, y, c) / 255.0f);

  Image gray(5, 5, 51);
  data::NormStats at_mean{{0.2, 0.2, 0.2}, {0.5, 0, 0.1}};
  for (float v : preprocess(gray, at_mean, 3)) EXPECT_NEAR(v, 0.0f, 1e-7);

  Image quad(2, 2);
  quad.rgb = {0, 0, 0, 64, 64, 64, 128, 128, 128, 255, 255, 255};
  auto one = preprocess(quad, unit, 1);
  EXPECT_NEAR(one[0], 111.75 / 255.0, 1e-7);
}
