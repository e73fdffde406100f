#include <gtest/gtest.h>

#include <random>

#include "affkit/checkpoint.hpp"
#include "affkit/error.hpp"
#include "affkit/fileio.hpp"
#include "affkit/model.hpp"
#include "test_util.hpp"

using namespace affkit;
using namespace affkit::model;
using affkit::testing::TempDir;

namespace {

Tensor<float> random_batch(std::size_t n, std::size_t s, std::uint64_t seed) {
  std::mt19937_64 rng(seed);
  std::normal_distribution<float> d;
  std::vector<float> v(n * 3 * s * s);
  for (auto& x : v) x = d(rng);
  return Tensor<float>({n, 3, s, s}, v);
}

ModelSpec small_spec(data::Task task, std::size_t slots, bool deviation = false) {
  ModelSpec s;
  s.task = task;
  s.slots = slots;
  s.backbone = BackboneConfig{8, {4, 6}, 12, 3};
  s.deviation = deviation;
  return s;
}

void expect_rows_sum_to_one(const Tensor<float>& p) {
  for (std::size_t r = 0; r < p.dim(0); ++r) {
    double s = 0;
    for (std::size_t c = 0; c < p.dim(1); ++c) s += p.at(r * p.dim(1) + c);
    EXPECT_NEAR(s, 1.0, 1e-6);
  }
}

}  // namespace

TEST(Backbone, ConfigValidation) {
  EXPECT_NO_THROW((BackboneConfig{16, {8, 16}, 64, 0}.validate()));
  EXPECT_THROW((BackboneConfig{10, {8, 16}, 64, 0}.validate()), ValidationError);
  EXPECT_THROW((BackboneConfig{16, {8, 16}, 0, 0}.validate()), ValidationError);
  EXPECT_THROW((BackboneConfig{4, {8, 16}, 8, 0}.validate()), ValidationError);
  EXPECT_EQ((BackboneConfig{16, {8, 16}, 64, 0}.flat_dim()), 16u * 4 * 4);
}

TEST(Backbone, ZeroWeightsGiveZeroFeatures) {
  BackboneConfig cfg{8, {4, 6}, 12, 1};
  auto p = init_backbone<float>(cfg);
  for (auto& [n, t] : p.entries()) std::fill(t.mutable_values().begin(), t.mutable_values().end(), 0.0f);
  Tape<float> tape;
  auto f = backbone_forward(tape, cfg, p, random_batch(3, 8, 1));
  EXPECT_EQ(f.shape(), (Shape{3, 12}));
  for (float v : f.values()) EXPECT_EQ(v, 0.0f);
}

TEST(Backbone, IdenticalImagesGiveIdenticalRows) {
  BackboneConfig cfg{16, {8, 16}, 64, 2};
  auto p = init_backbone<float>(cfg);
  auto one = random_batch(1, 16, 5);
  std::vector<float> v;
  for (int i = 0; i < 4; ++i) v.insert(v.end(), one.values().begin(), one.values().end());
  Tape<float> tape;
  auto f = backbone_forward(tape, cfg, p, Tensor<float>({4, 3, 16, 16}, v));
  for (std::size_t r = 1; r < 4; ++r)
    for (std::size_t c = 0; c < 64; ++c) EXPECT_EQ(f.at(r * 64 + c), f.at(c));
  EXPECT_THROW(backbone_forward(tape, cfg, p, random_batch(1, 8, 1)), ValidationError);
}

TEST(MultiSlot, OneSlotMatchesManualHeads) {
  auto spec = small_spec(data::Task::mtl, 1);
  auto m = init_model<float>(spec);
  auto x = random_batch(2, 8, 7);
  Tape<float> tape;
  auto feats = backbone_forward(tape, spec.backbone, m.params, x);
  auto out = multi_slot_forward(tape, spec, m.params, feats);
  auto h = numkit::relu(tape, numkit::linear(tape, feats, m.params.get("slot0.proj.w"), m.params.get("slot0.proj.b")));
  auto expr = numkit::softmax_rows(tape, numkit::linear(tape, h, m.params.get("slot0.expr.w"), m.params.get("slot0.expr.b")));
  auto va = numkit::tanh(tape, numkit::linear(tape, h, m.params.get("slot0.va.w"), m.params.get("slot0.va.b")));
  EXPECT_TRUE(std::equal(expr.values().begin(), expr.values().end(), out.expr.values().begin()));
  EXPECT_TRUE(std::equal(va.values().begin(), va.values().end(), out.va->values().begin()));
}

TEST(MultiSlot, IdenticalSlotsAverageToEither) {
  auto spec = small_spec(data::Task::mtl, 2);
  auto m = init_model<float>(spec);
  for (auto& [n, t] : m.params.entries())
    if (n.rfind("slot1.", 0) == 0) t = m.params.get("slot0." + n.substr(6)).clone();
  auto one = spec;
  one.slots = 1;
  Model<float> single{one, m.params.subset("backbone."), {}};
  for (const auto& [n, t] : m.params.subset("slot0.").entries()) single.params.add(n, t);
  auto x = random_batch(3, 8, 8);
  auto a = forward_task(m, x, data::Task::mtl);
  auto b = forward_task(single, x, data::Task::mtl);
  for (std::size_t i = 0; i < a.expr.size(); ++i) EXPECT_NEAR(a.expr.at(i), b.expr.at(i), 1e-7);
  for (std::size_t i = 0; i < a.au->size(); ++i) EXPECT_NEAR(a.au->at(i), b.au->at(i), 1e-7);
  for (std::size_t i = 0; i < a.va->size(); ++i) EXPECT_NEAR(a.va->at(i), b.va->at(i), 1e-7);
}

TEST(MultiSlot, ThreeConstantSlotsAverageProbabilities) {
  auto spec = small_spec(data::Task::lsd, 3);
  auto m = init_model<float>(spec);
  // Zero projections make h = 0, so each slot's softmax is its bias softmax.
  for (auto& [n, t] : m.params.entries())
    if (n.find(".proj.") != std::string::npos || n.find(".expr.w") != std::string::npos)
      std::fill(t.mutable_values().begin(), t.mutable_values().end(), 0.0f);
  const double logits[3][6] = {{0, 1, 2, 0, 0, 0}, {3, 0, 0, 0, 0, -1}, {0, 0, 0, 0, 0, 0}};
  for (std::size_t k = 0; k < 3; ++k) {
    auto b = m.params.get("slot" + std::to_string(k) + ".expr.b").mutable_values();
    for (std::size_t c = 0; c < 6; ++c) b[c] = float(logits[k][c]);
  }
  std::array<double, 6> expected{};
  for (auto& row : logits) {
    double z = 0;
    for (double l : row) z += std::exp(l);
    for (std::size_t c = 0; c < 6; ++c) expected[c] += std::exp(row[c]) / z / 3.0;
  }
  auto out = forward_task(m, random_batch(2, 8, 9), data::Task::lsd);
  for (std::size_t r = 0; r < 2; ++r)
    for (std::size_t c = 0; c < 6; ++c) EXPECT_NEAR(out.expr.at(r * 6 + c), expected[c], 1e-6);
}

TEST(ForwardTask, RangeContractsAndTaskCheck) {
  for (std::size_t slots : {1u, 4u}) {
    auto m = init_model<float>(small_spec(data::Task::mtl, slots));
    for (auto& [n, t] : m.params.entries())
      for (auto& v : t.mutable_values()) v *= 25.0f;
    auto out = forward_task(m, random_batch(5, 8, slots), data::Task::mtl);
    expect_rows_sum_to_one(out.expr);
    for (float v : out.va->values()) EXPECT_TRUE(v > -1.0f && v < 1.0f);
    for (float v : out.au->values()) EXPECT_TRUE(v > 0.0f && v < 1.0f);
    EXPECT_THROW(forward_task(m, random_batch(1, 8, 0), data::Task::lsd), ValidationError);
  }
  auto lsd = init_model<float>(small_spec(data::Task::lsd, 2));
  auto out = forward_task(lsd, random_batch(4, 8, 3), data::Task::lsd);
  EXPECT_EQ(out.expr.shape(), (Shape{4, 6}));
  EXPECT_FALSE(out.va.has_value());
  expect_rows_sum_to_one(out.expr);
  auto again = forward_task(lsd, random_batch(4, 8, 3), data::Task::lsd);
  EXPECT_TRUE(std::equal(out.expr.values().begin(), out.expr.values().end(), again.expr.values().begin()));
}

TEST(ForwardTask, SingleSlotArgmaxInvariantToLogitScale) {
  auto m = init_model<float>(small_spec(data::Task::lsd, 1));
  auto x = random_batch(6, 8, 4);
  auto before = forward_task(m, x, data::Task::lsd);
  for (auto* name : {"slot0.expr.w", "slot0.expr.b"})
    for (auto& v : m.params.get(name).mutable_values()) v *= 3.0f;
  auto after = forward_task(m, x, data::Task::lsd);
  EXPECT_EQ(numkit::argmax_rows(before.expr), numkit::argmax_rows(after.expr));
}

TEST(Predict, TieRulesAndThreshold) {
  std::vector<float> p{0.2f, 0.5f, 0.3f, 0.5f, 0.5f, 0.0f};
  EXPECT_EQ(predict_classes<float>(p, 2, 3), (std::vector<int>{1, 0}));
  std::vector<double> au(12, 0.49);
  au[3] = 0.5;
  au[7] = 0.51;
  auto d = predict_aus<double>(au, 1);
  EXPECT_EQ(d[0][3], 1);
  EXPECT_EQ(d[0][7], 1);
  EXPECT_EQ(d[0][0], 0);
}

TEST(Deviation, ZeroAtInitialization) {
  auto pre = init_model<float>(small_spec(data::Task::lsd, 1));
  auto dev = deviation_model(pre, 11);
  EXPECT_TRUE(dev.params.subset("backbone.").values_equal(dev.frozen));
  for (std::uint64_t s = 0; s < 100; ++s) {
    Tape<float> tape;
    auto f = deviation_forward(tape, dev.spec.backbone, dev.params, dev.frozen, random_batch(2, 8, s));
    float mx = 0;
    for (float v : f.values()) mx = std::max(mx, std::abs(v));
    EXPECT_EQ(mx, 0.0f);
  }
}

TEST(Deviation, PerturbationMovesOutputButNotTheTwin) {
  auto pre = init_model<float>(small_spec(data::Task::lsd, 1));
  auto dev = deviation_model(pre, 11);
  auto frozen_before = dev.frozen.clone();
  dev.params.get("backbone.fc.b").mutable_values()[0] += 0.25f;
  auto x = random_batch(3, 8, 1);
  Tape<float> tape;
  auto p = dev.params.watched(tape);
  auto f = dev.frozen.watched(tape);
  auto feats = deviation_forward(tape, dev.spec.backbone, p, f, x);
  float mx = 0;
  for (float v : feats.values()) mx = std::max(mx, std::abs(v));
  EXPECT_GT(mx, 0.0f);
  tape.backward(numkit::sum(tape, feats));
  for (const auto& [n, t] : dev.frozen.entries())
    for (float g : t.grad()) EXPECT_EQ(g, 0.0f) << n;
  EXPECT_TRUE(dev.frozen.values_equal(frozen_before));
  EXPECT_TRUE(dev.params.get("backbone.fc.b").has_grad());
}

TEST(Deviation, TwinMismatchRejected) {
  auto pre = init_model<float>(small_spec(data::Task::lsd, 1));
  auto dev = deviation_model(pre, 1);
  dev.frozen.get("backbone.fc.b") = Tensor<float>::zeros({3});
  Tape<float> tape;
  EXPECT_THROW(deviation_forward(tape, dev.spec.backbone, dev.params, dev.frozen, random_batch(1, 8, 0)),
               ValidationError);
}

TEST(Checkpoint, RoundTripIsBitExact) {
  TempDir dir;
  auto pre = init_model<float>(small_spec(data::Task::mtl, 2));
  auto dev = deviation_model(pre, 5);
  dev.params.get("backbone.conv0.w").mutable_values()[0] = -0.0f;
  dev.params.get("slot1.au.b").mutable_values()[2] = std::numeric_limits<float>::denorm_min();
  checkpoint::Checkpoint ck;
  checkpoint::store_model(ck, dev);
  checkpoint::store_norm_stats(ck, data::NormStats{{0.1, 0.2, 0.3}, {0.25, 1.0 / 3.0, 0.0}});
  checkpoint::save(dir / "m.afkt", ck);
  auto loaded = checkpoint::load(dir / "m.afkt");
  EXPECT_EQ(checkpoint::encode(loaded), checkpoint::encode(ck));
  auto m = checkpoint::restore_model(loaded);
  EXPECT_EQ(m.spec, dev.spec);
  for (std::size_t i = 0; i < m.params.size(); ++i) {
    auto a = m.params.entries()[i].second.values(), b = dev.params.entries()[i].second.values();
    for (std::size_t k = 0; k < a.size(); ++k)
      EXPECT_EQ(std::bit_cast<std::uint32_t>(a[k]), std::bit_cast<std::uint32_t>(b[k]));
  }
  EXPECT_TRUE(m.frozen.values_equal(dev.frozen));
  auto stats = checkpoint::restore_norm_stats(loaded);
  ASSERT_TRUE(stats.has_value());
  EXPECT_EQ(stats->std[1], 1.0 / 3.0);
}

TEST(Checkpoint, CorruptFilesRejected) {
  auto m = init_model<float>(small_spec(data::Task::lsd, 1));
  checkpoint::Checkpoint ck;
  checkpoint::store_model(ck, m);
  auto bytes = checkpoint::encode(ck);

  auto bad_magic = bytes;
  bad_magic[0] = 'X';
  EXPECT_THROW(checkpoint::decode(bad_magic), ValidationError);

  auto bad_version = bytes;
  bad_version[4] = 2;
  try {
    checkpoint::decode(bad_version);
    FAIL();
  } catch (const ValidationError& e) {
    EXPECT_NE(std::string(e.what()).find("version 2"), std::string::npos);
  }

  std::vector<std::uint8_t> cut(bytes.begin(), bytes.begin() + 200);
  try {
    checkpoint::decode(cut, "m.afkt");
    FAIL();
  } catch (const ValidationError& e) {
    EXPECT_NE(std::string(e.what()).find("truncated at offset"), std::string::npos) << e.what();
  }

  auto extra = bytes;
  extra.push_back(0);
  EXPECT_THROW(checkpoint::decode(extra), ValidationError);

  auto other = init_model<float>(small_spec(data::Task::lsd, 1));
  other.spec.backbone.feature_dim = 10;
  checkpoint::Checkpoint wrong;
  checkpoint::store_model(wrong, init_model<float>(small_spec(data::Task::lsd, 1)));
  wrong.set_meta("feature_dim", "10");
  EXPECT_THROW(checkpoint::restore_model(wrong), ValidationError);
}
