#include "affkit/augment.hpp"

#include <algorithm>
#include <cmath>
#include <numbers>
#include <random>

#include "affkit/error.hpp"
#include "affkit/fileio.hpp"

namespace affkit::augment {

namespace fs = std::filesystem;

std::string_view transform_name(TransformKind kind) { return kTransformNames[std::size_t(kind)]; }

double magnitude_map(TransformKind kind, int magnitude, int direction, std::size_t extent) {
  if (magnitude < 0 || magnitude > kMaxMagnitude)
    throw ValidationError("magnitude " + std::to_string(magnitude) + " outside 0..30");
  if (direction != 1 && direction != -1) throw ValidationError("direction must be +1 or -1");
  const double M = magnitude, d = direction;
  switch (kind) {
    case TransformKind::identity:
    case TransformKind::auto_contrast:
      return 0.0;
    case TransformKind::rotate:
      return d * M;
    case TransformKind::shear_x:
    case TransformKind::shear_y:
      return d * 0.01 * M;
    case TransformKind::translate_x:
    case TransformKind::translate_y:
      return d * (M / 30.0 * 0.33) * double(extent);
    case TransformKind::posterize:
      return 8.0 - std::round(M * 4.0 / 30.0);
    case TransformKind::color:
    case TransformKind::contrast:
    case TransformKind::brightness:
    case TransformKind::sharpness:
      return 1.0 + d * 0.03 * M;
  }
  throw ValidationError("unknown transform kind");
}

namespace {

std::uint8_t to_byte(double v) { return std::uint8_t(std::clamp(std::lround(v), 0L, 255L)); }

// out = degenerate + factor * (image - degenerate)
Image blend(const Image& image, const Image& degenerate, double factor) {
  Image out(image.width, image.height);
  for (std::size_t i = 0; i < image.rgb.size(); ++i)
    out.rgb[i] = to_byte(degenerate.rgb[i] + factor * (double(image.rgb[i]) - degenerate.rgb[i]));
  return out;
}

double luma(const Image& img, std::size_t p) {
  return (299.0 * img.rgb[p * 3] + 587.0 * img.rgb[p * 3 + 1] + 114.0 * img.rgb[p * 3 + 2]) / 1000.0;
}

Image grayscale(const Image& image) {
  Image g(image.width, image.height);
  for (std::size_t p = 0; p < image.width * image.height; ++p) {
    const auto l = to_byte(luma(image, p));
    g.rgb[p * 3] = g.rgb[p * 3 + 1] = g.rgb[p * 3 + 2] = l;
  }
  return g;
}

Image auto_contrast(const Image& image) {
  Image out = image;
  const std::size_t n = image.width * image.height;
  for (std::size_t c = 0; c < 3; ++c) {
    std::uint8_t lo = 255, hi = 0;
    for (std::size_t p = 0; p < n; ++p) {
      lo = std::min(lo, image.rgb[p * 3 + c]);
      hi = std::max(hi, image.rgb[p * 3 + c]);
    }
    if (hi <= lo) continue;
    const double scale = 255.0 / double(hi - lo);
    for (std::size_t p = 0; p < n; ++p) out.rgb[p * 3 + c] = to_byte((image.rgb[p * 3 + c] - lo) * scale);
  }
  return out;
}

Image smooth(const Image& image) {
  Image out = image;
  if (image.width < 3 || image.height < 3) return out;
  for (std::size_t y = 1; y + 1 < image.height; ++y)
    for (std::size_t x = 1; x + 1 < image.width; ++x)
      for (std::size_t c = 0; c < 3; ++c) {
        double s = 0;
        for (int dy = -1; dy <= 1; ++dy)
          for (int dx = -1; dx <= 1; ++dx)
            s += (dx == 0 && dy == 0 ? 5.0 : 1.0) * image.at(x + std::size_t(dx), y + std::size_t(dy), c);
        out.at(x, y, c) = to_byte(s / 13.0);
      }
  return out;
}

double sample(const Image& img, double px, double py, std::size_t c) {
  const double fx = std::floor(px), fy = std::floor(py);
  const double tx = px - fx, ty = py - fy;
  const long x0 = long(fx), y0 = long(fy);
  auto pixel = [&](long x, long y) -> double {
    if (x < 0 || y < 0 || x >= long(img.width) || y >= long(img.height)) return 0.0;
    return img.at(std::size_t(x), std::size_t(y), c);
  };
  const double top = (1 - tx) * pixel(x0, y0) + (tx == 0 ? 0.0 : tx * pixel(x0 + 1, y0));
  if (ty == 0) return top;
  const double bottom = (1 - tx) * pixel(x0, y0 + 1) + (tx == 0 ? 0.0 : tx * pixel(x0 + 1, y0 + 1));
  return (1 - ty) * top + ty * bottom;
}

// `inverse` maps an output offset from the centre to the source offset.
template <class Inverse>
Image warp(const Image& image, Inverse inverse) {
  Image out(image.width, image.height);
  const double cx = image.width / 2.0, cy = image.height / 2.0;
  for (std::size_t y = 0; y < image.height; ++y)
    for (std::size_t x = 0; x < image.width; ++x) {
      const double ox = x + 0.5 - cx, oy = y + 0.5 - cy;
      auto [sx, sy] = inverse(ox, oy);
      for (std::size_t c = 0; c < 3; ++c) out.at(x, y, c) = to_byte(sample(image, sx + cx - 0.5, sy + cy - 0.5, c));
    }
  return out;
}

}  // namespace

Image apply_transform(const Image& image, TransformKind kind, double p) {
  switch (kind) {
    case TransformKind::identity:
      return image;
    case TransformKind::auto_contrast:
      return auto_contrast(image);
    case TransformKind::posterize: {
      const int bits = std::clamp(int(std::lround(p)), 0, 8);
      const auto mask = std::uint8_t(0xFF << (8 - bits));
      Image out = image;
      for (auto& v : out.rgb) v &= mask;
      return out;
    }
    case TransformKind::color:
      return blend(image, grayscale(image), p);
    case TransformKind::contrast: {
      double mean = 0;
      const std::size_t n = image.width * image.height;
      for (std::size_t i = 0; i < n; ++i) mean += luma(image, i);
      Image degenerate(image.width, image.height, to_byte(n ? mean / double(n) : 0.0));
      return blend(image, degenerate, p);
    }
    case TransformKind::brightness:
      return blend(image, Image(image.width, image.height, 0), p);
    case TransformKind::sharpness:
      return blend(image, smooth(image), p);
    default:
      break;
  }
  if (p == 0.0) return image;
  switch (kind) {
    case TransformKind::rotate: {
      const double t = p * std::numbers::pi / 180.0, c = std::cos(t), s = std::sin(t);
      return warp(image, [=](double ox, double oy) { return std::pair{c * ox + s * oy, -s * ox + c * oy}; });
    }
    case TransformKind::shear_x:
      return warp(image, [=](double ox, double oy) { return std::pair{ox + p * oy, oy}; });
    case TransformKind::shear_y:
      return warp(image, [=](double ox, double oy) { return std::pair{ox, oy + p * ox}; });
    case TransformKind::translate_x:
      return warp(image, [=](double ox, double oy) { return std::pair{ox - p, oy}; });
    case TransformKind::translate_y:
      return warp(image, [=](double ox, double oy) { return std::pair{ox, oy - p}; });
    default:
      throw ValidationError("unknown transform kind");
  }
}

void AugmentPolicy::validate() const {
  if (num_ops < 0) throw ValidationError("num_ops must be non-negative");
  if (magnitude < 0 || magnitude > kMaxMagnitude)
    throw ValidationError("magnitude " + std::to_string(magnitude) + " outside 0..30");
}

std::vector<DrawnOp> draw_ops(const AugmentPolicy& policy, std::uint64_t sample_seed) {
  policy.validate();
  std::mt19937_64 rng(mix_seed(policy.seed, sample_seed));
  std::uniform_int_distribution<int> pick(0, int(kNumTransforms) - 1);
  std::bernoulli_distribution flip(0.5);
  std::vector<DrawnOp> ops(std::size_t(policy.num_ops));
  for (auto& op : ops) {
    op.kind = TransformKind(pick(rng));
    op.direction = flip(rng) ? 1 : -1;
  }
  return ops;
}

Image rand_augment(const Image& image, const AugmentPolicy& policy, std::uint64_t sample_seed) {
  Image out = image;
  for (const auto& op : draw_ops(policy, sample_seed)) {
    const std::size_t extent = op.kind == TransformKind::translate_y ? image.height : image.width;
    out = apply_transform(out, op.kind, magnitude_map(op.kind, policy.magnitude, op.direction, extent));
  }
  return out;
}

BalancePlan balance_plan(std::span<const data::SampleRecord> records, data::Task task, std::uint64_t seed) {
  const std::size_t C = data::num_classes(task);
  std::vector<std::vector<std::size_t>> members(C);
  for (std::size_t i = 0; i < records.size(); ++i) {
    const int e = records[i].expression;
    if (e == data::kUnlabeled) continue;
    if (e < 0 || std::size_t(e) >= C) throw ValidationError("expression " + std::to_string(e) + " out of range");
    members[std::size_t(e)].push_back(i);
  }
  std::size_t max_count = 0;
  for (std::size_t c = 0; c < C; ++c) {
    if (members[c].empty())
      throw ValidationError("class " + std::to_string(c) + " (" + data::class_names(task)[c] +
                            ") has no samples to augment from");
    max_count = std::max(max_count, members[c].size());
  }
  BalancePlan plan;
  plan.extra.resize(C);
  for (std::size_t c = 0; c < C; ++c) {
    auto order = members[c];
    std::mt19937_64 rng(mix_seed(seed, c));
    std::shuffle(order.begin(), order.end(), rng);
    const std::size_t extra = max_count - order.size();
    plan.extra[c] = extra;
    for (std::size_t k = 0; k < extra; ++k)
      plan.copies.push_back(PlannedCopy{order[k % order.size()], k / order.size(), int(c)});
  }
  return plan;
}

std::string augmented_path(const std::string& source_path, std::size_t copy_index) {
  fs::path p(source_path);
  fs::path name = p.stem();
  name += "_aug" + std::to_string(copy_index);
  name += p.extension();
  return (p.parent_path() / name).generic_string();
}

std::string policy_text(const AugmentPolicy& policy) {
  std::string ops;
  for (auto n : kTransformNames) ops += (ops.empty() ? "" : ",") + std::string(n);
  return "seed=" + std::to_string(policy.seed) + "\nnum_ops=" + std::to_string(policy.num_ops) +
         "\nmagnitude=" + std::to_string(policy.magnitude) + "\ntable_version=" + std::to_string(kMagnitudeTableVersion) +
         "\ntransforms=" + ops + "\n";
}

std::vector<data::SampleRecord> materialize(std::span<const data::SampleRecord> records, data::Task task,
                                            const BalancePlan& plan, const AugmentPolicy& policy,
                                            const fs::path& src_dir, const fs::path& out_dir) {
  policy.validate();
  for (const auto& c : plan.copies)
    if (c.source >= records.size()) throw ValidationError("plan refers to record " + std::to_string(c.source));

  std::vector<data::SampleRecord> out(records.begin(), records.end());
  const bool same_dir = fs::exists(out_dir) && fs::equivalent(src_dir, out_dir);
  if (!same_dir)
    for (const auto& r : records) write_file_atomic(out_dir / r.image_path, read_file_bytes(src_dir / r.image_path));

  std::vector<data::SampleRecord> copies(plan.copies.size());
  std::vector<std::string> errors(plan.copies.size());
#pragma omp parallel for schedule(dynamic)
  for (std::ptrdiff_t i = 0; i < std::ptrdiff_t(plan.copies.size()); ++i) {
    const auto& pc = plan.copies[std::size_t(i)];
    auto& rec = copies[std::size_t(i)];
    rec = records[pc.source];
    rec.image_path = augmented_path(records[pc.source].image_path, pc.copy_index);
    try {
      const Image src = read_png(src_dir / records[pc.source].image_path);
      write_png(out_dir / rec.image_path, rand_augment(src, policy, mix_seed(pc.source, pc.copy_index)));
    } catch (const std::exception& e) {
      errors[std::size_t(i)] = e.what();
    }
  }
  for (const auto& e : errors)
    if (!e.empty()) throw IoError(e);
  out.insert(out.end(), copies.begin(), copies.end());
  data::write_manifest(out_dir / "manifest.csv", out, task);
  write_file_atomic(out_dir / "augment_policy.txt", policy_text(policy));
  return out;
}

std::vector<float> preprocess(const Image& image, const data::NormStats& stats, std::size_t size) {
  if (size == 0 || image.width == 0 || image.height == 0) throw ValidationError("preprocess of an empty image");
  std::vector<float> out(3 * size * size);
  const double sx = double(image.width) / double(size), sy = double(image.height) / double(size);
  const double max_x = double(image.width - 1), max_y = double(image.height - 1);
  for (std::size_t y = 0; y < size; ++y) {
    const double py = std::clamp((y + 0.5) * sy - 0.5, 0.0, max_y);
    for (std::size_t x = 0; x < size; ++x) {
      const double px = std::clamp((x + 0.5) * sx - 0.5, 0.0, max_x);
      for (std::size_t c = 0; c < 3; ++c) {
        const double v = sample(image, px, py, c) / 255.0 - stats.mean[c];
        const double s = stats.std[c];
        out[(c * size + y) * size + x] = float(s > 0 ? v / s : v);
      }
    }
  }
  return out;
}

}  // namespace affkit::augment
