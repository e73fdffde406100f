#pragma once

// RandAugment-style oversampling and input preprocessing.

#include <array>
#include <cstddef>
#include <cstdint>
#include <filesystem>
#include <span>
#include <string>
#include <string_view>
#include <vector>

#include "affkit/data.hpp"
#include "affkit/image.hpp"

namespace affkit::augment {

enum class TransformKind {
  identity,
  auto_contrast,
  rotate,
  posterize,
  color,
  contrast,
  brightness,
  sharpness,
  shear_x,
  shear_y,
  translate_x,
  translate_y,
};

inline constexpr std::size_t kNumTransforms = 12;
inline constexpr std::array<std::string_view, kNumTransforms> kTransformNames = {
    "Identity", "AutoContrast", "Rotate", "Posterize", "Color", "Contrast",
    "Brightness", "Sharpness", "ShearX", "ShearY", "TranslateX", "TranslateY"};

inline constexpr int kMaxMagnitude = 30;
inline constexpr int kMagnitudeTableVersion = 1;

std::string_view transform_name(TransformKind kind);

/// Concrete parameter for `kind` at magnitude M in direction +1/-1:
///   Rotate      M degrees
///   ShearX/Y    0.01 M shear factor
///   TranslateX/Y (M/30 * 0.33) * extent pixels
///   Posterize   8 - round(4M/30) bits kept
///   Color, Contrast, Brightness, Sharpness  enhancement factor 1 + 0.03 M
/// Identity and AutoContrast ignore the parameter (0 is returned).
/// `extent` is the image dimension along the translation axis.
double magnitude_map(TransformKind kind, int magnitude, int direction, std::size_t extent = 0);

/// Applies one transform. Geometric transforms resample bilinearly about the
/// image centre with black fill; outputs are clamped to [0,255].
Image apply_transform(const Image& image, TransformKind kind, double parameter);

struct AugmentPolicy {
  int num_ops = 2;
  int magnitude = 9;
  std::uint64_t seed = 0;

  void validate() const;
  bool operator==(const AugmentPolicy&) const = default;
};

struct DrawnOp {
  TransformKind kind = TransformKind::identity;
  int direction = 1;
};

/// The op sequence rand_augment will apply for this (policy, sample_seed).
std::vector<DrawnOp> draw_ops(const AugmentPolicy& policy, std::uint64_t sample_seed);
Image rand_augment(const Image& image, const AugmentPolicy& policy, std::uint64_t sample_seed);

struct PlannedCopy {
  std::size_t source = 0;      // index into the record list
  std::size_t copy_index = 0;  // 0-based per source
  int expression = 0;
};

struct BalancePlan {
  std::vector<std::size_t> extra;  // per class
  std::vector<PlannedCopy> copies;
};

/// Oversamples every class up to the majority count. Sources for each class
/// are taken round-robin from a seeded shuffle of that class's records.
/// Records with an unlabeled expression are never used as sources.
BalancePlan balance_plan(std::span<const data::SampleRecord> records, data::Task task, std::uint64_t seed);

/// "<stem>_aug<N><ext>" next to the source path.
std::string augmented_path(const std::string& source_path, std::size_t copy_index);

/// Copies originals from src_dir to out_dir (paths unchanged), renders the
/// planned copies, and writes manifest.csv plus augment_policy.txt. Returns
/// the output records: originals in input order, then copies in plan order.
std::vector<data::SampleRecord> materialize(std::span<const data::SampleRecord> records, data::Task task,
                                            const BalancePlan& plan, const AugmentPolicy& policy,
                                            const std::filesystem::path& src_dir,
                                            const std::filesystem::path& out_dir);

std::string policy_text(const AugmentPolicy& policy);

/// Half-pixel bilinear resize to size x size, scale to [0,1], then per-channel
/// (v - mean) / std. A zero std only subtracts the mean. Layout [3, S, S].
std::vector<float> preprocess(const Image& image, const data::NormStats& stats, std::size_t size);

}  // namespace affkit::augment
