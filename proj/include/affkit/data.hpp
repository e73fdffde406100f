#pragma once

// Dataset manifests, label statistics and the procedural dataset generator.

#include <array>
#include <cstddef>
#include <cstdint>
#include <filesystem>
#include <span>
#include <string>
#include <string_view>
#include <vector>

#include "affkit/image.hpp"

namespace affkit::data {

enum class Task { mtl, lsd };

Task parse_task(std::string_view name);
std::string_view task_name(Task task);

inline constexpr double kVaUnlabeled = -5.0;
inline constexpr int kUnlabeled = -1;
inline constexpr std::size_t kNumAus = 12;
inline constexpr std::size_t kMtlClasses = 8;
inline constexpr std::size_t kLsdClasses = 6;

inline constexpr std::array<std::string_view, kMtlClasses> kMtlClassNames = {
    "Neutral", "Anger", "Disgust", "Fear", "Happiness", "Sadness", "Surprise", "Other"};
inline constexpr std::array<std::string_view, kLsdClasses> kLsdClassNames = {"Anger",     "Disgust", "Fear",
                                                                             "Happiness", "Sadness", "Surprise"};
inline constexpr std::array<std::string_view, kNumAus> kAuNames = {"au1",  "au2",  "au4",  "au6",  "au7",  "au10",
                                                                   "au12", "au15", "au23", "au24", "au25", "au26"};

std::size_t num_classes(Task task);
std::vector<std::string> class_names(Task task);

struct SampleRecord {
  std::string image_path;
  double valence = kVaUnlabeled;
  double arousal = kVaUnlabeled;
  int expression = kUnlabeled;
  std::array<int, kNumAus> aus = filled_aus();

  bool operator==(const SampleRecord&) const = default;

  static constexpr std::array<int, kNumAus> filled_aus(int value = kUnlabeled) {
    std::array<int, kNumAus> a{};
    a.fill(value);
    return a;
  }
};

// Valence and arousal are scored as a pair; a record counts as VA-labeled
// only when both are present.
bool va_labeled(const SampleRecord& r);

/// Throws ValidationError describing the first violated field.
void validate_record(const SampleRecord& r, Task task);

std::string manifest_header(Task task);
std::vector<SampleRecord> parse_manifest(const std::filesystem::path& path, Task task);
std::vector<SampleRecord> parse_manifest_text(std::string_view text, Task task, const std::string& source = "manifest");
std::string format_manifest(std::span<const SampleRecord> records, Task task);
void write_manifest(const std::filesystem::path& path, std::span<const SampleRecord> records, Task task);

struct ClassDistribution {
  std::vector<std::size_t> counts;
  std::size_t max_class = 0;
  std::size_t max_count = 0;

  static ClassDistribution from_counts(std::vector<std::size_t> counts);
  std::size_t total() const;
  /// max_count / smallest nonzero count.
  double imbalance_ratio() const;
};

inline constexpr double kImbalanceFlagRatio = 10.0;

ClassDistribution class_distribution(std::span<const SampleRecord> records, Task task);

/// w_i = (1/n_i) * C / sum_j (1/n_j); the weights average to 1.
std::vector<double> expr_class_weights(const ClassDistribution& dist);

/// (#labeled negatives) / (#labeled positives) per AU, ignoring unlabeled entries.
std::array<double, kNumAus> au_pos_weights(std::span<const SampleRecord> records);

struct NormStats {
  std::array<double, 3> mean{};
  std::array<double, 3> std{};
  bool operator==(const NormStats&) const = default;
};

/// Per-channel mean and population std of pixel values scaled to [0,1].
NormStats normalization_stats(std::span<const std::filesystem::path> image_paths);
NormStats normalization_stats(std::span<const Image> images);

/// "norm_mean0=..." through "norm_std2=..." lines, shortest round-trip form.
std::string format_norm_stats(const NormStats& stats);
/// Reads the six norm_* keys from key=value text; other lines are ignored.
NormStats parse_norm_stats(std::string_view text, const std::string& source = "stats");

struct SynthConfig {
  Task task = Task::lsd;
  std::size_t per_class = 40;
  std::size_t size = 16;
  std::uint64_t seed = 0;
  // MTL only: probability that each task's label is replaced by the sentinel.
  double label_dropout = 0.0;
  // When non-empty, overrides per_class with one count per class.
  std::vector<std::size_t> counts;
};

/// Renders one class-signature image. Exposed for tests.
Image render_sample(std::size_t pattern, std::size_t size, std::uint64_t seed);

/// Writes images/ and manifest.csv under out_dir and returns the records.
std::vector<SampleRecord> generate_synthetic(const std::filesystem::path& out_dir, const SynthConfig& config);

}  // namespace affkit::data
