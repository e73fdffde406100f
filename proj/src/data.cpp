#include "affkit/data.hpp"

#include <algorithm>
#include <charconv>
#include <cmath>
#include <random>
#include <sstream>

#include "affkit/error.hpp"
#include "affkit/fileio.hpp"

namespace affkit::data {

namespace fs = std::filesystem;

Task parse_task(std::string_view name) {
  if (name == "mtl") return Task::mtl;
  if (name == "lsd") return Task::lsd;
  throw ValidationError("unknown task '" + std::string(name) + "' (expected mtl or lsd)");
}

std::string_view task_name(Task task) { return task == Task::mtl ? "mtl" : "lsd"; }

std::size_t num_classes(Task task) { return task == Task::mtl ? kMtlClasses : kLsdClasses; }

std::vector<std::string> class_names(Task task) {
  if (task == Task::mtl) return {kMtlClassNames.begin(), kMtlClassNames.end()};
  return {kLsdClassNames.begin(), kLsdClassNames.end()};
}

bool va_labeled(const SampleRecord& r) { return r.valence != kVaUnlabeled && r.arousal != kVaUnlabeled; }

namespace {

void check_va(double v, const char* name) {
  if (v == kVaUnlabeled) return;
  if (!(v >= -1.0 && v <= 1.0))
    throw ValidationError(std::string(name) + " " + format_roundtrip(v) + " outside [-1,1] and not the -5 sentinel");
}

}  // namespace

void validate_record(const SampleRecord& r, Task task) {
  if (r.image_path.empty()) throw ValidationError("empty image path");
  if (task == Task::lsd) {
    if (r.expression < 0 || r.expression >= int(kLsdClasses))
      throw ValidationError("unknown expression index " + std::to_string(r.expression) + " for lsd (expected 0..5)");
    return;
  }
  check_va(r.valence, "valence");
  check_va(r.arousal, "arousal");
  if (r.expression < kUnlabeled || r.expression >= int(kMtlClasses))
    throw ValidationError("unknown expression index " + std::to_string(r.expression) + " for mtl (expected -1..7)");
  for (std::size_t i = 0; i < kNumAus; ++i)
    if (r.aus[i] != 0 && r.aus[i] != 1 && r.aus[i] != kUnlabeled)
      throw ValidationError(std::string(kAuNames[i]) + " value " + std::to_string(r.aus[i]) + " not in {0,1,-1}");
}

std::string manifest_header(Task task) {
  if (task == Task::lsd) return "path,expression";
  std::string h = "path,valence,arousal,expression";
  for (auto name : kAuNames) {
    h += ',';
    h += name;
  }
  return h;
}

namespace {

std::string_view trim(std::string_view s) {
  while (!s.empty() && (s.front() == ' ' || s.front() == '\t')) s.remove_prefix(1);
  while (!s.empty() && (s.back() == ' ' || s.back() == '\t' || s.back() == '\r')) s.remove_suffix(1);
  return s;
}

std::vector<std::string_view> split(std::string_view line) {
  std::vector<std::string_view> out;
  std::size_t start = 0;
  while (true) {
    auto pos = line.find(',', start);
    out.push_back(trim(line.substr(start, pos == std::string_view::npos ? std::string_view::npos : pos - start)));
    if (pos == std::string_view::npos) break;
    start = pos + 1;
  }
  return out;
}

double parse_double(std::string_view s, const char* field) {
  double v = 0;
  auto [ptr, ec] = std::from_chars(s.data(), s.data() + s.size(), v);
  if (ec != std::errc() || ptr != s.data() + s.size())
    throw ValidationError(std::string(field) + " is not a number: '" + std::string(s) + "'");
  return v;
}

int parse_int(std::string_view s, const char* field) {
  int v = 0;
  auto [ptr, ec] = std::from_chars(s.data(), s.data() + s.size(), v);
  if (ec != std::errc() || ptr != s.data() + s.size())
    throw ValidationError(std::string(field) + " is not an integer: '" + std::string(s) + "'");
  return v;
}

}  // namespace

std::vector<SampleRecord> parse_manifest_text(std::string_view text, Task task, const std::string& source) {
  std::vector<SampleRecord> records;
  const std::size_t expected = task == Task::mtl ? 4 + kNumAus : 2;
  std::size_t line_no = 0;
  bool saw_header = false;
  std::size_t pos = 0;
  while (pos <= text.size()) {
    auto end = text.find('\n', pos);
    std::string_view line = trim(text.substr(pos, end == std::string_view::npos ? std::string_view::npos : end - pos));
    pos = end == std::string_view::npos ? text.size() + 1 : end + 1;
    ++line_no;
    if (!saw_header) {
      if (line_no == 1 && line.size() >= 3 && line.substr(0, 3) == "\xEF\xBB\xBF") line.remove_prefix(3);
      if (line != manifest_header(task))
        throw ValidationError(source + ":" + std::to_string(line_no) + ": header does not match the " +
                              std::string(task_name(task)) + " schema '" + manifest_header(task) + "'");
      saw_header = true;
      continue;
    }
    if (line.empty()) continue;
    try {
      auto fields = split(line);
      if (fields.size() != expected)
        throw ValidationError("expected " + std::to_string(expected) + " fields, found " + std::to_string(fields.size()));
      SampleRecord r;
      r.image_path = std::string(fields[0]);
      if (task == Task::lsd) {
        r.expression = parse_int(fields[1], "expression");
      } else {
        r.valence = parse_double(fields[1], "valence");
        r.arousal = parse_double(fields[2], "arousal");
        r.expression = parse_int(fields[3], "expression");
        for (std::size_t i = 0; i < kNumAus; ++i) r.aus[i] = parse_int(fields[4 + i], kAuNames[i].data());
      }
      validate_record(r, task);
      records.push_back(std::move(r));
    } catch (const ValidationError& e) {
      throw ValidationError(source + ":" + std::to_string(line_no) + ": " + e.what());
    }
  }
  if (!saw_header) throw ValidationError(source + ": missing header");
  return records;
}

std::vector<SampleRecord> parse_manifest(const fs::path& path, Task task) {
  return parse_manifest_text(read_file_text(path), task, path.string());
}

std::string format_manifest(std::span<const SampleRecord> records, Task task) {
  std::string out = manifest_header(task) + "\n";
  for (const auto& r : records) {
    validate_record(r, task);
    if (r.image_path.find(',') != std::string::npos)
      throw ValidationError("image path contains a comma: " + r.image_path);
    out += r.image_path;
    if (task == Task::lsd) {
      out += ',' + std::to_string(r.expression);
    } else {
      out += ',' + format_roundtrip(r.valence) + ',' + format_roundtrip(r.arousal) + ',' + std::to_string(r.expression);
      for (int a : r.aus) out += ',' + std::to_string(a);
    }
    out += '\n';
  }
  return out;
}

void write_manifest(const fs::path& path, std::span<const SampleRecord> records, Task task) {
  write_file_atomic(path, format_manifest(records, task));
}

ClassDistribution ClassDistribution::from_counts(std::vector<std::size_t> counts) {
  ClassDistribution d;
  d.counts = std::move(counts);
  for (std::size_t i = 0; i < d.counts.size(); ++i) {
    if (d.counts[i] > d.max_count) {
      d.max_count = d.counts[i];
      d.max_class = i;
    }
  }
  return d;
}

std::size_t ClassDistribution::total() const {
  std::size_t t = 0;
  for (auto c : counts) t += c;
  return t;
}

double ClassDistribution::imbalance_ratio() const {
  std::size_t smallest = 0;
  for (auto c : counts)
    if (c > 0 && (smallest == 0 || c < smallest)) smallest = c;
  return smallest == 0 ? 0.0 : double(max_count) / double(smallest);
}

ClassDistribution class_distribution(std::span<const SampleRecord> records, Task task) {
  if (records.empty()) throw ValidationError("class distribution of an empty record set");
  std::vector<std::size_t> counts(num_classes(task), 0);
  for (const auto& r : records) {
    if (r.expression == kUnlabeled) continue;
    if (r.expression < 0 || std::size_t(r.expression) >= counts.size())
      throw ValidationError("expression index " + std::to_string(r.expression) + " out of range");
    ++counts[std::size_t(r.expression)];
  }
  return ClassDistribution::from_counts(std::move(counts));
}

std::vector<double> expr_class_weights(const ClassDistribution& dist) {
  if (dist.counts.empty()) throw ValidationError("no classes to weight");
  double inv_sum = 0;
  for (std::size_t i = 0; i < dist.counts.size(); ++i) {
    if (dist.counts[i] == 0) throw ValidationError("class " + std::to_string(i) + " has no samples; cannot weight it");
    inv_sum += 1.0 / double(dist.counts[i]);
  }
  const double C = double(dist.counts.size());
  std::vector<double> w(dist.counts.size());
  for (std::size_t i = 0; i < w.size(); ++i) w[i] = (1.0 / double(dist.counts[i])) * C / inv_sum;
  return w;
}

std::array<double, kNumAus> au_pos_weights(std::span<const SampleRecord> records) {
  std::array<std::size_t, kNumAus> pos{}, neg{};
  for (const auto& r : records) {
    for (std::size_t i = 0; i < kNumAus; ++i) {
      if (r.aus[i] == 1) ++pos[i];
      if (r.aus[i] == 0) ++neg[i];
    }
  }
  std::array<double, kNumAus> w{};
  for (std::size_t i = 0; i < kNumAus; ++i) {
    if (pos[i] == 0)
      throw ValidationError("AU index " + std::to_string(i) + " (" + std::string(kAuNames[i]) +
                            ") has no labeled positives");
    w[i] = double(neg[i]) / double(pos[i]);
  }
  return w;
}

namespace {

struct Moments {
  double n = 0;
  std::array<double, 3> mean{};
  std::array<double, 3> m2{};
};

Moments image_moments(const Image& img) {
  Moments m;
  const std::size_t pixels = img.width * img.height;
  m.n = double(pixels);
  if (pixels == 0) return m;
  for (std::size_t c = 0; c < 3; ++c) {
    double s = 0;
    for (std::size_t p = 0; p < pixels; ++p) s += img.rgb[p * 3 + c] / 255.0;
    m.mean[c] = s / m.n;
    double q = 0;
    for (std::size_t p = 0; p < pixels; ++p) {
      const double d = img.rgb[p * 3 + c] / 255.0 - m.mean[c];
      q += d * d;
    }
    m.m2[c] = q;
  }
  return m;
}

void merge(Moments& acc, const Moments& m) {
  if (m.n == 0) return;
  const double n = acc.n + m.n;
  for (std::size_t c = 0; c < 3; ++c) {
    const double delta = m.mean[c] - acc.mean[c];
    acc.mean[c] += delta * m.n / n;
    acc.m2[c] += m.m2[c] + delta * delta * acc.n * m.n / n;
  }
  acc.n = n;
}

NormStats finish(const Moments& acc) {
  NormStats s;
  for (std::size_t c = 0; c < 3; ++c) {
    s.mean[c] = acc.mean[c];
    s.std[c] = std::sqrt(std::max(0.0, acc.m2[c] / acc.n));
  }
  return s;
}

}  // namespace

NormStats normalization_stats(std::span<const Image> images) {
  if (images.empty()) throw ValidationError("normalization stats need at least one image");
  std::vector<Moments> per(images.size());
#pragma omp parallel for schedule(static)
  for (std::ptrdiff_t i = 0; i < std::ptrdiff_t(images.size()); ++i) per[std::size_t(i)] = image_moments(images[std::size_t(i)]);
  Moments acc;
  for (const auto& m : per) merge(acc, m);
  if (acc.n == 0) throw ValidationError("normalization stats over zero pixels");
  return finish(acc);
}

std::string format_norm_stats(const NormStats& stats) {
  std::string out;
  for (std::size_t c = 0; c < 3; ++c) out += "norm_mean" + std::to_string(c) + "=" + format_roundtrip(stats.mean[c]) + "\n";
  for (std::size_t c = 0; c < 3; ++c) out += "norm_std" + std::to_string(c) + "=" + format_roundtrip(stats.std[c]) + "\n";
  return out;
}

NormStats parse_norm_stats(std::string_view text, const std::string& source) {
  NormStats s;
  std::array<bool, 6> seen{};
  std::size_t pos = 0, line_no = 0;
  while (pos < text.size()) {
    auto nl = text.find('\n', pos);
    if (nl == std::string_view::npos) nl = text.size();
    const auto line = trim(text.substr(pos, nl - pos));
    pos = nl + 1;
    ++line_no;
    const auto eq = line.find('=');
    if (eq == std::string_view::npos) continue;
    const auto key = trim(line.substr(0, eq));
    for (std::size_t c = 0; c < 3; ++c) {
      for (int which = 0; which < 2; ++which) {
        if (key != (which ? "norm_std" : "norm_mean") + std::to_string(c)) continue;
        try {
          (which ? s.std : s.mean)[c] = parse_double(trim(line.substr(eq + 1)), which ? "norm_std" : "norm_mean");
        } catch (const ValidationError& e) {
          throw ValidationError(source + ":" + std::to_string(line_no) + ": " + e.what());
        }
        seen[std::size_t(which) * 3 + c] = true;
      }
    }
  }
  for (std::size_t i = 0; i < 6; ++i)
    if (!seen[i])
      throw ValidationError(source + ": missing " + (i < 3 ? "norm_mean" : "norm_std") + std::to_string(i % 3));
  for (double v : s.std)
    if (!(v >= 0)) throw ValidationError(source + ": norm_std must be >= 0");
  return s;
}

NormStats normalization_stats(std::span<const fs::path> image_paths) {
  if (image_paths.empty()) throw ValidationError("normalization stats need at least one image");
  std::vector<Moments> per(image_paths.size());
  std::vector<std::string> errors(image_paths.size());
#pragma omp parallel for schedule(dynamic)
  for (std::ptrdiff_t i = 0; i < std::ptrdiff_t(image_paths.size()); ++i) {
    try {
      per[std::size_t(i)] = image_moments(read_png(image_paths[std::size_t(i)]));
    } catch (const std::exception& e) {
      errors[std::size_t(i)] = e.what();
    }
  }
  for (const auto& e : errors)
    if (!e.empty()) throw IoError("undecodable image: " + e);
  Moments acc;
  for (const auto& m : per) merge(acc, m);
  return finish(acc);
}

namespace {

// Indexed by MTL class; LSD class c uses pattern c + 1.
constexpr std::array<std::array<int, 3>, kMtlClasses> kTints = {{
    {170, 170, 170},
    {220, 60, 50},
    {90, 180, 60},
    {150, 90, 210},
    {240, 200, 60},
    {60, 110, 220},
    {60, 210, 210},
    {200, 120, 160},
}};

constexpr std::array<std::array<double, 2>, kMtlClasses> kVaMeans = {{
    {0.0, 0.0},
    {-0.6, 0.6},
    {-0.5, 0.2},
    {-0.4, 0.7},
    {0.7, 0.4},
    {-0.6, -0.4},
    {0.3, 0.8},
    {0.1, -0.3},
}};
constexpr double kVaSpread = 0.12;

// Which AUs each class tends to activate.
constexpr std::array<std::array<int, kNumAus>, kMtlClasses> kAuSignatures = {{
    {0, 0, 0, 0, 0, 0, 0, 0, 0, 0, 0, 0},
    {0, 0, 1, 0, 1, 0, 0, 0, 1, 1, 0, 0},
    {0, 0, 1, 0, 0, 1, 0, 1, 0, 0, 1, 0},
    {1, 1, 1, 0, 1, 0, 0, 0, 0, 0, 1, 1},
    {0, 0, 0, 1, 0, 0, 1, 0, 0, 0, 1, 0},
    {1, 0, 1, 0, 0, 0, 0, 1, 0, 1, 0, 0},
    {1, 1, 0, 0, 0, 0, 0, 0, 0, 0, 1, 1},
    {0, 1, 0, 1, 0, 1, 0, 0, 1, 0, 0, 0},
}};
constexpr double kAuOn = 0.95;
constexpr double kAuOff = 0.05;

double pattern_value(std::size_t pattern, double x, double y, std::size_t size, std::size_t phase,
                     double cx, double cy) {
  const std::size_t half = std::max<std::size_t>(1, size / 8);
  const auto xi = std::size_t(x), yi = std::size_t(y);
  const double s = double(size);
  switch (pattern) {
    case 0: {
      const std::size_t t = half + phase % 2;
      return (xi < t || yi < t || xi >= size - t || yi >= size - t) ? 1.0 : 0.0;
    }
    case 1: return double(((yi + phase) / half) % 2);
    case 2: return double(((xi + phase) / half) % 2);
    case 3: return double((((xi + phase) / half) + ((yi + phase) / half)) % 2);
    case 4: {
      const double dx = x + 0.5 - cx, dy = y + 0.5 - cy;
      return dx * dx + dy * dy <= (0.3 * s) * (0.3 * s) ? 1.0 : 0.0;
    }
    case 5: return double(((xi + yi + phase) / half) % 2);
    case 6: {
      const double w = 0.125 * s;
      return (std::abs(x + 0.5 - cx) <= w || std::abs(y + 0.5 - cy) <= w) ? 1.0 : 0.0;
    }
    default: return (x + 0.5) / s;
  }
}

}  // namespace

Image render_sample(std::size_t pattern, std::size_t size, std::uint64_t seed) {
  if (size < 8) throw ValidationError("synthetic image size must be at least 8, got " + std::to_string(size));
  if (pattern >= kMtlClasses) throw ValidationError("pattern index out of range");
  std::mt19937_64 rng(seed);
  std::uniform_int_distribution<std::size_t> phase_dist(0, size);
  std::uniform_real_distribution<double> jitter(-20.0, 20.0);
  std::uniform_real_distribution<double> center(0.4, 0.6);
  std::normal_distribution<double> noise(0.0, 12.0);
  const std::size_t phase = phase_dist(rng);
  const double brightness = jitter(rng);
  const double cx = center(rng) * double(size), cy = center(rng) * double(size);
  std::array<double, 3> fg{}, bg{};
  for (std::size_t c = 0; c < 3; ++c) {
    fg[c] = kTints[pattern][c] + jitter(rng);
    bg[c] = 0.25 * (255.0 - kTints[pattern][c]);
  }
  Image img(size, size);
  for (std::size_t y = 0; y < size; ++y) {
    for (std::size_t x = 0; x < size; ++x) {
      const double v = pattern_value(pattern, double(x), double(y), size, phase, cx, cy);
      for (std::size_t c = 0; c < 3; ++c) {
        const double px = bg[c] + v * (fg[c] - bg[c]) + brightness + noise(rng);
        img.at(x, y, c) = std::uint8_t(std::clamp(std::lround(px), 0L, 255L));
      }
    }
  }
  return img;
}

std::vector<SampleRecord> generate_synthetic(const fs::path& out_dir, const SynthConfig& config) {
  const std::size_t C = num_classes(config.task);
  std::vector<std::size_t> counts = config.counts.empty() ? std::vector<std::size_t>(C, config.per_class) : config.counts;
  if (counts.size() != C)
    throw ValidationError("expected " + std::to_string(C) + " class counts, got " + std::to_string(counts.size()));
  if (config.size < 8) throw ValidationError("synthetic image size must be at least 8, got " + std::to_string(config.size));
  if (!(config.label_dropout >= 0.0 && config.label_dropout < 1.0))
    throw ValidationError("label dropout must lie in [0,1)");

  std::vector<SampleRecord> records;
  std::vector<std::size_t> patterns;
  for (std::size_t c = 0; c < C; ++c) {
    for (std::size_t k = 0; k < counts[c]; ++k) {
      const std::size_t index = records.size();
      SampleRecord r;
      char name[64];
      std::snprintf(name, sizeof name, "images/s%05zu_c%zu.png", index, c);
      r.image_path = name;
      r.expression = int(c);
      const std::size_t pattern = config.task == Task::mtl ? c : c + 1;
      if (config.task == Task::mtl) {
        std::mt19937_64 rng(mix_seed(mix_seed(config.seed, index), 1));
        std::normal_distribution<double> va(0.0, kVaSpread);
        std::uniform_real_distribution<double> u(0.0, 1.0);
        r.valence = std::clamp(kVaMeans[pattern][0] + va(rng), -1.0, 1.0);
        r.arousal = std::clamp(kVaMeans[pattern][1] + va(rng), -1.0, 1.0);
        for (std::size_t i = 0; i < kNumAus; ++i) r.aus[i] = u(rng) < (kAuSignatures[pattern][i] ? kAuOn : kAuOff);
        if (u(rng) < config.label_dropout) r.valence = r.arousal = kVaUnlabeled;
        if (u(rng) < config.label_dropout) r.expression = kUnlabeled;
        if (u(rng) < config.label_dropout) r.aus = SampleRecord::filled_aus();
      }
      records.push_back(std::move(r));
      patterns.push_back(pattern);
    }
  }

  std::vector<std::vector<std::uint8_t>> encoded(records.size());
#pragma omp parallel for schedule(dynamic)
  for (std::ptrdiff_t i = 0; i < std::ptrdiff_t(records.size()); ++i) {
    const auto idx = std::size_t(i);
    encoded[idx] = encode_png(render_sample(patterns[idx], config.size, mix_seed(config.seed, idx)));
  }
  for (std::size_t i = 0; i < records.size(); ++i) write_file_atomic(out_dir / records[i].image_path, encoded[i]);
  write_manifest(out_dir / "manifest.csv", records, config.task);
  return records;
}

}  // namespace affkit::data
