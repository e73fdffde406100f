#include "affkit/checkpoint.hpp"

#include <bit>
#include <charconv>
#include <cstring>

#include "affkit/error.hpp"
#include "affkit/fileio.hpp"

namespace affkit::checkpoint {

using numkit::Tensor;

void Checkpoint::add(std::string name, Tensor<float> t) {
  if (find(name)) throw ValidationError("duplicate checkpoint entry " + name);
  entries.emplace_back(std::move(name), std::move(t));
}

const Tensor<float>* Checkpoint::find(const std::string& name) const {
  for (const auto& [n, t] : entries)
    if (n == name) return &t;
  return nullptr;
}

const Tensor<float>& Checkpoint::get(const std::string& name) const {
  if (auto* t = find(name)) return *t;
  throw ValidationError("checkpoint has no entry " + name);
}

void Checkpoint::set_meta(const std::string& key, std::string value) {
  if (key.empty() || key.find_first_of("=\n") != std::string::npos || value.find('\n') != std::string::npos)
    throw ValidationError("invalid checkpoint metadata key/value: " + key);
  for (auto& [k, v] : metadata)
    if (k == key) {
      v = std::move(value);
      return;
    }
  metadata.emplace_back(key, std::move(value));
}

std::optional<std::string> Checkpoint::meta(const std::string& key) const {
  for (const auto& [k, v] : metadata)
    if (k == key) return v;
  return std::nullopt;
}

std::string Checkpoint::require_meta(const std::string& key) const {
  if (auto v = meta(key)) return *v;
  throw ValidationError("checkpoint metadata lacks '" + key + "'");
}

namespace {

void put_u32(std::vector<std::uint8_t>& out, std::uint32_t v) {
  for (int i = 0; i < 4; ++i) out.push_back(std::uint8_t(v >> (8 * i)));
}

class Reader {
 public:
  Reader(std::span<const std::uint8_t> bytes, const std::string& source) : bytes_(bytes), source_(source) {}

  std::uint32_t u32(const char* what) {
    need(4, what);
    std::uint32_t v = 0;
    for (int i = 0; i < 4; ++i) v |= std::uint32_t(bytes_[pos_ + std::size_t(i)]) << (8 * i);
    pos_ += 4;
    return v;
  }
  std::string text(std::size_t n, const char* what) {
    need(n, what);
    std::string s(reinterpret_cast<const char*>(bytes_.data() + pos_), n);
    pos_ += n;
    return s;
  }
  std::size_t pos() const { return pos_; }
  std::size_t remaining() const { return bytes_.size() - pos_; }
  void need(std::size_t n, const char* what) const {
    if (bytes_.size() - pos_ < n)
      throw ValidationError(source_ + ": truncated at offset " + std::to_string(pos_) + " while reading " + what +
                            " (need " + std::to_string(n) + " bytes, " + std::to_string(bytes_.size() - pos_) +
                            " left)");
  }

 private:
  std::span<const std::uint8_t> bytes_;
  const std::string& source_;
  std::size_t pos_ = 0;
};

}  // namespace

std::vector<std::uint8_t> encode(const Checkpoint& ckpt) {
  std::vector<std::uint8_t> out(kMagic, kMagic + 4);
  put_u32(out, kFormatVersion);
  put_u32(out, std::uint32_t(ckpt.entries.size()));
  for (const auto& [name, t] : ckpt.entries) {
    put_u32(out, std::uint32_t(name.size()));
    out.insert(out.end(), name.begin(), name.end());
    put_u32(out, std::uint32_t(t.rank()));
    for (auto d : t.shape()) put_u32(out, std::uint32_t(d));
    for (float v : t.values()) put_u32(out, std::bit_cast<std::uint32_t>(v));
  }
  std::string meta;
  for (const auto& [k, v] : ckpt.metadata) meta += k + "=" + v + "\n";
  put_u32(out, std::uint32_t(meta.size()));
  out.insert(out.end(), meta.begin(), meta.end());
  return out;
}

Checkpoint decode(std::span<const std::uint8_t> bytes, const std::string& source) {
  Reader r(bytes, source);
  if (r.text(4, "magic") != std::string(kMagic, 4)) throw ValidationError(source + ": not a checkpoint (bad magic)");
  const auto version = r.u32("version");
  if (version != kFormatVersion)
    throw ValidationError(source + ": unsupported checkpoint version " + std::to_string(version));
  const auto count = r.u32("entry count");
  Checkpoint ckpt;
  for (std::uint32_t e = 0; e < count; ++e) {
    const auto name_len = r.u32("entry name length");
    auto name = r.text(name_len, "entry name");
    const auto rank = r.u32("rank");
    if (rank > 8) throw ValidationError(source + ": implausible rank " + std::to_string(rank) + " for " + name);
    numkit::Shape shape;
    for (std::uint32_t d = 0; d < rank; ++d) shape.push_back(r.u32("dims"));
    const std::size_t n = numkit::numel(shape);
    r.need(n * 4, "payload");
    std::vector<float> values(n);
    for (auto& v : values) v = std::bit_cast<float>(r.u32("payload"));
    ckpt.add(std::move(name), Tensor<float>(std::move(shape), std::move(values)));
  }
  const auto meta_len = r.u32("metadata length");
  const auto meta = r.text(meta_len, "metadata");
  if (r.remaining() != 0)
    throw ValidationError(source + ": " + std::to_string(r.remaining()) + " trailing bytes at offset " +
                          std::to_string(r.pos()));
  std::size_t pos = 0;
  while (pos < meta.size()) {
    auto end = meta.find('\n', pos);
    if (end == std::string::npos) throw ValidationError(source + ": unterminated metadata line");
    auto line = meta.substr(pos, end - pos);
    auto eq = line.find('=');
    if (eq == std::string::npos) throw ValidationError(source + ": malformed metadata line '" + line + "'");
    ckpt.metadata.emplace_back(line.substr(0, eq), line.substr(eq + 1));
    pos = end + 1;
  }
  return ckpt;
}

void save(const std::filesystem::path& path, const Checkpoint& ckpt) { write_file_atomic(path, encode(ckpt)); }

Checkpoint load(const std::filesystem::path& path) { return decode(read_file_bytes(path), path.string()); }

namespace {

std::string join_sizes(const std::vector<std::size_t>& v) {
  std::string s;
  for (auto x : v) s += (s.empty() ? "" : ",") + std::to_string(x);
  return s;
}

std::uint64_t parse_u64(const std::string& s, const std::string& key) {
  std::uint64_t v = 0;
  auto [p, ec] = std::from_chars(s.data(), s.data() + s.size(), v);
  if (ec != std::errc() || p != s.data() + s.size())
    throw ValidationError("checkpoint metadata " + key + " is not an integer: '" + s + "'");
  return v;
}

double parse_f64(const std::string& s, const std::string& key) {
  double v = 0;
  auto [p, ec] = std::from_chars(s.data(), s.data() + s.size(), v);
  if (ec != std::errc() || p != s.data() + s.size())
    throw ValidationError("checkpoint metadata " + key + " is not a number: '" + s + "'");
  return v;
}

}  // namespace

void store_model(Checkpoint& ckpt, const model::Model<float>& m) {
  for (const auto& [n, t] : m.params.entries()) ckpt.add(n, t.clone());
  for (const auto& [n, t] : m.frozen.entries()) ckpt.add("frozen." + n, t.clone());
  ckpt.set_meta("task", std::string(data::task_name(m.spec.task)));
  ckpt.set_meta("slots", std::to_string(m.spec.slots));
  ckpt.set_meta("input_size", std::to_string(m.spec.backbone.input_size));
  ckpt.set_meta("channels", join_sizes(m.spec.backbone.channels));
  ckpt.set_meta("feature_dim", std::to_string(m.spec.backbone.feature_dim));
  ckpt.set_meta("model_seed", std::to_string(m.spec.backbone.seed));
  ckpt.set_meta("deviation", m.spec.deviation ? "1" : "0");
}

model::Model<float> restore_model(const Checkpoint& ckpt) {
  model::ModelSpec spec;
  spec.task = data::parse_task(ckpt.require_meta("task"));
  spec.slots = parse_u64(ckpt.require_meta("slots"), "slots");
  spec.backbone.input_size = parse_u64(ckpt.require_meta("input_size"), "input_size");
  spec.backbone.channels.clear();
  const auto ch = ckpt.require_meta("channels");
  std::size_t pos = 0;
  while (pos <= ch.size()) {
    auto end = ch.find(',', pos);
    if (end == std::string::npos) end = ch.size();
    spec.backbone.channels.push_back(parse_u64(ch.substr(pos, end - pos), "channels"));
    pos = end + 1;
  }
  spec.backbone.feature_dim = parse_u64(ckpt.require_meta("feature_dim"), "feature_dim");
  spec.backbone.seed = parse_u64(ckpt.require_meta("model_seed"), "model_seed");
  spec.deviation = ckpt.require_meta("deviation") == "1";
  spec.validate();

  // The freshly initialized model defines the expected names and shapes.
  auto m = model::init_model<float>(spec);
  auto fill = [&](model::ParamStore<float>& store, const std::string& prefix) {
    for (auto& [n, t] : store.entries()) {
      const auto& src = ckpt.get(prefix + n);
      if (src.shape() != t.shape())
        throw ValidationError("checkpoint entry " + prefix + n + " has shape " + numkit::to_string(src.shape()) +
                              ", model expects " + numkit::to_string(t.shape()));
      t = src.clone();
    }
  };
  fill(m.params, "");
  fill(m.frozen, "frozen.");
  return m;
}

void store_norm_stats(Checkpoint& ckpt, const data::NormStats& stats) {
  for (std::size_t c = 0; c < 3; ++c) {
    ckpt.set_meta("norm_mean" + std::to_string(c), format_roundtrip(stats.mean[c]));
    ckpt.set_meta("norm_std" + std::to_string(c), format_roundtrip(stats.std[c]));
  }
}

std::optional<data::NormStats> restore_norm_stats(const Checkpoint& ckpt) {
  if (!ckpt.meta("norm_mean0")) return std::nullopt;
  data::NormStats s;
  for (std::size_t c = 0; c < 3; ++c) {
    const auto km = "norm_mean" + std::to_string(c), ks = "norm_std" + std::to_string(c);
    s.mean[c] = parse_f64(ckpt.require_meta(km), km);
    s.std[c] = parse_f64(ckpt.require_meta(ks), ks);
  }
  return s;
}

}  // namespace affkit::checkpoint
