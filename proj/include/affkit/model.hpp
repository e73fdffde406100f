#pragma once

// Tiny CNN backbone, multi-slot task heads and the siamese deviation module.
//
// Parameters live in a ParamStore: an ordered list of named tensors. The
// forward functions read whatever tensors the store holds, so passing
// `store.watched(tape)` trains and passing the store itself is inference.

#include <algorithm>
#include <array>
#include <cmath>
#include <cstddef>
#include <cstdint>
#include <optional>
#include <random>
#include <span>
#include <string>
#include <utility>
#include <vector>

#include "affkit/data.hpp"
#include "affkit/error.hpp"
#include "affkit/fileio.hpp"
#include "affkit/numkit/ops.hpp"

namespace affkit::model {

using numkit::Shape;
using numkit::Tape;
using numkit::Tensor;

template <class T>
class ParamStore {
 public:
  using Entry = std::pair<std::string, Tensor<T>>;

  void add(std::string name, Tensor<T> value) {
    if (contains(name)) throw ValidationError("duplicate parameter " + name);
    entries_.emplace_back(std::move(name), std::move(value));
  }
  bool contains(const std::string& name) const { return find(name) != nullptr; }
  const Tensor<T>& get(const std::string& name) const {
    if (auto* t = find(name)) return *t;
    throw ValidationError("missing parameter " + name);
  }
  Tensor<T>& get(const std::string& name) {
    return const_cast<Tensor<T>&>(static_cast<const ParamStore&>(*this).get(name));
  }
  const Tensor<T>* find(const std::string& name) const {
    for (const auto& [n, t] : entries_)
      if (n == name) return &t;
    return nullptr;
  }
  std::size_t size() const { return entries_.size(); }
  bool empty() const { return entries_.empty(); }
  std::vector<Entry>& entries() & { return entries_; }
  const std::vector<Entry>& entries() const& { return entries_; }
  std::vector<Entry> entries() && { return std::move(entries_); }

  std::size_t parameter_count() const {
    std::size_t n = 0;
    for (const auto& e : entries_) n += e.second.size();
    return n;
  }

  /// Handles registered as leaves on `tape`; gradients land in this store.
  ParamStore watched(Tape<T>& tape) const {
    ParamStore out;
    for (const auto& [n, t] : entries_) out.entries_.emplace_back(n, tape.watch(t));
    return out;
  }
  ParamStore clone() const {
    ParamStore out;
    for (const auto& [n, t] : entries_) out.entries_.emplace_back(n, t.clone());
    return out;
  }
  template <class U>
  ParamStore<U> cast() const {
    ParamStore<U> out;
    for (const auto& [n, t] : entries_) out.add(n, t.template cast<U>());
    return out;
  }
  void zero_grad() {
    for (auto& e : entries_) e.second.zero_grad();
  }
  /// Entries whose names start with `prefix`.
  ParamStore subset(const std::string& prefix) const {
    ParamStore out;
    for (const auto& [n, t] : entries_)
      if (n.compare(0, prefix.size(), prefix) == 0) out.entries_.emplace_back(n, t);
    return out;
  }
  bool values_equal(const ParamStore& other) const {
    if (other.size() != size()) return false;
    for (std::size_t i = 0; i < entries_.size(); ++i) {
      const auto& a = entries_[i];
      const auto& b = other.entries_[i];
      if (a.first != b.first || a.second.shape() != b.second.shape()) return false;
      auto av = a.second.values(), bv = b.second.values();
      if (!std::equal(av.begin(), av.end(), bv.begin())) return false;
    }
    return true;
  }

 private:
  std::vector<Entry> entries_;
};

struct BackboneConfig {
  std::size_t input_size = 16;
  std::vector<std::size_t> channels{8, 16};
  std::size_t feature_dim = 64;
  std::uint64_t seed = 0;

  void validate() const {
    if (feature_dim == 0) throw ValidationError("feature_dim must be positive");
    if (channels.empty()) throw ValidationError("backbone needs at least one conv layer");
    for (auto c : channels)
      if (c == 0) throw ValidationError("conv width must be positive");
    const std::size_t div = std::size_t(1) << channels.size();
    if (input_size == 0 || input_size % div != 0)
      throw ValidationError("input_size " + std::to_string(input_size) + " must be divisible by " + std::to_string(div));
    if (input_size / (div / 2) < 3)
      throw ValidationError("input_size " + std::to_string(input_size) + " too small for " +
                            std::to_string(channels.size()) + " conv layers");
  }
  std::size_t pooled_size() const { return input_size >> channels.size(); }
  std::size_t flat_dim() const { return channels.back() * pooled_size() * pooled_size(); }
  bool operator==(const BackboneConfig&) const = default;
};

struct ModelSpec {
  data::Task task = data::Task::lsd;
  std::size_t slots = 1;
  BackboneConfig backbone;
  bool deviation = false;

  std::size_t num_classes() const { return data::num_classes(task); }
  void validate() const {
    backbone.validate();
    if (slots == 0) throw ValidationError("need at least one feature slot");
  }
  bool operator==(const ModelSpec&) const = default;
};

inline constexpr double kProjectionBiasInit = 0.01;

namespace detail {

template <class T>
Tensor<T> gaussian(Shape shape, double stddev, std::mt19937_64& rng) {
  std::normal_distribution<double> dist(0.0, stddev);
  std::vector<T> v(numkit::numel(shape));
  for (auto& x : v) x = T(dist(rng));
  return Tensor<T>(std::move(shape), std::move(v));
}

inline std::string slot_name(std::size_t k, const char* part) { return "slot" + std::to_string(k) + "." + part; }

}  // namespace detail

/// He-normal conv/fc weights, zero biases.
template <class T>
ParamStore<T> init_backbone(const BackboneConfig& cfg, const std::string& prefix = "backbone.") {
  cfg.validate();
  std::mt19937_64 rng(mix_seed(cfg.seed, 0));
  ParamStore<T> p;
  std::size_t in = 3;
  for (std::size_t l = 0; l < cfg.channels.size(); ++l) {
    const std::size_t out = cfg.channels[l];
    const std::string base = prefix + "conv" + std::to_string(l);
    p.add(base + ".w", detail::gaussian<T>({out, in, 3, 3}, std::sqrt(2.0 / double(in * 9)), rng));
    p.add(base + ".b", Tensor<T>::zeros({out}));
    in = out;
  }
  p.add(prefix + "fc.w", detail::gaussian<T>({cfg.flat_dim(), cfg.feature_dim}, std::sqrt(2.0 / double(cfg.flat_dim())), rng));
  p.add(prefix + "fc.b", Tensor<T>::zeros({cfg.feature_dim}));
  return p;
}

template <class T>
ParamStore<T> init_heads(const ModelSpec& spec, std::uint64_t seed) {
  std::mt19937_64 rng(mix_seed(seed, 1));
  const std::size_t D = spec.backbone.feature_dim;
  const double s = std::sqrt(1.0 / double(D));
  ParamStore<T> p;
  for (std::size_t k = 0; k < spec.slots; ++k) {
    p.add(detail::slot_name(k, "proj.w"), detail::gaussian<T>({D, D}, std::sqrt(2.0 / double(D)), rng));
    p.add(detail::slot_name(k, "proj.b"), Tensor<T>::full({D}, T(kProjectionBiasInit)));
    p.add(detail::slot_name(k, "expr.w"), detail::gaussian<T>({D, spec.num_classes()}, s, rng));
    p.add(detail::slot_name(k, "expr.b"), Tensor<T>::zeros({spec.num_classes()}));
    if (spec.task == data::Task::mtl) {
      p.add(detail::slot_name(k, "va.w"), detail::gaussian<T>({D, 2}, s, rng));
      p.add(detail::slot_name(k, "va.b"), Tensor<T>::zeros({2}));
      p.add(detail::slot_name(k, "au.w"), detail::gaussian<T>({D, data::kNumAus}, s, rng));
      p.add(detail::slot_name(k, "au.b"), Tensor<T>::zeros({data::kNumAus}));
    }
  }
  return p;
}

/// `params` holds the trainable backbone and heads; `frozen` holds the
/// deviation twin (empty when deviation is off).
template <class T>
struct Model {
  ModelSpec spec;
  ParamStore<T> params;
  ParamStore<T> frozen;
};

template <class T>
Model<T> init_model(const ModelSpec& spec) {
  spec.validate();
  Model<T> m{spec, init_backbone<T>(spec.backbone), {}};
  auto heads = init_heads<T>(spec, spec.backbone.seed);
  for (auto& e : heads.entries()) m.params.add(e.first, std::move(e.second));
  if (spec.deviation)
    for (const auto& [n, t] : m.params.subset("backbone.").entries()) m.frozen.add(n, t.clone());
  return m;
}

/// Deviation fine-tuning model: the trainable backbone and the frozen twin
/// both start from `pretrained`'s backbone; heads are freshly initialized
/// from `head_seed` because the feature space changes meaning.
template <class T>
Model<T> deviation_model(const Model<T>& pretrained, std::uint64_t head_seed, std::optional<data::Task> task = {},
                         std::optional<std::size_t> slots = {}) {
  ModelSpec spec = pretrained.spec;
  spec.deviation = true;
  if (task) spec.task = *task;
  if (slots) spec.slots = *slots;
  spec.validate();
  Model<T> m{spec, {}, {}};
  for (const auto& [n, t] : pretrained.params.subset("backbone.").entries()) {
    m.params.add(n, t.clone());
    m.frozen.add(n, t.clone());
  }
  if (m.params.empty()) throw ValidationError("pretrained model has no backbone parameters");
  auto heads = init_heads<T>(spec, head_seed);
  for (auto& e : heads.entries()) m.params.add(e.first, std::move(e.second));
  return m;
}

/// conv -> relu -> avg2 per layer, flatten, fc -> relu. batch is [N,3,S,S].
template <class T>
Tensor<T> backbone_forward(Tape<T>& tape, const BackboneConfig& cfg, const ParamStore<T>& p, const Tensor<T>& batch,
                           const std::string& prefix = "backbone.") {
  const std::size_t S = cfg.input_size;
  if (batch.rank() != 4 || batch.dim(1) != 3 || batch.dim(2) != S || batch.dim(3) != S)
    throw ValidationError("backbone expects [N,3," + std::to_string(S) + "," + std::to_string(S) + "], got " +
                          numkit::to_string(batch.shape()));
  Tensor<T> x = batch;
  for (std::size_t l = 0; l < cfg.channels.size(); ++l) {
    const std::string base = prefix + "conv" + std::to_string(l);
    x = numkit::avg_pool2(tape, numkit::relu(tape, numkit::conv2d(tape, x, p.get(base + ".w"), p.get(base + ".b"))));
  }
  const std::size_t N = batch.dim(0);
  x = numkit::reshape(tape, x, {N, cfg.flat_dim()});
  return numkit::relu(tape, numkit::linear(tape, x, p.get(prefix + "fc.w"), p.get(prefix + "fc.b")));
}

/// backbone(T) - backbone(F). F is read through detached handles, so no
/// gradient can reach it even if the caller watched it.
template <class T>
Tensor<T> deviation_forward(Tape<T>& tape, const BackboneConfig& cfg, const ParamStore<T>& trainable,
                            const ParamStore<T>& frozen, const Tensor<T>& batch) {
  auto t_part = trainable.subset("backbone.");
  if (frozen.size() != t_part.size())
    throw ValidationError("deviation twin has " + std::to_string(frozen.size()) + " tensors, trainable backbone " +
                          std::to_string(t_part.size()));
  ParamStore<T> f_detached;
  for (std::size_t i = 0; i < frozen.size(); ++i) {
    const auto& [fn, ft] = frozen.entries()[i];
    const auto& [tn, tt] = t_part.entries()[i];
    if (fn != tn || ft.shape() != tt.shape())
      throw ValidationError("deviation twin mismatch at " + fn + " " + numkit::to_string(ft.shape()) + " vs " + tn +
                            " " + numkit::to_string(tt.shape()));
    f_detached.add(fn, ft.detach());
  }
  auto ft = backbone_forward(tape, cfg, trainable, batch);
  auto ff = backbone_forward(tape, cfg, f_detached, batch);
  return numkit::sub(tape, ft, ff);
}

template <class T>
struct Outputs {
  Tensor<T> expr;               // [N,C] probabilities
  std::optional<Tensor<T>> va;  // [N,2] in (-1,1), MTL only
  std::optional<Tensor<T>> au;  // [N,12] in (0,1), MTL only
};

/// Per slot: relu(proj) then softmax/tanh/sigmoid heads. The returned
/// outputs are plain means over slots of probabilities and VA values.
template <class T>
Outputs<T> multi_slot_forward(Tape<T>& tape, const ModelSpec& spec, const ParamStore<T>& p, const Tensor<T>& features) {
  if (spec.slots == 0) throw ValidationError("need at least one feature slot");
  const bool mtl = spec.task == data::Task::mtl;
  std::optional<Tensor<T>> expr, va, au;
  auto accumulate = [&](std::optional<Tensor<T>>& acc, const Tensor<T>& v) { acc = acc ? numkit::add(tape, *acc, v) : v; };
  for (std::size_t k = 0; k < spec.slots; ++k) {
    using detail::slot_name;
    auto h = numkit::relu(tape, numkit::linear(tape, features, p.get(slot_name(k, "proj.w")), p.get(slot_name(k, "proj.b"))));
    accumulate(expr, numkit::softmax_rows(
                         tape, numkit::linear(tape, h, p.get(slot_name(k, "expr.w")), p.get(slot_name(k, "expr.b")))));
    if (mtl) {
      accumulate(va, numkit::tanh(tape, numkit::linear(tape, h, p.get(slot_name(k, "va.w")), p.get(slot_name(k, "va.b")))));
      accumulate(au, numkit::sigmoid(tape, numkit::linear(tape, h, p.get(slot_name(k, "au.w")), p.get(slot_name(k, "au.b")))));
    }
  }
  Outputs<T> out;
  const T inv = T(1.0 / double(spec.slots));
  out.expr = spec.slots == 1 ? *expr : numkit::scale(tape, *expr, inv);
  if (mtl) {
    out.va = spec.slots == 1 ? *va : numkit::scale(tape, *va, inv);
    out.au = spec.slots == 1 ? *au : numkit::scale(tape, *au, inv);
  }
  return out;
}

template <class T>
Tensor<T> extract_features(Tape<T>& tape, const ModelSpec& spec, const ParamStore<T>& params,
                           const ParamStore<T>& frozen, const Tensor<T>& batch) {
  if (spec.deviation) return deviation_forward(tape, spec.backbone, params, frozen, batch);
  return backbone_forward(tape, spec.backbone, params, batch);
}

template <class T>
Outputs<T> forward_task(Tape<T>& tape, const ModelSpec& spec, const ParamStore<T>& params, const ParamStore<T>& frozen,
                        const Tensor<T>& batch, data::Task task) {
  if (task != spec.task)
    throw ValidationError("model was built for task " + std::string(data::task_name(spec.task)) + ", asked for " +
                          std::string(data::task_name(task)));
  return multi_slot_forward(tape, spec, params, extract_features(tape, spec, params, frozen, batch));
}

/// Inference convenience: nothing is recorded for backward.
template <class T>
Outputs<T> forward_task(const Model<T>& model, const Tensor<T>& batch, data::Task task) {
  Tape<T> tape;
  return forward_task(tape, model.spec, model.params, model.frozen, batch, task);
}

inline constexpr double kAuThreshold = 0.5;

/// Row argmax, lowest index wins ties.
template <class V>
std::vector<int> predict_classes(std::span<const V> probs, std::size_t rows, std::size_t cols) {
  if (probs.size() != rows * cols) throw ValidationError("probability matrix size mismatch");
  std::vector<int> out(rows, 0);
  for (std::size_t r = 0; r < rows; ++r) {
    std::size_t best = 0;
    for (std::size_t c = 1; c < cols; ++c)
      if (probs[r * cols + c] > probs[r * cols + best]) best = c;
    out[r] = int(best);
  }
  return out;
}

/// 1 when p >= 0.5.
template <class V>
std::vector<std::array<int, data::kNumAus>> predict_aus(std::span<const V> probs, std::size_t rows) {
  if (probs.size() != rows * data::kNumAus) throw ValidationError("AU probability matrix size mismatch");
  std::vector<std::array<int, data::kNumAus>> out(rows);
  for (std::size_t r = 0; r < rows; ++r)
    for (std::size_t a = 0; a < data::kNumAus; ++a) out[r][a] = double(probs[r * data::kNumAus + a]) >= kAuThreshold;
  return out;
}

}  // namespace affkit::model
