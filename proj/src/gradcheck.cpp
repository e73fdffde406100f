#include "affkit/gradcheck.hpp"

#include <chrono>
#include <random>

#include "affkit/error.hpp"
#include "affkit/fileio.hpp"
#include "affkit/losses.hpp"
#include "affkit/model.hpp"
#include "affkit/trainer.hpp"

namespace affkit::trainer {

namespace {

using numkit::Tape;
using numkit::Tensor;

// Networks: small, refinable steps keep probes from straddling relu kinks; a 64-bit
// analytic side keeps tiny gradient entries above float rounding.
finite_diff::Options net_options(std::vector<bool> differentiable = {}) {
  finite_diff::Options o;
  o.epsilon = 1e-5;
  o.differentiable = std::move(differentiable);
  o.analytic_in_double = true;
  o.refinements = 3;
  return o;
}

struct Rng {
  std::mt19937_64 gen;
  explicit Rng(std::uint64_t seed) : gen(seed) {}

  Tensor<float> normal(numkit::Shape shape, double sd = 1.0) {
    std::normal_distribution<double> d(0.0, sd);
    std::vector<float> v(numkit::numel(shape));
    for (auto& x : v) x = float(d(gen));
    return Tensor<float>(std::move(shape), std::move(v));
  }
  Tensor<float> uniform(numkit::Shape shape, double lo, double hi) {
    std::uniform_real_distribution<double> d(lo, hi);
    std::vector<float> v(numkit::numel(shape));
    for (auto& x : v) x = float(d(gen));
    return Tensor<float>(std::move(shape), std::move(v));
  }
  int integer(int lo, int hi) { return std::uniform_int_distribution<int>(lo, hi)(gen); }
};

// Inputs [0, offset) are probe-specific; the rest are parameters in `names` order.
template <class T>
model::ParamStore<T> rebuild(const std::vector<std::string>& names, const std::vector<Tensor<T>>& in,
                             std::size_t offset) {
  model::ParamStore<T> p;
  for (std::size_t i = 0; i < names.size(); ++i) p.add(names[i], in[offset + i]);
  return p;
}

void append_params(const model::ParamStore<float>& p, std::vector<std::string>& names,
                   std::vector<Tensor<float>>& inputs) {
  for (const auto& [n, t] : p.entries()) {
    names.push_back(n);
    inputs.push_back(t.clone());
  }
}

template <class T>
Tensor<T> constant_like(const Tensor<float>& t) {
  return t.template cast<T>();
}

void losses_suite(GradcheckReport& rep, Rng& rng) {
  const std::size_t B = 5, C = 6;
  std::vector<int> labels(B);
  for (auto& l : labels) l = rng.integer(0, int(C) - 1);
  std::vector<double> cw(C);
  for (auto& w : cw) w = 0.5 + double(rng.integer(0, 10)) / 10.0;
  auto logits = rng.normal({B, C});

  rep.components.push_back(finite_diff::check("weighted_cross_entropy", {logits}, [&](auto& tape, const auto& in) {
    return losses::weighted_cross_entropy(tape, numkit::softmax_rows(tape, in[0]), labels, cw);
  }));
  rep.components.push_back(finite_diff::check("smoothed_cross_entropy", {logits}, [&](auto& tape, const auto& in) {
    return losses::smoothed_cross_entropy(tape, numkit::softmax_rows(tape, in[0]), labels,
                                          losses::SmoothingConfig{0.2, C}, cw);
  }));

  const std::size_t N = 16;
  auto pred = rng.uniform({N}, -0.9, 0.9), truth = rng.uniform({N}, -1, 1);
  rep.components.push_back(finite_diff::check(
      "ccc", {pred, truth},
      [&](auto& tape, const auto& in) { return losses::ccc(tape, in[0], in[1]); }, {.differentiable = {true, false}}));

  auto pv = rng.uniform({N}, -0.9, 0.9), pa = rng.uniform({N}, -0.9, 0.9);
  auto tv = rng.uniform({N}, -1, 1), ta = rng.uniform({N}, -1, 1);
  rep.components.push_back(finite_diff::check(
      "va_loss", {pv, tv, pa, ta},
      [&](auto& tape, const auto& in) { return losses::va_loss(tape, in[0], in[1], in[2], in[3]); },
      {.differentiable = {true, false, true, false}}));

  const std::size_t U = 4;
  auto au_logits = rng.normal({B, U});
  std::vector<float> y(B * U);
  for (auto& v : y) v = float(rng.integer(0, 1));
  const Tensor<float> au_labels({B, U}, y);
  std::vector<double> pw{0.5, 1.0, 2.5, 4.0};
  rep.components.push_back(finite_diff::check("weighted_bce", {au_logits}, [&](auto& tape, const auto& in) {
    using T = typename std::decay_t<decltype(in[0])>::value_type;
    return losses::weighted_bce(tape, numkit::sigmoid(tape, in[0]), constant_like<T>(au_labels), pw);
  }));

  rep.components.push_back(finite_diff::check(
      "mtl_total", {logits, pv, pa, au_logits}, [&](auto& tape, const auto& in) {
        using T = typename std::decay_t<decltype(in[0])>::value_type;
        auto e = losses::weighted_cross_entropy(tape, numkit::softmax_rows(tape, in[0]), labels, cw);
        auto v = losses::va_loss(tape, in[1], constant_like<T>(tv), in[2], constant_like<T>(ta));
        auto a = losses::weighted_bce(tape, numkit::sigmoid(tape, in[3]), constant_like<T>(au_labels), pw);
        return losses::mtl_total(tape, e, v, a).total;
      }));
}

void backbone_suite(GradcheckReport& rep, Rng& rng, std::uint64_t seed) {
  model::BackboneConfig cfg{8, {8, 16}, 64, seed};
  auto params = model::init_backbone<float>(cfg);
  std::vector<std::string> names;
  std::vector<Tensor<float>> inputs{rng.normal({1, 3, 8, 8}), rng.normal({1, cfg.feature_dim})};
  append_params(params, names, inputs);
  std::vector<bool> diff(inputs.size(), true);
  diff[1] = false;
  rep.components.push_back(finite_diff::check(
      "backbone", inputs,
      [&](auto& tape, const auto& in) {
        auto f = model::backbone_forward(tape, cfg, rebuild(names, in, 2), in[0]);
        return numkit::sum(tape, numkit::mul(tape, f, in[1]));
      },
      net_options(diff)));
}

std::vector<data::SampleRecord> partial_batch(Rng& rng, std::size_t n) {
  std::vector<data::SampleRecord> recs(n);
  for (std::size_t i = 0; i < n; ++i) {
    auto& r = recs[i];
    r.image_path = "x.png";
    if (i % 4 != 1) r.expression = rng.integer(0, int(data::kMtlClasses) - 1);
    if (i % 3 != 2) {
      r.valence = double(rng.integer(-9, 9)) / 10.0;
      r.arousal = double(rng.integer(-9, 9)) / 10.0;
    }
    for (std::size_t c = 0; c < data::kNumAus; ++c) r.aus[c] = (i + c) % 5 == 0 ? data::kUnlabeled : rng.integer(0, 1);
  }
  return recs;
}

LossWeights varied_weights(data::Task task) {
  LossWeights w;
  for (std::size_t c = 0; c < data::num_classes(task); ++c) w.expr.push_back(0.6 + 0.15 * double(c));
  for (std::size_t c = 0; c < data::kNumAus; ++c) w.au[c] = 0.7 + 0.3 * double(c);
  return w;
}

void heads_suite(GradcheckReport& rep, Rng& rng, std::uint64_t seed) {
  model::ModelSpec spec;
  spec.task = data::Task::mtl;
  spec.slots = 3;
  spec.backbone = model::BackboneConfig{8, {4, 8}, 16, seed};
  const auto heads = model::init_heads<float>(spec, seed);
  const std::size_t B = 6;
  const auto recs = partial_batch(rng, B);
  const auto w = varied_weights(spec.task);
  std::vector<std::string> names;
  std::vector<Tensor<float>> inputs{rng.uniform({B, spec.backbone.feature_dim}, 0.05, 1.5)};
  append_params(heads, names, inputs);
  rep.components.push_back(finite_diff::check("multi_slot_heads", inputs, [&](auto& tape, const auto& in) {
    auto out = model::multi_slot_forward(tape, spec, rebuild(names, in, 1), in[0]);
    return compute_batch_losses(tape, out, recs, spec.task, w, 0.0).total;
  }, net_options()));

  spec.task = data::Task::lsd;
  const auto lsd_heads = model::init_heads<float>(spec, seed + 1);
  std::vector<data::SampleRecord> lsd_recs(B);
  for (auto& r : lsd_recs) r.expression = rng.integer(0, int(data::kLsdClasses) - 1);
  const auto lw = varied_weights(spec.task);
  names.clear();
  inputs = {rng.uniform({B, spec.backbone.feature_dim}, 0.05, 1.5)};
  append_params(lsd_heads, names, inputs);
  rep.components.push_back(finite_diff::check("multi_slot_heads_lsd", inputs, [&](auto& tape, const auto& in) {
    auto out = model::multi_slot_forward(tape, spec, rebuild(names, in, 1), in[0]);
    return compute_batch_losses(tape, out, lsd_recs, spec.task, lw, 0.2).total;
  }, net_options()));
}

void deviation_suite(GradcheckReport& rep, Rng& rng, std::uint64_t seed) {
  model::BackboneConfig cfg{8, {4, 8}, 16, seed};
  const auto frozen = model::init_backbone<float>(cfg);
  auto trainable = frozen.clone();
  for (auto& [n, t] : trainable.entries())
    for (auto& v : t.mutable_values()) v += float(std::normal_distribution<double>(0.0, 0.05)(rng.gen));
  auto batch = rng.normal({2, 3, 8, 8});
  auto mix = rng.normal({2, cfg.feature_dim});

  std::vector<std::string> t_names, f_names;
  std::vector<Tensor<float>> inputs{batch, mix};
  append_params(trainable, t_names, inputs);
  const std::size_t f_off = inputs.size();
  append_params(frozen, f_names, inputs);
  std::vector<bool> diff(inputs.size(), false);
  for (std::size_t i = 2; i < f_off; ++i) diff[i] = true;
  rep.components.push_back(finite_diff::check(
      "deviation_trainable", inputs,
      [&](auto& tape, const auto& in) {
        auto f = model::deviation_forward(tape, cfg, rebuild(t_names, in, 2), rebuild(f_names, in, f_off), in[0]);
        return numkit::sum(tape, numkit::mul(tape, f, in[1]));
      },
      net_options(diff)));

  // Everything watched, frozen twin included: its gradient block must stay 0.
  Tape<float> tape;
  auto t = trainable.clone(), f = frozen.clone();
  auto wt = t.watched(tape), wf = f.watched(tape);
  auto feats = model::deviation_forward(tape, cfg, wt, wf, tape.watch(batch.clone()));
  tape.backward(numkit::sum(tape, numkit::mul(tape, feats, mix)));
  rep.frozen_checked = true;
  for (const auto& [n, ft] : f.entries())
    for (float g : ft.grad()) rep.frozen_grad_max_abs = std::max(rep.frozen_grad_max_abs, double(std::abs(g)));
}

void model_suite(GradcheckReport& rep, Rng& rng, std::uint64_t seed) {
  model::ModelSpec spec;
  spec.task = data::Task::mtl;
  spec.slots = 2;
  spec.backbone = model::BackboneConfig{8, {4, 8}, 16, seed};
  const auto m = model::init_model<float>(spec);
  const std::size_t B = 6;
  const auto recs = partial_batch(rng, B);
  const auto w = varied_weights(spec.task);
  std::vector<std::string> names;
  std::vector<Tensor<float>> inputs{rng.normal({B, 3, 8, 8})};
  append_params(m.params, names, inputs);
  std::vector<bool> diff(inputs.size(), true);
  diff[0] = false;
  rep.components.push_back(finite_diff::check(
      "model_mtl_end_to_end", inputs,
      [&](auto& tape, const auto& in) {
        using T = typename std::decay_t<decltype(in[0])>::value_type;
        auto out = model::forward_task(tape, spec, rebuild(names, in, 1), model::ParamStore<T>{}, in[0], spec.task);
        return compute_batch_losses(tape, out, recs, spec.task, w, 0.0).total;
      },
      net_options(diff)));
}

}  // namespace

const std::vector<std::string_view>& gradcheck_suites() {
  static const std::vector<std::string_view> s = {"losses", "backbone", "heads", "deviation", "full"};
  return s;
}

bool GradcheckReport::passed() const {
  for (const auto& c : components)
    if (!c.passed) return false;
  return !frozen_checked || frozen_grad_max_abs == 0.0;
}

std::string GradcheckReport::to_text() const {
  std::string out = "suite=" + suite + "\nseed=" + std::to_string(seed) + "\n";
  out += "tolerance=" + format_roundtrip(finite_diff::kDefaultTolerance) + "\n";
  for (const auto& c : components) {
    char buf[64];
    std::snprintf(buf, sizeof buf, "%.3e", c.max_relative_error);
    out += c.component + " max_rel_err=" + buf + " elements=" + std::to_string(c.elements_checked) + " " +
           (c.passed ? "PASS" : "FAIL") + "\n";
  }
  if (frozen_checked) {
    char buf[64];
    std::snprintf(buf, sizeof buf, "%.3e", frozen_grad_max_abs);
    out += std::string("frozen_twin max_abs_grad=") + buf + " " + (frozen_grad_max_abs == 0.0 ? "PASS" : "FAIL") + "\n";
  }
  out += std::string("result=") + (passed() ? "PASS" : "FAIL") + "\n";
  return out;
}

GradcheckReport gradient_check(std::string_view suite, std::uint64_t seed) {
  const auto& names = gradcheck_suites();
  if (std::find(names.begin(), names.end(), suite) == names.end())
    throw ValidationError("unknown gradcheck suite '" + std::string(suite) +
                          "' (expected losses, backbone, heads, deviation or full)");
  const auto t0 = std::chrono::steady_clock::now();
  GradcheckReport rep;
  rep.suite = std::string(suite);
  rep.seed = seed;
  Rng rng(mix_seed(seed, 0x67726164ULL));
  const bool full = suite == "full";
  if (full || suite == "losses") losses_suite(rep, rng);
  if (full || suite == "backbone") backbone_suite(rep, rng, seed);
  if (full || suite == "heads") heads_suite(rep, rng, seed);
  if (full || suite == "deviation") deviation_suite(rep, rng, seed);
  if (full) model_suite(rep, rng, seed);
  rep.seconds = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
  return rep;
}

}  // namespace affkit::trainer
