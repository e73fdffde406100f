#include "affkit/optim.hpp"

#include <charconv>
#include <cmath>
#include <numbers>

#include "affkit/error.hpp"

namespace affkit::optim {

Kind parse_kind(std::string_view name) {
  if (name == "sgd") return Kind::sgd_momentum;
  if (name == "adam") return Kind::adam;
  throw ValidationError("unknown optimizer '" + std::string(name) + "' (expected sgd or adam)");
}

std::string_view kind_name(Kind kind) { return kind == Kind::sgd_momentum ? "sgd" : "adam"; }

namespace {

void require_same(std::size_t a, std::size_t b, const char* what) {
  if (a != b)
    throw ValidationError(std::string(what) + " size mismatch: " + std::to_string(a) + " vs " + std::to_string(b));
}

model::ParamStore<float> zeros_like(const model::ParamStore<float>& params) {
  model::ParamStore<float> out;
  for (const auto& [n, t] : params.entries()) out.add(n, numkit::Tensor<float>::zeros(t.shape()));
  return out;
}

}  // namespace

void sgd_momentum_step(std::span<float> w, std::span<const float> g, std::span<float> v, double lr, double mu) {
  require_same(w.size(), g.size(), "sgd gradient");
  require_same(w.size(), v.size(), "sgd velocity");
  for (std::size_t i = 0; i < w.size(); ++i) {
    v[i] = float(mu * double(v[i]) + double(g[i]));
    w[i] = float(double(w[i]) - lr * double(v[i]));
  }
}

void adam_step(std::span<float> w, std::span<const float> g, std::span<float> m, std::span<float> s, double lr,
               const Hyper& h, std::uint64_t t) {
  require_same(w.size(), g.size(), "adam gradient");
  require_same(w.size(), m.size(), "adam first moment");
  require_same(w.size(), s.size(), "adam second moment");
  if (t == 0) throw ValidationError("adam step count starts at 1");
  const double c1 = 1.0 - std::pow(h.beta1, double(t));
  const double c2 = 1.0 - std::pow(h.beta2, double(t));
  for (std::size_t i = 0; i < w.size(); ++i) {
    const double gi = g[i];
    m[i] = float(h.beta1 * double(m[i]) + (1.0 - h.beta1) * gi);
    s[i] = float(h.beta2 * double(s[i]) + (1.0 - h.beta2) * gi * gi);
    const double mh = double(m[i]) / c1, sh = double(s[i]) / c2;
    w[i] = float(double(w[i]) - lr * mh / (std::sqrt(sh) + h.eps));
  }
}

Optimizer::Optimizer(Hyper hyper, const model::ParamStore<float>& params) : hyper_(hyper) {
  first_ = zeros_like(params);
  if (hyper_.kind == Kind::adam) second_ = zeros_like(params);
}

void Optimizer::step(model::ParamStore<float>& params, double lr) {
  if (params.size() != first_.size())
    throw ValidationError("optimizer tracks " + std::to_string(first_.size()) + " tensors, model has " +
                          std::to_string(params.size()));
  ++steps_;
  std::vector<float> zeros;
  for (std::size_t i = 0; i < params.size(); ++i) {
    auto& [name, w] = params.entries()[i];
    auto& [bname, m] = first_.entries()[i];
    if (name != bname || w.shape() != m.shape())
      throw ValidationError("optimizer buffer " + bname + " " + numkit::to_string(m.shape()) + " does not match " +
                            name + " " + numkit::to_string(w.shape()));
    std::span<const float> g = w.grad();
    if (g.empty()) {
      zeros.assign(w.size(), 0.0f);
      g = zeros;
    }
    if (hyper_.kind == Kind::sgd_momentum)
      sgd_momentum_step(w.mutable_values(), g, m.mutable_values(), lr, hyper_.momentum);
    else
      adam_step(w.mutable_values(), g, m.mutable_values(), second_.entries()[i].second.mutable_values(), lr, hyper_,
                steps_);
  }
}

void Optimizer::store(checkpoint::Checkpoint& ckpt) const {
  ckpt.set_meta("opt_kind", std::string(kind_name(hyper_.kind)));
  ckpt.set_meta("opt_steps", std::to_string(steps_));
  for (const auto& [n, t] : first_.entries()) ckpt.add("opt." + n + ".m", t.clone());
  for (const auto& [n, t] : second_.entries()) ckpt.add("opt." + n + ".v", t.clone());
}

void Optimizer::restore(const checkpoint::Checkpoint& ckpt) {
  const auto kind = parse_kind(ckpt.require_meta("opt_kind"));
  if (kind != hyper_.kind)
    throw ValidationError("checkpoint optimizer is " + std::string(kind_name(kind)) + ", config asks for " +
                          std::string(kind_name(hyper_.kind)));
  const auto text = ckpt.require_meta("opt_steps");
  std::uint64_t steps = 0;
  auto [ptr, ec] = std::from_chars(text.data(), text.data() + text.size(), steps);
  if (ec != std::errc() || ptr != text.data() + text.size())
    throw ValidationError("bad opt_steps metadata '" + text + "'");
  auto load = [&](model::ParamStore<float>& store, const char* suffix) {
    for (auto& [n, t] : store.entries()) {
      const auto& src = ckpt.get("opt." + n + suffix);
      if (src.shape() != t.shape())
        throw ValidationError("optimizer buffer opt." + n + suffix + " has shape " + numkit::to_string(src.shape()) +
                              ", expected " + numkit::to_string(t.shape()));
      t = src.clone();
    }
  };
  auto first = first_.clone(), second = second_.clone();
  load(first, ".m");
  load(second, ".v");
  first_ = std::move(first);
  second_ = std::move(second);
  steps_ = steps;
}

double cosine_lr(std::uint64_t step, std::uint64_t total_steps, double base_lr) {
  if (total_steps == 0) throw ValidationError("cosine schedule needs total_steps >= 1");
  if (step >= total_steps) return 0.0;
  return 0.5 * base_lr * (1.0 + std::cos(std::numbers::pi * double(step) / double(total_steps)));
}

}  // namespace affkit::optim
