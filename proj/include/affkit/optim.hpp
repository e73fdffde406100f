#pragma once

// First-order optimizers over a named parameter store, and the cosine schedule.

#include <cstdint>
#include <string>
#include <string_view>
#include <vector>

#include "affkit/checkpoint.hpp"
#include "affkit/model.hpp"

namespace affkit::optim {

enum class Kind { sgd_momentum, adam };

Kind parse_kind(std::string_view name);
std::string_view kind_name(Kind kind);

struct Hyper {
  Kind kind = Kind::adam;
  double momentum = 0.9;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double eps = 1e-8;
};

/// v <- mu v + g;  w <- w - lr v
void sgd_momentum_step(std::span<float> w, std::span<const float> g, std::span<float> v, double lr, double mu);

/// Bias-corrected Adam for step number `t` (1-based).
void adam_step(std::span<float> w, std::span<const float> g, std::span<float> m, std::span<float> s, double lr,
               const Hyper& h, std::uint64_t t);

class Optimizer {
 public:
  Optimizer(Hyper hyper, const model::ParamStore<float>& params);

  /// One update of every parameter from its accumulated gradient. Parameters
  /// that never received a gradient are treated as having a zero gradient.
  void step(model::ParamStore<float>& params, double lr);

  const Hyper& hyper() const { return hyper_; }
  std::uint64_t steps() const { return steps_; }
  const model::ParamStore<float>& first() const { return first_; }
  const model::ParamStore<float>& second() const { return second_; }

  /// Buffers go under "opt.<name>.m" (and ".v" for Adam); kind and step count
  /// go in metadata.
  void store(checkpoint::Checkpoint& ckpt) const;
  void restore(const checkpoint::Checkpoint& ckpt);

 private:
  Hyper hyper_;
  std::uint64_t steps_ = 0;
  model::ParamStore<float> first_;   // SGD velocity or Adam first moment
  model::ParamStore<float> second_;  // Adam second moment
};

/// 0.5 base (1 + cos(pi step / total)); 0 once step passes total.
double cosine_lr(std::uint64_t step, std::uint64_t total_steps, double base_lr);

}  // namespace affkit::optim
