#pragma once

// Central-difference gradient oracle.
//
// A probe is a generic callable `(Tape<T>&, const std::vector<Tensor<T>>&)
// -> Tensor<T>` returning a scalar. The analytic side runs the probe in
// 32-bit (or 64-bit on request) with every input watched and calls
// backward(); the numeric side
// re-runs the same probe instantiated in 64-bit with each input element
// perturbed by +/-eps. Element error is |a - n| / max(|a|, |n|, floor).

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <string>
#include <vector>

#include "affkit/numkit/tape.hpp"
#include "affkit/numkit/tensor.hpp"

namespace affkit::finite_diff {

inline constexpr double kDefaultEpsilon = 1e-3;
inline constexpr double kDefaultTolerance = 1e-3;
inline constexpr double kDefaultFloor = 1e-5;

inline double relative_error(double analytic, double numeric, double floor = kDefaultFloor) {
  return std::abs(analytic - numeric) / std::max({std::abs(analytic), std::abs(numeric), floor});
}

struct Result {
  std::string component;
  double max_relative_error = 0.0;
  std::size_t elements_checked = 0;
  bool passed = true;
  // Location and values of the worst element.
  std::size_t worst_input = 0;
  std::size_t worst_index = 0;
  double worst_analytic = 0.0;
  double worst_numeric = 0.0;
  // Analytic gradients per input, in input order.
  std::vector<std::vector<double>> analytic;
};

struct Options {
  double epsilon = kDefaultEpsilon;
  double tolerance = kDefaultTolerance;
  double floor = kDefaultFloor;
  // Inputs with `false` are passed as constants; empty means all are checked.
  std::vector<bool> differentiable;
  // Run the analytic side in 64-bit as well, so tiny gradient elements are
  // not dominated by 32-bit accumulation error.
  bool analytic_in_double = false;
  // Extra probes at eps/10, eps/100, ... for elements over tolerance.
  int refinements = 0;
};

template <class Probe>
Result check(std::string component, const std::vector<numkit::Tensor<float>>& inputs, Probe&& probe,
             const Options& options = {}) {
  using numkit::Tape;
  using numkit::Tensor;
  auto wants = [&](std::size_t i) { return options.differentiable.empty() || options.differentiable.at(i); };

  Result result;
  result.component = std::move(component);

  auto analytic = [&]<class T>(std::vector<Tensor<T>> copies) {
    {
      Tape<T> tape;
      std::vector<Tensor<T>> watched;
      for (std::size_t i = 0; i < copies.size(); ++i) watched.push_back(wants(i) ? tape.watch(copies[i]) : copies[i]);
      auto loss = probe(tape, watched);
      tape.backward(loss);
    }
    for (std::size_t i = 0; i < copies.size(); ++i) {
      auto g = copies[i].grad();
      result.analytic.emplace_back(g.begin(), g.end());
      if (result.analytic.back().empty()) result.analytic.back().assign(copies[i].size(), 0.0);
    }
  };
  if (options.analytic_in_double) {
    std::vector<Tensor<double>> copies;
    for (const auto& t : inputs) copies.push_back(t.template cast<double>());
    analytic(std::move(copies));
  } else {
    std::vector<Tensor<float>> copies;
    for (const auto& t : inputs) copies.push_back(t.clone());
    analytic(std::move(copies));
  }

  std::vector<Tensor<double>> f64;
  for (const auto& t : inputs) f64.push_back(t.template cast<double>());
  auto evaluate = [&]() {
    Tape<double> tape;
    return double(probe(tape, f64).item());
  };
  for (std::size_t i = 0; i < f64.size(); ++i) {
    if (!wants(i)) continue;
    auto values = f64[i].mutable_values();
    for (std::size_t k = 0; k < values.size(); ++k) {
      const double original = values[k];
      auto central = [&](double eps) {
        values[k] = original + eps;
        const double up = evaluate();
        values[k] = original - eps;
        const double down = evaluate();
        values[k] = original;
        return (up - down) / (2.0 * eps);
      };
      double numeric = central(options.epsilon);
      double err = relative_error(result.analytic[i][k], numeric, options.floor);
      // A smooth function agrees at every step size; a probe that straddles a
      // kink stops straddling it once the step is small enough.
      double eps = options.epsilon;
      for (int r = 0; r < options.refinements && err >= options.tolerance; ++r) {
        eps /= 10.0;
        const double n2 = central(eps);
        const double e2 = relative_error(result.analytic[i][k], n2, options.floor);
        if (e2 < err) err = e2, numeric = n2;
      }
      if (err > result.max_relative_error || result.elements_checked == 0) {
        result.max_relative_error = err;
        result.worst_input = i;
        result.worst_index = k;
        result.worst_analytic = result.analytic[i][k];
        result.worst_numeric = numeric;
      }
      ++result.elements_checked;
    }
  }
  result.passed = result.max_relative_error < options.tolerance;
  return result;
}

}  // namespace affkit::finite_diff
