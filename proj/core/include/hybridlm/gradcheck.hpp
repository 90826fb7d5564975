// Central finite-difference gradient checking. The oracle side of every
// gradient test: it perturbs raw parameter entries and re-runs the forward
// function, so it is independent of the tape machinery it validates.

#pragma once

#include <cmath>
#include <functional>
#include <string>
#include <utility>
#include <vector>

#include "hybridlm/tensor.hpp"

namespace hybridlm {

template <class T>
struct GradCheckEntry {
  std::string name;
  int64_t index = 0;      // flat index of the worst element within the tensor
  T analytic = T(0);
  T numeric = T(0);
  T rel_error = T(0);
};

template <class T>
struct GradCheckReport {
  std::vector<GradCheckEntry<T>> per_param;
  T max_rel_error = T(0);
  std::string worst_param;

  bool ok(T tol) const { return max_rel_error < tol; }
};

// f must be a deterministic scalar function of the parameter values.
// Analytic gradients are computed once with the tape; each parameter entry is
// then perturbed by ±eps for central differences. Relative error uses
// |a - n| / max(1, |a|, |n|) so near-zero gradients are compared absolutely.
template <class T>
GradCheckReport<T> grad_check(const std::function<TensorT<T>()>& f,
                              std::vector<std::pair<std::string, TensorT<T>>> params,
                              T eps = T(1e-3)) {
  GradCheckReport<T> report;

  for (auto& [name, p] : params) p.clear_grad();
  {
    TapeT<T> tape;
    TapeScopeT<T> scope(tape);
    TensorT<T> loss = f();
    tape.backward(loss);
  }

  NoGradGuardT<T> no_grad;  // finite-difference evals must not touch any tape
  for (auto& [name, p] : params) {
    GradCheckEntry<T> worst;
    worst.name = name;
    for (int64_t i = 0; i < p.numel(); ++i) {
      T saved = p.data()[i];
      p.data()[i] = saved + eps;
      T up = f().item();
      p.data()[i] = saved - eps;
      T down = f().item();
      p.data()[i] = saved;
      T numeric = (up - down) / (T(2) * eps);
      T analytic = p.has_grad() ? p.grad()[static_cast<size_t>(i)] : T(0);
      T denom = std::max(T(1), std::max(std::abs(analytic), std::abs(numeric)));
      T rel = std::abs(analytic - numeric) / denom;
      if (rel >= worst.rel_error) {
        worst.index = i;
        worst.analytic = analytic;
        worst.numeric = numeric;
        worst.rel_error = rel;
      }
    }
    if (worst.rel_error > report.max_rel_error) {
      report.max_rel_error = worst.rel_error;
      report.worst_param = name;
    }
    report.per_param.push_back(std::move(worst));
  }
  return report;
}

}  // namespace hybridlm
