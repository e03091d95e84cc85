#pragma once

#include <algorithm>
#include <cmath>
#include <functional>
#include <limits>
#include <string>
#include <vector>

#include "fie/autodiff.hpp"

namespace fie {

struct ParameterCheck {
  std::string name;
  std::size_t elements = 0;
  double worst_relative_error = 0.0;
  double worst_absolute_error = 0.0;
  std::size_t worst_index = 0;
  bool passed = true;
};

struct GradientCheckReport {
  std::vector<ParameterCheck> parameters;
  bool passed() const {
    return std::all_of(parameters.begin(), parameters.end(),
                       [](const ParameterCheck& p) { return p.passed; });
  }
  double worst_relative_error() const {
    double w = 0.0;
    for (const auto& p : parameters) w = std::max(w, p.worst_relative_error);
    return w;
  }
};

// Central difference of the loss with respect to one element of `p`, with
// h = cbrt(machine epsilon) * (|v| + 1).
template <typename T>
double numeric_derivative(const std::function<Var<T>(Tape<T>&)>& build_loss, Parameter<T>& p,
                          std::size_t index) {
  auto evaluate = [&]() -> double {
    Tape<T> tape(false);
    return static_cast<double>(build_loss(tape).value()[0]);
  };
  const T original = p.value[index];
  const double step_base = std::cbrt(std::numeric_limits<T>::epsilon());
  const T h = static_cast<T>(step_base * (std::abs(static_cast<double>(original)) + 1.0));
  p.value[index] = original + h;
  const double up = evaluate();
  p.value[index] = original - h;
  const double down = evaluate();
  p.value[index] = original;
  // the step actually representable in T
  const double width = static_cast<double>((original + h) - (original - h));
  return (up - down) / width;
}

// Compares reverse-mode gradients against central differences. `build_loss`
// records a fresh forward pass on the tape it is given and returns the scalar
// loss; it must depend only on the current parameter values.
//
// Step: h = cbrt(machine epsilon) * (|v| + 1). An element passes when its
// absolute error is within abs_tol or its relative error within rel_tol.
template <typename T>
GradientCheckReport finite_diff_check(
    const std::function<Var<T>(Tape<T>&)>& build_loss,
    std::vector<Parameter<T>*> params, double rel_tol, double abs_tol) {
  auto evaluate = [&]() -> double {
    Tape<T> tape(false);
    return static_cast<double>(build_loss(tape).value()[0]);
  };

  const double first = evaluate();
  const double second = evaluate();
  if (!(first == second) && !(std::isnan(first) && std::isnan(second))) {
    throw DeterminismError("loss function is not deterministic: " + std::to_string(first) +
                           " vs " + std::to_string(second));
  }

  for (auto* p : params) p->zero_grad();
  {
    Tape<T> tape(true);
    tape.backward(build_loss(tape));
  }
  std::vector<Array<T>> analytic;
  for (auto* p : params) analytic.push_back(p->grad);

  GradientCheckReport report;
  for (std::size_t k = 0; k < params.size(); ++k) {
    Parameter<T>& p = *params[k];
    ParameterCheck check;
    check.name = p.name;
    check.elements = p.value.size();
    for (std::size_t i = 0; i < p.value.size(); ++i) {
      const double numeric = numeric_derivative(build_loss, p, i);
      const double exact = static_cast<double>(analytic[k][i]);
      const double abs_err = std::abs(exact - numeric);
      const double scale = std::max(std::abs(exact), std::abs(numeric));
      const double rel_err = scale > 0.0 ? abs_err / scale : 0.0;
      const bool ok = abs_err <= abs_tol || rel_err <= rel_tol;
      if (abs_err > abs_tol && rel_err > check.worst_relative_error) {
        check.worst_relative_error = rel_err;
        check.worst_index = i;
      }
      check.worst_absolute_error = std::max(check.worst_absolute_error, abs_err);
      check.passed = check.passed && ok;
    }
    report.parameters.push_back(check);
  }
  return report;
}

template <typename T>
std::vector<Parameter<T>*> all_parameters(ParameterStore<T>& store) {
  std::vector<Parameter<T>*> out;
  for (std::size_t i = 0; i < store.size(); ++i) out.push_back(&store[i]);
  return out;
}

}  // namespace fie
