#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <vector>

#include "fie/autodiff.hpp"
#include "fie/error.hpp"

namespace fie {

// Linear warmup from zero to the peak rate over `warmup_fraction` of the run,
// then linear decay to zero at the final step.
struct LinearSchedule {
  double peak_rate = 1e-3;
  std::int64_t total_steps = 1;
  double warmup_fraction = 0.1;

  double rate(double position) const {
    if (peak_rate < 0.0) throw ConfigError("learning rate must be non-negative");
    if (total_steps <= 0) throw ConfigError("schedule needs at least one step");
    const double total = static_cast<double>(total_steps);
    const double warmup = warmup_fraction * total;
    position = std::clamp(position, 0.0, total);
    if (warmup > 0.0 && position < warmup) return peak_rate * position / warmup;
    if (total <= warmup) return peak_rate;
    return peak_rate * (total - position) / (total - warmup);
  }
};

struct AdamSettings {
  double beta1 = 0.9;
  double beta2 = 0.999;
  double epsilon = 1e-8;
};

template <typename T>
class Adam {
 public:
  explicit Adam(ParameterStore<T>& store, AdamSettings settings = {})
      : store_(&store), settings_(settings) {
    for (std::size_t i = 0; i < store.size(); ++i) {
      first_.emplace_back(store[i].value.shape());
      second_.emplace_back(store[i].value.shape());
    }
  }

  // One update at `learning_rate`; gradients are zeroed afterwards.
  void step(double learning_rate) {
    if (learning_rate < 0.0) throw ConfigError("negative learning rate");
    ++steps_;
    const double c1 = 1.0 - std::pow(settings_.beta1, static_cast<double>(steps_));
    const double c2 = 1.0 - std::pow(settings_.beta2, static_cast<double>(steps_));
    for (std::size_t k = 0; k < store_->size(); ++k) {
      Parameter<T>& p = (*store_)[k];
      auto& m = first_[k];
      auto& v = second_[k];
      for (std::size_t i = 0; i < p.value.size(); ++i) {
        const double g = p.grad[i];
        const double mi = settings_.beta1 * m[i] + (1.0 - settings_.beta1) * g;
        const double vi = settings_.beta2 * v[i] + (1.0 - settings_.beta2) * g * g;
        m[i] = static_cast<T>(mi);
        v[i] = static_cast<T>(vi);
        const double update = learning_rate * (mi / c1) / (std::sqrt(vi / c2) + settings_.epsilon);
        p.value[i] = static_cast<T>(p.value[i] - update);
      }
      p.zero_grad();
    }
  }

  // Scheduled update: the rate comes from `schedule` at `position`.
  void step(const LinearSchedule& schedule, double position) { step(schedule.rate(position)); }

  std::int64_t steps() const { return steps_; }
  void set_steps(std::int64_t s) { steps_ = s; }
  std::vector<Array<T>>& first_moments() { return first_; }
  std::vector<Array<T>>& second_moments() { return second_; }
  const std::vector<Array<T>>& first_moments() const { return first_; }
  const std::vector<Array<T>>& second_moments() const { return second_; }

 private:
  ParameterStore<T>* store_;
  AdamSettings settings_;
  std::vector<Array<T>> first_;
  std::vector<Array<T>> second_;
  std::int64_t steps_ = 0;
};

// Scales all gradients so that their joint L2 norm is at most `max_norm`.
// Returns the norm before clipping.
template <typename T>
double clip_global_norm(ParameterStore<T>& store, double max_norm) {
  double sq = 0.0;
  for (std::size_t k = 0; k < store.size(); ++k)
    for (T g : store[k].grad.values()) sq += static_cast<double>(g) * g;
  const double norm = std::sqrt(sq);
  if (norm > max_norm && norm > 0.0) {
    const T factor = static_cast<T>(max_norm / norm);
    for (std::size_t k = 0; k < store.size(); ++k)
      for (T& g : store[k].grad.values()) g *= factor;
  }
  return norm;
}

}  // namespace fie
