#pragma once

#include <cmath>
#include <deque>
#include <functional>
#include <map>
#include <memory>
#include <random>
#include <string>
#include <utility>
#include <vector>

#include "fie/array.hpp"
#include "fie/error.hpp"

namespace fie {

template <typename T>
struct Parameter {
  std::string name;
  Array<T> value;
  Array<T> grad;

  Parameter(std::string n, Array<T> v)
      : name(std::move(n)), value(std::move(v)), grad(value.shape()) {}

  void zero_grad() { grad.fill(T{0}); }
};

// Owns every trainable array of a model. Registration order is the canonical
// order for checkpoints, optimizers and gradient checks.
template <typename T>
class ParameterStore {
 public:
  ParameterStore() = default;
  ParameterStore(const ParameterStore&) = delete;
  ParameterStore& operator=(const ParameterStore&) = delete;
  ParameterStore(ParameterStore&&) noexcept = default;
  ParameterStore& operator=(ParameterStore&&) noexcept = default;

  Parameter<T>& add(const std::string& name, Array<T> value) {
    if (index_.count(name)) {
      throw ContractError("duplicate parameter name '" + name + "'");
    }
    index_[name] = params_.size();
    params_.push_back(std::make_unique<Parameter<T>>(name, std::move(value)));
    return *params_.back();
  }

  Parameter<T>& get(const std::string& name) {
    auto it = index_.find(name);
    if (it == index_.end()) throw ContractError("no parameter '" + name + "'");
    return *params_[it->second];
  }
  const Parameter<T>& get(const std::string& name) const {
    auto it = index_.find(name);
    if (it == index_.end()) throw ContractError("no parameter '" + name + "'");
    return *params_[it->second];
  }
  bool contains(const std::string& name) const { return index_.count(name) > 0; }

  std::size_t size() const { return params_.size(); }
  Parameter<T>& operator[](std::size_t i) { return *params_[i]; }
  const Parameter<T>& operator[](std::size_t i) const { return *params_[i]; }

  std::size_t element_count() const {
    std::size_t n = 0;
    for (const auto& p : params_) n += p->value.size();
    return n;
  }

  void zero_grad() {
    for (auto& p : params_) p->zero_grad();
  }

 private:
  std::vector<std::unique_ptr<Parameter<T>>> params_;
  std::map<std::string, std::size_t> index_;
};

template <typename T>
class Tape;

// Handle to one node on a tape. Cheap to copy; only valid while the tape lives.
template <typename T>
class Var {
 public:
  Var() = default;
  Var(Tape<T>* tape, std::size_t id) : tape_(tape), id_(id) {}

  Tape<T>& tape() const { return *tape_; }
  std::size_t id() const { return id_; }
  const Array<T>& value() const { return tape_->value(id_); }
  const Shape& shape() const { return value().shape(); }
  std::size_t rows() const { return value().rows(); }
  std::size_t cols() const { return value().cols(); }
  bool valid() const { return tape_ != nullptr; }

 private:
  Tape<T>* tape_ = nullptr;
  std::size_t id_ = 0;
};

// Records the primitive operations of one forward pass. Nodes are appended in
// evaluation order, so reverse id order is a valid topological order for the
// backward sweep.
template <typename T>
class Tape {
 public:
  using BackwardFn = std::function<void(Tape&, const Array<T>& out_grad)>;

  explicit Tape(bool record_gradients = true) : record_(record_gradients) {}
  Tape(const Tape&) = delete;
  Tape& operator=(const Tape&) = delete;

  bool recording() const { return record_; }

  Var<T> constant(Array<T> value) {
    nodes_.push_back(Node{std::move(value), {}, false, {}});
    return Var<T>(this, nodes_.size() - 1);
  }

  Var<T> parameter(Parameter<T>& p) {
    if (!record_) return constant(p.value);
    Parameter<T>* target = &p;
    nodes_.push_back(Node{p.value, {}, true,
                          [target](Tape&, const Array<T>& g) {
                            auto dst = target->grad.values();
                            auto src = g.values();
                            for (std::size_t i = 0; i < src.size(); ++i) dst[i] += src[i];
                          }});
    return Var<T>(this, nodes_.size() - 1);
  }

  // Appends an op result. The backward closure is kept only when some input
  // needs a gradient.
  Var<T> push(Array<T> value, std::initializer_list<std::size_t> inputs,
              BackwardFn fn) {
    return push(std::move(value), std::vector<std::size_t>(inputs), std::move(fn));
  }

  Var<T> push(Array<T> value, const std::vector<std::size_t>& inputs,
              BackwardFn fn) {
    bool needs = false;
    if (record_) {
      for (std::size_t id : inputs) needs = needs || nodes_.at(id).requires_grad;
    }
    nodes_.push_back(Node{std::move(value), {}, needs,
                          needs ? std::move(fn) : BackwardFn{}});
    return Var<T>(this, nodes_.size() - 1);
  }

  const Array<T>& value(std::size_t id) const { return nodes_.at(id).value; }
  bool requires_grad(std::size_t id) const { return nodes_.at(id).requires_grad; }

  // Gradient buffer of a node, zero-initialised on first access.
  Array<T>& grad(std::size_t id) {
    Node& n = nodes_.at(id);
    if (n.grad.size() != n.value.size() || n.grad.shape() != n.value.shape()) {
      n.grad = Array<T>(n.value.shape());
    }
    return n.grad;
  }

  std::size_t size() const { return nodes_.size(); }

  // Reverse sweep from a scalar loss. Parameter gradients accumulate, so
  // several backward passes before an optimizer step sum their contributions.
  void backward(const Var<T>& loss) {
    if (&loss.tape() != this) throw ContractError("loss belongs to another tape");
    if (loss.value().size() != 1) {
      throw ContractError("backward needs a scalar loss, got shape " +
                          shape_string(loss.shape()));
    }
    if (!record_) throw ContractError("backward on a tape that does not record gradients");
    grad(loss.id())[0] = T{1};
    touched_.assign(nodes_.size(), false);
    touched_[loss.id()] = true;
    for (std::size_t k = loss.id() + 1; k-- > 0;) {
      Node& n = nodes_[k];
      if (!touched_[k] || !n.backward) continue;
      // Copy the gradient out: the closure may grow other nodes' buffers.
      const Array<T> g = n.grad;
      n.backward(*this, g);
    }
  }

  // Called by op closures before writing into an input's gradient.
  Array<T>& grad_for_input(std::size_t id) {
    if (id < touched_.size()) touched_[id] = true;
    return grad(id);
  }

 private:
  struct Node {
    Array<T> value;
    Array<T> grad;
    bool requires_grad = false;
    BackwardFn backward;
  };

  bool record_;
  std::deque<Node> nodes_;  // stable element addresses: values may be referenced across pushes
  std::vector<bool> touched_;
};

// Seeded initialisers shared by every module so that parameter creation order
// alone determines the initial weights.
template <typename T>
Array<T> random_normal(const Shape& shape, double stddev, std::mt19937_64& rng) {
  std::normal_distribution<double> dist(0.0, stddev);
  Array<T> a(shape);
  for (auto& v : a.values()) v = static_cast<T>(dist(rng));
  return a;
}

template <typename T>
Array<T> random_uniform(const Shape& shape, double lo, double hi,
                        std::mt19937_64& rng) {
  std::uniform_real_distribution<double> dist(lo, hi);
  Array<T> a(shape);
  for (auto& v : a.values()) v = static_cast<T>(dist(rng));
  return a;
}

}  // namespace fie
