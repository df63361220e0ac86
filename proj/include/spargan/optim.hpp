// Named parameter sets with optimizer slots, plus SGD-with-momentum and Adam.
#pragma once

#include <cmath>
#include <cstdint>
#include <map>
#include <string>
#include <vector>

#include "spargan/autodiff.hpp"
#include "spargan/rng.hpp"

namespace spargan {

struct Parameter {
  std::string name;
  Tensor value;
  Tensor first_moment;   // SGD velocity, or Adam's m
  Tensor second_moment;  // Adam's v
};

class ParamSet {
 public:
  Parameter& add(std::string name, Tensor value) {
    if (find(name)) throw Error("param set: duplicate parameter " + name);
    Tensor zeros(value.shape(), 0.0);
    params_.push_back(Parameter{std::move(name), std::move(value), zeros, zeros});
    return params_.back();
  }

  // Replaces the tensor of an existing parameter and resets its slots.
  void reset(const std::string& name, Tensor value) {
    Parameter& p = get(name);
    p.first_moment = Tensor(value.shape(), 0.0);
    p.second_moment = Tensor(value.shape(), 0.0);
    p.value = std::move(value);
  }

  Parameter* find(const std::string& name) {
    for (auto& p : params_) {
      if (p.name == name) return &p;
    }
    return nullptr;
  }
  const Parameter* find(const std::string& name) const {
    return const_cast<ParamSet*>(this)->find(name);
  }

  Parameter& get(const std::string& name) {
    if (Parameter* p = find(name)) return *p;
    throw Error("param set: no parameter named " + name);
  }
  const Parameter& get(const std::string& name) const {
    return const_cast<ParamSet*>(this)->get(name);
  }

  const Tensor& operator[](const std::string& name) const { return get(name).value; }

  std::vector<Parameter>& entries() { return params_; }
  const std::vector<Parameter>& entries() const { return params_; }

  std::uint64_t step() const { return step_; }
  void set_step(std::uint64_t s) { step_ = s; }
  void advance() { ++step_; }

  void clear_slots() {
    for (auto& p : params_) {
      p.first_moment.fill(0.0);
      p.second_moment.fill(0.0);
    }
    step_ = 0;
  }

  std::size_t parameter_count() const {
    std::size_t n = 0;
    for (const auto& p : params_) n += p.value.size();
    return n;
  }

  // Registers every parameter on the tape. Trainable sets become gradient
  // leaves; frozen ones become constants.
  std::map<std::string, NodeId> bind(Tape& tape, bool trainable) const {
    std::map<std::string, NodeId> ids;
    for (const auto& p : params_) {
      ids[p.name] = trainable ? tape.param(p.name, p.value) : tape.constant(p.value);
    }
    return ids;
  }

  friend bool operator==(const ParamSet& a, const ParamSet& b) {
    if (a.params_.size() != b.params_.size() || a.step_ != b.step_) return false;
    for (std::size_t i = 0; i < a.params_.size(); ++i) {
      const auto& x = a.params_[i];
      const auto& y = b.params_[i];
      if (x.name != y.name || !(x.value == y.value) || !(x.first_moment == y.first_moment) ||
          !(x.second_moment == y.second_moment)) {
        return false;
      }
    }
    return true;
  }

  // Parameter values only, ignoring slots and step counter.
  bool same_values(const ParamSet& other) const {
    if (params_.size() != other.params_.size()) return false;
    for (std::size_t i = 0; i < params_.size(); ++i) {
      if (params_[i].name != other.params_[i].name || !(params_[i].value == other.params_[i].value)) {
        return false;
      }
    }
    return true;
  }

 private:
  std::vector<Parameter> params_;
  std::uint64_t step_ = 0;
};

namespace detail {

inline const Tensor& gradient_for(const NamedTensors& grads, const Parameter& p) {
  auto it = grads.find(p.name);
  if (it == grads.end()) throw Error("optimizer: no gradient for parameter " + p.name);
  if (it->second.shape() != p.value.shape()) {
    throw ShapeError("optimizer: gradient for " + p.name + " has shape " +
                     shape_string(it->second.shape()) + ", parameter has " +
                     shape_string(p.value.shape()));
  }
  return it->second;
}

}  // namespace detail

// v <- momentum * v + g;  theta <- theta - rate * v
inline void sgd_momentum_step(ParamSet& params, const NamedTensors& grads, double rate,
                              double momentum) {
  if (!(rate > 0.0)) throw Error("sgd: rate must be positive");
  if (momentum < 0.0 || momentum >= 1.0) throw Error("sgd: momentum must lie in [0, 1)");
  for (auto& p : params.entries()) detail::gradient_for(grads, p);
  for (auto& p : params.entries()) {
    const Tensor& g = detail::gradient_for(grads, p);
    auto theta = p.value.values();
    auto v = p.first_moment.values();
    for (std::size_t i = 0; i < theta.size(); ++i) {
      v[i] = momentum * v[i] + g[i];
      theta[i] -= rate * v[i];
    }
  }
  params.advance();
}

struct AdamSettings {
  double rate = 2e-4;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double epsilon = 1e-8;
};

// Bias-corrected Adam.
inline void adam_step(ParamSet& params, const NamedTensors& grads, const AdamSettings& s) {
  if (!(s.rate > 0.0)) throw Error("adam: rate must be positive");
  for (auto& p : params.entries()) detail::gradient_for(grads, p);
  params.advance();
  const double t = static_cast<double>(params.step());
  const double correction1 = 1.0 - std::pow(s.beta1, t);
  const double correction2 = 1.0 - std::pow(s.beta2, t);
  for (auto& p : params.entries()) {
    const Tensor& g = detail::gradient_for(grads, p);
    auto theta = p.value.values();
    auto m = p.first_moment.values();
    auto v = p.second_moment.values();
    for (std::size_t i = 0; i < theta.size(); ++i) {
      m[i] = s.beta1 * m[i] + (1.0 - s.beta1) * g[i];
      v[i] = s.beta2 * v[i] + (1.0 - s.beta2) * g[i] * g[i];
      const double m_hat = m[i] / correction1;
      const double v_hat = v[i] / correction2;
      theta[i] -= s.rate * m_hat / (std::sqrt(v_hat) + s.epsilon);
    }
  }
}

// Gaussian initialization with standard deviation `scale`.
inline Tensor random_normal(Shape shape, double scale, Rng& rng) {
  Tensor t(std::move(shape));
  for (double& v : t.values()) v = scale * rng.normal();
  return t;
}

// N(0, 1 / fan_in) entries for a [fan_in, fan_out] weight matrix.
inline Tensor random_normal_fan_in(Shape shape, Rng& rng) {
  const double scale = 1.0 / std::sqrt(static_cast<double>(shape.front()));
  return random_normal(std::move(shape), scale, rng);
}

}  // namespace spargan
