#pragma once

#include <cmath>
#include <map>
#include <string>
#include <vector>

#include "gufu/error.hpp"
#include "gufu/numerics/matrix.hpp"
#include "gufu/numerics/rng.hpp"

namespace gufu {

/// One trainable tensor with its gradient accumulator and Adam moments.
struct ParamEntry {
  std::string name;
  Matrix value;
  Matrix grad;
  Matrix first_moment;
  Matrix second_moment;
};

/// Named trainable parameters in insertion order.
class ParamSet {
 public:
  ParamEntry& add(const std::string& name, Matrix value) {
    if (index_.contains(name)) throw ContractError("ParamSet: duplicate entry " + name);
    index_.emplace(name, entries_.size());
    const std::size_t r = value.rows(), c = value.cols();
    entries_.push_back(ParamEntry{name, std::move(value), Matrix(r, c), Matrix(r, c),
                                  Matrix(r, c)});
    return entries_.back();
  }

  bool contains(const std::string& name) const { return index_.contains(name); }

  ParamEntry& at(const std::string& name) { return entries_[lookup(name)]; }
  const ParamEntry& at(const std::string& name) const { return entries_[lookup(name)]; }

  const Matrix& value(const std::string& name) const { return at(name).value; }

  /// Replace a value; resets the gradient and optimizer moments for it.
  void set(const std::string& name, Matrix value) {
    auto& e = at(name);
    const std::size_t r = value.rows(), c = value.cols();
    e.value = std::move(value);
    e.grad = Matrix(r, c);
    e.first_moment = Matrix(r, c);
    e.second_moment = Matrix(r, c);
  }

  std::vector<ParamEntry>& entries() { return entries_; }
  const std::vector<ParamEntry>& entries() const { return entries_; }
  std::size_t size() const { return entries_.size(); }

  void zero_grad() {
    for (auto& e : entries_) e.grad.fill(0.0);
  }

  void reset_optimizer_state() {
    for (auto& e : entries_) {
      e.first_moment.fill(0.0);
      e.second_moment.fill(0.0);
    }
  }

  std::size_t parameter_count() const {
    std::size_t n = 0;
    for (const auto& e : entries_) n += e.value.size();
    return n;
  }

  friend bool operator==(const ParamSet& a, const ParamSet& b) {
    if (a.entries_.size() != b.entries_.size()) return false;
    for (std::size_t i = 0; i < a.entries_.size(); ++i) {
      if (a.entries_[i].name != b.entries_[i].name) return false;
      if (!(a.entries_[i].value == b.entries_[i].value)) return false;
    }
    return true;
  }

 private:
  std::size_t lookup(const std::string& name) const {
    auto it = index_.find(name);
    if (it == index_.end()) throw ContractError("ParamSet: no entry " + name);
    return it->second;
  }

  std::vector<ParamEntry> entries_;
  std::map<std::string, std::size_t> index_;
};

/// Xavier-uniform initialized fan_in x fan_out weight.
inline Matrix xavier_uniform(std::size_t fan_in, std::size_t fan_out, Rng& rng) {
  const double limit = std::sqrt(6.0 / static_cast<double>(fan_in + fan_out));
  Matrix w(fan_in, fan_out);
  for (double& v : w.values()) v = rng.uniform(-limit, limit);
  return w;
}

enum class OptimizerKind { adam, sgd };

struct OptimizerConfig {
  OptimizerKind kind = OptimizerKind::adam;
  double lr = 0.01;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double eps = 1e-8;
};

/// Applies one update from the accumulated gradients, then zeroes them.
class Optimizer {
 public:
  explicit Optimizer(OptimizerConfig config = {}) : config_(config) {}

  const OptimizerConfig& config() const { return config_; }
  long steps() const { return steps_; }

  void step(ParamSet& params) {
    ++steps_;
    const double bc1 = 1.0 - std::pow(config_.beta1, static_cast<double>(steps_));
    const double bc2 = 1.0 - std::pow(config_.beta2, static_cast<double>(steps_));
    for (auto& e : params.entries()) {
      auto value = e.value.values();
      auto grad = e.grad.values();
      if (config_.kind == OptimizerKind::sgd) {
        for (std::size_t i = 0; i < value.size(); ++i) value[i] -= config_.lr * grad[i];
      } else {
        auto m = e.first_moment.values();
        auto v = e.second_moment.values();
        for (std::size_t i = 0; i < value.size(); ++i) {
          m[i] = config_.beta1 * m[i] + (1.0 - config_.beta1) * grad[i];
          v[i] = config_.beta2 * v[i] + (1.0 - config_.beta2) * grad[i] * grad[i];
          const double mhat = m[i] / bc1;
          const double vhat = v[i] / bc2;
          value[i] -= config_.lr * mhat / (std::sqrt(vhat) + config_.eps);
        }
      }
      e.grad.fill(0.0);
    }
  }

 private:
  OptimizerConfig config_;
  long steps_ = 0;
};

/// Single plain update of every entry with learning rate `lr`.
inline void optimizer_step(ParamSet& params, double lr,
                           OptimizerKind kind = OptimizerKind::sgd) {
  Optimizer opt(OptimizerConfig{.kind = kind, .lr = lr});
  opt.step(params);
}

}  // namespace gufu
