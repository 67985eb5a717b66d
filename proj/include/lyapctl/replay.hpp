// Prioritized replay over a ring buffer with a sum-tree of p_i^a for O(log N) sampling.
#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <stdexcept>
#include <vector>

#include "lyapctl/numerics.hpp"

namespace lyapctl {

struct Transition {
  Vector state;        // observation (tracking error)
  Vector high_action;  // latched high-level output; empty for flat agents
  Vector low_action;   // low-level output
  Vector action;       // control applied to the plant
  double reward = 0.0;
  Vector next_state;
  bool done = false;
  std::size_t step_in_option = 0;
  double time = 0.0;
  std::size_t episode = 0;
};

class NotReadyError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

class SumTree {
 public:
  explicit SumTree(std::size_t capacity) : leaves_(1) {
    if (capacity == 0) throw ArgumentError("SumTree: capacity must be positive");
    while (leaves_ < capacity) leaves_ <<= 1;
    nodes_.assign(2 * leaves_, 0.0);
  }

  void set(std::size_t i, double value) {
    std::size_t k = i + leaves_;
    nodes_[k] = value;
    for (k >>= 1; k >= 1; k >>= 1) nodes_[k] = nodes_[2 * k] + nodes_[2 * k + 1];
  }
  double get(std::size_t i) const { return nodes_[i + leaves_]; }
  double total() const { return nodes_[1]; }

  /// Leaf whose cumulative interval contains prefix (0 <= prefix < total()).
  std::size_t find(double prefix) const {
    std::size_t k = 1;
    while (k < leaves_) {
      const double left = nodes_[2 * k];
      if (prefix < left || nodes_[2 * k + 1] == 0.0) {
        k = 2 * k;
      } else {
        prefix -= left;
        k = 2 * k + 1;
      }
    }
    return k - leaves_;
  }

 private:
  std::size_t leaves_;
  std::vector<double> nodes_;
};

class PrioritizedBuffer {
 public:
  using Id = std::uint64_t;

  struct Sample {
    std::vector<Id> ids;
    std::vector<const Transition*> items;
    Vector probabilities;
    Vector weights;  // (N P(i))^-b divided by the batch maximum
  };

  explicit PrioritizedBuffer(std::size_t capacity = 100000, double priority_exponent = 0.6,
                             double importance_exponent = 0.4, double epsilon_priority = 1e-3)
      : capacity_(capacity),
        a_(priority_exponent),
        b_(importance_exponent),
        eps_(epsilon_priority),
        tree_(capacity),
        slots_(capacity),
        priorities_(capacity, 0.0) {}

  std::size_t size() const { return static_cast<std::size_t>(std::min<Id>(next_id_, capacity_)); }
  std::size_t capacity() const { return capacity_; }
  double epsilon_priority() const { return eps_; }
  std::size_t stale_updates() const { return stale_; }
  Id next_id() const { return next_id_; }

  /// Inserts with priority max(priority, epsilon); the oldest entry is overwritten when full.
  Id push(Transition t, double priority) {
    const Id id = next_id_++;
    const std::size_t slot = static_cast<std::size_t>(id % capacity_);
    slots_[slot] = std::move(t);
    set_priority(slot, std::max(priority, eps_));
    return id;
  }

  bool contains(Id id) const { return id < next_id_ && next_id_ - id <= capacity_; }

  const Transition* find(Id id) const {
    return contains(id) ? &slots_[static_cast<std::size_t>(id % capacity_)] : nullptr;
  }

  double priority(Id id) const {
    if (!contains(id)) throw ArgumentError("PrioritizedBuffer: id not in buffer");
    return priorities_[static_cast<std::size_t>(id % capacity_)];
  }

  double probability(Id id) const {
    if (!contains(id)) throw ArgumentError("PrioritizedBuffer: id not in buffer");
    return tree_.get(static_cast<std::size_t>(id % capacity_)) / tree_.total();
  }

  Sample sample(std::size_t batch, RngStream& rng) const {
    if (batch == 0) throw ArgumentError("PrioritizedBuffer::sample: batch must be positive");
    if (size() < batch) throw NotReadyError("PrioritizedBuffer::sample: not enough transitions");
    Sample s;
    const double total = tree_.total();
    const double n = static_cast<double>(size());
    double wmax = 0.0;
    for (std::size_t k = 0; k < batch; ++k) {
      std::size_t slot = tree_.find(rng.uniform() * total);
      if (slot >= size()) slot = size() - 1;
      const double p = tree_.get(slot) / total;
      s.ids.push_back(id_of(slot));
      s.items.push_back(&slots_[slot]);
      s.probabilities.push_back(p);
      const double w = std::pow(n * p, -b_);
      s.weights.push_back(w);
      wmax = std::max(wmax, w);
    }
    for (double& w : s.weights) w /= wmax;
    return s;
  }

  /// priority = |td| + violation + epsilon. Ids that have been evicted are counted and ignored.
  void update_priority(Id id, double td_error, double violation) {
    if (!contains(id)) {
      ++stale_;
      return;
    }
    if (violation < 0.0) throw ArgumentError("update_priority: violation must be >= 0");
    set_priority(static_cast<std::size_t>(id % capacity_), std::abs(td_error) + violation + eps_);
  }

 private:
  void set_priority(std::size_t slot, double p) {
    priorities_[slot] = p;
    tree_.set(slot, std::pow(p, a_));
  }
  Id id_of(std::size_t slot) const {
    // Most recent id that maps to this slot.
    const Id last = next_id_ - 1;
    const Id last_slot = last % capacity_;
    return slot <= last_slot ? last - (last_slot - slot) : last - (last_slot + capacity_ - slot);
  }

  std::size_t capacity_;
  double a_, b_, eps_;
  SumTree tree_;
  std::vector<Transition> slots_;
  Vector priorities_;
  Id next_id_ = 0;
  std::size_t stale_ = 0;
};

}  // namespace lyapctl
