#pragma once

#include <string>
#include <utility>
#include <vector>

#include "mupad/tensor.hpp"

namespace mupad {

/// Ordered, named collection of trainable tensors. Order is construction
/// order and defines the checkpoint layout.
class ParameterSet {
 public:
  /// Registers `t` (marking it grad-requiring) and returns the stored handle.
  Tensor add(std::string name, Tensor t);
  Tensor get(const std::string& name) const;
  bool contains(const std::string& name) const;

  const std::vector<std::pair<std::string, Tensor>>& entries() const { return entries_; }
  std::vector<Tensor> tensors() const;
  std::size_t size() const { return entries_.size(); }
  std::size_t scalar_count() const;

  void zero_grad();
  /// Copies values (not handles) from `values`, which must match shapes.
  void assign(const std::vector<Tensor>& values);
  std::vector<Tensor> snapshot() const;

 private:
  std::vector<std::pair<std::string, Tensor>> entries_;
};

namespace init {

Tensor xavier_uniform(std::size_t fan_in, std::size_t fan_out, Rng& rng);
Tensor normal(Shape shape, double stddev, Rng& rng);
Tensor zeros(Shape shape);

}  // namespace init

}  // namespace mupad
