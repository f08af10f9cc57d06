#include "mupad/params.hpp"

#include <algorithm>
#include <cmath>

namespace mupad {

Tensor ParameterSet::add(std::string name, Tensor t) {
  if (contains(name)) throw Error("duplicate parameter name: " + name);
  t.set_requires_grad(true);
  entries_.emplace_back(std::move(name), t);
  return t;
}

Tensor ParameterSet::get(const std::string& name) const {
  for (const auto& [n, t] : entries_) {
    if (n == name) return t;
  }
  throw Error("unknown parameter: " + name);
}

bool ParameterSet::contains(const std::string& name) const {
  return std::any_of(entries_.begin(), entries_.end(), [&](const auto& e) { return e.first == name; });
}

std::vector<Tensor> ParameterSet::tensors() const {
  std::vector<Tensor> out;
  out.reserve(entries_.size());
  for (const auto& e : entries_) out.push_back(e.second);
  return out;
}

std::size_t ParameterSet::scalar_count() const {
  std::size_t n = 0;
  for (const auto& e : entries_) n += e.second.numel();
  return n;
}

void ParameterSet::zero_grad() {
  for (auto& e : entries_) e.second.zero_grad();
}

void ParameterSet::assign(const std::vector<Tensor>& values) {
  if (values.size() != entries_.size()) throw ShapeError("parameter count mismatch on assign");
  for (std::size_t i = 0; i < values.size(); ++i) {
    auto& dst = entries_[i].second;
    if (dst.shape() != values[i].shape()) {
      throw ShapeError("shape mismatch for parameter " + entries_[i].first + ": " + shape_str(dst.shape()) +
                       " vs " + shape_str(values[i].shape()));
    }
    std::copy(values[i].data().begin(), values[i].data().end(), dst.mutable_data().begin());
  }
}

std::vector<Tensor> ParameterSet::snapshot() const {
  std::vector<Tensor> out;
  for (const auto& e : entries_) {
    Tensor c = e.second.clone();
    c.set_requires_grad(false);
    out.push_back(c);
  }
  return out;
}

namespace init {

Tensor xavier_uniform(std::size_t fan_in, std::size_t fan_out, Rng& rng) {
  const double bound = std::sqrt(6.0 / static_cast<double>(fan_in + fan_out));
  return Tensor::uniform({fan_in, fan_out}, rng, -bound, bound);
}

Tensor normal(Shape shape, double stddev, Rng& rng) { return Tensor::randn(std::move(shape), rng, stddev); }

Tensor zeros(Shape shape) { return Tensor(std::move(shape), 0.0); }

}  // namespace init

}  // namespace mupad
