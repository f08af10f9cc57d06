#include "mupad/tensor.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>
#include <sstream>

namespace mupad {

std::size_t shape_numel(const Shape& shape) {
  return std::accumulate(shape.begin(), shape.end(), std::size_t{1}, std::multiplies<>());
}

std::string shape_str(const Shape& shape) {
  std::ostringstream os;
  os << '[';
  for (std::size_t i = 0; i < shape.size(); ++i) {
    if (i) os << ',';
    os << shape[i];
  }
  os << ']';
  return os.str();
}

std::uint64_t derive_seed(std::uint64_t seed, std::uint64_t stream) {
  // splitmix64 over a combined key
  std::uint64_t z = seed + 0x9e3779b97f4a7c15ULL * (stream + 1);
  z = (z ^ (z >> 30)) * 0xbf58476d1ce4e5b9ULL;
  z = (z ^ (z >> 27)) * 0x94d049bb133111ebULL;
  return z ^ (z >> 31);
}

Tensor::Tensor(Shape shape, double fill) : impl_(std::make_shared<TensorImpl>()) {
  impl_->data.assign(shape_numel(shape), fill);
  impl_->shape = std::move(shape);
}

Tensor::Tensor(Shape shape, std::vector<double> data) : impl_(std::make_shared<TensorImpl>()) {
  if (shape_numel(shape) != data.size()) {
    throw ShapeError("tensor data length " + std::to_string(data.size()) + " does not match shape " +
                     shape_str(shape));
  }
  impl_->shape = std::move(shape);
  impl_->data = std::move(data);
}

Tensor Tensor::scalar(double v) { return Tensor(Shape{}, std::vector<double>{v}); }

Tensor Tensor::randn(Shape shape, Rng& rng, double stddev) {
  Tensor t(std::move(shape));
  std::normal_distribution<double> dist(0.0, stddev);
  for (double& x : t.impl_->data) x = dist(rng);
  return t;
}

Tensor Tensor::uniform(Shape shape, Rng& rng, double lo, double hi) {
  Tensor t(std::move(shape));
  std::uniform_real_distribution<double> dist(lo, hi);
  for (double& x : t.impl_->data) x = dist(rng);
  return t;
}

const Shape& Tensor::shape() const {
  if (!impl_) throw Error("use of undefined tensor");
  return impl_->shape;
}

std::size_t Tensor::dim(std::size_t i) const {
  const auto& s = shape();
  if (i >= s.size()) throw ShapeError("dim index out of range for " + shape_str(s));
  return s[i];
}

std::size_t Tensor::numel() const { return impl_ ? impl_->data.size() : 0; }

std::span<const double> Tensor::data() const {
  if (!impl_) throw Error("use of undefined tensor");
  return impl_->data;
}

std::span<double> Tensor::mutable_data() {
  if (!impl_) throw Error("use of undefined tensor");
  return impl_->data;
}

double Tensor::item() const {
  if (numel() != 1) throw ShapeError("item() on tensor of shape " + shape_str(shape()));
  return impl_->data[0];
}

Tensor& Tensor::set_requires_grad(bool on) {
  impl_->requires_grad = on;
  return *this;
}

std::span<const double> Tensor::grad() const {
  if (!impl_) throw Error("use of undefined tensor");
  return impl_->grad;
}

std::span<double> Tensor::grad_buffer() const {
  if (impl_->grad.empty()) impl_->grad.assign(impl_->data.size(), 0.0);
  return impl_->grad;
}

void Tensor::zero_grad() {
  if (impl_) impl_->grad.clear();
}

Tensor Tensor::clone() const {
  Tensor t(shape(), impl_->data);
  t.impl_->requires_grad = impl_->requires_grad;
  return t;
}

Tensor Tensor::view(Shape shape) const {
  if (shape_numel(shape) != numel()) {
    throw ShapeError("cannot view " + shape_str(this->shape()) + " as " + shape_str(shape));
  }
  Tensor t;
  t.impl_ = std::make_shared<TensorImpl>();
  t.impl_->shape = std::move(shape);
  t.impl_->data = impl_->data;
  return t;
}

void check_finite(const Tensor& t, const char* where) {
  for (double v : t.data()) {
    if (!std::isfinite(v)) throw NumericError(std::string("non-finite value produced by ") + where);
  }
}

// ---------------------------------------------------------------------------

namespace {
thread_local Tape* g_active_tape = nullptr;
}

void Tape::record(TapeNode node) { nodes_.push_back(std::move(node)); }

std::size_t Tape::count(const std::string& op) const {
  std::size_t n = 0;
  for (const auto& node : nodes_) n += node.op == op;
  return n;
}

void Tape::backward(const Tensor& loss) {
  if (loss.numel() != 1 || !loss.shape().empty()) {
    throw ShapeError("backward requires a scalar loss, got " + shape_str(loss.shape()));
  }
  check_finite(loss, "loss");
  if (!loss.requires_grad()) return;
  Tensor seed = loss;
  seed.grad_buffer()[0] += 1.0;
  for (auto it = nodes_.rbegin(); it != nodes_.rend(); ++it) {
    if (!it->output.has_grad()) continue;
    it->backward(it->output.grad());
  }
}

TapeScope::TapeScope(Tape& tape) : previous_(g_active_tape) { g_active_tape = &tape; }
TapeScope::~TapeScope() { g_active_tape = previous_; }

Tape* active_tape() { return g_active_tape; }

void backward(const Tensor& loss) {
  Tape* tape = active_tape();
  if (!tape) throw Error("backward called without an active tape");
  tape->backward(loss);
}

Tensor take(const Tensor& t, const std::vector<std::size_t>& index) {
  if (t.rank() == 0) throw ShapeError("take: scalar tensor");
  const std::size_t n = t.dim(0), row = t.numel() / std::max<std::size_t>(n, 1);
  Shape shape = t.shape();
  shape[0] = index.size();
  Tensor out(shape);
  auto o = out.mutable_data();
  const auto d = t.data();
  for (std::size_t k = 0; k < index.size(); ++k) {
    if (index[k] >= n) throw ShapeError("take: index " + std::to_string(index[k]) + " out of range");
    std::copy_n(d.begin() + static_cast<std::ptrdiff_t>(index[k] * row), row, o.begin() + static_cast<std::ptrdiff_t>(k * row));
  }
  return out;
}

Tensor stack(const std::vector<Tensor>& parts) {
  if (parts.empty()) throw ShapeError("stack: no tensors");
  Shape shape = parts[0].shape();
  const std::size_t row = parts[0].numel();
  shape.insert(shape.begin(), parts.size());
  Tensor out(shape);
  auto o = out.mutable_data();
  for (std::size_t k = 0; k < parts.size(); ++k) {
    if (parts[k].shape() != parts[0].shape()) throw ShapeError("stack: shapes differ");
    std::copy(parts[k].data().begin(), parts[k].data().end(), o.begin() + static_cast<std::ptrdiff_t>(k * row));
  }
  return out;
}

Tensor unstack(const Tensor& t, std::size_t i) {
  if (t.rank() == 0 || i >= t.dim(0)) throw ShapeError("unstack: index out of range");
  const std::size_t row = t.numel() / t.dim(0);
  Shape shape(t.shape().begin() + 1, t.shape().end());
  const auto d = t.data();
  return Tensor(shape, std::vector<double>(d.begin() + static_cast<std::ptrdiff_t>(i * row),
                                           d.begin() + static_cast<std::ptrdiff_t>((i + 1) * row)));
}

}  // namespace mupad
