#pragma once

#include <cstddef>
#include <cstdint>
#include <functional>
#include <memory>
#include <random>
#include <span>
#include <stdexcept>
#include <string>
#include <vector>

namespace mupad {

using Shape = std::vector<std::size_t>;
using Rng = std::mt19937_64;

struct Error : std::runtime_error {
  using std::runtime_error::runtime_error;
};
struct ShapeError : Error {
  using Error::Error;
};
struct NumericError : Error {
  using Error::Error;
};

std::size_t shape_numel(const Shape& shape);
std::string shape_str(const Shape& shape);

/// Stateless 64-bit mixer used to derive independent streams from (seed, id).
std::uint64_t derive_seed(std::uint64_t seed, std::uint64_t stream);

struct TensorImpl {
  Shape shape;
  std::vector<double> data;
  std::vector<double> grad;
  bool requires_grad = false;
};

/// Handle to a dense row-major float64 array. Copies share storage; use
/// clone() for a deep copy. Gradients live next to the data so parameters
/// keep them across a backward pass.
class Tensor {
 public:
  Tensor() = default;
  explicit Tensor(Shape shape, double fill = 0.0);
  Tensor(Shape shape, std::vector<double> data);

  static Tensor scalar(double v);
  static Tensor randn(Shape shape, Rng& rng, double stddev = 1.0);
  static Tensor uniform(Shape shape, Rng& rng, double lo, double hi);

  bool defined() const { return impl_ != nullptr; }
  const Shape& shape() const;
  std::size_t rank() const { return shape().size(); }
  std::size_t dim(std::size_t i) const;
  std::size_t numel() const;

  std::span<const double> data() const;
  /// Direct write access; reserved for initialisation and optimiser updates.
  std::span<double> mutable_data();
  double item() const;
  double operator[](std::size_t i) const { return impl_->data[i]; }

  bool requires_grad() const { return impl_ && impl_->requires_grad; }
  Tensor& set_requires_grad(bool on);
  bool has_grad() const { return impl_ && !impl_->grad.empty(); }
  std::span<const double> grad() const;
  /// Allocates a zeroed gradient buffer on first use.
  std::span<double> grad_buffer() const;
  void zero_grad();

  Tensor clone() const;
  /// Detached copy with a new shape (element count must match). Not recorded
  /// on the tape; use ops::reshape inside differentiable code.
  Tensor view(Shape shape) const;
  bool same_storage(const Tensor& other) const { return impl_ == other.impl_; }

  const TensorImpl* impl() const { return impl_.get(); }

 private:
  std::shared_ptr<TensorImpl> impl_;
};

/// Fails fast on NaN/Inf.
void check_finite(const Tensor& t, const char* where);

/// Data copies along the leading dimension; not recorded on any tape.
Tensor take(const Tensor& t, const std::vector<std::size_t>& index);
/// Equally shaped tensors stacked along a new leading dimension.
Tensor stack(const std::vector<Tensor>& parts);
/// Element i of the leading dimension, with that dimension removed.
Tensor unstack(const Tensor& t, std::size_t i);

// ---------------------------------------------------------------------------
// Tape

using BackwardFn = std::function<void(std::span<const double> grad_out)>;

struct TapeNode {
  std::string op;
  std::vector<Tensor> inputs;
  Tensor output;
  BackwardFn backward;
};

/// Execution-ordered record of differentiable ops. Only ops with at least one
/// grad-requiring input are recorded, and only while a TapeScope is active on
/// the calling thread.
class Tape {
 public:
  void record(TapeNode node);
  std::size_t size() const { return nodes_.size(); }
  std::size_t count(const std::string& op) const;
  const std::vector<TapeNode>& nodes() const { return nodes_; }
  /// Seeds d(loss)=1 and replays the tape in reverse, visiting each node once.
  void backward(const Tensor& loss);
  void clear() { nodes_.clear(); }

 private:
  std::vector<TapeNode> nodes_;
};

class TapeScope {
 public:
  explicit TapeScope(Tape& tape);
  ~TapeScope();
  TapeScope(const TapeScope&) = delete;
  TapeScope& operator=(const TapeScope&) = delete;

 private:
  Tape* previous_;
};

Tape* active_tape();

/// Runs backward on the active tape. Throws if the loss is not a scalar.
void backward(const Tensor& loss);

}  // namespace mupad
