#pragma once

// Dense 64-bit tensors and the define-by-run tape that records the
// operations applied to them.
//
// A Tensor is a cheap, shared handle. Values are immutable once an op has
// produced them; only leaves (parameters, inputs) expose mutable values, and
// every tensor may accumulate a gradient during a backward pass.
//
// Recording happens only while a Tape is active on the current thread (see
// TapeScope) and at least one input requires a gradient. Outside a scope all
// ops evaluate eagerly and produce constants, which is what inference uses.

#include <cstddef>
#include <cstdint>
#include <functional>
#include <initializer_list>
#include <memory>
#include <span>
#include <string>
#include <vector>

namespace csim {

using Shape = std::vector<std::size_t>;

std::size_t shape_numel(const Shape& shape);
std::string shape_str(const Shape& shape);

namespace detail {
struct TensorData {
  Shape shape;
  std::vector<double> values;
  std::vector<double> grad;  // empty until a gradient arrives
  bool requires_grad = false;
};
}  // namespace detail

class Tensor {
 public:
  Tensor() = default;
  Tensor(Shape shape, std::vector<double> values, bool requires_grad = false);

  static Tensor zeros(Shape shape, bool requires_grad = false);
  static Tensor full(Shape shape, double value, bool requires_grad = false);
  static Tensor scalar(double value, bool requires_grad = false);
  static Tensor vector(std::vector<double> values, bool requires_grad = false);
  static Tensor matrix(std::size_t rows, std::size_t cols,
                       std::vector<double> values, bool requires_grad = false);
  static Tensor from_rows(std::initializer_list<std::initializer_list<double>> rows);

  bool defined() const { return static_cast<bool>(data_); }
  const Shape& shape() const;
  std::size_t rank() const { return shape().size(); }
  std::size_t numel() const;
  /// First extent; rank-1 tensors are treated as a single row by matrix ops.
  std::size_t rows() const;
  std::size_t cols() const;

  std::span<const double> values() const;
  /// Mutable view of the values. Intended for leaves: optimizer updates,
  /// finite-difference perturbation, loading checkpoints.
  std::span<double> mutable_values();

  double operator[](std::size_t i) const { return values()[i]; }
  double at(std::size_t r, std::size_t c) const;
  double item() const;

  bool requires_grad() const;
  Tensor& set_requires_grad(bool on);

  bool has_grad() const;
  /// Gradient view; empty span when no gradient has been accumulated.
  std::span<const double> grad() const;
  /// Gradient storage, allocated (zero-filled) on first use.
  std::span<double> grad_storage();
  void zero_grad();

  /// New constant tensor sharing nothing with this one.
  Tensor detach() const;
  /// Same values, new shape; differentiable.
  Tensor reshape(Shape shape) const;

  bool is_same(const Tensor& other) const { return data_ == other.data_; }

 private:
  std::shared_ptr<detail::TensorData> data_;
};

/// Ordered record of the ops executed while it was active. Node order is
/// creation order, so creation order is already a topological order.
class Tape {
 public:
  using BackwardFn = std::function<void(std::span<const double> grad_out)>;

  struct Node {
    const char* op;
    std::vector<Tensor> inputs;
    Tensor output;
    BackwardFn backward;
  };

  void record(const char* op, std::vector<Tensor> inputs, Tensor output,
              BackwardFn backward);

  /// Seeds d(loss)/d(loss) = 1 and replays every node once in reverse
  /// creation order. Returns the number of nodes visited.
  std::size_t backward(const Tensor& loss);

  std::size_t size() const { return nodes_.size(); }
  std::span<const Node> nodes() const { return nodes_; }
  void clear() { nodes_.clear(); }

 private:
  std::vector<Node> nodes_;
};

/// Makes `tape` the active recording tape for the calling thread.
class TapeScope {
 public:
  explicit TapeScope(Tape& tape);
  ~TapeScope();
  TapeScope(const TapeScope&) = delete;
  TapeScope& operator=(const TapeScope&) = delete;

 private:
  Tape* previous_;
};

/// Suspends recording on the calling thread.
class NoGradScope {
 public:
  NoGradScope();
  ~NoGradScope();
  NoGradScope(const NoGradScope&) = delete;
  NoGradScope& operator=(const NoGradScope&) = delete;

 private:
  Tape* previous_;
};

Tape* active_tape();

/// Per-thread count of primitive op evaluations (recorded or not).
std::uint64_t op_count();
void reset_op_count();

namespace detail {
void count_op();
/// Records `output` on the active tape if any input requires a gradient.
/// Returns true when recorded; the output is then marked requires_grad.
bool maybe_record(const char* op, std::vector<Tensor> inputs, Tensor& output,
                  Tape::BackwardFn backward);
bool any_requires_grad(std::initializer_list<const Tensor*> inputs);
}  // namespace detail

}  // namespace csim
