#include "csim/tensor.hpp"

#include <algorithm>
#include <cmath>
#include <sstream>

#include "csim/errors.hpp"

namespace csim {

namespace {
thread_local Tape* g_active_tape = nullptr;
thread_local std::uint64_t g_op_count = 0;
}  // namespace

std::size_t shape_numel(const Shape& shape) {
  std::size_t n = 1;
  for (auto d : shape) n *= d;
  return n;
}

std::string shape_str(const Shape& shape) {
  std::ostringstream os;
  os << '[';
  for (std::size_t i = 0; i < shape.size(); ++i) {
    if (i) os << "x";
    os << shape[i];
  }
  os << ']';
  return os.str();
}

Tensor::Tensor(Shape shape, std::vector<double> values, bool requires_grad)
    : data_(std::make_shared<detail::TensorData>()) {
  if (shape.empty()) throw DimensionError("tensor shape must have rank >= 1");
  for (auto d : shape) {
    if (d == 0) throw DimensionError("tensor extents must be positive: " + shape_str(shape));
  }
  if (shape_numel(shape) != values.size()) {
    throw DimensionError("shape " + shape_str(shape) + " does not match " +
                         std::to_string(values.size()) + " values");
  }
  data_->shape = std::move(shape);
  data_->values = std::move(values);
  data_->requires_grad = requires_grad;
}

Tensor Tensor::zeros(Shape shape, bool requires_grad) {
  auto n = shape_numel(shape);
  return Tensor(std::move(shape), std::vector<double>(n, 0.0), requires_grad);
}

Tensor Tensor::full(Shape shape, double value, bool requires_grad) {
  auto n = shape_numel(shape);
  return Tensor(std::move(shape), std::vector<double>(n, value), requires_grad);
}

Tensor Tensor::scalar(double value, bool requires_grad) {
  return Tensor({1}, {value}, requires_grad);
}

Tensor Tensor::vector(std::vector<double> values, bool requires_grad) {
  auto n = values.size();
  return Tensor({n}, std::move(values), requires_grad);
}

Tensor Tensor::matrix(std::size_t rows, std::size_t cols, std::vector<double> values,
                      bool requires_grad) {
  return Tensor({rows, cols}, std::move(values), requires_grad);
}

Tensor Tensor::from_rows(std::initializer_list<std::initializer_list<double>> rows) {
  std::vector<double> v;
  std::size_t cols = rows.size() ? rows.begin()->size() : 0;
  for (const auto& r : rows) {
    if (r.size() != cols) throw DimensionError("ragged row list");
    v.insert(v.end(), r.begin(), r.end());
  }
  return matrix(rows.size(), cols, std::move(v));
}

const Shape& Tensor::shape() const {
  if (!data_) throw ContractError("use of undefined tensor");
  return data_->shape;
}

std::size_t Tensor::numel() const { return defined() ? data_->values.size() : 0; }

std::size_t Tensor::rows() const {
  const auto& s = shape();
  return s.size() == 1 ? 1 : s[0];
}

std::size_t Tensor::cols() const {
  const auto& s = shape();
  return s.size() == 1 ? s[0] : s[1];
}

std::span<const double> Tensor::values() const {
  if (!data_) throw ContractError("use of undefined tensor");
  return data_->values;
}

std::span<double> Tensor::mutable_values() {
  if (!data_) throw ContractError("use of undefined tensor");
  return data_->values;
}

double Tensor::at(std::size_t r, std::size_t c) const {
  if (r >= rows() || c >= cols()) throw IndexError("tensor index out of range");
  return data_->values[r * cols() + c];
}

double Tensor::item() const {
  if (numel() != 1) throw DimensionError("item() on tensor of shape " + shape_str(shape()));
  return data_->values[0];
}

bool Tensor::requires_grad() const { return data_ && data_->requires_grad; }

Tensor& Tensor::set_requires_grad(bool on) {
  if (!data_) throw ContractError("use of undefined tensor");
  data_->requires_grad = on;
  return *this;
}

bool Tensor::has_grad() const { return data_ && !data_->grad.empty(); }

std::span<const double> Tensor::grad() const {
  if (!data_) return {};
  return data_->grad;
}

std::span<double> Tensor::grad_storage() {
  if (!data_) throw ContractError("use of undefined tensor");
  if (data_->grad.empty()) data_->grad.assign(data_->values.size(), 0.0);
  return data_->grad;
}

void Tensor::zero_grad() {
  if (data_) data_->grad.clear();
}

Tensor Tensor::detach() const { return Tensor(shape(), data_->values, false); }

Tensor Tensor::reshape(Shape new_shape) const {
  if (shape_numel(new_shape) != numel()) {
    throw DimensionError("cannot reshape " + shape_str(shape()) + " to " + shape_str(new_shape));
  }
  detail::count_op();
  Tensor out(std::move(new_shape), data_->values);
  Tensor self = *this;
  detail::maybe_record("reshape", {self}, out, [self](std::span<const double> g) mutable {
    auto gs = self.grad_storage();
    for (std::size_t i = 0; i < g.size(); ++i) gs[i] += g[i];
  });
  return out;
}

void Tape::record(const char* op, std::vector<Tensor> inputs, Tensor output,
                  BackwardFn backward) {
  nodes_.push_back(Node{op, std::move(inputs), std::move(output), std::move(backward)});
}

std::size_t Tape::backward(const Tensor& loss) {
  if (loss.numel() != 1) {
    throw DimensionError("backward() needs a scalar loss, got " + shape_str(loss.shape()));
  }
  Tensor seed = loss;
  seed.grad_storage()[0] += 1.0;
  std::size_t visited = 0;
  for (auto it = nodes_.rbegin(); it != nodes_.rend(); ++it) {
    ++visited;
    if (!it->output.has_grad()) continue;  // not upstream of the loss
    it->backward(it->output.grad());
  }
  return visited;
}

TapeScope::TapeScope(Tape& tape) : previous_(g_active_tape) { g_active_tape = &tape; }
TapeScope::~TapeScope() { g_active_tape = previous_; }

NoGradScope::NoGradScope() : previous_(g_active_tape) { g_active_tape = nullptr; }
NoGradScope::~NoGradScope() { g_active_tape = previous_; }

Tape* active_tape() { return g_active_tape; }

std::uint64_t op_count() { return g_op_count; }
void reset_op_count() { g_op_count = 0; }

namespace detail {

void count_op() { ++g_op_count; }

bool any_requires_grad(std::initializer_list<const Tensor*> inputs) {
  return std::any_of(inputs.begin(), inputs.end(),
                     [](const Tensor* t) { return t->requires_grad(); });
}

bool maybe_record(const char* op, std::vector<Tensor> inputs, Tensor& output,
                  Tape::BackwardFn backward) {
#ifndef NDEBUG
  bool inputs_finite = std::all_of(inputs.begin(), inputs.end(), [](const Tensor& t) {
    auto v = t.values();
    return std::all_of(v.begin(), v.end(), [](double x) { return std::isfinite(x); });
  });
  if (inputs_finite) {
    for (double x : output.values()) {
      if (!std::isfinite(x)) throw EvaluationError(std::string("non-finite output from ") + op);
    }
  }
#endif
  Tape* tape = g_active_tape;
  if (!tape) return false;
  bool needed = std::any_of(inputs.begin(), inputs.end(),
                            [](const Tensor& t) { return t.requires_grad(); });
  if (!needed) return false;
  output.set_requires_grad(true);
  tape->record(op, std::move(inputs), output, std::move(backward));
  return true;
}

}  // namespace detail
}  // namespace csim
