#include "csim/ops.hpp"

#include <algorithm>
#include <cmath>
#include <numbers>
#include <string>

#include "csim/errors.hpp"

namespace csim {

namespace {

using detail::count_op;
using detail::maybe_record;
using Grad = std::span<const double>;

// Gradient buffer of `t`, or an empty span when t does not need one.
std::span<double> sink(Tensor& t) {
  if (!t.requires_grad()) return {};
  return t.grad_storage();
}

void require_matrix(const Tensor& t, const char* op) {
  if (t.rank() != 2) {
    throw DimensionError(std::string(op) + ": expected a matrix, got " + shape_str(t.shape()));
  }
}

void require_same_shape(const Tensor& a, const Tensor& b, const char* op) {
  if (a.shape() != b.shape()) {
    throw DimensionError(std::string(op) + ": shape mismatch " + shape_str(a.shape()) + " vs " +
                         shape_str(b.shape()));
  }
}

void require_scalar(const Tensor& s, const char* op) {
  if (s.numel() != 1) {
    throw DimensionError(std::string(op) + ": expected a one-element tensor, got " +
                         shape_str(s.shape()));
  }
}

// c[m x n] += a[m x k] * b[k x n]
void gemm_acc(const double* a, const double* b, double* c, std::size_t m, std::size_t k,
              std::size_t n) {
  for (std::size_t i = 0; i < m; ++i) {
    double* ci = c + i * n;
    for (std::size_t p = 0; p < k; ++p) {
      const double aip = a[i * k + p];
      const double* bp = b + p * n;
      for (std::size_t j = 0; j < n; ++j) ci[j] += aip * bp[j];
    }
  }
}

// c[m x n] += a^T * b with a[k x m], b[k x n]
void gemm_tn_acc(const double* a, const double* b, double* c, std::size_t m, std::size_t k,
                 std::size_t n) {
  for (std::size_t p = 0; p < k; ++p) {
    const double* ap = a + p * m;
    const double* bp = b + p * n;
    for (std::size_t i = 0; i < m; ++i) {
      const double aip = ap[i];
      double* ci = c + i * n;
      for (std::size_t j = 0; j < n; ++j) ci[j] += aip * bp[j];
    }
  }
}

// c[m x n] += a * b^T with a[m x k], b[n x k]
void gemm_nt_acc(const double* a, const double* b, double* c, std::size_t m, std::size_t k,
                 std::size_t n) {
  for (std::size_t i = 0; i < m; ++i) {
    const double* ai = a + i * k;
    for (std::size_t j = 0; j < n; ++j) {
      const double* bj = b + j * k;
      double acc = 0.0;
      for (std::size_t p = 0; p < k; ++p) acc += ai[p] * bj[p];
      c[i * n + j] += acc;
    }
  }
}

template <typename Fwd, typename Deriv>
Tensor unary(const Tensor& a, const char* name, Fwd fwd, Deriv deriv) {
  count_op();
  auto av = a.values();
  std::vector<double> out(av.size());
  for (std::size_t i = 0; i < av.size(); ++i) out[i] = fwd(av[i]);
  Tensor result(a.shape(), std::move(out));
  Tensor in = a;
  maybe_record(name, {in}, result, [in, result, deriv](Grad g) mutable {
    auto ga = sink(in);
    auto x = in.values();
    auto y = result.values();
    for (std::size_t i = 0; i < g.size(); ++i) ga[i] += g[i] * deriv(x[i], y[i]);
  });
  return result;
}

void log_softmax_row(const double* x, std::size_t n, double* out) {
  double mx = *std::max_element(x, x + n);
  double s = 0.0;
  for (std::size_t j = 0; j < n; ++j) s += std::exp(x[j] - mx);
  double lse = mx + std::log(s);
  for (std::size_t j = 0; j < n; ++j) out[j] = x[j] - lse;
}

void softmax_row(const double* x, std::size_t n, double* out) {
  double mx = *std::max_element(x, x + n);
  double s = 0.0;
  for (std::size_t j = 0; j < n; ++j) {
    out[j] = std::exp(x[j] - mx);
    s += out[j];
  }
  for (std::size_t j = 0; j < n; ++j) out[j] /= s;
}

}  // namespace

Tensor matmul(const Tensor& a, const Tensor& b) {
  require_matrix(a, "matmul");
  require_matrix(b, "matmul");
  const std::size_t m = a.rows(), k = a.cols(), n = b.cols();
  if (b.rows() != k) {
    throw DimensionError("matmul: inner dimensions differ " + shape_str(a.shape()) + " x " +
                         shape_str(b.shape()));
  }
  count_op();
  std::vector<double> out(m * n, 0.0);
  gemm_acc(a.values().data(), b.values().data(), out.data(), m, k, n);
  Tensor result = Tensor::matrix(m, n, std::move(out));
  Tensor ta = a, tb = b;
  maybe_record("matmul", {ta, tb}, result, [ta, tb, m, k, n](Grad g) mutable {
    if (auto ga = sink(ta); !ga.empty()) gemm_nt_acc(g.data(), tb.values().data(), ga.data(), m, n, k);
    if (auto gb = sink(tb); !gb.empty()) gemm_tn_acc(ta.values().data(), g.data(), gb.data(), k, m, n);
  });
  return result;
}

Tensor transpose(const Tensor& a) {
  require_matrix(a, "transpose");
  count_op();
  const std::size_t r = a.rows(), c = a.cols();
  auto av = a.values();
  std::vector<double> out(r * c);
  for (std::size_t i = 0; i < r; ++i)
    for (std::size_t j = 0; j < c; ++j) out[j * r + i] = av[i * c + j];
  Tensor result = Tensor::matrix(c, r, std::move(out));
  Tensor ta = a;
  maybe_record("transpose", {ta}, result, [ta, r, c](Grad g) mutable {
    auto ga = sink(ta);
    for (std::size_t i = 0; i < r; ++i)
      for (std::size_t j = 0; j < c; ++j) ga[i * c + j] += g[j * r + i];
  });
  return result;
}

Tensor add(const Tensor& a, const Tensor& b) {
  require_same_shape(a, b, "add");
  count_op();
  auto av = a.values(), bv = b.values();
  std::vector<double> out(av.size());
  for (std::size_t i = 0; i < av.size(); ++i) out[i] = av[i] + bv[i];
  Tensor result(a.shape(), std::move(out));
  Tensor ta = a, tb = b;
  maybe_record("add", {ta, tb}, result, [ta, tb](Grad g) mutable {
    if (auto ga = sink(ta); !ga.empty())
      for (std::size_t i = 0; i < g.size(); ++i) ga[i] += g[i];
    if (auto gb = sink(tb); !gb.empty())
      for (std::size_t i = 0; i < g.size(); ++i) gb[i] += g[i];
  });
  return result;
}

Tensor sub(const Tensor& a, const Tensor& b) {
  require_same_shape(a, b, "sub");
  count_op();
  auto av = a.values(), bv = b.values();
  std::vector<double> out(av.size());
  for (std::size_t i = 0; i < av.size(); ++i) out[i] = av[i] - bv[i];
  Tensor result(a.shape(), std::move(out));
  Tensor ta = a, tb = b;
  maybe_record("sub", {ta, tb}, result, [ta, tb](Grad g) mutable {
    if (auto ga = sink(ta); !ga.empty())
      for (std::size_t i = 0; i < g.size(); ++i) ga[i] += g[i];
    if (auto gb = sink(tb); !gb.empty())
      for (std::size_t i = 0; i < g.size(); ++i) gb[i] -= g[i];
  });
  return result;
}

Tensor mul(const Tensor& a, const Tensor& b) {
  require_same_shape(a, b, "mul");
  count_op();
  auto av = a.values(), bv = b.values();
  std::vector<double> out(av.size());
  for (std::size_t i = 0; i < av.size(); ++i) out[i] = av[i] * bv[i];
  Tensor result(a.shape(), std::move(out));
  Tensor ta = a, tb = b;
  maybe_record("mul", {ta, tb}, result, [ta, tb](Grad g) mutable {
    auto av = ta.values(), bv = tb.values();
    if (auto ga = sink(ta); !ga.empty())
      for (std::size_t i = 0; i < g.size(); ++i) ga[i] += g[i] * bv[i];
    if (auto gb = sink(tb); !gb.empty())
      for (std::size_t i = 0; i < g.size(); ++i) gb[i] += g[i] * av[i];
  });
  return result;
}

Tensor scale(const Tensor& a, double factor) {
  return unary(a, "scale", [factor](double x) { return x * factor; },
               [factor](double, double) { return factor; });
}

Tensor add_scalar(const Tensor& a, double value) {
  return unary(a, "add_scalar", [value](double x) { return x + value; },
               [](double, double) { return 1.0; });
}

Tensor add_scalar_tensor(const Tensor& a, const Tensor& s) {
  require_scalar(s, "add_scalar_tensor");
  count_op();
  const double sv = s.item();
  auto av = a.values();
  std::vector<double> out(av.size());
  for (std::size_t i = 0; i < av.size(); ++i) out[i] = av[i] + sv;
  Tensor result(a.shape(), std::move(out));
  Tensor ta = a, ts = s;
  maybe_record("add_scalar_tensor", {ta, ts}, result, [ta, ts](Grad g) mutable {
    if (auto ga = sink(ta); !ga.empty())
      for (std::size_t i = 0; i < g.size(); ++i) ga[i] += g[i];
    if (auto gs = sink(ts); !gs.empty()) {
      double acc = 0.0;
      for (double x : g) acc += x;
      gs[0] += acc;
    }
  });
  return result;
}

Tensor mul_scalar_tensor(const Tensor& a, const Tensor& s) {
  require_scalar(s, "mul_scalar_tensor");
  count_op();
  const double sv = s.item();
  auto av = a.values();
  std::vector<double> out(av.size());
  for (std::size_t i = 0; i < av.size(); ++i) out[i] = av[i] * sv;
  Tensor result(a.shape(), std::move(out));
  Tensor ta = a, ts = s;
  maybe_record("mul_scalar_tensor", {ta, ts}, result, [ta, ts](Grad g) mutable {
    const double sv = ts.item();
    if (auto ga = sink(ta); !ga.empty())
      for (std::size_t i = 0; i < g.size(); ++i) ga[i] += g[i] * sv;
    if (auto gs = sink(ts); !gs.empty()) {
      auto av = ta.values();
      double acc = 0.0;
      for (std::size_t i = 0; i < g.size(); ++i) acc += g[i] * av[i];
      gs[0] += acc;
    }
  });
  return result;
}

Tensor tanh(const Tensor& a) {
  return unary(a, "tanh", [](double x) { return std::tanh(x); },
               [](double, double y) { return 1.0 - y * y; });
}

Tensor scalar_tanh(const Tensor& x) {
  require_scalar(x, "scalar_tanh");
  return tanh(x);
}

Tensor gelu(const Tensor& a) {
  constexpr double inv_sqrt2 = 0.70710678118654752440;
  const double inv_sqrt2pi = 1.0 / std::sqrt(2.0 * std::numbers::pi);
  return unary(
      a, "gelu", [](double x) { return 0.5 * x * (1.0 + std::erf(x * inv_sqrt2)); },
      [inv_sqrt2pi](double x, double) {
        return 0.5 * (1.0 + std::erf(x * inv_sqrt2)) + x * inv_sqrt2pi * std::exp(-0.5 * x * x);
      });
}

Tensor relu(const Tensor& a) {
  return unary(a, "relu", [](double x) { return x > 0.0 ? x : 0.0; },
               [](double x, double) { return x > 0.0 ? 1.0 : 0.0; });
}

Tensor add_row_vector(const Tensor& m, const Tensor& v) {
  const std::size_t r = m.rows(), c = m.cols();
  if (v.numel() != c) {
    throw DimensionError("add_row_vector: " + shape_str(m.shape()) + " + " + shape_str(v.shape()));
  }
  count_op();
  auto mv = m.values(), vv = v.values();
  std::vector<double> out(r * c);
  for (std::size_t i = 0; i < r; ++i)
    for (std::size_t j = 0; j < c; ++j) out[i * c + j] = mv[i * c + j] + vv[j];
  Tensor result(m.shape(), std::move(out));
  Tensor tm = m, tv = v;
  maybe_record("add_row_vector", {tm, tv}, result, [tm, tv, r, c](Grad g) mutable {
    if (auto gm = sink(tm); !gm.empty())
      for (std::size_t i = 0; i < g.size(); ++i) gm[i] += g[i];
    if (auto gv = sink(tv); !gv.empty())
      for (std::size_t i = 0; i < r; ++i)
        for (std::size_t j = 0; j < c; ++j) gv[j] += g[i * c + j];
  });
  return result;
}

Tensor row_scale(const Tensor& m, const Tensor& w) {
  require_matrix(m, "row_scale");
  const std::size_t r = m.rows(), c = m.cols();
  if (w.numel() != r) {
    throw DimensionError("row_scale: " + std::to_string(w.numel()) + " weights for " +
                         std::to_string(r) + " rows");
  }
  count_op();
  auto mv = m.values(), wv = w.values();
  std::vector<double> out(r * c);
  for (std::size_t i = 0; i < r; ++i)
    for (std::size_t j = 0; j < c; ++j) out[i * c + j] = mv[i * c + j] * wv[i];
  Tensor result(m.shape(), std::move(out));
  Tensor tm = m, tw = w;
  maybe_record("row_scale", {tm, tw}, result, [tm, tw, r, c](Grad g) mutable {
    auto mv = tm.values(), wv = tw.values();
    if (auto gm = sink(tm); !gm.empty())
      for (std::size_t i = 0; i < r; ++i)
        for (std::size_t j = 0; j < c; ++j) gm[i * c + j] += g[i * c + j] * wv[i];
    if (auto gw = sink(tw); !gw.empty())
      for (std::size_t i = 0; i < r; ++i) {
        double acc = 0.0;
        for (std::size_t j = 0; j < c; ++j) acc += g[i * c + j] * mv[i * c + j];
        gw[i] += acc;
      }
  });
  return result;
}

Tensor sum(const Tensor& a) {
  count_op();
  double s = 0.0;
  for (double x : a.values()) s += x;
  Tensor result = Tensor::scalar(s);
  Tensor ta = a;
  maybe_record("sum", {ta}, result, [ta](Grad g) mutable {
    auto ga = sink(ta);
    for (auto& x : ga) x += g[0];
  });
  return result;
}

Tensor mean(const Tensor& a) {
  count_op();
  double s = 0.0;
  for (double x : a.values()) s += x;
  const double n = static_cast<double>(a.numel());
  Tensor result = Tensor::scalar(s / n);
  Tensor ta = a;
  maybe_record("mean", {ta}, result, [ta, n](Grad g) mutable {
    auto ga = sink(ta);
    for (auto& x : ga) x += g[0] / n;
  });
  return result;
}

Tensor sum_rows(const Tensor& m) {
  const std::size_t r = m.rows(), c = m.cols();
  count_op();
  auto mv = m.values();
  std::vector<double> out(c, 0.0);
  for (std::size_t i = 0; i < r; ++i)
    for (std::size_t j = 0; j < c; ++j) out[j] += mv[i * c + j];
  Tensor result = Tensor::vector(std::move(out));
  Tensor tm = m;
  maybe_record("sum_rows", {tm}, result, [tm, r, c](Grad g) mutable {
    auto gm = sink(tm);
    for (std::size_t i = 0; i < r; ++i)
      for (std::size_t j = 0; j < c; ++j) gm[i * c + j] += g[j];
  });
  return result;
}

Tensor mean_rows(const Tensor& m) {
  const std::size_t r = m.rows(), c = m.cols();
  count_op();
  auto mv = m.values();
  std::vector<double> out(c, 0.0);
  for (std::size_t i = 0; i < r; ++i)
    for (std::size_t j = 0; j < c; ++j) out[j] += mv[i * c + j];
  const double inv = 1.0 / static_cast<double>(r);
  for (auto& x : out) x *= inv;
  Tensor result = Tensor::vector(std::move(out));
  Tensor tm = m;
  maybe_record("mean_rows", {tm}, result, [tm, r, c, inv](Grad g) mutable {
    auto gm = sink(tm);
    for (std::size_t i = 0; i < r; ++i)
      for (std::size_t j = 0; j < c; ++j) gm[i * c + j] += g[j] * inv;
  });
  return result;
}

namespace {
Tensor extremum(const Tensor& a, bool want_max, const char* name) {
  count_op();
  auto av = a.values();
  auto it = want_max ? std::max_element(av.begin(), av.end())
                     : std::min_element(av.begin(), av.end());
  const auto idx = static_cast<std::size_t>(it - av.begin());
  Tensor result = Tensor::scalar(*it);
  Tensor ta = a;
  maybe_record(name, {ta}, result, [ta, idx](Grad g) mutable {
    auto ga = sink(ta);
    ga[idx] += g[0];
  });
  return result;
}
}  // namespace

Tensor max_all(const Tensor& a) { return extremum(a, true, "max_all"); }
Tensor min_all(const Tensor& a) { return extremum(a, false, "min_all"); }

Tensor concat_rows(std::span<const Tensor> parts) {
  if (parts.empty()) throw DimensionError("concat_rows: no inputs");
  const std::size_t c = parts[0].cols();
  std::size_t total = 0;
  for (const auto& p : parts) {
    if (p.cols() != c) throw DimensionError("concat_rows: column count mismatch");
    total += p.rows();
  }
  count_op();
  std::vector<double> out;
  out.reserve(total * c);
  for (const auto& p : parts) out.insert(out.end(), p.values().begin(), p.values().end());
  Tensor result = Tensor::matrix(total, c, std::move(out));
  std::vector<Tensor> inputs(parts.begin(), parts.end());
  maybe_record("concat_rows", inputs, result, [inputs](Grad g) mutable {
    std::size_t offset = 0;
    for (auto& p : inputs) {
      const std::size_t n = p.numel();
      if (auto gp = sink(p); !gp.empty())
        for (std::size_t i = 0; i < n; ++i) gp[i] += g[offset + i];
      offset += n;
    }
  });
  return result;
}

Tensor slice_rows(const Tensor& m, std::size_t begin, std::size_t count) {
  const std::size_t r = m.rows(), c = m.cols();
  if (count == 0 || begin + count > r) {
    throw IndexError("slice_rows: [" + std::to_string(begin) + ", " +
                     std::to_string(begin + count) + ") outside " + std::to_string(r) + " rows");
  }
  count_op();
  auto mv = m.values();
  std::vector<double> out(mv.begin() + static_cast<std::ptrdiff_t>(begin * c),
                          mv.begin() + static_cast<std::ptrdiff_t>((begin + count) * c));
  Tensor result = Tensor::matrix(count, c, std::move(out));
  Tensor tm = m;
  maybe_record("slice_rows", {tm}, result, [tm, begin, c](Grad g) mutable {
    auto gm = sink(tm);
    for (std::size_t i = 0; i < g.size(); ++i) gm[begin * c + i] += g[i];
  });
  return result;
}

Tensor row(const Tensor& m, std::size_t i) {
  return slice_rows(m, i, 1).reshape({m.cols()});
}

Tensor softmax_vec(const Tensor& v) {
  if (v.rank() != 1) throw DimensionError("softmax_vec: expected a vector, got " + shape_str(v.shape()));
  count_op();
  const std::size_t n = v.numel();
  std::vector<double> out(n);
  softmax_row(v.values().data(), n, out.data());
  Tensor result = Tensor::vector(std::move(out));
  Tensor tv = v;
  maybe_record("softmax_vec", {tv}, result, [tv, result, n](Grad g) mutable {
    auto gv = sink(tv);
    auto y = result.values();
    double dot = 0.0;
    for (std::size_t i = 0; i < n; ++i) dot += g[i] * y[i];
    for (std::size_t i = 0; i < n; ++i) gv[i] += y[i] * (g[i] - dot);
  });
  return result;
}

Tensor softmax_rows(const Tensor& m) {
  require_matrix(m, "softmax_rows");
  count_op();
  const std::size_t r = m.rows(), c = m.cols();
  std::vector<double> out(r * c);
  for (std::size_t i = 0; i < r; ++i) softmax_row(m.values().data() + i * c, c, out.data() + i * c);
  Tensor result = Tensor::matrix(r, c, std::move(out));
  Tensor tm = m;
  maybe_record("softmax_rows", {tm}, result, [tm, result, r, c](Grad g) mutable {
    auto gm = sink(tm);
    auto y = result.values();
    for (std::size_t i = 0; i < r; ++i) {
      double dot = 0.0;
      for (std::size_t j = 0; j < c; ++j) dot += g[i * c + j] * y[i * c + j];
      for (std::size_t j = 0; j < c; ++j) gm[i * c + j] += y[i * c + j] * (g[i * c + j] - dot);
    }
  });
  return result;
}

Tensor l2_normalize_rows(const Tensor& m) {
  const std::size_t r = m.rows(), c = m.cols();
  count_op();
  auto mv = m.values();
  std::vector<double> norms(r), out(r * c);
  for (std::size_t i = 0; i < r; ++i) {
    double s = 0.0;
    for (std::size_t j = 0; j < c; ++j) s += mv[i * c + j] * mv[i * c + j];
    norms[i] = std::sqrt(s);
    const double denom = std::max(norms[i], kNormEpsilon);
    for (std::size_t j = 0; j < c; ++j) out[i * c + j] = mv[i * c + j] / denom;
  }
  Tensor result(m.shape(), std::move(out));
  Tensor tm = m;
  maybe_record("l2_normalize_rows", {tm}, result,
               [tm, result, norms = std::move(norms), r, c](Grad g) mutable {
                 auto gm = sink(tm);
                 auto y = result.values();
                 for (std::size_t i = 0; i < r; ++i) {
                   if (norms[i] > kNormEpsilon) {
                     // d(x/|x|) = (g - y (y.g)) / |x|
                     double dot = 0.0;
                     for (std::size_t j = 0; j < c; ++j) dot += y[i * c + j] * g[i * c + j];
                     for (std::size_t j = 0; j < c; ++j)
                       gm[i * c + j] += (g[i * c + j] - y[i * c + j] * dot) / norms[i];
                   } else {
                     for (std::size_t j = 0; j < c; ++j) gm[i * c + j] += g[i * c + j] / kNormEpsilon;
                   }
                 }
               });
  return result;
}

Tensor layer_norm_rows(const Tensor& m, const Tensor& gamma, const Tensor& beta, double eps) {
  const std::size_t r = m.rows(), c = m.cols();
  if (gamma.numel() != c || beta.numel() != c) {
    throw DimensionError("layer_norm_rows: affine parameters must have " + std::to_string(c) +
                         " entries");
  }
  count_op();
  auto mv = m.values(), gv = gamma.values(), bv = beta.values();
  std::vector<double> xhat(r * c), inv_std(r), out(r * c);
  for (std::size_t i = 0; i < r; ++i) {
    double mu = 0.0;
    for (std::size_t j = 0; j < c; ++j) mu += mv[i * c + j];
    mu /= static_cast<double>(c);
    double var = 0.0;
    for (std::size_t j = 0; j < c; ++j) {
      const double d = mv[i * c + j] - mu;
      var += d * d;
    }
    var /= static_cast<double>(c);
    inv_std[i] = 1.0 / std::sqrt(var + eps);
    for (std::size_t j = 0; j < c; ++j) {
      xhat[i * c + j] = (mv[i * c + j] - mu) * inv_std[i];
      out[i * c + j] = xhat[i * c + j] * gv[j] + bv[j];
    }
  }
  Tensor result(m.shape(), std::move(out));
  Tensor tm = m, tg = gamma, tb = beta;
  maybe_record("layer_norm_rows", {tm, tg, tb}, result,
               [tm, tg, tb, xhat = std::move(xhat), inv_std = std::move(inv_std), r,
                c](Grad g) mutable {
                 auto gamma_v = tg.values();
                 if (auto gg = sink(tg); !gg.empty())
                   for (std::size_t i = 0; i < r; ++i)
                     for (std::size_t j = 0; j < c; ++j) gg[j] += g[i * c + j] * xhat[i * c + j];
                 if (auto gb = sink(tb); !gb.empty())
                   for (std::size_t i = 0; i < r; ++i)
                     for (std::size_t j = 0; j < c; ++j) gb[j] += g[i * c + j];
                 if (auto gm = sink(tm); !gm.empty()) {
                   const double n = static_cast<double>(c);
                   for (std::size_t i = 0; i < r; ++i) {
                     double s1 = 0.0, s2 = 0.0;
                     for (std::size_t j = 0; j < c; ++j) {
                       const double dy = g[i * c + j] * gamma_v[j];
                       s1 += dy;
                       s2 += dy * xhat[i * c + j];
                     }
                     for (std::size_t j = 0; j < c; ++j) {
                       const double dy = g[i * c + j] * gamma_v[j];
                       gm[i * c + j] += inv_std[i] * (dy - s1 / n - xhat[i * c + j] * s2 / n);
                     }
                   }
                 }
               });
  return result;
}

Tensor pairwise_euclidean(const Tensor& q, const Tensor& k) {
  require_matrix(q, "pairwise_euclidean");
  require_matrix(k, "pairwise_euclidean");
  if (q.cols() != k.cols()) {
    throw DimensionError("pairwise_euclidean: channel mismatch " + shape_str(q.shape()) + " vs " +
                         shape_str(k.shape()));
  }
  count_op();
  const std::size_t l = q.rows(), m = k.rows(), c = q.cols();
  auto qv = q.values(), kv = k.values();
  std::vector<double> out(l * m);
  for (std::size_t i = 0; i < l; ++i)
    for (std::size_t j = 0; j < m; ++j) {
      double s = 0.0;
      for (std::size_t ch = 0; ch < c; ++ch) {
        const double d = qv[i * c + ch] - kv[j * c + ch];
        s += d * d;
      }
      out[i * m + j] = std::sqrt(s + kDistanceEpsilon);
    }
  Tensor result = Tensor::matrix(l, m, std::move(out));
  Tensor tq = q, tk = k;
  maybe_record("pairwise_euclidean", {tq, tk}, result, [tq, tk, result, l, m, c](Grad g) mutable {
    auto qv = tq.values(), kv = tk.values(), dv = result.values();
    auto gq = sink(tq);
    auto gk = sink(tk);
    for (std::size_t i = 0; i < l; ++i)
      for (std::size_t j = 0; j < m; ++j) {
        const double w = g[i * m + j] / dv[i * m + j];
        if (w == 0.0) continue;
        for (std::size_t ch = 0; ch < c; ++ch) {
          const double d = (qv[i * c + ch] - kv[j * c + ch]) * w;
          if (!gq.empty()) gq[i * c + ch] += d;
          if (!gk.empty()) gk[j * c + ch] -= d;
        }
      }
  });
  return result;
}

Tensor bilinear_pool(const Tensor& a, const Tensor& b) {
  require_matrix(a, "bilinear_pool");
  require_matrix(b, "bilinear_pool");
  if (a.rows() != b.rows()) throw DimensionError("bilinear_pool: position count mismatch");
  count_op();
  const std::size_t r = a.rows(), c1 = a.cols(), c2 = b.cols();
  const double inv = 1.0 / static_cast<double>(r);
  std::vector<double> out(c1 * c2, 0.0);
  gemm_tn_acc(a.values().data(), b.values().data(), out.data(), c1, r, c2);
  for (auto& x : out) x *= inv;
  Tensor result = Tensor::vector(std::move(out));
  Tensor ta = a, tb = b;
  maybe_record("bilinear_pool", {ta, tb}, result, [ta, tb, r, c1, c2, inv](Grad g) mutable {
    std::vector<double> gs(g.begin(), g.end());
    for (auto& x : gs) x *= inv;
    // out = a^T b / r  =>  da = b gs^T, db = a gs
    if (auto ga = sink(ta); !ga.empty()) gemm_nt_acc(tb.values().data(), gs.data(), ga.data(), r, c2, c1);
    if (auto gb = sink(tb); !gb.empty()) gemm_acc(ta.values().data(), gs.data(), gb.data(), r, c1, c2);
  });
  return result;
}

Tensor cross_entropy(const Tensor& logits, std::span<const int> labels) {
  const std::size_t b = logits.rows(), k = logits.cols();
  if (labels.size() != b) {
    throw DimensionError("cross_entropy: " + std::to_string(labels.size()) + " labels for " +
                         std::to_string(b) + " rows");
  }
  for (int y : labels) {
    if (y < 0 || static_cast<std::size_t>(y) >= k) {
      throw IndexError("cross_entropy: label " + std::to_string(y) + " outside [0, " +
                       std::to_string(k) + ")");
    }
  }
  count_op();
  auto lv = logits.values();
  std::vector<double> logp(b * k);
  double loss = 0.0;
  for (std::size_t i = 0; i < b; ++i) {
    log_softmax_row(lv.data() + i * k, k, logp.data() + i * k);
    loss -= logp[i * k + static_cast<std::size_t>(labels[i])];
  }
  loss /= static_cast<double>(b);
  Tensor result = Tensor::scalar(loss);
  Tensor tl = logits;
  std::vector<int> y(labels.begin(), labels.end());
  maybe_record("cross_entropy", {tl}, result,
               [tl, logp = std::move(logp), y = std::move(y), b, k](Grad g) mutable {
                 auto gl = sink(tl);
                 const double s = g[0] / static_cast<double>(b);
                 for (std::size_t i = 0; i < b; ++i)
                   for (std::size_t j = 0; j < k; ++j) {
                     const double p = std::exp(logp[i * k + j]);
                     const double t = (static_cast<int>(j) == y[i]) ? 1.0 : 0.0;
                     gl[i * k + j] += s * (p - t);
                   }
               });
  return result;
}

Tensor kl_divergence(const Tensor& student_logits, const Tensor& teacher_logits) {
  require_same_shape(student_logits, teacher_logits, "kl_divergence");
  const std::size_t b = student_logits.rows(), k = student_logits.cols();
  count_op();
  std::vector<double> log_ps(b * k), log_pt(b * k);
  double loss = 0.0;
  for (std::size_t i = 0; i < b; ++i) {
    log_softmax_row(student_logits.values().data() + i * k, k, log_ps.data() + i * k);
    log_softmax_row(teacher_logits.values().data() + i * k, k, log_pt.data() + i * k);
    for (std::size_t j = 0; j < k; ++j) {
      const double lt = log_pt[i * k + j];
      loss += std::exp(lt) * (lt - log_ps[i * k + j]);
    }
  }
  loss /= static_cast<double>(b);
  Tensor result = Tensor::scalar(loss);
  Tensor ts = student_logits;
  // Only the student is an input of the recorded node: the teacher is a
  // constant target.
  maybe_record("kl_divergence", {ts}, result,
               [ts, log_ps = std::move(log_ps), log_pt = std::move(log_pt), b, k](Grad g) mutable {
                 auto gs = sink(ts);
                 const double s = g[0] / static_cast<double>(b);
                 for (std::size_t i = 0; i < b * k; ++i)
                   gs[i] += s * (std::exp(log_ps[i]) - std::exp(log_pt[i]));
               });
  return result;
}

Tensor mse_loss(const Tensor& a, const Tensor& b) {
  require_same_shape(a, b, "mse_loss");
  count_op();
  auto av = a.values(), bv = b.values();
  const double n = static_cast<double>(av.size());
  double s = 0.0;
  for (std::size_t i = 0; i < av.size(); ++i) {
    const double d = av[i] - bv[i];
    s += d * d;
  }
  Tensor result = Tensor::scalar(s / n);
  Tensor ta = a, tb = b;
  maybe_record("mse_loss", {ta, tb}, result, [ta, tb, n](Grad g) mutable {
    auto av = ta.values(), bv = tb.values();
    const double s = 2.0 * g[0] / n;
    if (auto ga = sink(ta); !ga.empty())
      for (std::size_t i = 0; i < av.size(); ++i) ga[i] += s * (av[i] - bv[i]);
    if (auto gb = sink(tb); !gb.empty())
      for (std::size_t i = 0; i < av.size(); ++i) gb[i] -= s * (av[i] - bv[i]);
  });
  return result;
}

Tensor dropout(const Tensor& a, double p, std::mt19937_64& rng) {
  if (p < 0.0 || p >= 1.0) throw ConfigError("dropout probability must be in [0, 1)");
  if (p == 0.0) return a;
  count_op();
  std::bernoulli_distribution keep(1.0 - p);
  const double inv = 1.0 / (1.0 - p);
  auto av = a.values();
  std::vector<double> mask(av.size()), out(av.size());
  for (std::size_t i = 0; i < av.size(); ++i) {
    mask[i] = keep(rng) ? inv : 0.0;
    out[i] = av[i] * mask[i];
  }
  Tensor result(a.shape(), std::move(out));
  Tensor ta = a;
  maybe_record("dropout", {ta}, result, [ta, mask = std::move(mask)](Grad g) mutable {
    auto ga = sink(ta);
    for (std::size_t i = 0; i < g.size(); ++i) ga[i] += g[i] * mask[i];
  });
  return result;
}

}  // namespace csim
