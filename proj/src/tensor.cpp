#include "tensor.hpp"

#include <algorithm>
#include <cmath>
#include <cstring>
#include <numbers>
#include <sstream>
#include <utility>

#include "error.hpp"
#include "rng.hpp"

namespace stark {

std::size_t shape_size(const Shape& shape) {
  std::size_t n = 1;
  for (std::size_t d : shape) n *= d;
  return n;
}

namespace {

std::string shape_str(const Shape& s) {
  std::ostringstream os;
  os << '[';
  for (std::size_t i = 0; i < s.size(); ++i) os << (i ? "x" : "") << s[i];
  os << ']';
  return os.str();
}

void require_same_shape(const Tensor& a, const Tensor& b, const char* op) {
  if (a.shape() != b.shape()) {
    fail(ErrorCode::dimension, std::string(op) + ": shapes " + shape_str(a.shape()) +
                                   " and " + shape_str(b.shape()) + " differ");
  }
}

void require_same_graph(Var a, Var b, const char* op) {
  if (&a.graph() != &b.graph()) {
    fail(ErrorCode::contract, std::string(op) + ": operands belong to different graphs");
  }
}

}  // namespace

// ---- Tensor ---------------------------------------------------------------

Tensor::Tensor(Shape shape) : shape_(std::move(shape)), data_(shape_size(shape_), 0.0) {}

Tensor::Tensor(Shape shape, std::vector<double> data)
    : shape_(std::move(shape)), data_(std::move(data)) {
  if (data_.size() != shape_size(shape_)) {
    fail(ErrorCode::dimension, "tensor of shape " + shape_str(shape_) + " given " +
                                   std::to_string(data_.size()) + " elements");
  }
}

Tensor Tensor::vector(std::vector<double> v) {
  const std::size_t n = v.size();
  return Tensor({n}, std::move(v));
}

Tensor Tensor::matrix(std::initializer_list<std::initializer_list<double>> rows) {
  const std::size_t r = rows.size();
  const std::size_t c = r ? rows.begin()->size() : 0;
  std::vector<double> data;
  data.reserve(r * c);
  for (const auto& row : rows) {
    if (row.size() != c) fail(ErrorCode::dimension, "ragged matrix literal");
    data.insert(data.end(), row.begin(), row.end());
  }
  return Tensor({r, c}, std::move(data));
}

Tensor Tensor::filled(Shape shape, double value) {
  Tensor t(std::move(shape));
  t.fill(value);
  return t;
}

std::size_t Tensor::rows() const noexcept {
  if (shape_.size() <= 1) return 1;
  std::size_t r = 1;
  for (std::size_t i = 0; i + 1 < shape_.size(); ++i) r *= shape_[i];
  return r;
}

std::size_t Tensor::cols() const noexcept {
  return shape_.empty() ? 1 : shape_.back();
}

double Tensor::item() const {
  if (data_.size() != 1) fail(ErrorCode::contract, "item() on non-scalar tensor " + shape_str(shape_));
  return data_[0];
}

void Tensor::fill(double v) { std::fill(data_.begin(), data_.end(), v); }

bool Tensor::all_finite() const noexcept {
  for (double v : data_) {
    if (!std::isfinite(v)) return false;
  }
  return true;
}

void Tensor::require_finite(std::string_view where) const {
  if (!all_finite()) fail(ErrorCode::numeric, "non-finite value produced by " + std::string(where));
}

bool Tensor::bit_equal(const Tensor& other) const noexcept {
  return shape_ == other.shape_ && data_.size() == other.data_.size() &&
         (data_.empty() ||
          std::memcmp(data_.data(), other.data_.data(), data_.size() * sizeof(double)) == 0);
}

double max_abs_diff(const Tensor& a, const Tensor& b) {
  require_same_shape(a, b, "max_abs_diff");
  double m = 0.0;
  for (std::size_t i = 0; i < a.size(); ++i) m = std::max(m, std::abs(a[i] - b[i]));
  return m;
}

// ---- Var / Graph ------------------------------------------------------------

const Tensor& Var::value() const { return graph_->value(*this); }
const Shape& Var::shape() const { return graph_->value(*this).shape(); }
bool Var::requires_grad() const { return graph_->requires_grad(*this); }

Var Graph::constant(Tensor value) { return push(std::move(value), false); }

Var Graph::variable(Tensor value) { return push(std::move(value), recording_); }

Var Graph::push(Tensor value, bool requires_grad) {
  value.require_finite("graph operation");
  nodes_.push_back(Node{std::move(value), Tensor{}, requires_grad && recording_});
  return Var(this, static_cast<std::uint32_t>(nodes_.size() - 1));
}

void Graph::record(std::uint32_t output, Backward fn) {
  if (recording_) records_.push_back(Record{output, std::move(fn)});
}

bool Graph::any_requires_grad(std::initializer_list<Var> inputs) const {
  if (!recording_) return false;
  for (Var v : inputs) {
    if (nodes_[v.id()].requires_grad) return true;
  }
  return false;
}

Tensor* Graph::grad_buffer(std::uint32_t id) {
  Node& n = nodes_[id];
  if (!n.requires_grad) return nullptr;
  if (n.grad.empty() && !n.value.empty()) n.grad = Tensor(n.value.shape());
  return &n.grad;
}

Tensor Graph::grad(Var v) const {
  const Node& n = nodes_[v.id()];
  if (n.grad.empty()) return Tensor(n.value.shape());
  return n.grad;
}

void Graph::backward(Var loss) {
  if (&loss.graph() != this) fail(ErrorCode::contract, "backward: loss belongs to another graph");
  if (!recording_) fail(ErrorCode::contract, "backward on a non-recording graph");
  const Node& l = nodes_[loss.id()];
  if (l.value.size() != 1) {
    fail(ErrorCode::contract, "backward: loss must be a scalar, got shape " + shape_str(l.value.shape()));
  }
  for (Node& n : nodes_) n.grad = Tensor{};
  if (!l.requires_grad) return;
  grad_buffer(loss.id())->fill(1.0);
  for (auto it = records_.rbegin(); it != records_.rend(); ++it) {
    if (nodes_[it->output].grad.empty()) continue;
    it->fn(*this);
  }
}

// ---- kernels ----------------------------------------------------------------

void gemm_nn(const double* a, const double* b, double* out, std::size_t m, std::size_t k,
             std::size_t n, bool accumulate) {
  for (std::size_t i = 0; i < m; ++i) {
    double* o = out + i * n;
    if (!accumulate) std::fill(o, o + n, 0.0);
    const double* ai = a + i * k;
    for (std::size_t p = 0; p < k; ++p) {
      const double aip = ai[p];
      if (aip == 0.0) continue;
      const double* bp = b + p * n;
      for (std::size_t j = 0; j < n; ++j) o[j] += aip * bp[j];
    }
  }
}

void gemm_nt_acc(const double* a, const double* b, double* out, std::size_t m, std::size_t k,
                 std::size_t n) {
  // Transpose b once so the inner loop runs over contiguous output columns.
  std::vector<double> bt(k * n);
  for (std::size_t j = 0; j < n; ++j) {
    for (std::size_t p = 0; p < k; ++p) bt[p * n + j] = b[j * k + p];
  }
  gemm_nn(a, bt.data(), out, m, k, n, true);
}

void gemm_tn_acc(const double* a, const double* b, double* out, std::size_t m, std::size_t k,
                 std::size_t n) {
  for (std::size_t i = 0; i < m; ++i) {
    const double* ai = a + i * k;
    const double* bi = b + i * n;
    for (std::size_t p = 0; p < k; ++p) {
      const double aip = ai[p];
      if (aip == 0.0) continue;
      double* o = out + p * n;
      for (std::size_t j = 0; j < n; ++j) o[j] += aip * bi[j];
    }
  }
}

double gelu_scalar(double x) { return 0.5 * x * (1.0 + std::erf(x * std::numbers::sqrt2 / 2.0)); }

// ---- ops --------------------------------------------------------------------

Var matmul(Var a, Var b) {
  require_same_graph(a, b, "matmul");
  Graph& g = a.graph();
  const Tensor& A = a.value();
  const Tensor& B = b.value();
  if (A.rank() != 2 || B.rank() != 2 || A.shape()[1] != B.shape()[0]) {
    fail(ErrorCode::dimension,
         "matmul: cannot multiply " + shape_str(A.shape()) + " by " + shape_str(B.shape()));
  }
  const std::size_t m = A.shape()[0], k = A.shape()[1], n = B.shape()[1];
  Tensor out({m, n});
  gemm_nn(A.data().data(), B.data().data(), out.data().data(), m, k, n, false);
  const bool rg = g.any_requires_grad({a, b});
  Var y = g.push(std::move(out), rg);
  if (rg) {
    g.record(y.id(), [a, b, y, m, k, n](Graph& g) {
      const double* dy = g.grad_of(y.id()).data().data();
      if (Tensor* da = g.grad_buffer(a.id())) {
        gemm_nt_acc(dy, g.value(b).data().data(), da->data().data(), m, n, k);
      }
      if (Tensor* db = g.grad_buffer(b.id())) {
        gemm_tn_acc(g.value(a).data().data(), dy, db->data().data(), m, k, n);
      }
    });
  }
  return y;
}

namespace {

template <typename Fwd>
Var elementwise_binary(Var a, Var b, const char* name, Fwd fwd, double da_sign, double db_sign,
                       bool product) {
  require_same_graph(a, b, name);
  Graph& g = a.graph();
  require_same_shape(a.value(), b.value(), name);
  Tensor out(a.shape());
  const auto& A = a.value().data();
  const auto& B = b.value().data();
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = fwd(A[i], B[i]);
  const bool rg = g.any_requires_grad({a, b});
  Var y = g.push(std::move(out), rg);
  if (rg) {
    g.record(y.id(), [a, b, y, da_sign, db_sign, product](Graph& g) {
      const Tensor& dy = g.grad_of(y.id());
      if (Tensor* da = g.grad_buffer(a.id())) {
        if (product) {
          const Tensor& B = g.value(b);
          for (std::size_t i = 0; i < dy.size(); ++i) (*da)[i] += dy[i] * B[i];
        } else {
          for (std::size_t i = 0; i < dy.size(); ++i) (*da)[i] += da_sign * dy[i];
        }
      }
      if (Tensor* db = g.grad_buffer(b.id())) {
        if (product) {
          const Tensor& A = g.value(a);
          for (std::size_t i = 0; i < dy.size(); ++i) (*db)[i] += dy[i] * A[i];
        } else {
          for (std::size_t i = 0; i < dy.size(); ++i) (*db)[i] += db_sign * dy[i];
        }
      }
    });
  }
  return y;
}

}  // namespace

Var add(Var a, Var b) {
  return elementwise_binary(a, b, "add", [](double x, double y) { return x + y; }, 1.0, 1.0, false);
}

Var sub(Var a, Var b) {
  return elementwise_binary(a, b, "sub", [](double x, double y) { return x - y; }, 1.0, -1.0, false);
}

Var mul(Var a, Var b) {
  return elementwise_binary(a, b, "mul", [](double x, double y) { return x * y; }, 0.0, 0.0, true);
}

Var scale(Var a, double c) {
  Graph& g = a.graph();
  Tensor out = a.value();
  for (double& v : out.data()) v *= c;
  const bool rg = g.any_requires_grad({a});
  Var y = g.push(std::move(out), rg);
  if (rg) {
    g.record(y.id(), [a, y, c](Graph& g) {
      const Tensor& dy = g.grad_of(y.id());
      if (Tensor* da = g.grad_buffer(a.id())) {
        for (std::size_t i = 0; i < dy.size(); ++i) (*da)[i] += c * dy[i];
      }
    });
  }
  return y;
}

Var add_row(Var a, Var bias) {
  require_same_graph(a, bias, "add_row");
  Graph& g = a.graph();
  const Tensor& A = a.value();
  const Tensor& bv = bias.value();
  const std::size_t r = A.rows(), c = A.cols();
  if (bv.size() != c) fail(ErrorCode::dimension, "add_row: bias length does not match columns");
  Tensor out = A;
  for (std::size_t i = 0; i < r; ++i)
    for (std::size_t j = 0; j < c; ++j) out[i * c + j] += bv[j];
  const bool rg = g.any_requires_grad({a, bias});
  Var y = g.push(std::move(out), rg);
  if (rg) {
    g.record(y.id(), [a, bias, y, r, c](Graph& g) {
      const Tensor& dy = g.grad_of(y.id());
      if (Tensor* da = g.grad_buffer(a.id())) {
        for (std::size_t i = 0; i < dy.size(); ++i) (*da)[i] += dy[i];
      }
      if (Tensor* db = g.grad_buffer(bias.id())) {
        for (std::size_t i = 0; i < r; ++i)
          for (std::size_t j = 0; j < c; ++j) (*db)[j] += dy[i * c + j];
      }
    });
  }
  return y;
}

Var mul_cols(Var a, Var v) {
  require_same_graph(a, v, "mul_cols");
  Graph& g = a.graph();
  const Tensor& A = a.value();
  const Tensor& V = v.value();
  const std::size_t r = A.rows(), c = A.cols();
  if (V.size() != c) fail(ErrorCode::dimension, "mul_cols: vector length does not match columns");
  Tensor out = A;
  for (std::size_t i = 0; i < r; ++i)
    for (std::size_t j = 0; j < c; ++j) out[i * c + j] *= V[j];
  const bool rg = g.any_requires_grad({a, v});
  Var y = g.push(std::move(out), rg);
  if (rg) {
    g.record(y.id(), [a, v, y, r, c](Graph& g) {
      const Tensor& dy = g.grad_of(y.id());
      if (Tensor* da = g.grad_buffer(a.id())) {
        const Tensor& V = g.value(v);
        for (std::size_t i = 0; i < r; ++i)
          for (std::size_t j = 0; j < c; ++j) (*da)[i * c + j] += dy[i * c + j] * V[j];
      }
      if (Tensor* dv = g.grad_buffer(v.id())) {
        const Tensor& A = g.value(a);
        for (std::size_t i = 0; i < r; ++i)
          for (std::size_t j = 0; j < c; ++j) (*dv)[j] += dy[i * c + j] * A[i * c + j];
      }
    });
  }
  return y;
}

Var gate_scale(Var a, Var gates, std::size_t index) {
  require_same_graph(a, gates, "gate_scale");
  Graph& g = a.graph();
  if (index >= gates.value().size()) fail(ErrorCode::dimension, "gate_scale: gate index out of range");
  const double s = gates.value()[index];
  Tensor out = a.value();
  for (double& x : out.data()) x *= s;
  const bool rg = g.any_requires_grad({a, gates});
  Var y = g.push(std::move(out), rg);
  if (rg) {
    g.record(y.id(), [a, gates, y, index](Graph& g) {
      const Tensor& dy = g.grad_of(y.id());
      if (Tensor* da = g.grad_buffer(a.id())) {
        const double s = g.value(gates)[index];
        for (std::size_t i = 0; i < dy.size(); ++i) (*da)[i] += dy[i] * s;
      }
      if (Tensor* dg = g.grad_buffer(gates.id())) {
        const Tensor& A = g.value(a);
        double acc = 0.0;
        for (std::size_t i = 0; i < dy.size(); ++i) acc += dy[i] * A[i];
        (*dg)[index] += acc;
      }
    });
  }
  return y;
}

Var gelu(Var x) {
  Graph& g = x.graph();
  Tensor out = x.value();
  for (double& v : out.data()) v = gelu_scalar(v);
  const bool rg = g.any_requires_grad({x});
  Var y = g.push(std::move(out), rg);
  if (rg) {
    g.record(y.id(), [x, y](Graph& g) {
      const Tensor& dy = g.grad_of(y.id());
      const Tensor& X = g.value(x);
      Tensor* dx = g.grad_buffer(x.id());
      const double inv_sqrt_2pi = 1.0 / std::sqrt(2.0 * std::numbers::pi);
      for (std::size_t i = 0; i < dy.size(); ++i) {
        const double v = X[i];
        const double cdf = 0.5 * (1.0 + std::erf(v * std::numbers::sqrt2 / 2.0));
        const double pdf = inv_sqrt_2pi * std::exp(-0.5 * v * v);
        (*dx)[i] += dy[i] * (cdf + v * pdf);
      }
    });
  }
  return y;
}

Var layer_norm(Var x, Var gain, Var bias, double eps) {
  require_same_graph(x, gain, "layer_norm");
  require_same_graph(x, bias, "layer_norm");
  Graph& g = x.graph();
  const Tensor& X = x.value();
  const std::size_t r = X.rows(), c = X.cols();
  if (gain.value().size() != c || bias.value().size() != c) {
    fail(ErrorCode::dimension, "layer_norm: gain/bias length does not match last dimension");
  }
  const Tensor& G = gain.value();
  const Tensor& B = bias.value();
  Tensor out(X.shape());
  std::vector<double> xhat(X.size());
  std::vector<double> rstd(r);
  for (std::size_t i = 0; i < r; ++i) {
    const double* row = X.data().data() + i * c;
    double mean = 0.0;
    for (std::size_t j = 0; j < c; ++j) mean += row[j];
    mean /= static_cast<double>(c);
    double var = 0.0;
    for (std::size_t j = 0; j < c; ++j) var += (row[j] - mean) * (row[j] - mean);
    var /= static_cast<double>(c);
    rstd[i] = 1.0 / std::sqrt(var + eps);
    for (std::size_t j = 0; j < c; ++j) {
      const double h = (row[j] - mean) * rstd[i];
      xhat[i * c + j] = h;
      out[i * c + j] = G[j] * h + B[j];
    }
  }
  const bool rg = g.any_requires_grad({x, gain, bias});
  Var y = g.push(std::move(out), rg);
  if (rg) {
    g.record(y.id(), [x, gain, bias, y, r, c, xhat = std::move(xhat),
                      rstd = std::move(rstd)](Graph& g) {
      const Tensor& dy = g.grad_of(y.id());
      if (Tensor* dg = g.grad_buffer(gain.id())) {
        for (std::size_t i = 0; i < r; ++i)
          for (std::size_t j = 0; j < c; ++j) (*dg)[j] += dy[i * c + j] * xhat[i * c + j];
      }
      if (Tensor* db = g.grad_buffer(bias.id())) {
        for (std::size_t i = 0; i < r; ++i)
          for (std::size_t j = 0; j < c; ++j) (*db)[j] += dy[i * c + j];
      }
      if (Tensor* dx = g.grad_buffer(x.id())) {
        const Tensor& G = g.value(gain);
        const double inv_c = 1.0 / static_cast<double>(c);
        for (std::size_t i = 0; i < r; ++i) {
          double mean_dh = 0.0, mean_dh_h = 0.0;
          for (std::size_t j = 0; j < c; ++j) {
            const double dh = dy[i * c + j] * G[j];
            mean_dh += dh;
            mean_dh_h += dh * xhat[i * c + j];
          }
          mean_dh *= inv_c;
          mean_dh_h *= inv_c;
          for (std::size_t j = 0; j < c; ++j) {
            const double dh = dy[i * c + j] * G[j];
            (*dx)[i * c + j] += rstd[i] * (dh - mean_dh - xhat[i * c + j] * mean_dh_h);
          }
        }
      }
    });
  }
  return y;
}

namespace {

// Row-wise softmax of x / tau, max-subtracted.
void softmax_rows(const Tensor& x, double tau, Tensor& p, std::vector<double>* logsumexp) {
  const std::size_t r = x.rows(), c = x.cols();
  for (std::size_t i = 0; i < r; ++i) {
    const double* row = x.data().data() + i * c;
    double mx = row[0] / tau;
    for (std::size_t j = 1; j < c; ++j) mx = std::max(mx, row[j] / tau);
    double z = 0.0;
    for (std::size_t j = 0; j < c; ++j) {
      const double e = std::exp(row[j] / tau - mx);
      p[i * c + j] = e;
      z += e;
    }
    for (std::size_t j = 0; j < c; ++j) p[i * c + j] /= z;
    if (logsumexp) (*logsumexp)[i] = mx + std::log(z);
  }
}

void require_tau(double tau) {
  if (!(tau > 0.0) || !std::isfinite(tau)) fail(ErrorCode::parameter, "temperature must be positive");
}

}  // namespace

Var softmax_t(Var x, double tau) {
  require_tau(tau);
  Graph& g = x.graph();
  const Tensor& X = x.value();
  if (X.empty()) fail(ErrorCode::dimension, "softmax_t: empty input");
  Tensor p(X.shape());
  softmax_rows(X, tau, p, nullptr);
  const bool rg = g.any_requires_grad({x});
  Var y = g.push(std::move(p), rg);
  if (rg) {
    g.record(y.id(), [x, y, tau](Graph& g) {
      const Tensor& dy = g.grad_of(y.id());
      const Tensor& P = g.value(y);
      Tensor* dx = g.grad_buffer(x.id());
      const std::size_t r = P.rows(), c = P.cols();
      for (std::size_t i = 0; i < r; ++i) {
        double dot = 0.0;
        for (std::size_t j = 0; j < c; ++j) dot += dy[i * c + j] * P[i * c + j];
        for (std::size_t j = 0; j < c; ++j)
          (*dx)[i * c + j] += P[i * c + j] * (dy[i * c + j] - dot) / tau;
      }
    });
  }
  return y;
}

Var log_softmax_t(Var x, double tau) {
  require_tau(tau);
  Graph& g = x.graph();
  const Tensor& X = x.value();
  if (X.empty()) fail(ErrorCode::dimension, "log_softmax_t: empty input");
  const std::size_t r = X.rows(), c = X.cols();
  Tensor p(X.shape());
  std::vector<double> lse(r);
  softmax_rows(X, tau, p, &lse);
  Tensor out(X.shape());
  for (std::size_t i = 0; i < r; ++i)
    for (std::size_t j = 0; j < c; ++j) out[i * c + j] = X[i * c + j] / tau - lse[i];
  const bool rg = g.any_requires_grad({x});
  Var y = g.push(std::move(out), rg);
  if (rg) {
    g.record(y.id(), [x, y, tau, p = std::move(p), r, c](Graph& g) {
      const Tensor& dy = g.grad_of(y.id());
      Tensor* dx = g.grad_buffer(x.id());
      for (std::size_t i = 0; i < r; ++i) {
        double total = 0.0;
        for (std::size_t j = 0; j < c; ++j) total += dy[i * c + j];
        for (std::size_t j = 0; j < c; ++j)
          (*dx)[i * c + j] += (dy[i * c + j] - p[i * c + j] * total) / tau;
      }
    });
  }
  return y;
}

Var sum(Var x) {
  Graph& g = x.graph();
  double s = 0.0;
  for (double v : x.value().data()) s += v;
  const bool rg = g.any_requires_grad({x});
  Var y = g.push(Tensor::scalar(s), rg);
  if (rg) {
    g.record(y.id(), [x, y](Graph& g) {
      const double dy = g.grad_of(y.id())[0];
      Tensor* dx = g.grad_buffer(x.id());
      for (double& v : dx->data()) v += dy;
    });
  }
  return y;
}

Var gather_rows(Var table, std::span<const std::size_t> indices) {
  Graph& g = table.graph();
  const Tensor& T = table.value();
  const std::size_t n = T.rows(), c = T.cols();
  Tensor out({indices.size(), c});
  for (std::size_t i = 0; i < indices.size(); ++i) {
    if (indices[i] >= n) fail(ErrorCode::input, "gather_rows: index " + std::to_string(indices[i]) + " out of range");
    std::copy_n(T.data().data() + indices[i] * c, c, out.data().data() + i * c);
  }
  const bool rg = g.any_requires_grad({table});
  Var y = g.push(std::move(out), rg);
  if (rg) {
    g.record(y.id(), [table, y, idx = std::vector<std::size_t>(indices.begin(), indices.end()),
                      c](Graph& g) {
      const Tensor& dy = g.grad_of(y.id());
      Tensor* dt = g.grad_buffer(table.id());
      for (std::size_t i = 0; i < idx.size(); ++i)
        for (std::size_t j = 0; j < c; ++j) (*dt)[idx[i] * c + j] += dy[i * c + j];
    });
  }
  return y;
}

Var attention(Var q, Var k, Var v, std::span<const std::size_t> offsets) {
  require_same_graph(q, k, "attention");
  require_same_graph(q, v, "attention");
  Graph& g = q.graph();
  const Tensor& Q = q.value();
  const Tensor& K = k.value();
  const Tensor& V = v.value();
  if (Q.rank() != 2 || K.shape() != Q.shape() || V.rank() != 2 || V.shape()[0] != Q.shape()[0]) {
    fail(ErrorCode::dimension, "attention: incompatible q/k/v shapes");
  }
  if (offsets.size() < 2 || offsets.front() != 0 || offsets.back() != Q.shape()[0]) {
    fail(ErrorCode::dimension, "attention: segment offsets do not cover the rows");
  }
  const std::size_t dk = Q.shape()[1], dv = V.shape()[1];
  const double sc = 1.0 / std::sqrt(static_cast<double>(dk));
  // Attention weights of every segment, concatenated (segment s occupies len_s^2 entries).
  std::vector<double> probs;
  std::vector<std::size_t> prob_off{0};
  for (std::size_t s = 0; s + 1 < offsets.size(); ++s) {
    const std::size_t len = offsets[s + 1] - offsets[s];
    prob_off.push_back(prob_off.back() + len * len);
  }
  probs.resize(prob_off.back());
  Tensor out({Q.shape()[0], dv});
  for (std::size_t s = 0; s + 1 < offsets.size(); ++s) {
    const std::size_t base = offsets[s], len = offsets[s + 1] - offsets[s];
    if (len == 0) continue;
    double* P = probs.data() + prob_off[s];
    const double* Qs = Q.data().data() + base * dk;
    const double* Ks = K.data().data() + base * dk;
    std::fill(P, P + len * len, 0.0);
    gemm_nt_acc(Qs, Ks, P, len, dk, len);
    for (std::size_t i = 0; i < len; ++i) {
      double* row = P + i * len;
      double mx = row[0] * sc;
      for (std::size_t j = 1; j < len; ++j) mx = std::max(mx, row[j] * sc);
      double z = 0.0;
      for (std::size_t j = 0; j < len; ++j) {
        row[j] = std::exp(row[j] * sc - mx);
        z += row[j];
      }
      for (std::size_t j = 0; j < len; ++j) row[j] /= z;
    }
    gemm_nn(P, V.data().data() + base * dv, out.data().data() + base * dv, len, len, dv, false);
  }
  const bool rg = g.any_requires_grad({q, k, v});
  Var y = g.push(std::move(out), rg);
  if (rg) {
    g.record(y.id(), [q, k, v, y, dk, dv, sc, probs = std::move(probs),
                      prob_off = std::move(prob_off),
                      offs = std::vector<std::size_t>(offsets.begin(), offsets.end())](Graph& g) {
      const Tensor& dO = g.grad_of(y.id());
      const Tensor& Q = g.value(q);
      const Tensor& K = g.value(k);
      const Tensor& V = g.value(v);
      Tensor* dQ = g.grad_buffer(q.id());
      Tensor* dK = g.grad_buffer(k.id());
      Tensor* dV = g.grad_buffer(v.id());
      std::vector<double> dP;
      for (std::size_t s = 0; s + 1 < offs.size(); ++s) {
        const std::size_t base = offs[s], len = offs[s + 1] - offs[s];
        if (len == 0) continue;
        const double* P = probs.data() + prob_off[s];
        const double* dOs = dO.data().data() + base * dv;
        if (dV) gemm_tn_acc(P, dOs, dV->data().data() + base * dv, len, len, dv);
        if (!dQ && !dK) continue;
        dP.assign(len * len, 0.0);
        gemm_nt_acc(dOs, V.data().data() + base * dv, dP.data(), len, dv, len);
        for (std::size_t i = 0; i < len; ++i) {
          double dot = 0.0;
          for (std::size_t j = 0; j < len; ++j) dot += dP[i * len + j] * P[i * len + j];
          for (std::size_t j = 0; j < len; ++j)
            dP[i * len + j] = P[i * len + j] * (dP[i * len + j] - dot) * sc;
        }
        if (dQ) gemm_nn(dP.data(), K.data().data() + base * dk, dQ->data().data() + base * dk, len, len, dk, true);
        if (dK) gemm_tn_acc(dP.data(), Q.data().data() + base * dk, dK->data().data() + base * dk, len, len, dk);
      }
    });
  }
  return y;
}

Var dropout(Var x, double rate, Rng* rng) {
  if (rate < 0.0 || rate >= 1.0) fail(ErrorCode::parameter, "dropout rate must lie in [0, 1)");
  if (rate == 0.0 || rng == nullptr) return x;
  Graph& g = x.graph();
  Tensor mask(x.shape());
  const double keep = 1.0 / (1.0 - rate);
  for (double& m : mask.data()) m = rng->uniform() < rate ? 0.0 : keep;
  return mul(x, g.constant(std::move(mask)));
}

}  // namespace stark
