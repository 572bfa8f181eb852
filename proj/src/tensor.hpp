#pragma once

#include <cstddef>
#include <cstdint>
#include <functional>
#include <initializer_list>
#include <span>
#include <string_view>
#include <vector>

namespace stark {

class Rng;

using Shape = std::vector<std::size_t>;

std::size_t shape_size(const Shape& shape);

// Dense row-major array of 64-bit floats. Plain value type; differentiation
// happens on Graph nodes that hold copies of these.
class Tensor {
 public:
  Tensor() = default;
  explicit Tensor(Shape shape);
  Tensor(Shape shape, std::vector<double> data);

  static Tensor scalar(double v) { return Tensor({}, {v}); }
  static Tensor vector(std::vector<double> v);
  static Tensor matrix(std::initializer_list<std::initializer_list<double>> rows);
  static Tensor filled(Shape shape, double value);

  const Shape& shape() const noexcept { return shape_; }
  std::size_t rank() const noexcept { return shape_.size(); }
  std::size_t size() const noexcept { return data_.size(); }
  bool empty() const noexcept { return data_.empty(); }

  // Leading dimensions folded into rows; the last dimension is the column count.
  std::size_t rows() const noexcept;
  std::size_t cols() const noexcept;

  std::span<double> data() noexcept { return data_; }
  std::span<const double> data() const noexcept { return data_; }
  std::vector<double>& storage() noexcept { return data_; }

  double& operator[](std::size_t i) noexcept { return data_[i]; }
  double operator[](std::size_t i) const noexcept { return data_[i]; }
  double& at(std::size_t r, std::size_t c) noexcept { return data_[r * cols() + c]; }
  double at(std::size_t r, std::size_t c) const noexcept { return data_[r * cols() + c]; }

  double item() const;

  void fill(double v);
  bool all_finite() const noexcept;
  void require_finite(std::string_view where) const;

  // Bitwise comparison (distinguishes -0.0 from 0.0, treats equal NaN payloads as equal).
  bool bit_equal(const Tensor& other) const noexcept;

  bool operator==(const Tensor& other) const = default;

 private:
  Shape shape_;
  std::vector<double> data_;
};

double max_abs_diff(const Tensor& a, const Tensor& b);

class Graph;

// Handle to a node of a Graph. Cheap to copy; valid while its Graph lives.
class Var {
 public:
  Var() = default;
  Var(Graph* g, std::uint32_t id) : graph_(g), id_(id) {}

  Graph& graph() const noexcept { return *graph_; }
  std::uint32_t id() const noexcept { return id_; }
  bool valid() const noexcept { return graph_ != nullptr; }

  const Tensor& value() const;
  const Shape& shape() const;
  bool requires_grad() const;

 private:
  Graph* graph_ = nullptr;
  std::uint32_t id_ = 0;
};

// Append-only tape. Nodes hold values (and gradients after backward); op
// records hold the local-derivative closures. backward() walks the records in
// reverse append order, each exactly once.
class Graph {
 public:
  // With recording off, ops compute values only (inference mode).
  explicit Graph(bool record = true) : recording_(record) {}

  Graph(const Graph&) = delete;
  Graph& operator=(const Graph&) = delete;

  bool recording() const noexcept { return recording_; }

  Var constant(Tensor value);
  Var variable(Tensor value);

  const Tensor& value(Var v) const { return nodes_[v.id()].value; }
  bool requires_grad(Var v) const { return nodes_[v.id()].requires_grad; }

  // Gradient of the last backward() loss w.r.t. v; zeros if v did not
  // influence the loss.
  Tensor grad(Var v) const;

  // Accumulates d(loss)/d(node) for every requires_grad node. The loss must be
  // a scalar produced by this graph.
  void backward(Var loss);

  std::size_t node_count() const noexcept { return nodes_.size(); }
  std::size_t record_count() const noexcept { return records_.size(); }

  // Op-implementation interface.
  using Backward = std::function<void(Graph&)>;
  Var push(Tensor value, bool requires_grad);
  void record(std::uint32_t output, Backward fn);
  bool any_requires_grad(std::initializer_list<Var> inputs) const;
  const Tensor& grad_of(std::uint32_t id) const { return nodes_[id].grad; }
  // Gradient buffer for id, zero-allocated on first use. nullptr when the
  // node does not require a gradient.
  Tensor* grad_buffer(std::uint32_t id);

 private:
  struct Node {
    Tensor value;
    Tensor grad;
    bool requires_grad = false;
  };
  struct Record {
    std::uint32_t output;
    Backward fn;
  };

  bool recording_;
  std::vector<Node> nodes_;
  std::vector<Record> records_;
};

// Raw kernels, exposed for oracles in tests and for non-graph callers.
// out[m x n] (+)= a[m x k] * b[k x n]
void gemm_nn(const double* a, const double* b, double* out, std::size_t m,
             std::size_t k, std::size_t n, bool accumulate);
// out[m x n] += a[m x k] * b[n x k]^T
void gemm_nt_acc(const double* a, const double* b, double* out, std::size_t m,
                 std::size_t k, std::size_t n);
// out[k x n] += a[m x k]^T * b[m x n]
void gemm_tn_acc(const double* a, const double* b, double* out, std::size_t m,
                 std::size_t k, std::size_t n);

double gelu_scalar(double x);

inline constexpr double kLayerNormEps = 1e-5;

// ---- differentiable ops -------------------------------------------------

Var matmul(Var a, Var b);
Var add(Var a, Var b);
Var sub(Var a, Var b);
Var mul(Var a, Var b);
Var scale(Var a, double c);
// a[r x c] + bias[c] broadcast over rows
Var add_row(Var a, Var bias);
// a[r x c] * v[c] broadcast over rows (diag(v) on the right)
Var mul_cols(Var a, Var v);
// a * gates[index]
Var gate_scale(Var a, Var gates, std::size_t index);
Var gelu(Var x);
Var layer_norm(Var x, Var gain, Var bias, double eps = kLayerNormEps);
// Row-wise softmax(x / tau) and log_softmax(x / tau) over the last dimension.
Var softmax_t(Var x, double tau);
Var log_softmax_t(Var x, double tau);
Var sum(Var x);
// Rows of table selected by indices (embedding lookup, pooling).
Var gather_rows(Var table, std::span<const std::size_t> indices);
// Scaled dot-product attention applied independently on each row segment
// [offsets[s], offsets[s+1]) of q/k/v: softmax(q k^T / sqrt(dk)) v.
Var attention(Var q, Var k, Var v, std::span<const std::size_t> offsets);
// Inverted dropout; identity when rate == 0 or rng == nullptr.
Var dropout(Var x, double rate, Rng* rng);

}  // namespace stark
