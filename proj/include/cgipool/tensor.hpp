#pragma once

#include <Eigen/Core>

#include <cstdint>
#include <functional>
#include <memory>
#include <span>
#include <stdexcept>
#include <string>
#include <tuple>
#include <vector>

namespace cgipool {

// Row-major everywhere: gather/segment/sparse kernels walk rows.
using Mat = Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;

struct TensorError : std::runtime_error {
  using std::runtime_error::runtime_error;
};

/// Compressed-row sparse matrix. Adjacency is never learned, so no gradient
/// ever flows into a SparseMatrix; values are plain data.
struct SparseMatrix {
  Eigen::Index n_rows = 0;
  Eigen::Index n_cols = 0;
  std::vector<std::int64_t> row_ptr;  // size n_rows + 1
  std::vector<std::int64_t> col_idx;  // sorted within each row, no duplicates
  std::vector<double> values;

  static SparseMatrix identity(Eigen::Index n);
  static SparseMatrix from_entries(
      Eigen::Index rows, Eigen::Index cols,
      std::vector<std::tuple<std::int64_t, std::int64_t, double>> entries);

  /// Induced submatrix on `idx` (sorted, distinct, in-bounds).
  SparseMatrix submatrix(std::span<const int> idx) const;

  Mat dense() const;
  std::int64_t nnz() const { return static_cast<std::int64_t>(values.size()); }
  bool is_symmetric(double tol = 0.0) const;
  double diag_abs_sum() const;
  void validate() const;  // throws TensorError on a broken invariant
};

/// While alive, newly created tensors record no tape nodes (cheap
/// forward-only evaluation).
class NoGradGuard {
 public:
  NoGradGuard();
  ~NoGradGuard();
  NoGradGuard(const NoGradGuard&) = delete;
  NoGradGuard& operator=(const NoGradGuard&) = delete;

 private:
  bool prev_;
};

/// Dense matrix value participating in a reverse-mode tape. Copying a Tensor
/// aliases the underlying node; the tape is the DAG of nodes.
class Tensor {
 public:
  struct Node;

  Tensor() = default;

  static Tensor leaf(Mat value, bool requires_grad = false);
  static Tensor scalar(double v, bool requires_grad = false);

  bool defined() const { return node_ != nullptr; }
  Eigen::Index rows() const;
  Eigen::Index cols() const;
  const Mat& value() const;
  /// Mutable storage of a leaf (optimizer updates, finite-difference probes).
  Mat& data();
  /// Accumulated gradient; zeros if no backward pass reached this tensor.
  const Mat& grad() const;
  void zero_grad();
  bool requires_grad() const;
  double item() const;  // value of a 1x1 tensor

  const std::shared_ptr<Node>& node() const { return node_; }
  explicit Tensor(std::shared_ptr<Node> n) : node_(std::move(n)) {}

 private:
  std::shared_ptr<Node> node_;
};

// ---- forward primitives ---------------------------------------------------
Tensor matmul(const Tensor& a, const Tensor& b);
Tensor spmm(const SparseMatrix& a, const Tensor& x);
/// b must match a's shape or be a 1xC row broadcast over a's rows.
Tensor add(const Tensor& a, const Tensor& b);
Tensor sub(const Tensor& a, const Tensor& b);
/// b: same shape as a, an Nx1 column, or a 1xC row (broadcasted product).
Tensor broadcast_mul(const Tensor& a, const Tensor& b);
Tensor relu(const Tensor& x);
Tensor sigmoid(const Tensor& x);
Tensor log(const Tensor& x);  // throws TensorError on a non-positive entry
Tensor softplus(const Tensor& x);
Tensor scalar_mul(const Tensor& x, double c);
Tensor concat_cols(const Tensor& a, const Tensor& b);
/// Rows at `idx`; backward scatters only into the gathered rows.
Tensor gather_rows(const Tensor& x, std::vector<int> idx);
Tensor segment_mean(const Tensor& x, std::span<const int> segments, int n_segments);
/// Ties route the gradient to the lowest maximal row index per column.
Tensor segment_max(const Tensor& x, std::span<const int> segments, int n_segments);
Tensor segment_sum(const Tensor& x, std::span<const int> segments, int n_segments);
Tensor reduce_sum(const Tensor& x);   // 1x1
Tensor reduce_mean(const Tensor& x);  // 1x1
/// Mean over rows of -log softmax(logits)[label], log-sum-exp stabilized.
Tensor cross_entropy(const Tensor& logits, std::span<const int> labels);
/// y_i = |h_i . p| / ||p|| for a learned projection p (f x 1).
Tensor abs_project(const Tensor& h, const Tensor& p);

/// Reverse sweep from a 1x1 loss. Fills grads of every tensor on the tape
/// that requires gradients; off-path leaves keep zero grads.
void backward(const Tensor& loss);

// Numerically stable scalar helpers shared by kernels and losses.
double stable_sigmoid(double x);
double stable_softplus(double x);

}  // namespace cgipool
