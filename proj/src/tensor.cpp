#include "cgipool/tensor.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <sstream>
#include <unordered_set>
#include <utility>

namespace cgipool {

namespace {

thread_local bool g_grad_enabled = true;

std::string shape_of(const Mat& m) {
  std::ostringstream os;
  os << m.rows() << "x" << m.cols();
  return os.str();
}

[[noreturn]] void fail(const std::string& op, const std::string& what) {
  throw TensorError(op + ": " + what);
}

void require_defined(const char* op, const Tensor& t) {
  if (!t.defined()) fail(op, "undefined tensor operand");
}

}  // namespace

double stable_sigmoid(double x) {
  if (x >= 0.0) return 1.0 / (1.0 + std::exp(-x));
  const double e = std::exp(x);
  return e / (1.0 + e);
}

double stable_softplus(double x) {
  // log(1 + e^x) without overflow for large |x|.
  if (x > 0.0) return x + std::log1p(std::exp(-x));
  return std::log1p(std::exp(x));
}

// ---- SparseMatrix ----------------------------------------------------------

SparseMatrix SparseMatrix::identity(Eigen::Index n) {
  SparseMatrix s;
  s.n_rows = s.n_cols = n;
  s.row_ptr.resize(static_cast<std::size_t>(n) + 1);
  s.col_idx.resize(static_cast<std::size_t>(n));
  s.values.assign(static_cast<std::size_t>(n), 1.0);
  for (Eigen::Index i = 0; i < n; ++i) {
    s.row_ptr[static_cast<std::size_t>(i)] = i;
    s.col_idx[static_cast<std::size_t>(i)] = i;
  }
  s.row_ptr[static_cast<std::size_t>(n)] = n;
  return s;
}

SparseMatrix SparseMatrix::from_entries(
    Eigen::Index rows, Eigen::Index cols,
    std::vector<std::tuple<std::int64_t, std::int64_t, double>> entries) {
  for (const auto& [r, c, v] : entries) {
    if (r < 0 || r >= rows || c < 0 || c >= cols) {
      fail("SparseMatrix::from_entries", "entry index out of bounds");
    }
  }
  std::sort(entries.begin(), entries.end(),
            [](const auto& a, const auto& b) {
              return std::tie(std::get<0>(a), std::get<1>(a)) <
                     std::tie(std::get<0>(b), std::get<1>(b));
            });
  SparseMatrix s;
  s.n_rows = rows;
  s.n_cols = cols;
  s.row_ptr.assign(static_cast<std::size_t>(rows) + 1, 0);
  s.col_idx.reserve(entries.size());
  s.values.reserve(entries.size());
  for (std::size_t i = 0; i < entries.size(); ++i) {
    if (i > 0 && std::get<0>(entries[i]) == std::get<0>(entries[i - 1]) &&
        std::get<1>(entries[i]) == std::get<1>(entries[i - 1])) {
      fail("SparseMatrix::from_entries", "duplicate entry");
    }
    s.col_idx.push_back(std::get<1>(entries[i]));
    s.values.push_back(std::get<2>(entries[i]));
    s.row_ptr[static_cast<std::size_t>(std::get<0>(entries[i])) + 1]++;
  }
  for (std::size_t r = 0; r < static_cast<std::size_t>(rows); ++r) {
    s.row_ptr[r + 1] += s.row_ptr[r];
  }
  return s;
}

SparseMatrix SparseMatrix::submatrix(std::span<const int> idx) const {
  std::vector<std::int64_t> remap(static_cast<std::size_t>(n_cols), -1);
  for (std::size_t i = 0; i < idx.size(); ++i) {
    const int v = idx[i];
    if (v < 0 || v >= n_rows || v >= n_cols) {
      fail("SparseMatrix::submatrix", "index out of bounds");
    }
    if (remap[static_cast<std::size_t>(v)] != -1) {
      fail("SparseMatrix::submatrix", "duplicate index");
    }
    if (i > 0 && idx[i] <= idx[i - 1]) {
      fail("SparseMatrix::submatrix", "indices must be sorted ascending");
    }
    remap[static_cast<std::size_t>(v)] = static_cast<std::int64_t>(i);
  }
  SparseMatrix s;
  s.n_rows = s.n_cols = static_cast<Eigen::Index>(idx.size());
  s.row_ptr.assign(idx.size() + 1, 0);
  for (std::size_t i = 0; i < idx.size(); ++i) {
    const std::int64_t r = idx[i];
    for (std::int64_t k = row_ptr[static_cast<std::size_t>(r)];
         k < row_ptr[static_cast<std::size_t>(r) + 1]; ++k) {
      const std::int64_t nc = remap[static_cast<std::size_t>(col_idx[static_cast<std::size_t>(k)])];
      if (nc >= 0) {
        s.col_idx.push_back(nc);  // idx sorted => column order preserved
        s.values.push_back(values[static_cast<std::size_t>(k)]);
      }
    }
    s.row_ptr[i + 1] = static_cast<std::int64_t>(s.col_idx.size());
  }
  return s;
}

Mat SparseMatrix::dense() const {
  Mat d = Mat::Zero(n_rows, n_cols);
  for (Eigen::Index r = 0; r < n_rows; ++r) {
    for (std::int64_t k = row_ptr[static_cast<std::size_t>(r)];
         k < row_ptr[static_cast<std::size_t>(r) + 1]; ++k) {
      d(r, col_idx[static_cast<std::size_t>(k)]) = values[static_cast<std::size_t>(k)];
    }
  }
  return d;
}

bool SparseMatrix::is_symmetric(double tol) const {
  if (n_rows != n_cols) return false;
  Mat d = dense();
  return (d - d.transpose()).cwiseAbs().maxCoeff() <= tol;
}

double SparseMatrix::diag_abs_sum() const {
  double s = 0.0;
  for (Eigen::Index r = 0; r < n_rows; ++r) {
    for (std::int64_t k = row_ptr[static_cast<std::size_t>(r)];
         k < row_ptr[static_cast<std::size_t>(r) + 1]; ++k) {
      if (col_idx[static_cast<std::size_t>(k)] == r) s += std::abs(values[static_cast<std::size_t>(k)]);
    }
  }
  return s;
}

void SparseMatrix::validate() const {
  if (row_ptr.size() != static_cast<std::size_t>(n_rows) + 1 ||
      row_ptr.front() != 0 ||
      row_ptr.back() != static_cast<std::int64_t>(col_idx.size()) ||
      col_idx.size() != values.size()) {
    fail("SparseMatrix::validate", "inconsistent CSR arrays");
  }
  for (Eigen::Index r = 0; r < n_rows; ++r) {
    for (std::int64_t k = row_ptr[static_cast<std::size_t>(r)];
         k < row_ptr[static_cast<std::size_t>(r) + 1]; ++k) {
      const std::int64_t c = col_idx[static_cast<std::size_t>(k)];
      if (c < 0 || c >= n_cols) fail("SparseMatrix::validate", "column index out of bounds");
      if (k > row_ptr[static_cast<std::size_t>(r)] &&
          col_idx[static_cast<std::size_t>(k - 1)] >= c) {
        fail("SparseMatrix::validate", "columns not strictly ascending within a row");
      }
    }
  }
}

// ---- Tensor node ------------------------------------------------------------

struct Tensor::Node {
  Mat value;
  Mat grad;  // empty until the backward sweep materializes it
  bool requires_grad = false;
  std::vector<std::shared_ptr<Node>> parents;
  std::function<void(Node&)> backprop;  // empty for leaves
};

NoGradGuard::NoGradGuard() : prev_(g_grad_enabled) { g_grad_enabled = false; }
NoGradGuard::~NoGradGuard() { g_grad_enabled = prev_; }

Tensor Tensor::leaf(Mat value, bool requires_grad) {
  auto n = std::make_shared<Node>();
  n->value = std::move(value);
  n->requires_grad = requires_grad;
  return Tensor(std::move(n));
}

Tensor Tensor::scalar(double v, bool requires_grad) {
  Mat m(1, 1);
  m(0, 0) = v;
  return leaf(std::move(m), requires_grad);
}

Eigen::Index Tensor::rows() const { return node_->value.rows(); }
Eigen::Index Tensor::cols() const { return node_->value.cols(); }
const Mat& Tensor::value() const { return node_->value; }
Mat& Tensor::data() { return node_->value; }
bool Tensor::requires_grad() const { return node_ && node_->requires_grad; }

const Mat& Tensor::grad() const {
  if (node_->grad.size() == 0) {
    node_->grad = Mat::Zero(node_->value.rows(), node_->value.cols());
  }
  return node_->grad;
}

void Tensor::zero_grad() { node_->grad = Mat(); }

double Tensor::item() const {
  if (rows() != 1 || cols() != 1) {
    fail("Tensor::item", "tensor is " + shape_of(node_->value) + ", not 1x1");
  }
  return node_->value(0, 0);
}

namespace {

using Node = Tensor::Node;

// Accumulates into a parent's gradient, materializing on first touch.
void acc_grad(Node& p, const Mat& g) {
  if (!p.requires_grad) return;
  if (p.grad.size() == 0) {
    p.grad = g;
  } else {
    p.grad += g;
  }
}

Tensor make_op(Mat value, std::vector<Tensor> parents,
               std::function<void(Node&)> backprop) {
  auto n = std::make_shared<Node>();
  n->value = std::move(value);
  bool rg = false;
  if (g_grad_enabled) {
    for (const auto& p : parents) rg = rg || p.requires_grad();
  }
  n->requires_grad = rg;
  if (rg) {
    n->parents.reserve(parents.size());
    for (auto& p : parents) n->parents.push_back(p.node());
    n->backprop = std::move(backprop);
  }
  return Tensor(std::move(n));
}

void check_same_shape(const char* op, const Tensor& a, const Tensor& b) {
  if (a.rows() != b.rows() || a.cols() != b.cols()) {
    fail(op, "shape mismatch " + shape_of(a.value()) + " vs " + shape_of(b.value()));
  }
}

}  // namespace

// ---- operations -------------------------------------------------------------

Tensor matmul(const Tensor& a, const Tensor& b) {
  require_defined("matmul", a);
  require_defined("matmul", b);
  if (a.cols() != b.rows()) {
    fail("matmul", "shape mismatch " + shape_of(a.value()) + " * " + shape_of(b.value()));
  }
  Mat y = a.value() * b.value();
  return make_op(std::move(y), {a, b}, [](Node& self) {
    Node& pa = *self.parents[0];
    Node& pb = *self.parents[1];
    if (pa.requires_grad) acc_grad(pa, self.grad * pb.value.transpose());
    if (pb.requires_grad) acc_grad(pb, pa.value.transpose() * self.grad);
  });
}

Tensor spmm(const SparseMatrix& a, const Tensor& x) {
  require_defined("spmm", x);
  if (a.n_cols != x.rows()) {
    fail("spmm", "shape mismatch sparse " + std::to_string(a.n_rows) + "x" +
                     std::to_string(a.n_cols) + " * " + shape_of(x.value()));
  }
  Mat y = Mat::Zero(a.n_rows, x.cols());
  for (Eigen::Index r = 0; r < a.n_rows; ++r) {
    for (std::int64_t k = a.row_ptr[static_cast<std::size_t>(r)];
         k < a.row_ptr[static_cast<std::size_t>(r) + 1]; ++k) {
      y.row(r) += a.values[static_cast<std::size_t>(k)] *
                  x.value().row(a.col_idx[static_cast<std::size_t>(k)]);
    }
  }
  std::shared_ptr<const SparseMatrix> ap;
  if (g_grad_enabled && x.requires_grad()) ap = std::make_shared<const SparseMatrix>(a);
  return make_op(std::move(y), {x}, [ap](Node& self) {
    Node& px = *self.parents[0];
    if (!px.requires_grad) return;
    Mat gx = Mat::Zero(px.value.rows(), px.value.cols());
    for (Eigen::Index r = 0; r < ap->n_rows; ++r) {
      for (std::int64_t k = ap->row_ptr[static_cast<std::size_t>(r)];
           k < ap->row_ptr[static_cast<std::size_t>(r) + 1]; ++k) {
        gx.row(ap->col_idx[static_cast<std::size_t>(k)]) +=
            ap->values[static_cast<std::size_t>(k)] * self.grad.row(r);
      }
    }
    acc_grad(px, gx);
  });
}

Tensor add(const Tensor& a, const Tensor& b) {
  require_defined("add", a);
  require_defined("add", b);
  const bool row_broadcast = b.rows() == 1 && a.cols() == b.cols() && a.rows() != 1;
  if (!row_broadcast) check_same_shape("add", a, b);
  Mat y = row_broadcast
              ? Mat(a.value().rowwise() + b.value().row(0))
              : Mat(a.value() + b.value());
  return make_op(std::move(y), {a, b}, [row_broadcast](Node& self) {
    acc_grad(*self.parents[0], self.grad);
    Node& pb = *self.parents[1];
    if (!pb.requires_grad) return;
    if (row_broadcast) {
      acc_grad(pb, Mat(self.grad.colwise().sum()));
    } else {
      acc_grad(pb, self.grad);
    }
  });
}

Tensor sub(const Tensor& a, const Tensor& b) {
  require_defined("sub", a);
  require_defined("sub", b);
  check_same_shape("sub", a, b);
  Mat y = a.value() - b.value();
  return make_op(std::move(y), {a, b}, [](Node& self) {
    acc_grad(*self.parents[0], self.grad);
    Node& pb = *self.parents[1];
    if (pb.requires_grad) acc_grad(pb, Mat(-self.grad));
  });
}

Tensor broadcast_mul(const Tensor& a, const Tensor& b) {
  require_defined("broadcast_mul", a);
  require_defined("broadcast_mul", b);
  enum class Mode { kSame, kCol, kRow } mode;
  if (b.rows() == a.rows() && b.cols() == a.cols()) {
    mode = Mode::kSame;
  } else if (b.cols() == 1 && b.rows() == a.rows()) {
    mode = Mode::kCol;
  } else if (b.rows() == 1 && b.cols() == a.cols()) {
    mode = Mode::kRow;
  } else {
    fail("broadcast_mul",
         "shape mismatch " + shape_of(a.value()) + " vs " + shape_of(b.value()));
  }
  Mat y;
  switch (mode) {
    case Mode::kSame: y = a.value().cwiseProduct(b.value()); break;
    case Mode::kCol: y = a.value().array().colwise() * b.value().col(0).array(); break;
    case Mode::kRow: y = a.value().array().rowwise() * b.value().row(0).array(); break;
  }
  return make_op(std::move(y), {a, b}, [mode](Node& self) {
    Node& pa = *self.parents[0];
    Node& pb = *self.parents[1];
    if (pa.requires_grad) {
      switch (mode) {
        case Mode::kSame:
          acc_grad(pa, self.grad.cwiseProduct(pb.value));
          break;
        case Mode::kCol:
          acc_grad(pa, Mat(self.grad.array().colwise() * pb.value.col(0).array()));
          break;
        case Mode::kRow:
          acc_grad(pa, Mat(self.grad.array().rowwise() * pb.value.row(0).array()));
          break;
      }
    }
    if (pb.requires_grad) {
      const Mat prod = self.grad.cwiseProduct(pa.value);
      switch (mode) {
        case Mode::kSame: acc_grad(pb, prod); break;
        case Mode::kCol: acc_grad(pb, Mat(prod.rowwise().sum())); break;
        case Mode::kRow: acc_grad(pb, Mat(prod.colwise().sum())); break;
      }
    }
  });
}

Tensor relu(const Tensor& x) {
  require_defined("relu", x);
  Mat y = x.value().cwiseMax(0.0);
  return make_op(std::move(y), {x}, [](Node& self) {
    Node& px = *self.parents[0];
    if (!px.requires_grad) return;
    acc_grad(px, Mat((px.value.array() > 0.0).cast<double>() * self.grad.array()));
  });
}

Tensor sigmoid(const Tensor& x) {
  require_defined("sigmoid", x);
  Mat y = x.value().unaryExpr([](double v) { return stable_sigmoid(v); });
  Mat saved = y;
  return make_op(std::move(y), {x}, [saved](Node& self) {
    Node& px = *self.parents[0];
    if (!px.requires_grad) return;
    acc_grad(px, Mat(self.grad.array() * saved.array() * (1.0 - saved.array())));
  });
}

Tensor log(const Tensor& x) {
  require_defined("log", x);
  if ((x.value().array() <= 0.0).any()) {
    fail("log", "non-positive entry; use a stabilized form in loss code");
  }
  Mat y = x.value().array().log();
  return make_op(std::move(y), {x}, [](Node& self) {
    Node& px = *self.parents[0];
    if (!px.requires_grad) return;
    acc_grad(px, Mat(self.grad.array() / px.value.array()));
  });
}

Tensor softplus(const Tensor& x) {
  require_defined("softplus", x);
  Mat y = x.value().unaryExpr([](double v) { return stable_softplus(v); });
  return make_op(std::move(y), {x}, [](Node& self) {
    Node& px = *self.parents[0];
    if (!px.requires_grad) return;
    Mat d = px.value.unaryExpr([](double v) { return stable_sigmoid(v); });
    acc_grad(px, Mat(self.grad.cwiseProduct(d)));
  });
}

Tensor scalar_mul(const Tensor& x, double c) {
  require_defined("scalar_mul", x);
  Mat y = c * x.value();
  return make_op(std::move(y), {x}, [c](Node& self) {
    acc_grad(*self.parents[0], Mat(c * self.grad));
  });
}

Tensor concat_cols(const Tensor& a, const Tensor& b) {
  require_defined("concat_cols", a);
  require_defined("concat_cols", b);
  if (a.rows() != b.rows()) {
    fail("concat_cols",
         "row mismatch " + shape_of(a.value()) + " vs " + shape_of(b.value()));
  }
  Mat y(a.rows(), a.cols() + b.cols());
  y.leftCols(a.cols()) = a.value();
  y.rightCols(b.cols()) = b.value();
  const Eigen::Index ca = a.cols();
  return make_op(std::move(y), {a, b}, [ca](Node& self) {
    Node& pa = *self.parents[0];
    Node& pb = *self.parents[1];
    if (pa.requires_grad) acc_grad(pa, Mat(self.grad.leftCols(ca)));
    if (pb.requires_grad) acc_grad(pb, Mat(self.grad.rightCols(self.grad.cols() - ca)));
  });
}

Tensor gather_rows(const Tensor& x, std::vector<int> idx) {
  require_defined("gather_rows", x);
  for (int i : idx) {
    if (i < 0 || i >= x.rows()) fail("gather_rows", "row index out of bounds");
  }
  Mat y(static_cast<Eigen::Index>(idx.size()), x.cols());
  for (std::size_t r = 0; r < idx.size(); ++r) {
    y.row(static_cast<Eigen::Index>(r)) = x.value().row(idx[r]);
  }
  return make_op(std::move(y), {x}, [idx = std::move(idx)](Node& self) {
    Node& px = *self.parents[0];
    if (!px.requires_grad) return;
    Mat gx = Mat::Zero(px.value.rows(), px.value.cols());
    for (std::size_t r = 0; r < idx.size(); ++r) {
      gx.row(idx[r]) += self.grad.row(static_cast<Eigen::Index>(r));
    }
    acc_grad(px, gx);
  });
}

namespace {

std::vector<std::int64_t> segment_counts(const char* op, std::span<const int> segments,
                                         int n_segments, Eigen::Index n_rows) {
  if (static_cast<Eigen::Index>(segments.size()) != n_rows) {
    fail(op, "segment id count does not match row count");
  }
  std::vector<std::int64_t> counts(static_cast<std::size_t>(n_segments), 0);
  for (int s : segments) {
    if (s < 0 || s >= n_segments) fail(op, "segment id out of range");
    counts[static_cast<std::size_t>(s)]++;
  }
  for (std::int64_t c : counts) {
    if (c == 0) fail(op, "empty segment");
  }
  return counts;
}

}  // namespace

Tensor segment_mean(const Tensor& x, std::span<const int> segments, int n_segments) {
  require_defined("segment_mean", x);
  auto counts = segment_counts("segment_mean", segments, n_segments, x.rows());
  Mat y = Mat::Zero(n_segments, x.cols());
  for (Eigen::Index r = 0; r < x.rows(); ++r) {
    y.row(segments[static_cast<std::size_t>(r)]) += x.value().row(r);
  }
  for (int s = 0; s < n_segments; ++s) {
    y.row(s) /= static_cast<double>(counts[static_cast<std::size_t>(s)]);
  }
  std::vector<int> seg(segments.begin(), segments.end());
  return make_op(std::move(y), {x}, [seg = std::move(seg), counts](Node& self) {
    Node& px = *self.parents[0];
    if (!px.requires_grad) return;
    Mat gx(px.value.rows(), px.value.cols());
    for (Eigen::Index r = 0; r < gx.rows(); ++r) {
      const int s = seg[static_cast<std::size_t>(r)];
      gx.row(r) = self.grad.row(s) / static_cast<double>(counts[static_cast<std::size_t>(s)]);
    }
    acc_grad(px, gx);
  });
}

Tensor segment_max(const Tensor& x, std::span<const int> segments, int n_segments) {
  require_defined("segment_max", x);
  segment_counts("segment_max", segments, n_segments, x.rows());
  Mat y = Mat::Constant(n_segments, x.cols(), -std::numeric_limits<double>::infinity());
  // argmax per (segment, column); first maximal row wins ties.
  std::vector<int> arg(static_cast<std::size_t>(n_segments) * static_cast<std::size_t>(x.cols()), -1);
  for (Eigen::Index r = 0; r < x.rows(); ++r) {
    const int s = segments[static_cast<std::size_t>(r)];
    for (Eigen::Index c = 0; c < x.cols(); ++c) {
      if (x.value()(r, c) > y(s, c)) {
        y(s, c) = x.value()(r, c);
        arg[static_cast<std::size_t>(s) * static_cast<std::size_t>(x.cols()) +
            static_cast<std::size_t>(c)] = static_cast<int>(r);
      }
    }
  }
  return make_op(std::move(y), {x}, [arg = std::move(arg)](Node& self) {
    Node& px = *self.parents[0];
    if (!px.requires_grad) return;
    Mat gx = Mat::Zero(px.value.rows(), px.value.cols());
    const Eigen::Index cols = gx.cols();
    for (Eigen::Index s = 0; s < self.grad.rows(); ++s) {
      for (Eigen::Index c = 0; c < cols; ++c) {
        gx(arg[static_cast<std::size_t>(s) * static_cast<std::size_t>(cols) +
               static_cast<std::size_t>(c)],
           c) += self.grad(s, c);
      }
    }
    acc_grad(px, gx);
  });
}

Tensor segment_sum(const Tensor& x, std::span<const int> segments, int n_segments) {
  require_defined("segment_sum", x);
  segment_counts("segment_sum", segments, n_segments, x.rows());
  Mat y = Mat::Zero(n_segments, x.cols());
  for (Eigen::Index r = 0; r < x.rows(); ++r) {
    y.row(segments[static_cast<std::size_t>(r)]) += x.value().row(r);
  }
  std::vector<int> seg(segments.begin(), segments.end());
  return make_op(std::move(y), {x}, [seg = std::move(seg)](Node& self) {
    Node& px = *self.parents[0];
    if (!px.requires_grad) return;
    Mat gx(px.value.rows(), px.value.cols());
    for (Eigen::Index r = 0; r < gx.rows(); ++r) {
      gx.row(r) = self.grad.row(seg[static_cast<std::size_t>(r)]);
    }
    acc_grad(px, gx);
  });
}

Tensor reduce_sum(const Tensor& x) {
  require_defined("reduce_sum", x);
  Mat y(1, 1);
  y(0, 0) = x.value().sum();
  return make_op(std::move(y), {x}, [](Node& self) {
    Node& px = *self.parents[0];
    if (!px.requires_grad) return;
    acc_grad(px, Mat(Mat::Constant(px.value.rows(), px.value.cols(), self.grad(0, 0))));
  });
}

Tensor reduce_mean(const Tensor& x) {
  require_defined("reduce_mean", x);
  const double n = static_cast<double>(x.rows() * x.cols());
  Mat y(1, 1);
  y(0, 0) = x.value().sum() / n;
  return make_op(std::move(y), {x}, [n](Node& self) {
    Node& px = *self.parents[0];
    if (!px.requires_grad) return;
    acc_grad(px, Mat(Mat::Constant(px.value.rows(), px.value.cols(), self.grad(0, 0) / n)));
  });
}

Tensor cross_entropy(const Tensor& logits, std::span<const int> labels) {
  require_defined("cross_entropy", logits);
  if (static_cast<Eigen::Index>(labels.size()) != logits.rows()) {
    fail("cross_entropy", "label count does not match logit rows");
  }
  const Eigen::Index n = logits.rows();
  const Eigen::Index c = logits.cols();
  Mat softmax(n, c);
  double loss = 0.0;
  for (Eigen::Index i = 0; i < n; ++i) {
    const int lab = labels[static_cast<std::size_t>(i)];
    if (lab < 0 || lab >= c) fail("cross_entropy", "label out of range");
    const double m = logits.value().row(i).maxCoeff();
    const Eigen::Array<double, 1, Eigen::Dynamic> e =
        (logits.value().row(i).array() - m).exp();
    const double z = e.sum();
    softmax.row(i) = (e / z).matrix();
    loss += m + std::log(z) - logits.value()(i, lab);
  }
  loss /= static_cast<double>(n);
  Mat y(1, 1);
  y(0, 0) = loss;
  std::vector<int> labs(labels.begin(), labels.end());
  return make_op(std::move(y), {logits},
                 [softmax, labs = std::move(labs)](Node& self) {
                   Node& pl = *self.parents[0];
                   if (!pl.requires_grad) return;
                   Mat g = softmax;
                   for (Eigen::Index i = 0; i < g.rows(); ++i) {
                     g(i, labs[static_cast<std::size_t>(i)]) -= 1.0;
                   }
                   g *= self.grad(0, 0) / static_cast<double>(g.rows());
                   acc_grad(pl, g);
                 });
}

Tensor abs_project(const Tensor& h, const Tensor& p) {
  require_defined("abs_project", h);
  require_defined("abs_project", p);
  if (p.cols() != 1 || p.rows() != h.cols()) {
    fail("abs_project", "projection must be " + std::to_string(h.cols()) + "x1, got " +
                            shape_of(p.value()));
  }
  const double norm = p.value().norm();
  if (norm == 0.0) fail("abs_project", "zero projection vector");
  Mat t = h.value() * p.value();  // n x 1
  Mat y = t.cwiseAbs() / norm;
  return make_op(std::move(y), {h, p}, [t, norm](Node& self) {
    Node& ph = *self.parents[0];
    Node& pp = *self.parents[1];
    Mat sign = t.unaryExpr([](double v) { return v > 0.0 ? 1.0 : (v < 0.0 ? -1.0 : 0.0); });
    Mat gs = self.grad.cwiseProduct(sign) / norm;  // n x 1
    if (ph.requires_grad) acc_grad(ph, Mat(gs * pp.value.transpose()));
    if (pp.requires_grad) {
      Mat gp = ph.value.transpose() * gs;
      const double coeff =
          self.grad.cwiseProduct(t.cwiseAbs()).sum() / (norm * norm * norm);
      gp -= coeff * pp.value;
      acc_grad(pp, gp);
    }
  });
}

// ---- reverse sweep ----------------------------------------------------------

void backward(const Tensor& loss) {
  if (!loss.defined()) fail("backward", "undefined loss tensor");
  if (loss.rows() != 1 || loss.cols() != 1) {
    fail("backward", "loss must be 1x1, got " + shape_of(loss.value()));
  }
  if (!loss.requires_grad()) return;  // constant loss: nothing reachable

  // Iterative post-order DFS over parents; reversed it yields consumers
  // before producers.
  std::vector<Node*> order;
  std::unordered_set<Node*> visited;
  std::vector<std::pair<Node*, std::size_t>> stack;
  stack.emplace_back(loss.node().get(), 0);
  visited.insert(loss.node().get());
  while (!stack.empty()) {
    auto& [node, next] = stack.back();
    if (next < node->parents.size()) {
      Node* parent = node->parents[next++].get();
      if (parent->requires_grad && visited.insert(parent).second) {
        stack.emplace_back(parent, 0);
      }
    } else {
      order.push_back(node);
      stack.pop_back();
    }
  }

  for (Node* n : order) n->grad = Mat();
  loss.node()->grad = Mat::Ones(1, 1);
  for (auto it = order.rbegin(); it != order.rend(); ++it) {
    Node* n = *it;
    if (n->backprop && n->grad.size() != 0) n->backprop(*n);
  }
}

}  // namespace cgipool
