#include "tdciv/tape.hpp"

#include <Eigen/Core>
#include <cmath>
#include <cstring>

#include "tdciv/errors.hpp"

namespace tdciv::ad {
namespace {

using MatRM = Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
using MapRM = Eigen::Map<MatRM>;
using CMapRM = Eigen::Map<const MatRM>;

// The three gemm variants delegate to single-threaded Eigen: for fixed operand
// shapes the kernel's accumulation order is fixed, so results stay bit-stable
// run to run on the same build.

// C[n,m] += A[n,k] * B[k,m].
void matmul_nn_acc(const double* a, const double* b, double* c, std::size_t n, std::size_t k,
                   std::size_t m) {
  const auto ni = static_cast<Eigen::Index>(n);
  const auto ki = static_cast<Eigen::Index>(k);
  const auto mi = static_cast<Eigen::Index>(m);
  MapRM(c, ni, mi).noalias() += CMapRM(a, ni, ki) * CMapRM(b, ki, mi);
}

// C[n,k] += G[n,m] * B[k,m]^T.
void matmul_nt_acc(const double* g, const double* b, double* c, std::size_t n, std::size_t k,
                   std::size_t m) {
  const auto ni = static_cast<Eigen::Index>(n);
  const auto ki = static_cast<Eigen::Index>(k);
  const auto mi = static_cast<Eigen::Index>(m);
  MapRM(c, ni, ki).noalias() += CMapRM(g, ni, mi) * CMapRM(b, ki, mi).transpose();
}

// C[k,m] += A[n,k]^T * G[n,m].
void matmul_tn_acc(const double* a, const double* g, double* c, std::size_t n, std::size_t k,
                   std::size_t m) {
  const auto ni = static_cast<Eigen::Index>(n);
  const auto ki = static_cast<Eigen::Index>(k);
  const auto mi = static_cast<Eigen::Index>(m);
  MapRM(c, ki, mi).noalias() += CMapRM(a, ni, ki).transpose() * CMapRM(g, ni, mi);
}

double stable_sigmoid(double x) {
  if (x >= 0.0) return 1.0 / (1.0 + std::exp(-x));
  const double e = std::exp(x);
  return e / (1.0 + e);
}

double stable_softplus(double x) {
  if (x > 0.0) return x + std::log1p(std::exp(-x));
  return std::log1p(std::exp(x));
}

void require(bool ok, const char* what, const std::string& detail) {
  if (!ok) throw ShapeError(std::string(what) + ": " + detail);
}

}  // namespace

Tape::Id Tape::push(Node n) {
  nodes_.push_back(std::move(n));
  return static_cast<Id>(nodes_.size() - 1);
}

Tape::Id Tape::input(Array value) {
  Node n;
  n.grad = value;
  n.grad.fill(0.0);
  n.value = std::move(value);
  n.op = Op::kLeaf;
  return push(std::move(n));
}

Tape::Id Tape::add(Id a, Id b) {
  require(val_of(a).same_shape(val_of(b)), "add",
          val_of(a).shape_str() + " vs " + val_of(b).shape_str());
  Node n;
  n.value = val_of(a);
  const Array& vb = val_of(b);
  for (std::size_t i = 0; i < n.value.size(); ++i) n.value[i] += vb[i];
  n.grad = n.value;
  n.grad.fill(0.0);
  n.op = Op::kAdd;
  n.parent = {a, b, 0};
  n.n_parent = 2;
  return push(std::move(n));
}

Tape::Id Tape::sub(Id a, Id b) {
  require(val_of(a).same_shape(val_of(b)), "sub",
          val_of(a).shape_str() + " vs " + val_of(b).shape_str());
  Node n;
  n.value = val_of(a);
  const Array& vb = val_of(b);
  for (std::size_t i = 0; i < n.value.size(); ++i) n.value[i] -= vb[i];
  n.grad = n.value;
  n.grad.fill(0.0);
  n.op = Op::kSub;
  n.parent = {a, b, 0};
  n.n_parent = 2;
  return push(std::move(n));
}

Tape::Id Tape::mul(Id a, Id b) {
  require(val_of(a).same_shape(val_of(b)), "mul",
          val_of(a).shape_str() + " vs " + val_of(b).shape_str());
  Node n;
  n.value = val_of(a);
  const Array& vb = val_of(b);
  for (std::size_t i = 0; i < n.value.size(); ++i) n.value[i] *= vb[i];
  n.grad = n.value;
  n.grad.fill(0.0);
  n.op = Op::kMul;
  n.parent = {a, b, 0};
  n.n_parent = 2;
  return push(std::move(n));
}

Tape::Id Tape::neg(Id a) { return scale(a, -1.0); }

Tape::Id Tape::scale(Id a, double c) {
  Node n;
  n.value = val_of(a);
  for (std::size_t i = 0; i < n.value.size(); ++i) n.value[i] *= c;
  n.grad = n.value;
  n.grad.fill(0.0);
  n.op = Op::kScale;
  n.parent = {a, 0, 0};
  n.n_parent = 1;
  n.c = c;
  return push(std::move(n));
}

Tape::Id Tape::add_const(Id a, double c) {
  Node n;
  n.value = val_of(a);
  for (std::size_t i = 0; i < n.value.size(); ++i) n.value[i] += c;
  n.grad = n.value;
  n.grad.fill(0.0);
  n.op = Op::kAddConst;
  n.parent = {a, 0, 0};
  n.n_parent = 1;
  n.c = c;
  return push(std::move(n));
}

Tape::Id Tape::matmul(Id a, Id b) {
  const Array& va = val_of(a);
  const Array& vb = val_of(b);
  require(va.rank() == 2 && vb.rank() == 2, "matmul",
          "operands must be rank 2, got " + va.shape_str() + " and " + vb.shape_str());
  require(va.cols() == vb.rows(), "matmul",
          "inner dims differ: " + va.shape_str() + " x " + vb.shape_str());
  Node n;
  n.value = Array::zeros(va.rows(), vb.cols());
  matmul_nn_acc(va.data(), vb.data(), n.value.data(), va.rows(), va.cols(), vb.cols());
  n.grad = n.value;
  n.grad.fill(0.0);
  n.op = Op::kMatMul;
  n.parent = {a, b, 0};
  n.n_parent = 2;
  return push(std::move(n));
}

Tape::Id Tape::affine(Id x, Id w, Id b) {
  const Array& vx = val_of(x);
  const Array& vw = val_of(w);
  const Array& vb = val_of(b);
  require(vx.rank() == 2 && vw.rank() == 2, "affine",
          "x and W must be rank 2, got " + vx.shape_str() + " and " + vw.shape_str());
  require(vx.cols() == vw.rows(), "affine",
          "inner dims differ: " + vx.shape_str() + " x " + vw.shape_str());
  require(vb.rank() == 1 && vb.size() == vw.cols(), "affine",
          "bias shape " + vb.shape_str() + " must be [" + std::to_string(vw.cols()) + "]");
  Node n;
  n.value = Array::zeros(vx.rows(), vw.cols());
  const std::size_t m = vw.cols();
  for (std::size_t i = 0; i < vx.rows(); ++i)
    std::memcpy(n.value.data() + i * m, vb.data(), m * sizeof(double));
  matmul_nn_acc(vx.data(), vw.data(), n.value.data(), vx.rows(), vx.cols(), m);
  n.grad = n.value;
  n.grad.fill(0.0);
  n.op = Op::kAffine;
  n.parent = {x, w, b};
  n.n_parent = 3;
  return push(std::move(n));
}

Tape::Id Tape::concat_cols(Id a, Id b) {
  const Array& va = val_of(a);
  const Array& vb = val_of(b);
  require(va.rank() == 2 && vb.rank() == 2 && va.rows() == vb.rows(), "concat_cols",
          va.shape_str() + " vs " + vb.shape_str());
  Node n;
  const std::size_t rows = va.rows(), ca = va.cols(), cb = vb.cols();
  n.value = Array::zeros(rows, ca + cb);
  for (std::size_t i = 0; i < rows; ++i) {
    std::memcpy(n.value.data() + i * (ca + cb), va.data() + i * ca, ca * sizeof(double));
    std::memcpy(n.value.data() + i * (ca + cb) + ca, vb.data() + i * cb, cb * sizeof(double));
  }
  n.grad = n.value;
  n.grad.fill(0.0);
  n.op = Op::kConcatCols;
  n.parent = {a, b, 0};
  n.n_parent = 2;
  n.aux0 = static_cast<std::uint32_t>(ca);
  return push(std::move(n));
}

Tape::Id Tape::slice_cols(Id a, std::size_t col_begin, std::size_t col_end) {
  const Array& va = val_of(a);
  require(va.rank() == 2, "slice_cols", "operand must be rank 2, got " + va.shape_str());
  require(col_begin < col_end && col_end <= va.cols(), "slice_cols",
          "range [" + std::to_string(col_begin) + "," + std::to_string(col_end) + ") of " +
              va.shape_str());
  Node n;
  const std::size_t rows = va.rows(), w = col_end - col_begin;
  n.value = Array::zeros(rows, w);
  for (std::size_t i = 0; i < rows; ++i)
    std::memcpy(n.value.data() + i * w, va.data() + i * va.cols() + col_begin,
                w * sizeof(double));
  n.grad = n.value;
  n.grad.fill(0.0);
  n.op = Op::kSliceCols;
  n.parent = {a, 0, 0};
  n.n_parent = 1;
  n.aux0 = static_cast<std::uint32_t>(col_begin);
  n.aux1 = static_cast<std::uint32_t>(col_end);
  return push(std::move(n));
}

Tape::Id Tape::tile_rows(Id row, std::size_t n_rows) {
  const Array& v = val_of(row);
  require(v.rank() == 1, "tile_rows", "operand must be rank 1, got " + v.shape_str());
  Node n;
  const std::size_t m = v.size();
  n.value = Array::zeros(n_rows, m);
  for (std::size_t i = 0; i < n_rows; ++i)
    std::memcpy(n.value.data() + i * m, v.data(), m * sizeof(double));
  n.grad = n.value;
  n.grad.fill(0.0);
  n.op = Op::kTileRows;
  n.parent = {row, 0, 0};
  n.n_parent = 1;
  return push(std::move(n));
}

Tape::Id Tape::sigmoid(Id a) {
  Node n;
  n.value = val_of(a);
  for (std::size_t i = 0; i < n.value.size(); ++i) n.value[i] = stable_sigmoid(n.value[i]);
  n.grad = n.value;
  n.grad.fill(0.0);
  n.op = Op::kSigmoid;
  n.parent = {a, 0, 0};
  n.n_parent = 1;
  return push(std::move(n));
}

Tape::Id Tape::tanh(Id a) {
  Node n;
  n.value = val_of(a);
  for (std::size_t i = 0; i < n.value.size(); ++i) n.value[i] = std::tanh(n.value[i]);
  n.grad = n.value;
  n.grad.fill(0.0);
  n.op = Op::kTanh;
  n.parent = {a, 0, 0};
  n.n_parent = 1;
  return push(std::move(n));
}

Tape::Id Tape::exp(Id a) {
  Node n;
  n.value = val_of(a);
  for (std::size_t i = 0; i < n.value.size(); ++i) {
    if (n.value[i] > 709.0)
      throw DomainError("exp: argument " + std::to_string(n.value[i]) + " at index " +
                        std::to_string(i) + " overflows");
    n.value[i] = std::exp(n.value[i]);
  }
  n.grad = n.value;
  n.grad.fill(0.0);
  n.op = Op::kExp;
  n.parent = {a, 0, 0};
  n.n_parent = 1;
  return push(std::move(n));
}

Tape::Id Tape::log(Id a) {
  Node n;
  n.value = val_of(a);
  for (std::size_t i = 0; i < n.value.size(); ++i) {
    if (!(n.value[i] > 0.0))
      throw DomainError("log: argument " + std::to_string(n.value[i]) + " at index " +
                        std::to_string(i) + " is not positive");
    n.value[i] = std::log(n.value[i]);
  }
  n.grad = n.value;
  n.grad.fill(0.0);
  n.op = Op::kLog;
  n.parent = {a, 0, 0};
  n.n_parent = 1;
  return push(std::move(n));
}

Tape::Id Tape::square(Id a) {
  Node n;
  n.value = val_of(a);
  for (std::size_t i = 0; i < n.value.size(); ++i) n.value[i] *= n.value[i];
  n.grad = n.value;
  n.grad.fill(0.0);
  n.op = Op::kSquare;
  n.parent = {a, 0, 0};
  n.n_parent = 1;
  return push(std::move(n));
}

Tape::Id Tape::abs(Id a) {
  Node n;
  n.value = val_of(a);
  for (std::size_t i = 0; i < n.value.size(); ++i) n.value[i] = std::fabs(n.value[i]);
  n.grad = n.value;
  n.grad.fill(0.0);
  n.op = Op::kAbs;
  n.parent = {a, 0, 0};
  n.n_parent = 1;
  return push(std::move(n));
}

Tape::Id Tape::softplus(Id a) {
  Node n;
  n.value = val_of(a);
  for (std::size_t i = 0; i < n.value.size(); ++i) n.value[i] = stable_softplus(n.value[i]);
  n.grad = n.value;
  n.grad.fill(0.0);
  n.op = Op::kSoftplus;
  n.parent = {a, 0, 0};
  n.n_parent = 1;
  return push(std::move(n));
}

Tape::Id Tape::reciprocal(Id a) {
  Node n;
  n.value = val_of(a);
  for (std::size_t i = 0; i < n.value.size(); ++i) {
    if (n.value[i] == 0.0)
      throw DomainError("reciprocal: zero argument at index " + std::to_string(i));
    n.value[i] = 1.0 / n.value[i];
  }
  n.grad = n.value;
  n.grad.fill(0.0);
  n.op = Op::kReciprocal;
  n.parent = {a, 0, 0};
  n.n_parent = 1;
  return push(std::move(n));
}

Tape::Id Tape::sum(Id a) {
  Node n;
  const Array& v = val_of(a);
  double s = 0.0;
  for (std::size_t i = 0; i < v.size(); ++i) s += v[i];
  n.value = Array::scalar(s);
  n.grad = Array::scalar(0.0);
  n.op = Op::kSum;
  n.parent = {a, 0, 0};
  n.n_parent = 1;
  return push(std::move(n));
}

Tape::Id Tape::mean(Id a) {
  const Array& v = val_of(a);
  if (v.size() == 0) throw ContractError("mean: empty operand");
  Node n;
  double s = 0.0;
  for (std::size_t i = 0; i < v.size(); ++i) s += v[i];
  n.value = Array::scalar(s / static_cast<double>(v.size()));
  n.grad = Array::scalar(0.0);
  n.op = Op::kMean;
  n.parent = {a, 0, 0};
  n.n_parent = 1;
  return push(std::move(n));
}

void Tape::zero_grad() {
  for (Node& n : nodes_) n.grad.fill(0.0);
}

void Tape::clear() { nodes_.clear(); }

void Tape::backward(Id root) {
  if (root >= nodes_.size()) throw ContractError("backward: root id out of range");
  if (!nodes_[root].value.is_scalar())
    throw ContractError("backward: root must be scalar, got shape " +
                        nodes_[root].value.shape_str());
  nodes_[root].grad[0] = 1.0;

  std::vector<char> reached(root + 1, 0);
  reached[root] = 1;

  for (Id id = root;; --id) {
    Node& n = nodes_[id];
    if (reached[id]) {
      for (std::uint8_t p = 0; p < n.n_parent; ++p) reached[n.parent[p]] = 1;
      const Array& g = n.grad;
      switch (n.op) {
        case Op::kLeaf:
          break;
        case Op::kAdd: {
          Array& ga = nodes_[n.parent[0]].grad;
          Array& gb = nodes_[n.parent[1]].grad;
          for (std::size_t i = 0; i < g.size(); ++i) ga[i] += g[i];
          for (std::size_t i = 0; i < g.size(); ++i) gb[i] += g[i];
          break;
        }
        case Op::kSub: {
          Array& ga = nodes_[n.parent[0]].grad;
          Array& gb = nodes_[n.parent[1]].grad;
          for (std::size_t i = 0; i < g.size(); ++i) ga[i] += g[i];
          for (std::size_t i = 0; i < g.size(); ++i) gb[i] -= g[i];
          break;
        }
        case Op::kMul: {
          const Array& va = nodes_[n.parent[0]].value;
          const Array& vb = nodes_[n.parent[1]].value;
          Array& ga = nodes_[n.parent[0]].grad;
          Array& gb = nodes_[n.parent[1]].grad;
          for (std::size_t i = 0; i < g.size(); ++i) ga[i] += g[i] * vb[i];
          for (std::size_t i = 0; i < g.size(); ++i) gb[i] += g[i] * va[i];
          break;
        }
        case Op::kNeg:
          break;  // represented as kScale
        case Op::kScale: {
          Array& ga = nodes_[n.parent[0]].grad;
          for (std::size_t i = 0; i < g.size(); ++i) ga[i] += n.c * g[i];
          break;
        }
        case Op::kAddConst: {
          Array& ga = nodes_[n.parent[0]].grad;
          for (std::size_t i = 0; i < g.size(); ++i) ga[i] += g[i];
          break;
        }
        case Op::kMatMul: {
          const Array& va = nodes_[n.parent[0]].value;
          const Array& vb = nodes_[n.parent[1]].value;
          Array& ga = nodes_[n.parent[0]].grad;
          Array& gb = nodes_[n.parent[1]].grad;
          matmul_nt_acc(g.data(), vb.data(), ga.data(), va.rows(), va.cols(), vb.cols());
          matmul_tn_acc(va.data(), g.data(), gb.data(), va.rows(), va.cols(), vb.cols());
          break;
        }
        case Op::kAffine: {
          const Array& vx = nodes_[n.parent[0]].value;
          const Array& vw = nodes_[n.parent[1]].value;
          Array& gx = nodes_[n.parent[0]].grad;
          Array& gw = nodes_[n.parent[1]].grad;
          Array& gb = nodes_[n.parent[2]].grad;
          matmul_nt_acc(g.data(), vw.data(), gx.data(), vx.rows(), vx.cols(), vw.cols());
          matmul_tn_acc(vx.data(), g.data(), gw.data(), vx.rows(), vx.cols(), vw.cols());
          const std::size_t m = vw.cols();
          for (std::size_t i = 0; i < vx.rows(); ++i)
            for (std::size_t j = 0; j < m; ++j) gb[j] += g[i * m + j];
          break;
        }
        case Op::kConcatCols: {
          Array& ga = nodes_[n.parent[0]].grad;
          Array& gb = nodes_[n.parent[1]].grad;
          const std::size_t ca = n.aux0;
          const std::size_t total = g.cols();
          const std::size_t cb = total - ca;
          for (std::size_t i = 0; i < g.rows(); ++i) {
            for (std::size_t j = 0; j < ca; ++j) ga[i * ca + j] += g[i * total + j];
            for (std::size_t j = 0; j < cb; ++j) gb[i * cb + j] += g[i * total + ca + j];
          }
          break;
        }
        case Op::kSliceCols: {
          Array& ga = nodes_[n.parent[0]].grad;
          const std::size_t pc = nodes_[n.parent[0]].value.cols();
          const std::size_t w = n.aux1 - n.aux0;
          for (std::size_t i = 0; i < g.rows(); ++i)
            for (std::size_t j = 0; j < w; ++j) ga[i * pc + n.aux0 + j] += g[i * w + j];
          break;
        }
        case Op::kTileRows: {
          Array& ga = nodes_[n.parent[0]].grad;
          const std::size_t m = ga.size();
          for (std::size_t i = 0; i < g.rows(); ++i)
            for (std::size_t j = 0; j < m; ++j) ga[j] += g[i * m + j];
          break;
        }
        case Op::kSigmoid: {
          const Array& v = n.value;
          Array& ga = nodes_[n.parent[0]].grad;
          for (std::size_t i = 0; i < g.size(); ++i) ga[i] += g[i] * v[i] * (1.0 - v[i]);
          break;
        }
        case Op::kTanh: {
          const Array& v = n.value;
          Array& ga = nodes_[n.parent[0]].grad;
          for (std::size_t i = 0; i < g.size(); ++i) ga[i] += g[i] * (1.0 - v[i] * v[i]);
          break;
        }
        case Op::kExp: {
          const Array& v = n.value;
          Array& ga = nodes_[n.parent[0]].grad;
          for (std::size_t i = 0; i < g.size(); ++i) ga[i] += g[i] * v[i];
          break;
        }
        case Op::kLog: {
          const Array& x = nodes_[n.parent[0]].value;
          Array& ga = nodes_[n.parent[0]].grad;
          for (std::size_t i = 0; i < g.size(); ++i) ga[i] += g[i] / x[i];
          break;
        }
        case Op::kSquare: {
          const Array& x = nodes_[n.parent[0]].value;
          Array& ga = nodes_[n.parent[0]].grad;
          for (std::size_t i = 0; i < g.size(); ++i) ga[i] += g[i] * 2.0 * x[i];
          break;
        }
        case Op::kAbs: {
          const Array& x = nodes_[n.parent[0]].value;
          Array& ga = nodes_[n.parent[0]].grad;
          for (std::size_t i = 0; i < g.size(); ++i) {
            const double s = x[i] > 0.0 ? 1.0 : (x[i] < 0.0 ? -1.0 : 0.0);
            ga[i] += g[i] * s;
          }
          break;
        }
        case Op::kSoftplus: {
          const Array& x = nodes_[n.parent[0]].value;
          Array& ga = nodes_[n.parent[0]].grad;
          for (std::size_t i = 0; i < g.size(); ++i) ga[i] += g[i] * stable_sigmoid(x[i]);
          break;
        }
        case Op::kReciprocal: {
          const Array& v = n.value;
          Array& ga = nodes_[n.parent[0]].grad;
          for (std::size_t i = 0; i < g.size(); ++i) ga[i] -= g[i] * v[i] * v[i];
          break;
        }
        case Op::kSum: {
          Array& ga = nodes_[n.parent[0]].grad;
          const double go = g[0];
          for (std::size_t i = 0; i < ga.size(); ++i) ga[i] += go;
          break;
        }
        case Op::kMean: {
          Array& ga = nodes_[n.parent[0]].grad;
          const double go = g[0] / static_cast<double>(ga.size());
          for (std::size_t i = 0; i < ga.size(); ++i) ga[i] += go;
          break;
        }
      }
    }
    if (id == 0) break;
  }
}

}  // namespace tdciv::ad
