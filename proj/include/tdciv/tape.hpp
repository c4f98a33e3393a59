#pragma once

#include <array>
#include <cstdint>
#include <vector>

#include "tdciv/array.hpp"

namespace tdciv::ad {

// Define-by-run reverse-mode tape. Node ids are indices into the tape, so a
// node's id is strictly greater than the ids of its operands; iterating ids in
// descending order from the root is a valid reverse topological sweep.
//
// Every node owns a gradient buffer with the same shape as its value. All
// reductions accumulate in a fixed order for given operand shapes (matrix
// kernels delegate to single-threaded Eigen), so a given graph evaluates and
// differentiates bit-identically across runs on the same build.
class Tape {
 public:
  using Id = std::uint32_t;

  enum class Op : std::uint8_t {
    kLeaf,
    kAdd,
    kSub,
    kMul,
    kNeg,
    kScale,      // c * x
    kAddConst,   // x + c
    kMatMul,     // [n,k] x [k,m]
    kAffine,     // x*W + b,  x [n,k], W [k,m], b [m]
    kConcatCols,
    kSliceCols,
    kTileRows,   // [m] -> [n,m]
    kSigmoid,
    kTanh,
    kExp,
    kLog,
    kSquare,
    kAbs,
    kSoftplus,
    kReciprocal,
    kSum,        // -> scalar
    kMean,       // -> scalar
  };

  // Leaf holding a constant or parameter value; participates in backward.
  Id input(Array value);

  Id add(Id a, Id b);
  Id sub(Id a, Id b);
  Id mul(Id a, Id b);
  Id neg(Id a);
  Id scale(Id a, double c);
  Id add_const(Id a, double c);

  Id matmul(Id a, Id b);
  Id affine(Id x, Id w, Id b);

  Id concat_cols(Id a, Id b);
  Id slice_cols(Id a, std::size_t col_begin, std::size_t col_end);
  Id tile_rows(Id row, std::size_t n_rows);

  Id sigmoid(Id a);
  Id tanh(Id a);
  Id exp(Id a);
  Id log(Id a);
  Id square(Id a);
  Id abs(Id a);
  Id softplus(Id a);
  Id reciprocal(Id a);

  Id sum(Id a);
  Id mean(Id a);

  const Array& value(Id id) const { return nodes_[id].value; }
  const Array& grad(Id id) const { return nodes_[id].grad; }

  // Seeds d(root)/d(root) = 1 and accumulates gradients for every node that
  // root depends on; nodes outside root's ancestry keep zero gradient.
  // Throws ContractError if root is not scalar.
  void backward(Id root);

  void zero_grad();
  void clear();
  std::size_t size() const { return nodes_.size(); }

 private:
  struct Node {
    Array value;
    Array grad;
    Op op = Op::kLeaf;
    std::array<Id, 3> parent{0, 0, 0};
    std::uint8_t n_parent = 0;
    double c = 0.0;          // Scale / AddConst constant
    std::uint32_t aux0 = 0;  // SliceCols: col_begin; ConcatCols: split point
    std::uint32_t aux1 = 0;  // SliceCols: col_end
  };

  Id push(Node n);
  const Array& val_of(Id id) const { return nodes_[id].value; }

  std::vector<Node> nodes_;
};

}  // namespace tdciv::ad
