#pragma once

#include <functional>
#include <memory>
#include <utility>
#include <vector>

#include "escm/common.hpp"

namespace escm {

// Reverse-mode autodiff over dense double matrices.
//
// A Tape records one forward computation; backward() runs the recorded
// closures in reverse creation order. Evaluation order is fixed, so repeated
// runs over the same inputs are bit-identical. Parameter leaves reference
// external value/grad storage (see params.hpp) and are never copied into the
// tape.
class Tape;

class Var {
 public:
  Var() = default;
  bool valid() const { return tape_ != nullptr; }
  const Mat& val() const;
  int rows() const { return static_cast<int>(val().rows()); }
  int cols() const { return static_cast<int>(val().cols()); }

 private:
  friend class Tape;
  Var(Tape* t, int i) : tape_(t), idx_(i) {}
  Tape* tape_ = nullptr;
  int idx_ = -1;
};

class Tape {
 public:
  Tape() = default;
  Tape(const Tape&) = delete;
  Tape& operator=(const Tape&) = delete;

  // Leaves.
  Var constant(Mat m);
  Var leaf(const Mat& value, Mat& grad);  // external parameter storage

  // Elementwise.
  Var add(Var a, Var b);
  Var sub(Var a, Var b);
  Var mul(Var a, Var b);
  Var scale(Var a, double s);
  Var add_scalar(Var a, double c);
  Var relu(Var a);
  Var tanh_(Var a);
  Var sigmoid(Var a);
  Var log_(Var a);  // all entries must be positive
  Var one_minus(Var a);

  // Linear algebra.
  Var matmul(Var a, Var b);     // a * b
  Var matmul_nt(Var a, Var b);  // a * b^T
  Var matmul_tn(Var a, Var b);  // a^T * b
  Var transpose(Var a);
  // y = x * w^T + b, with w (out x in) and b (1 x out) broadcast over rows.
  Var linear(Var x, Var w, Var b);

  // Shape ops.
  Var concat_cols(const std::vector<Var>& parts);
  Var slice_cols(Var a, int first, int count);
  Var rows(Var a, const std::vector<int>& ids);

  // table is an external parameter (value + grad); gathers rows by id.
  Var embedding(const Mat& table, Mat& table_grad, const std::vector<int>& ids);

  // Row-wise softmax over entries where allow(i,j) != 0; other entries are
  // exactly 0 in the output and are never read. Rows of `allow` must contain
  // at least one nonzero. Row max is subtracted before exponentiation.
  Var masked_row_softmax(Var scores, const Mat& allow);

  // out(i,:) = sum over k with allow(i,k) != 0 of p(i,k) * x(k,:).
  // Disallowed entries of p are never read, so perturbations at masked
  // positions cannot reach the output even at the bit level.
  Var masked_weighted_sum(Var p, Var x, const Mat& allow);

  // Row-wise layer norm with gamma/beta (1 x d).
  Var layer_norm(Var x, Var gamma, Var beta, double eps = 1e-5);

  // Inverted dropout; identity when rate == 0.
  Var dropout(Var a, double rate, Rng& rng);

  // out(i,:) = a(i,:) * s(i,0); s must be (n x 1).
  Var row_scale(Var a, Var s);

  // out is (rows(a) x width); out(i, cols[j]) += a(i, j). Ids must be < width.
  Var scatter_cols(Var a, const std::vector<int>& cols, int width);

  // Gathers entries (i,j) into a (k x 1) column.
  Var pick(Var a, const std::vector<std::pair<int, int>>& cells);

  Var sum_all(Var a);  // 1x1

  void backward(Var root);  // root must be 1x1; seeds d(root)=1

  const Mat& value_of(Var v) const;
  size_t size() const { return nodes_.size(); }

 private:
  struct Node {
    Mat val;
    Mat grad;
    const Mat* ext_val = nullptr;
    Mat* ext_grad = nullptr;
    bool requires_grad = false;
    std::function<void()> back;
    const Mat& v() const { return ext_val ? *ext_val : val; }
    Mat& g() { return ext_grad ? *ext_grad : grad; }
  };

  Node& node(Var v);
  const Node& node(Var v) const;
  Var push(Mat val, bool requires_grad);
  static void check_same_shape(const Var& a, const Var& b, const char* op);

  std::vector<std::unique_ptr<Node>> nodes_;
};

// Sinusoidal position table: (len x d), sin on even columns, cos on odd.
Mat sinusoidal_positions(int len, int d);

}  // namespace escm
