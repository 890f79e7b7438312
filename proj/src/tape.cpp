#include "escm/tape.hpp"

#include <cmath>
#include <string>

namespace escm {

const Mat& Var::val() const {
  if (!valid()) throw Error("Var: use of an empty handle");
  return tape_->value_of(*this);
}

Tape::Node& Tape::node(Var v) {
  if (v.tape_ != this) throw Error("Tape: Var belongs to a different tape");
  return *nodes_[static_cast<size_t>(v.idx_)];
}

const Tape::Node& Tape::node(Var v) const {
  if (v.tape_ != this) throw Error("Tape: Var belongs to a different tape");
  return *nodes_[static_cast<size_t>(v.idx_)];
}

const Mat& Tape::value_of(Var v) const { return node(v).v(); }

Var Tape::push(Mat val, bool requires_grad) {
  auto n = std::make_unique<Node>();
  n->val = std::move(val);
  n->requires_grad = requires_grad;
  nodes_.push_back(std::move(n));
  return Var(this, static_cast<int>(nodes_.size()) - 1);
}

void Tape::check_same_shape(const Var& a, const Var& b, const char* op) {
  if (a.rows() != b.rows() || a.cols() != b.cols())
    throw Error(std::string(op) + ": shape mismatch " +
                std::to_string(a.rows()) + "x" + std::to_string(a.cols()) +
                " vs " + std::to_string(b.rows()) + "x" +
                std::to_string(b.cols()));
}

Var Tape::constant(Mat m) { return push(std::move(m), false); }

Var Tape::leaf(const Mat& value, Mat& grad) {
  auto n = std::make_unique<Node>();
  n->ext_val = &value;
  n->ext_grad = &grad;
  n->requires_grad = true;
  nodes_.push_back(std::move(n));
  return Var(this, static_cast<int>(nodes_.size()) - 1);
}

Var Tape::add(Var a, Var b) {
  check_same_shape(a, b, "add");
  Node& na = node(a);
  Node& nb = node(b);
  Var out = push(na.v() + nb.v(), na.requires_grad || nb.requires_grad);
  Node& no = node(out);
  if (no.requires_grad) {
    Node* pa = &na;
    Node* pb = &nb;
    Node* po = &no;
    no.back = [pa, pb, po]() {
      if (pa->requires_grad) pa->g() += po->grad;
      if (pb->requires_grad) pb->g() += po->grad;
    };
  }
  return out;
}

Var Tape::sub(Var a, Var b) {
  check_same_shape(a, b, "sub");
  Node& na = node(a);
  Node& nb = node(b);
  Var out = push(na.v() - nb.v(), na.requires_grad || nb.requires_grad);
  Node& no = node(out);
  if (no.requires_grad) {
    Node* pa = &na;
    Node* pb = &nb;
    Node* po = &no;
    no.back = [pa, pb, po]() {
      if (pa->requires_grad) pa->g() += po->grad;
      if (pb->requires_grad) pb->g() -= po->grad;
    };
  }
  return out;
}

Var Tape::mul(Var a, Var b) {
  check_same_shape(a, b, "mul");
  Node& na = node(a);
  Node& nb = node(b);
  Var out =
      push(na.v().cwiseProduct(nb.v()), na.requires_grad || nb.requires_grad);
  Node& no = node(out);
  if (no.requires_grad) {
    Node* pa = &na;
    Node* pb = &nb;
    Node* po = &no;
    no.back = [pa, pb, po]() {
      if (pa->requires_grad) pa->g() += po->grad.cwiseProduct(pb->v());
      if (pb->requires_grad) pb->g() += po->grad.cwiseProduct(pa->v());
    };
  }
  return out;
}

Var Tape::scale(Var a, double s) {
  Node& na = node(a);
  Var out = push(na.v() * s, na.requires_grad);
  Node& no = node(out);
  if (no.requires_grad) {
    Node* pa = &na;
    Node* po = &no;
    no.back = [pa, po, s]() { pa->g() += po->grad * s; };
  }
  return out;
}

Var Tape::add_scalar(Var a, double c) {
  Node& na = node(a);
  Var out = push((na.v().array() + c).matrix(), na.requires_grad);
  Node& no = node(out);
  if (no.requires_grad) {
    Node* pa = &na;
    Node* po = &no;
    no.back = [pa, po]() { pa->g() += po->grad; };
  }
  return out;
}

Var Tape::relu(Var a) {
  Node& na = node(a);
  Var out = push(na.v().cwiseMax(0.0), na.requires_grad);
  Node& no = node(out);
  if (no.requires_grad) {
    Node* pa = &na;
    Node* po = &no;
    no.back = [pa, po]() {
      pa->g() += po->grad.cwiseProduct(
          (pa->v().array() > 0.0).cast<double>().matrix());
    };
  }
  return out;
}

Var Tape::tanh_(Var a) {
  Node& na = node(a);
  Var out = push(na.v().array().tanh().matrix(), na.requires_grad);
  Node& no = node(out);
  if (no.requires_grad) {
    Node* pa = &na;
    Node* po = &no;
    no.back = [pa, po]() {
      pa->g().array() += po->grad.array() * (1.0 - po->val.array().square());
    };
  }
  return out;
}

Var Tape::sigmoid(Var a) {
  Node& na = node(a);
  Mat y = (1.0 / (1.0 + (-na.v().array()).exp())).matrix();
  Var out = push(std::move(y), na.requires_grad);
  Node& no = node(out);
  if (no.requires_grad) {
    Node* pa = &na;
    Node* po = &no;
    no.back = [pa, po]() {
      pa->g().array() +=
          po->grad.array() * po->val.array() * (1.0 - po->val.array());
    };
  }
  return out;
}

Var Tape::log_(Var a) {
  Node& na = node(a);
  if ((na.v().array() <= 0.0).any())
    throw Error("log_: input has non-positive entries");
  Var out = push(na.v().array().log().matrix(), na.requires_grad);
  Node& no = node(out);
  if (no.requires_grad) {
    Node* pa = &na;
    Node* po = &no;
    no.back = [pa, po]() {
      pa->g().array() += po->grad.array() / pa->v().array();
    };
  }
  return out;
}

Var Tape::one_minus(Var a) {
  Node& na = node(a);
  Var out = push((1.0 - na.v().array()).matrix(), na.requires_grad);
  Node& no = node(out);
  if (no.requires_grad) {
    Node* pa = &na;
    Node* po = &no;
    no.back = [pa, po]() { pa->g() -= po->grad; };
  }
  return out;
}

Var Tape::matmul(Var a, Var b) {
  Node& na = node(a);
  Node& nb = node(b);
  if (a.cols() != b.rows()) throw Error("matmul: inner dimension mismatch");
  Var out = push(na.v() * nb.v(), na.requires_grad || nb.requires_grad);
  Node& no = node(out);
  if (no.requires_grad) {
    Node* pa = &na;
    Node* pb = &nb;
    Node* po = &no;
    no.back = [pa, pb, po]() {
      if (pa->requires_grad)
        pa->g().noalias() += po->grad * pb->v().transpose();
      if (pb->requires_grad)
        pb->g().noalias() += pa->v().transpose() * po->grad;
    };
  }
  return out;
}

Var Tape::matmul_nt(Var a, Var b) {
  Node& na = node(a);
  Node& nb = node(b);
  if (a.cols() != b.cols()) throw Error("matmul_nt: inner dimension mismatch");
  Var out =
      push(na.v() * nb.v().transpose(), na.requires_grad || nb.requires_grad);
  Node& no = node(out);
  if (no.requires_grad) {
    Node* pa = &na;
    Node* pb = &nb;
    Node* po = &no;
    no.back = [pa, pb, po]() {
      if (pa->requires_grad) pa->g().noalias() += po->grad * pb->v();
      if (pb->requires_grad)
        pb->g().noalias() += po->grad.transpose() * pa->v();
    };
  }
  return out;
}

Var Tape::matmul_tn(Var a, Var b) {
  Node& na = node(a);
  Node& nb = node(b);
  if (a.rows() != b.rows()) throw Error("matmul_tn: inner dimension mismatch");
  Var out =
      push(na.v().transpose() * nb.v(), na.requires_grad || nb.requires_grad);
  Node& no = node(out);
  if (no.requires_grad) {
    Node* pa = &na;
    Node* pb = &nb;
    Node* po = &no;
    no.back = [pa, pb, po]() {
      if (pa->requires_grad)
        pa->g().noalias() += pb->v() * po->grad.transpose();
      if (pb->requires_grad) pb->g().noalias() += pa->v() * po->grad;
    };
  }
  return out;
}

Var Tape::transpose(Var a) {
  Node& na = node(a);
  Var out = push(na.v().transpose(), na.requires_grad);
  Node& no = node(out);
  if (no.requires_grad) {
    Node* pa = &na;
    Node* po = &no;
    no.back = [pa, po]() { pa->g() += po->grad.transpose(); };
  }
  return out;
}

Var Tape::linear(Var x, Var w, Var b) {
  Node& nx = node(x);
  Node& nw = node(w);
  Node& nb = node(b);
  if (x.cols() != w.cols())
    throw Error("linear: input width " + std::to_string(x.cols()) +
                " does not match weight in-dim " + std::to_string(w.cols()));
  if (b.rows() != 1 || b.cols() != w.rows())
    throw Error("linear: bias must be 1 x out-dim");
  Mat y = nx.v() * nw.v().transpose();
  y.rowwise() += nb.v().row(0);
  Var out = push(std::move(y),
                 nx.requires_grad || nw.requires_grad || nb.requires_grad);
  Node& no = node(out);
  if (no.requires_grad) {
    Node* px = &nx;
    Node* pw = &nw;
    Node* pb = &nb;
    Node* po = &no;
    no.back = [px, pw, pb, po]() {
      if (px->requires_grad) px->g().noalias() += po->grad * pw->v();
      if (pw->requires_grad)
        pw->g().noalias() += po->grad.transpose() * px->v();
      if (pb->requires_grad) pb->g() += po->grad.colwise().sum();
    };
  }
  return out;
}

Var Tape::concat_cols(const std::vector<Var>& parts) {
  if (parts.empty()) throw Error("concat_cols: no parts");
  int r = parts[0].rows();
  int total = 0;
  bool rg = false;
  for (const Var& p : parts) {
    if (p.rows() != r) throw Error("concat_cols: row count mismatch");
    total += p.cols();
    rg = rg || node(p).requires_grad;
  }
  Mat y(r, total);
  int at = 0;
  for (const Var& p : parts) {
    y.middleCols(at, p.cols()) = node(p).v();
    at += p.cols();
  }
  Var out = push(std::move(y), rg);
  Node& no = node(out);
  if (rg) {
    std::vector<Node*> srcs;
    std::vector<int> offs;
    std::vector<int> widths;
    int o = 0;
    for (const Var& p : parts) {
      srcs.push_back(&node(p));
      offs.push_back(o);
      widths.push_back(p.cols());
      o += p.cols();
    }
    Node* po = &no;
    no.back = [srcs, offs, widths, po]() {
      for (size_t k = 0; k < srcs.size(); ++k) {
        if (srcs[k]->requires_grad)
          srcs[k]->g() += po->grad.middleCols(offs[k], widths[k]);
      }
    };
  }
  return out;
}

Var Tape::slice_cols(Var a, int first, int count) {
  Node& na = node(a);
  if (first < 0 || count < 0 || first + count > a.cols())
    throw Error("slice_cols: range out of bounds");
  Var out = push(na.v().middleCols(first, count), na.requires_grad);
  Node& no = node(out);
  if (no.requires_grad) {
    Node* pa = &na;
    Node* po = &no;
    no.back = [pa, po, first, count]() {
      pa->g().middleCols(first, count) += po->grad;
    };
  }
  return out;
}

Var Tape::rows(Var a, const std::vector<int>& ids) {
  Node& na = node(a);
  Mat y(static_cast<int>(ids.size()), a.cols());
  for (size_t k = 0; k < ids.size(); ++k) {
    if (ids[k] < 0 || ids[k] >= a.rows())
      throw Error("rows: index out of range");
    y.row(static_cast<int>(k)) = na.v().row(ids[k]);
  }
  Var out = push(std::move(y), na.requires_grad);
  Node& no = node(out);
  if (no.requires_grad) {
    Node* pa = &na;
    Node* po = &no;
    std::vector<int> idx = ids;
    no.back = [pa, po, idx]() {
      for (size_t k = 0; k < idx.size(); ++k)
        pa->g().row(idx[k]) += po->grad.row(static_cast<int>(k));
    };
  }
  return out;
}

Var Tape::embedding(const Mat& table, Mat& table_grad,
                    const std::vector<int>& ids) {
  Mat y(static_cast<int>(ids.size()), table.cols());
  for (size_t k = 0; k < ids.size(); ++k) {
    if (ids[k] < 0 || ids[k] >= table.rows())
      throw Error("embedding: id " + std::to_string(ids[k]) +
                  " out of range [0, " + std::to_string(table.rows()) + ")");
    y.row(static_cast<int>(k)) = table.row(ids[k]);
  }
  Var out = push(std::move(y), true);
  Node& no = node(out);
  Node* po = &no;
  Mat* tg = &table_grad;
  std::vector<int> idx = ids;
  no.back = [po, tg, idx]() {
    for (size_t k = 0; k < idx.size(); ++k)
      tg->row(idx[k]) += po->grad.row(static_cast<int>(k));
  };
  return out;
}

Var Tape::masked_row_softmax(Var scores, const Mat& allow) {
  Node& ns = node(scores);
  if (allow.rows() != scores.rows() || allow.cols() != scores.cols())
    throw Error("masked_row_softmax: mask shape mismatch");
  const Mat& s = ns.v();
  Mat p = Mat::Zero(s.rows(), s.cols());
  for (int i = 0; i < s.rows(); ++i) {
    double m = 0.0;
    bool any = false;
    for (int j = 0; j < s.cols(); ++j) {
      if (allow(i, j) == 0.0) continue;
      if (!any || s(i, j) > m) m = s(i, j);
      any = true;
    }
    if (!any)
      throw Error("masked_row_softmax: row " + std::to_string(i) +
                  " has no allowed entries");
    double z = 0.0;
    for (int j = 0; j < s.cols(); ++j) {
      if (allow(i, j) == 0.0) continue;
      double e = std::exp(s(i, j) - m);
      p(i, j) = e;
      z += e;
    }
    for (int j = 0; j < s.cols(); ++j) {
      if (allow(i, j) != 0.0) p(i, j) /= z;
    }
  }
  Var out = push(std::move(p), ns.requires_grad);
  Node& no = node(out);
  if (no.requires_grad) {
    Node* ps = &ns;
    Node* po = &no;
    Mat mask = allow;
    no.back = [ps, po, mask]() {
      const Mat& pv = po->val;
      const Mat& g = po->grad;
      for (int i = 0; i < pv.rows(); ++i) {
        double dot = 0.0;
        for (int j = 0; j < pv.cols(); ++j) {
          if (mask(i, j) != 0.0) dot += g(i, j) * pv(i, j);
        }
        for (int j = 0; j < pv.cols(); ++j) {
          if (mask(i, j) != 0.0) ps->g()(i, j) += pv(i, j) * (g(i, j) - dot);
        }
      }
    };
  }
  return out;
}

Var Tape::masked_weighted_sum(Var p, Var x, const Mat& allow) {
  Node& np = node(p);
  Node& nx = node(x);
  if (p.cols() != x.rows())
    throw Error("masked_weighted_sum: p cols must equal x rows");
  if (allow.rows() != p.rows() || allow.cols() != p.cols())
    throw Error("masked_weighted_sum: mask shape mismatch");
  Mat y = Mat::Zero(p.rows(), x.cols());
  for (int i = 0; i < p.rows(); ++i) {
    for (int k = 0; k < p.cols(); ++k) {
      if (allow(i, k) == 0.0) continue;
      y.row(i) += np.v()(i, k) * nx.v().row(k);
    }
  }
  Var out = push(std::move(y), np.requires_grad || nx.requires_grad);
  Node& no = node(out);
  if (no.requires_grad) {
    Node* pp = &np;
    Node* px = &nx;
    Node* po = &no;
    Mat mask = allow;
    no.back = [pp, px, po, mask]() {
      for (int i = 0; i < mask.rows(); ++i) {
        for (int k = 0; k < mask.cols(); ++k) {
          if (mask(i, k) == 0.0) continue;
          if (pp->requires_grad)
            pp->g()(i, k) += po->grad.row(i).dot(px->v().row(k));
          if (px->requires_grad)
            px->g().row(k) += pp->v()(i, k) * po->grad.row(i);
        }
      }
    };
  }
  return out;
}

Var Tape::layer_norm(Var x, Var gamma, Var beta, double eps) {
  Node& nx = node(x);
  Node& ng = node(gamma);
  Node& nb = node(beta);
  if (gamma.rows() != 1 || beta.rows() != 1 || gamma.cols() != x.cols() ||
      beta.cols() != x.cols())
    throw Error("layer_norm: gamma/beta must be 1 x d");
  const Mat& xv = nx.v();
  int r = static_cast<int>(xv.rows());
  int d = static_cast<int>(xv.cols());
  Mat xhat(r, d);
  Eigen::VectorXd inv_sigma(r);
  for (int i = 0; i < r; ++i) {
    double mu = xv.row(i).mean();
    double var = (xv.row(i).array() - mu).square().mean();
    double is = 1.0 / std::sqrt(var + eps);
    inv_sigma(i) = is;
    xhat.row(i) = ((xv.row(i).array() - mu) * is).matrix();
  }
  Mat y(r, d);
  for (int i = 0; i < r; ++i)
    y.row(i) = xhat.row(i).cwiseProduct(ng.v().row(0)) + nb.v().row(0);
  Var out = push(std::move(y),
                 nx.requires_grad || ng.requires_grad || nb.requires_grad);
  Node& no = node(out);
  if (no.requires_grad) {
    Node* px = &nx;
    Node* pg = &ng;
    Node* pb = &nb;
    Node* po = &no;
    no.back = [px, pg, pb, po, xhat, inv_sigma]() {
      const Mat& g = po->grad;
      for (int i = 0; i < g.rows(); ++i) {
        if (pg->requires_grad)
          pg->g().row(0) += g.row(i).cwiseProduct(xhat.row(i));
        if (pb->requires_grad) pb->g().row(0) += g.row(i);
        if (px->requires_grad) {
          Eigen::RowVectorXd gy = g.row(i).cwiseProduct(pg->v().row(0));
          double m1 = gy.mean();
          double m2 = gy.cwiseProduct(xhat.row(i)).mean();
          px->g().row(i) +=
              ((gy.array() - m1 - xhat.row(i).array() * m2) * inv_sigma(i))
                  .matrix();
        }
      }
    };
  }
  return out;
}

Var Tape::dropout(Var a, double rate, Rng& rng) {
  if (rate == 0.0) return a;
  if (rate < 0.0 || rate >= 1.0) throw Error("dropout: rate must be in [0,1)");
  Node& na = node(a);
  Mat mask(a.rows(), a.cols());
  double keep = 1.0 - rate;
  for (int i = 0; i < mask.rows(); ++i)
    for (int j = 0; j < mask.cols(); ++j)
      mask(i, j) = rng.uniform() < rate ? 0.0 : 1.0 / keep;
  Var out = push(na.v().cwiseProduct(mask), na.requires_grad);
  Node& no = node(out);
  if (no.requires_grad) {
    Node* pa = &na;
    Node* po = &no;
    no.back = [pa, po, mask]() { pa->g() += po->grad.cwiseProduct(mask); };
  }
  return out;
}

Var Tape::row_scale(Var a, Var s) {
  Node& na = node(a);
  Node& ns = node(s);
  if (s.cols() != 1 || s.rows() != a.rows())
    throw Error("row_scale: s must be rows(a) x 1");
  Mat y = na.v();
  for (int i = 0; i < y.rows(); ++i) y.row(i) *= ns.v()(i, 0);
  Var out = push(std::move(y), na.requires_grad || ns.requires_grad);
  Node& no = node(out);
  if (no.requires_grad) {
    Node* pa = &na;
    Node* ps = &ns;
    Node* po = &no;
    no.back = [pa, ps, po]() {
      for (int i = 0; i < po->grad.rows(); ++i) {
        if (pa->requires_grad)
          pa->g().row(i) += ps->v()(i, 0) * po->grad.row(i);
        if (ps->requires_grad)
          ps->g()(i, 0) += po->grad.row(i).dot(pa->v().row(i));
      }
    };
  }
  return out;
}

Var Tape::scatter_cols(Var a, const std::vector<int>& cols, int width) {
  Node& na = node(a);
  if (static_cast<int>(cols.size()) != a.cols())
    throw Error("scatter_cols: cols size must equal cols(a)");
  for (int c : cols)
    if (c < 0 || c >= width) throw Error("scatter_cols: id out of range");
  Mat y = Mat::Zero(a.rows(), width);
  for (int i = 0; i < a.rows(); ++i)
    for (int j = 0; j < a.cols(); ++j)
      y(i, cols[static_cast<size_t>(j)]) += na.v()(i, j);
  Var out = push(std::move(y), na.requires_grad);
  Node& no = node(out);
  if (no.requires_grad) {
    Node* pa = &na;
    Node* po = &no;
    std::vector<int> idx = cols;
    int nr = a.rows();
    int nc = a.cols();
    no.back = [pa, po, idx, nr, nc]() {
      for (int i = 0; i < nr; ++i)
        for (int j = 0; j < nc; ++j)
          pa->g()(i, j) += po->grad(i, idx[static_cast<size_t>(j)]);
    };
  }
  return out;
}

Var Tape::pick(Var a, const std::vector<std::pair<int, int>>& cells) {
  Node& na = node(a);
  Mat y(static_cast<int>(cells.size()), 1);
  for (size_t k = 0; k < cells.size(); ++k) {
    auto [i, j] = cells[k];
    if (i < 0 || i >= a.rows() || j < 0 || j >= a.cols())
      throw Error("pick: cell out of range");
    y(static_cast<int>(k), 0) = na.v()(i, j);
  }
  Var out = push(std::move(y), na.requires_grad);
  Node& no = node(out);
  if (no.requires_grad) {
    Node* pa = &na;
    Node* po = &no;
    auto idx = cells;
    no.back = [pa, po, idx]() {
      for (size_t k = 0; k < idx.size(); ++k)
        pa->g()(idx[k].first, idx[k].second) +=
            po->grad(static_cast<int>(k), 0);
    };
  }
  return out;
}

Var Tape::sum_all(Var a) {
  Node& na = node(a);
  Mat y(1, 1);
  y(0, 0) = na.v().sum();
  Var out = push(std::move(y), na.requires_grad);
  Node& no = node(out);
  if (no.requires_grad) {
    Node* pa = &na;
    Node* po = &no;
    no.back = [pa, po]() { pa->g().array() += po->grad(0, 0); };
  }
  return out;
}

void Tape::backward(Var root) {
  Node& nr = node(root);
  if (nr.v().rows() != 1 || nr.v().cols() != 1)
    throw Error("backward: root must be 1x1");
  // Internal grads are zeroed here; external (parameter) grads are the
  // caller's responsibility (ParameterStore::zero_grad).
  for (auto& n : nodes_) {
    if (!n->requires_grad || n->ext_grad) continue;
    n->grad = Mat::Zero(n->v().rows(), n->v().cols());
  }
  nr.grad(0, 0) = 1.0;
  for (size_t k = nodes_.size(); k-- > 0;) {
    Node& n = *nodes_[k];
    if (n.requires_grad && n.back) n.back();
  }
}

Mat sinusoidal_positions(int len, int d) {
  if (d % 2 != 0) throw Error("sinusoidal_positions: d must be even");
  Mat pe(len, d);
  for (int pos = 0; pos < len; ++pos) {
    for (int i = 0; i < d / 2; ++i) {
      double freq = std::pow(10000.0, -2.0 * i / static_cast<double>(d));
      pe(pos, 2 * i) = std::sin(pos * freq);
      pe(pos, 2 * i + 1) = std::cos(pos * freq);
    }
  }
  return pe;
}

}  // namespace escm
