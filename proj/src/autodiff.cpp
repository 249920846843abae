#include "cwcf/autodiff.hpp"

#include <algorithm>
#include <cmath>
#include <deque>

namespace cwcf {

namespace {

[[noreturn]] void fail(AutodiffErrorKind kind, const std::string& msg) {
  throw AutodiffError(kind, msg);
}

enum class Op {
  Const,
  Param,
  Linear,
  Relu,
  SoftmaxRow,
  LogSoftmaxRow,
  Log,
  MeanRows,
  MeanEntries,
  MeanRowRange,
  BatchNorm,
  ConcatCols,
  CrossEntropy,
  SelectRow,
  SelectEntry,
  GatherEntries,
  Add,
  Affine,
  Square,
  Compose,
};

struct Node {
  Op op = Op::Const;
  std::vector<NodeId> inputs;
  Tensor value;
  Tensor grad;  // allocated lazily during backward
  bool requires_grad = false;

  Parameter* parameter = nullptr;        // Param
  int i0 = 0, i1 = 0;                    // label / row range / row,col
  double a = 0.0, b = 0.0;               // Affine coefficients
  Tensor saved;                          // BatchNorm: normalized values
  std::vector<double> inv_std;           // BatchNorm: 1/sqrt(var+eps)
  bool training = false;                 // BatchNorm mode
  std::vector<RowPlacement> placements;  // Compose
  std::vector<std::pair<int, int>> positions;  // GatherEntries
};

}  // namespace

struct Tape::Impl {
  // A deque so growing the tape never moves settled nodes: references handed
  // out by value() stay valid while later nodes are appended.
  std::deque<Node> nodes;

  Node& at(NodeId id) { return nodes[id]; }

  NodeId push(Node node) {
    nodes.push_back(std::move(node));
    return static_cast<NodeId>(nodes.size() - 1);
  }

  void check(NodeId id) const {
    if (id < 0 || id >= static_cast<int>(nodes.size()))
      fail(AutodiffErrorKind::BadIndex, "unknown tape node");
  }

  Tensor& grad_of(NodeId id) {
    Node& n = nodes[id];
    if (n.grad.data.empty()) n.grad = Tensor(n.value.rows, n.value.cols);
    return n.grad;
  }
};

Tape::Tape() : impl_(new Impl) {}
Tape::~Tape() { delete impl_; }

const Tensor& Tape::value(NodeId id) const {
  impl_->check(id);
  return impl_->nodes[id].value;
}

bool Tape::requires_grad(NodeId id) const {
  impl_->check(id);
  return impl_->nodes[id].requires_grad;
}

int Tape::size() const { return static_cast<int>(impl_->nodes.size()); }

NodeId Tape::constant(Tensor value) {
  Node n;
  n.op = Op::Const;
  n.value = std::move(value);
  return impl_->push(std::move(n));
}

NodeId Tape::param(Parameter& p) {
  Node n;
  n.op = Op::Param;
  n.value = p.value;
  n.parameter = &p;
  n.requires_grad = true;
  return impl_->push(std::move(n));
}

NodeId Tape::linear(NodeId x, NodeId W, NodeId b) {
  impl_->check(x);
  impl_->check(W);
  impl_->check(b);
  const Tensor& xv = impl_->at(x).value;
  const Tensor& wv = impl_->at(W).value;
  const Tensor& bv = impl_->at(b).value;
  if (xv.cols != wv.rows || bv.rows != 1 || bv.cols != wv.cols)
    fail(AutodiffErrorKind::ShapeMismatch,
         "linear: " + std::to_string(xv.rows) + "x" + std::to_string(xv.cols) +
             " * " + std::to_string(wv.rows) + "x" + std::to_string(wv.cols) +
             " + 1x" + std::to_string(bv.cols));
  Node n;
  n.op = Op::Linear;
  n.inputs = {x, W, b};
  n.requires_grad = impl_->at(x).requires_grad || impl_->at(W).requires_grad ||
                    impl_->at(b).requires_grad;
  n.value = Tensor(xv.rows, wv.cols);
  for (int r = 0; r < xv.rows; ++r)
    for (int c = 0; c < wv.cols; ++c) {
      double acc = bv.at(0, c);
      for (int k = 0; k < xv.cols; ++k) acc += xv.at(r, k) * wv.at(k, c);
      n.value.at(r, c) = acc;
    }
  return impl_->push(std::move(n));
}

namespace {

Node unary(Tape::Impl& impl, Op op, NodeId x) {
  impl.check(x);
  Node n;
  n.op = op;
  n.inputs = {x};
  n.requires_grad = impl.at(x).requires_grad;
  return n;
}

}  // namespace

NodeId Tape::relu(NodeId x) {
  Node n = unary(*impl_, Op::Relu, x);
  n.value = impl_->at(x).value;
  for (double& v : n.value.data) v = std::max(0.0, v);
  return impl_->push(std::move(n));
}

NodeId Tape::softmax_row(NodeId x) {
  Node n = unary(*impl_, Op::SoftmaxRow, x);
  const Tensor& xv = impl_->at(x).value;
  n.value = Tensor(xv.rows, xv.cols);
  for (int r = 0; r < xv.rows; ++r) {
    double mx = xv.at(r, 0);
    for (int c = 1; c < xv.cols; ++c) mx = std::max(mx, xv.at(r, c));
    double sum = 0.0;
    for (int c = 0; c < xv.cols; ++c) sum += std::exp(xv.at(r, c) - mx);
    for (int c = 0; c < xv.cols; ++c)
      n.value.at(r, c) = std::exp(xv.at(r, c) - mx) / sum;
  }
  return impl_->push(std::move(n));
}

NodeId Tape::log_softmax_row(NodeId x) {
  Node n = unary(*impl_, Op::LogSoftmaxRow, x);
  const Tensor& xv = impl_->at(x).value;
  n.value = Tensor(xv.rows, xv.cols);
  for (int r = 0; r < xv.rows; ++r) {
    double mx = xv.at(r, 0);
    for (int c = 1; c < xv.cols; ++c) mx = std::max(mx, xv.at(r, c));
    double sum = 0.0;
    for (int c = 0; c < xv.cols; ++c) sum += std::exp(xv.at(r, c) - mx);
    const double lse = mx + std::log(sum);
    for (int c = 0; c < xv.cols; ++c) n.value.at(r, c) = xv.at(r, c) - lse;
  }
  return impl_->push(std::move(n));
}

NodeId Tape::log(NodeId x) {
  Node n = unary(*impl_, Op::Log, x);
  const Tensor& xv = impl_->at(x).value;
  n.value = Tensor(xv.rows, xv.cols);
  for (size_t i = 0; i < xv.data.size(); ++i) {
    if (xv.data[i] <= 0.0)
      fail(AutodiffErrorKind::DomainError, "log of non-positive entry");
    n.value.data[i] = std::log(xv.data[i]);
  }
  return impl_->push(std::move(n));
}

NodeId Tape::mean_rows(NodeId x) {
  Node n = unary(*impl_, Op::MeanRows, x);
  const Tensor& xv = impl_->at(x).value;
  if (xv.rows < 1) fail(AutodiffErrorKind::ShapeMismatch, "mean_rows of empty matrix");
  n.value = Tensor(1, xv.cols);
  for (int c = 0; c < xv.cols; ++c) {
    double acc = 0.0;
    for (int r = 0; r < xv.rows; ++r) acc += xv.at(r, c);
    n.value.at(0, c) = acc / xv.rows;
  }
  return impl_->push(std::move(n));
}

NodeId Tape::mean_entries(NodeId x) {
  Node n = unary(*impl_, Op::MeanEntries, x);
  const Tensor& xv = impl_->at(x).value;
  if (xv.data.empty())
    fail(AutodiffErrorKind::ShapeMismatch, "mean_entries of empty matrix");
  double acc = 0.0;
  for (const double v : xv.data) acc += v;
  n.value = Tensor(1, 1, {acc / xv.data.size()});
  return impl_->push(std::move(n));
}

NodeId Tape::mean_row_range(NodeId x, int row_begin, int row_end) {
  Node n = unary(*impl_, Op::MeanRowRange, x);
  const Tensor& xv = impl_->at(x).value;
  if (row_begin < 0 || row_end > xv.rows || row_begin >= row_end)
    fail(AutodiffErrorKind::BadIndex, "mean_row_range: bad row range");
  n.i0 = row_begin;
  n.i1 = row_end;
  n.value = Tensor(1, xv.cols);
  for (int c = 0; c < xv.cols; ++c) {
    double acc = 0.0;
    for (int r = row_begin; r < row_end; ++r) acc += xv.at(r, c);
    n.value.at(0, c) = acc / (row_end - row_begin);
  }
  return impl_->push(std::move(n));
}

NodeId Tape::batchnorm(NodeId x, NodeId gamma, NodeId beta, BnState& state,
                       bool training) {
  impl_->check(x);
  impl_->check(gamma);
  impl_->check(beta);
  const Tensor& xv = impl_->at(x).value;
  const Tensor& gv = impl_->at(gamma).value;
  const Tensor& bv = impl_->at(beta).value;
  const int d = xv.cols;
  if (gv.rows != 1 || gv.cols != d || bv.rows != 1 || bv.cols != d ||
      static_cast<int>(state.running_mean.size()) != d || xv.rows < 1)
    fail(AutodiffErrorKind::ShapeMismatch, "batchnorm: inconsistent shapes");

  Node n;
  n.op = Op::BatchNorm;
  n.inputs = {x, gamma, beta};
  n.requires_grad = impl_->at(x).requires_grad ||
                    impl_->at(gamma).requires_grad ||
                    impl_->at(beta).requires_grad;
  n.training = training;
  n.inv_std.resize(d);
  n.saved = Tensor(xv.rows, d);
  n.value = Tensor(xv.rows, d);

  std::vector<double> mean(d), var(d);
  if (training) {
    for (int c = 0; c < d; ++c) {
      double acc = 0.0;
      for (int r = 0; r < xv.rows; ++r) acc += xv.at(r, c);
      mean[c] = acc / xv.rows;
      double sq = 0.0;
      for (int r = 0; r < xv.rows; ++r) {
        const double diff = xv.at(r, c) - mean[c];
        sq += diff * diff;
      }
      var[c] = sq / xv.rows;  // biased, matching the normalization below
    }
    for (int c = 0; c < d; ++c) {
      state.running_mean[c] =
          state.momentum * state.running_mean[c] + (1.0 - state.momentum) * mean[c];
      state.running_var[c] =
          state.momentum * state.running_var[c] + (1.0 - state.momentum) * var[c];
    }
  } else {
    mean = state.running_mean;
    var = state.running_var;
  }
  for (int c = 0; c < d; ++c) n.inv_std[c] = 1.0 / std::sqrt(var[c] + state.eps);
  for (int r = 0; r < xv.rows; ++r)
    for (int c = 0; c < d; ++c) {
      const double xhat = (xv.at(r, c) - mean[c]) * n.inv_std[c];
      n.saved.at(r, c) = xhat;
      n.value.at(r, c) = gv.at(0, c) * xhat + bv.at(0, c);
    }
  return impl_->push(std::move(n));
}

NodeId Tape::concat_cols(NodeId a, NodeId b) {
  impl_->check(a);
  impl_->check(b);
  const Tensor& av = impl_->at(a).value;
  const Tensor& bv = impl_->at(b).value;
  if (av.rows != bv.rows)
    fail(AutodiffErrorKind::ShapeMismatch, "concat_cols: row mismatch");
  Node n;
  n.op = Op::ConcatCols;
  n.inputs = {a, b};
  n.requires_grad = impl_->at(a).requires_grad || impl_->at(b).requires_grad;
  n.value = Tensor(av.rows, av.cols + bv.cols);
  for (int r = 0; r < av.rows; ++r) {
    for (int c = 0; c < av.cols; ++c) n.value.at(r, c) = av.at(r, c);
    for (int c = 0; c < bv.cols; ++c) n.value.at(r, av.cols + c) = bv.at(r, c);
  }
  return impl_->push(std::move(n));
}

NodeId Tape::cross_entropy(NodeId probs, int label) {
  Node n = unary(*impl_, Op::CrossEntropy, probs);
  const Tensor& pv = impl_->at(probs).value;
  if (pv.rows != 1 || label < 0 || label >= pv.cols)
    fail(AutodiffErrorKind::BadIndex, "cross_entropy: bad probability row or label");
  if (pv.at(0, label) <= 0.0)
    fail(AutodiffErrorKind::DomainError, "cross_entropy: non-positive probability");
  n.i0 = label;
  n.value = Tensor(1, 1, {-std::log(pv.at(0, label))});
  return impl_->push(std::move(n));
}

NodeId Tape::select_row(NodeId x, int row) {
  Node n = unary(*impl_, Op::SelectRow, x);
  const Tensor& xv = impl_->at(x).value;
  if (row < 0 || row >= xv.rows)
    fail(AutodiffErrorKind::BadIndex, "select_row: bad row");
  n.i0 = row;
  n.value = Tensor(1, xv.cols);
  for (int c = 0; c < xv.cols; ++c) n.value.at(0, c) = xv.at(row, c);
  return impl_->push(std::move(n));
}

NodeId Tape::select_entry(NodeId x, int row, int col) {
  Node n = unary(*impl_, Op::SelectEntry, x);
  const Tensor& xv = impl_->at(x).value;
  if (row < 0 || row >= xv.rows || col < 0 || col >= xv.cols)
    fail(AutodiffErrorKind::BadIndex, "select_entry: bad position");
  n.i0 = row;
  n.i1 = col;
  n.value = Tensor(1, 1, {xv.at(row, col)});
  return impl_->push(std::move(n));
}

NodeId Tape::gather_entries(NodeId x, std::vector<std::pair<int, int>> positions) {
  Node n = unary(*impl_, Op::GatherEntries, x);
  const Tensor& xv = impl_->at(x).value;
  if (positions.empty())
    fail(AutodiffErrorKind::ShapeMismatch, "gather_entries: no positions");
  n.value = Tensor(1, static_cast<int>(positions.size()));
  for (size_t j = 0; j < positions.size(); ++j) {
    auto [r, c] = positions[j];
    if (r < 0 || r >= xv.rows || c < 0 || c >= xv.cols)
      fail(AutodiffErrorKind::BadIndex, "gather_entries: bad position");
    n.value.at(0, static_cast<int>(j)) = xv.at(r, c);
  }
  n.positions = std::move(positions);
  return impl_->push(std::move(n));
}

NodeId Tape::add(NodeId a, NodeId b) {
  impl_->check(a);
  impl_->check(b);
  const Tensor& av = impl_->at(a).value;
  const Tensor& bv = impl_->at(b).value;
  if (av.rows != bv.rows || av.cols != bv.cols)
    fail(AutodiffErrorKind::ShapeMismatch, "add: shape mismatch");
  Node n;
  n.op = Op::Add;
  n.inputs = {a, b};
  n.requires_grad = impl_->at(a).requires_grad || impl_->at(b).requires_grad;
  n.value = av;
  for (size_t i = 0; i < n.value.data.size(); ++i) n.value.data[i] += bv.data[i];
  return impl_->push(std::move(n));
}

NodeId Tape::affine(NodeId x, double scale, double shift) {
  Node n = unary(*impl_, Op::Affine, x);
  n.a = scale;
  n.b = shift;
  n.value = impl_->at(x).value;
  for (double& v : n.value.data) v = scale * v + shift;
  return impl_->push(std::move(n));
}

NodeId Tape::square(NodeId x) {
  Node n = unary(*impl_, Op::Square, x);
  n.value = impl_->at(x).value;
  for (double& v : n.value.data) v *= v;
  return impl_->push(std::move(n));
}

NodeId Tape::compose(Tensor base, std::vector<RowPlacement> placements) {
  Node n;
  n.op = Op::Compose;
  n.value = std::move(base);
  std::vector<char> taken(n.value.rows, 0);
  for (const RowPlacement& p : placements) {
    impl_->check(p.src);
    const Tensor& sv = impl_->at(p.src).value;
    if (p.src_row < 0 || p.src_row >= sv.rows || p.dst_row < 0 ||
        p.dst_row >= n.value.rows || sv.cols != n.value.cols)
      fail(AutodiffErrorKind::BadIndex, "compose: bad placement");
    if (taken[p.dst_row])
      fail(AutodiffErrorKind::BadIndex, "compose: duplicate destination row");
    taken[p.dst_row] = 1;
    for (int c = 0; c < sv.cols; ++c)
      n.value.at(p.dst_row, c) = sv.at(p.src_row, c);
    if (impl_->at(p.src).requires_grad) n.requires_grad = true;
    n.inputs.push_back(p.src);
  }
  n.placements = std::move(placements);
  return impl_->push(std::move(n));
}

void Tape::backward(NodeId output) {
  impl_->check(output);
  Node& out = impl_->at(output);
  if (out.value.rows != 1 || out.value.cols != 1)
    fail(AutodiffErrorKind::NotScalar, "backward needs a 1x1 output");
  // Node-level gradients are scratch for this traversal; only Parameter
  // accumulators survive, so a repeated call adds one more d(output)/d(param).
  for (Node& n : impl_->nodes) n.grad.data.clear();
  impl_->grad_of(output).at(0, 0) += 1.0;

  for (NodeId id = output; id >= 0; --id) {
    Node& n = impl_->at(id);
    if (!n.requires_grad || n.grad.data.empty()) continue;
    const Tensor& dy = n.grad;
    switch (n.op) {
      case Op::Const:
        break;
      case Op::Param:
        for (size_t i = 0; i < dy.data.size(); ++i)
          n.parameter->grad.data[i] += dy.data[i];
        break;
      case Op::Linear: {
        Node& xn = impl_->at(n.inputs[0]);
        Node& wn = impl_->at(n.inputs[1]);
        Node& bn = impl_->at(n.inputs[2]);
        const Tensor& xv = xn.value;
        const Tensor& wv = wn.value;
        if (xn.requires_grad) {
          Tensor& dx = impl_->grad_of(n.inputs[0]);
          for (int r = 0; r < xv.rows; ++r)
            for (int k = 0; k < xv.cols; ++k) {
              double acc = 0.0;
              for (int c = 0; c < wv.cols; ++c)
                acc += dy.at(r, c) * wv.at(k, c);
              dx.at(r, k) += acc;
            }
        }
        if (wn.requires_grad) {
          Tensor& dw = impl_->grad_of(n.inputs[1]);
          for (int k = 0; k < wv.rows; ++k)
            for (int c = 0; c < wv.cols; ++c) {
              double acc = 0.0;
              for (int r = 0; r < xv.rows; ++r)
                acc += xv.at(r, k) * dy.at(r, c);
              dw.at(k, c) += acc;
            }
        }
        if (bn.requires_grad) {
          Tensor& db = impl_->grad_of(n.inputs[2]);
          for (int c = 0; c < wv.cols; ++c) {
            double acc = 0.0;
            for (int r = 0; r < xv.rows; ++r) acc += dy.at(r, c);
            db.at(0, c) += acc;
          }
        }
        break;
      }
      case Op::Relu: {
        Tensor& dx = impl_->grad_of(n.inputs[0]);
        const Tensor& xv = impl_->at(n.inputs[0]).value;
        for (size_t i = 0; i < dy.data.size(); ++i)
          if (xv.data[i] > 0.0) dx.data[i] += dy.data[i];
        break;
      }
      case Op::SoftmaxRow: {
        Tensor& dx = impl_->grad_of(n.inputs[0]);
        for (int r = 0; r < n.value.rows; ++r) {
          double dot = 0.0;
          for (int c = 0; c < n.value.cols; ++c)
            dot += n.value.at(r, c) * dy.at(r, c);
          for (int c = 0; c < n.value.cols; ++c)
            dx.at(r, c) += n.value.at(r, c) * (dy.at(r, c) - dot);
        }
        break;
      }
      case Op::LogSoftmaxRow: {
        Tensor& dx = impl_->grad_of(n.inputs[0]);
        for (int r = 0; r < n.value.rows; ++r) {
          double sum = 0.0;
          for (int c = 0; c < n.value.cols; ++c) sum += dy.at(r, c);
          for (int c = 0; c < n.value.cols; ++c)
            dx.at(r, c) += dy.at(r, c) - std::exp(n.value.at(r, c)) * sum;
        }
        break;
      }
      case Op::Log: {
        Tensor& dx = impl_->grad_of(n.inputs[0]);
        const Tensor& xv = impl_->at(n.inputs[0]).value;
        for (size_t i = 0; i < dy.data.size(); ++i)
          dx.data[i] += dy.data[i] / xv.data[i];
        break;
      }
      case Op::MeanRows: {
        Tensor& dx = impl_->grad_of(n.inputs[0]);
        const int rows = dx.rows;
        for (int r = 0; r < rows; ++r)
          for (int c = 0; c < dx.cols; ++c)
            dx.at(r, c) += dy.at(0, c) / rows;
        break;
      }
      case Op::MeanEntries: {
        Tensor& dx = impl_->grad_of(n.inputs[0]);
        const double d = dy.at(0, 0) / dx.data.size();
        for (double& g : dx.data) g += d;
        break;
      }
      case Op::MeanRowRange: {
        Tensor& dx = impl_->grad_of(n.inputs[0]);
        const int count = n.i1 - n.i0;
        for (int r = n.i0; r < n.i1; ++r)
          for (int c = 0; c < dx.cols; ++c)
            dx.at(r, c) += dy.at(0, c) / count;
        break;
      }
      case Op::BatchNorm: {
        Node& xn = impl_->at(n.inputs[0]);
        Node& gn = impl_->at(n.inputs[1]);
        Node& bn = impl_->at(n.inputs[2]);
        const int rows = n.value.rows;
        const int d = n.value.cols;
        if (gn.requires_grad) {
          Tensor& dg = impl_->grad_of(n.inputs[1]);
          for (int c = 0; c < d; ++c) {
            double acc = 0.0;
            for (int r = 0; r < rows; ++r)
              acc += dy.at(r, c) * n.saved.at(r, c);
            dg.at(0, c) += acc;
          }
        }
        if (bn.requires_grad) {
          Tensor& db = impl_->grad_of(n.inputs[2]);
          for (int c = 0; c < d; ++c) {
            double acc = 0.0;
            for (int r = 0; r < rows; ++r) acc += dy.at(r, c);
            db.at(0, c) += acc;
          }
        }
        if (xn.requires_grad) {
          Tensor& dx = impl_->grad_of(n.inputs[0]);
          const Tensor& gv = gn.value;
          if (n.training) {
            // d/dx of ((x - mean)/sqrt(var + eps)) with batch statistics.
            for (int c = 0; c < d; ++c) {
              double sum_dxhat = 0.0, sum_dxhat_xhat = 0.0;
              for (int r = 0; r < rows; ++r) {
                const double dxhat = dy.at(r, c) * gv.at(0, c);
                sum_dxhat += dxhat;
                sum_dxhat_xhat += dxhat * n.saved.at(r, c);
              }
              for (int r = 0; r < rows; ++r) {
                const double dxhat = dy.at(r, c) * gv.at(0, c);
                dx.at(r, c) += n.inv_std[c] *
                               (dxhat - sum_dxhat / rows -
                                n.saved.at(r, c) * sum_dxhat_xhat / rows);
              }
            }
          } else {
            for (int r = 0; r < rows; ++r)
              for (int c = 0; c < d; ++c)
                dx.at(r, c) += dy.at(r, c) * gv.at(0, c) * n.inv_std[c];
          }
        }
        break;
      }
      case Op::ConcatCols: {
        Node& an = impl_->at(n.inputs[0]);
        Node& bn = impl_->at(n.inputs[1]);
        const int ac = an.value.cols;
        if (an.requires_grad) {
          Tensor& da = impl_->grad_of(n.inputs[0]);
          for (int r = 0; r < da.rows; ++r)
            for (int c = 0; c < ac; ++c) da.at(r, c) += dy.at(r, c);
        }
        if (bn.requires_grad) {
          Tensor& db = impl_->grad_of(n.inputs[1]);
          for (int r = 0; r < db.rows; ++r)
            for (int c = 0; c < db.cols; ++c) db.at(r, c) += dy.at(r, ac + c);
        }
        break;
      }
      case Op::CrossEntropy: {
        Tensor& dp = impl_->grad_of(n.inputs[0]);
        const Tensor& pv = impl_->at(n.inputs[0]).value;
        dp.at(0, n.i0) += -dy.at(0, 0) / pv.at(0, n.i0);
        break;
      }
      case Op::SelectRow: {
        Tensor& dx = impl_->grad_of(n.inputs[0]);
        for (int c = 0; c < dx.cols; ++c) dx.at(n.i0, c) += dy.at(0, c);
        break;
      }
      case Op::SelectEntry: {
        Tensor& dx = impl_->grad_of(n.inputs[0]);
        dx.at(n.i0, n.i1) += dy.at(0, 0);
        break;
      }
      case Op::GatherEntries: {
        Tensor& dx = impl_->grad_of(n.inputs[0]);
        for (size_t j = 0; j < n.positions.size(); ++j)
          dx.at(n.positions[j].first, n.positions[j].second) +=
              dy.at(0, static_cast<int>(j));
        break;
      }
      case Op::Add: {
        for (int k = 0; k < 2; ++k)
          if (impl_->at(n.inputs[k]).requires_grad) {
            Tensor& d = impl_->grad_of(n.inputs[k]);
            for (size_t i = 0; i < dy.data.size(); ++i)
              d.data[i] += dy.data[i];
          }
        break;
      }
      case Op::Affine: {
        Tensor& dx = impl_->grad_of(n.inputs[0]);
        for (size_t i = 0; i < dy.data.size(); ++i)
          dx.data[i] += n.a * dy.data[i];
        break;
      }
      case Op::Square: {
        Tensor& dx = impl_->grad_of(n.inputs[0]);
        const Tensor& xv = impl_->at(n.inputs[0]).value;
        for (size_t i = 0; i < dy.data.size(); ++i)
          dx.data[i] += 2.0 * xv.data[i] * dy.data[i];
        break;
      }
      case Op::Compose: {
        for (const RowPlacement& p : n.placements) {
          if (!impl_->at(p.src).requires_grad) continue;
          Tensor& ds = impl_->grad_of(p.src);
          for (int c = 0; c < ds.cols; ++c)
            ds.at(p.src_row, c) += dy.at(p.dst_row, c);
        }
        break;
      }
    }
  }
}

void zero_grads(const std::vector<Parameter*>& params) {
  for (Parameter* p : params)
    std::fill(p->grad.data.begin(), p->grad.data.end(), 0.0);
}

void adam_step(const std::vector<Parameter*>& params, AdamState& state,
               double lr, double l2) {
  ++state.t;
  const double bc1 = 1.0 - std::pow(state.beta1, static_cast<double>(state.t));
  const double bc2 = 1.0 - std::pow(state.beta2, static_cast<double>(state.t));
  for (Parameter* p : params) {
    auto& [m, v] = state.moments[p->name];
    if (m.empty()) {
      m.assign(p->value.size(), 0.0);
      v.assign(p->value.size(), 0.0);
    }
    for (size_t i = 0; i < p->value.data.size(); ++i) {
      const double g = p->grad.data[i] + l2 * p->value.data[i];
      m[i] = state.beta1 * m[i] + (1.0 - state.beta1) * g;
      v[i] = state.beta2 * v[i] + (1.0 - state.beta2) * g * g;
      const double mhat = m[i] / bc1;
      const double vhat = v[i] / bc2;
      p->value.data[i] -= lr * mhat / (std::sqrt(vhat) + state.eps);
    }
  }
}

double clip_global_norm(const std::vector<Parameter*>& params,
                        double max_norm) {
  double sq = 0.0;
  for (const Parameter* p : params)
    for (const double g : p->grad.data) sq += g * g;
  const double norm = std::sqrt(sq);
  if (norm <= max_norm) return norm;
  const double scale = max_norm / norm;
  double post_sq = 0.0;
  for (Parameter* p : params)
    for (double& g : p->grad.data) {
      g *= scale;
      post_sq += g * g;
    }
  return std::sqrt(post_sq);
}

double grad_check(const std::function<double(bool)>& f,
                  const std::vector<Parameter*>& params, double eps) {
  zero_grads(params);
  (void)f(true);
  std::vector<std::vector<double>> analytic;
  analytic.reserve(params.size());
  for (const Parameter* p : params) analytic.push_back(p->grad.data);

  double worst = 0.0;
  for (size_t pi = 0; pi < params.size(); ++pi) {
    Parameter* p = params[pi];
    for (size_t i = 0; i < p->value.data.size(); ++i) {
      const double saved = p->value.data[i];
      p->value.data[i] = saved + eps;
      const double up = f(false);
      p->value.data[i] = saved - eps;
      const double down = f(false);
      p->value.data[i] = saved;
      const double numeric = (up - down) / (2.0 * eps);
      const double a = analytic[pi][i];
      const double err =
          std::abs(a - numeric) / std::max(1e-8, std::abs(a) + std::abs(numeric));
      worst = std::max(worst, err);
    }
  }
  return worst;
}

}  // namespace cwcf
