#pragma once

#include <functional>
#include <map>
#include <stdexcept>
#include <string>
#include <utility>
#include <vector>

namespace cwcf {

struct Tensor {
  int rows = 0;
  int cols = 0;
  std::vector<double> data;  // row-major, length rows*cols

  Tensor() = default;
  Tensor(int r, int c) : rows(r), cols(c), data(static_cast<size_t>(r) * c, 0.0) {}
  Tensor(int r, int c, std::vector<double> d)
      : rows(r), cols(c), data(std::move(d)) {}

  double& at(int r, int c) { return data[static_cast<size_t>(r) * cols + c]; }
  double at(int r, int c) const { return data[static_cast<size_t>(r) * cols + c]; }
  size_t size() const { return data.size(); }
};

struct Parameter {
  std::string name;
  Tensor value;
  Tensor grad;  // same shape; accumulates across backward calls until cleared

  Parameter() = default;
  Parameter(std::string n, Tensor v)
      : name(std::move(n)), value(std::move(v)),
        grad(value.rows, value.cols) {}
};

// Running statistics of one batch-normalization site. The learned
// scale/shift live alongside as ordinary Parameters.
struct BnState {
  std::vector<double> running_mean;
  std::vector<double> running_var;
  double momentum = 0.99;
  double eps = 1e-5;

  explicit BnState(int dim = 0)
      : running_mean(dim, 0.0), running_var(dim, 1.0) {}
};

enum class AutodiffErrorKind { ShapeMismatch, DomainError, NotScalar, BadIndex };

class AutodiffError : public std::runtime_error {
 public:
  AutodiffError(AutodiffErrorKind kind, const std::string& msg)
      : std::runtime_error(msg), kind_(kind) {}
  AutodiffErrorKind kind() const { return kind_; }

 private:
  AutodiffErrorKind kind_;
};

using NodeId = int;

// Places row `src_row` of node `src` at row `dst_row` of a composed matrix.
struct RowPlacement {
  NodeId src = -1;
  int src_row = 0;
  int dst_row = 0;
};

// Reverse-mode tape, rebuilt per forward pass. Nodes are appended in
// topological order; backward walks them in reverse and accumulates
// parameter gradients into Parameter::grad.
class Tape {
 public:
  Tape();
  ~Tape();
  Tape(const Tape&) = delete;
  Tape& operator=(const Tape&) = delete;

  NodeId constant(Tensor value);
  NodeId param(Parameter& p);

  // y = x * W + b (row-broadcast bias). x: n*i, W: i*o, b: 1*o.
  NodeId linear(NodeId x, NodeId W, NodeId b);
  NodeId relu(NodeId x);
  NodeId softmax_row(NodeId x);       // per row
  NodeId log_softmax_row(NodeId x);   // per row
  NodeId log(NodeId x);               // elementwise; positive entries only
  NodeId mean_rows(NodeId x);         // n*d -> 1*d
  NodeId mean_entries(NodeId x);      // n*d -> 1*1
  NodeId mean_row_range(NodeId x, int row_begin, int row_end);  // -> 1*d
  // Batch statistics + running update in training mode; running statistics
  // in inference mode. gamma/beta: 1*d.
  NodeId batchnorm(NodeId x, NodeId gamma, NodeId beta, BnState& state,
                   bool training);
  NodeId concat_cols(NodeId a, NodeId b);
  // probs: a 1*k probability row; value is -log probs[label].
  NodeId cross_entropy(NodeId probs, int label);
  NodeId select_row(NodeId x, int row);
  NodeId select_entry(NodeId x, int row, int col);
  // Entries of x picked at the given (row, col) positions, as a 1*n row.
  NodeId gather_entries(NodeId x, std::vector<std::pair<int, int>> positions);
  NodeId add(NodeId a, NodeId b);
  NodeId affine(NodeId x, double scale, double shift);  // scale*x + shift
  NodeId square(NodeId x);
  // A matrix assembled from a constant base plus rows copied out of other
  // nodes; gradients flow back through the placements only.
  NodeId compose(Tensor base, std::vector<RowPlacement> placements);

  // The reference stays valid as the tape grows.
  const Tensor& value(NodeId id) const;
  bool requires_grad(NodeId id) const;
  int size() const;

  // Seeds d(output)=1 and accumulates into every reachable Parameter's grad.
  void backward(NodeId output);

  struct Impl;  // private in spirit; defined in the implementation file

 private:
  Impl* impl_;
};

void zero_grads(const std::vector<Parameter*>& params);

struct AdamState {
  double beta1 = 0.9;
  double beta2 = 0.999;
  double eps = 1e-8;
  long long t = 0;
  // Parameter name -> (first moment, second moment).
  std::map<std::string, std::pair<std::vector<double>, std::vector<double>>> moments;
};

// One Adam update from the accumulated gradients. l2 adds l2*value to each
// gradient before the moment updates; bias correction uses the shared step
// counter, incremented once per call.
void adam_step(const std::vector<Parameter*>& params, AdamState& state,
               double lr, double l2);

// Scales all gradients so their global L2 norm is at most max_norm.
// Returns the post-clip global norm.
double clip_global_norm(const std::vector<Parameter*>& params, double max_norm);

// Central-difference check of d(f)/d(params). f(true) must rebuild the
// computation, run backward, and leave gradients in the parameters; f(false)
// only needs the forward value. Returns max over coordinates of
// |analytic - numeric| / max(1e-8, |analytic| + |numeric|).
double grad_check(const std::function<double(bool)>& f,
                  const std::vector<Parameter*>& params, double eps);

}  // namespace cwcf
