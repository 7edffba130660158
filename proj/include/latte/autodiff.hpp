#pragma once

#include <Eigen/Dense>

#include <deque>
#include <functional>
#include <string>
#include <vector>

namespace latte::ad {

using Matrix = Eigen::MatrixXd;

/// A trainable tensor: current value plus accumulated gradient.
struct Parameter {
  Matrix value;
  Matrix grad;
  bool trainable = true;

  void zero_grad() { grad = Matrix::Zero(value.rows(), value.cols()); }
};

class Tape;

/// Handle to a node recorded on a Tape. Cheap to copy.
class Var {
 public:
  Var() = default;
  Var(Tape* tape, int id) : tape_(tape), id_(id) {}

  [[nodiscard]] const Matrix& value() const;
  [[nodiscard]] Eigen::Index rows() const { return value().rows(); }
  [[nodiscard]] Eigen::Index cols() const { return value().cols(); }
  [[nodiscard]] int id() const { return id_; }
  [[nodiscard]] Tape* tape() const { return tape_; }
  [[nodiscard]] bool valid() const { return tape_ != nullptr; }

 private:
  Tape* tape_ = nullptr;
  int id_ = -1;
};

/// Reverse-mode recording of matrix operations.
///
/// Every op appends one node; backward() walks nodes in reverse. A tape built
/// with record_gradients=false stores no closures and is the inference path.
class Tape {
 public:
  using Backward = std::function<void(Tape&, const Matrix& grad_out)>;

  explicit Tape(bool record_gradients = true) : record_(record_gradients) {}
  Tape(const Tape&) = delete;
  Tape& operator=(const Tape&) = delete;

  Var constant(Matrix value);
  /// Binds a parameter by reference; its value must outlive the tape and stay
  /// unchanged until backward() returns. Frozen parameters (trainable ==
  /// false) behave as constants unless force_grad is set.
  Var parameter(Parameter& p, bool force_grad = false);
  /// Read-only binding; never receives gradients.
  Var parameter(const Parameter& p);

  /// Seeds d(output)/d(output) = 1 for a 1x1 output, or `seed` otherwise.
  void backward(Var output);
  void backward(Var output, const Matrix& seed);

  [[nodiscard]] const Matrix& value(int id) const {
    const Node& n = nodes_[static_cast<size_t>(id)];
    return n.external != nullptr ? *n.external : n.value;
  }
  [[nodiscard]] const Matrix& grad(Var v) const { return nodes_[static_cast<size_t>(v.id())].grad; }
  [[nodiscard]] bool requires_grad(int id) const { return nodes_[static_cast<size_t>(id)].requires_grad; }
  [[nodiscard]] bool recording() const { return record_; }
  [[nodiscard]] size_t size() const { return nodes_.size(); }

  /// Records an op result. `parents` decide whether the node needs a gradient.
  Var push(Matrix value, std::initializer_list<Var> parents, Backward backward);
  Var push(Matrix value, const std::vector<Var>& parents, Backward backward);

  /// Adds `contribution` into the gradient of node `id` if it wants one.
  void accumulate(int id, const Matrix& contribution);
  template <typename Derived>
  void accumulate(int id, const Eigen::MatrixBase<Derived>& contribution) {
    if (!requires_grad(id)) return;
    Matrix& g = grad_slot(id);
    g += contribution;
  }
  Matrix& grad_slot(int id);

 private:
  struct Node {
    Matrix value;
    const Matrix* external = nullptr;
    Matrix grad;
    Backward backward;
    Parameter* param = nullptr;
    bool requires_grad = false;
  };

  bool record_;
  std::deque<Node> nodes_;
};

inline const Matrix& Var::value() const { return tape_->value(id_); }

// ---- ops ------------------------------------------------------------------

Var matmul(Var a, Var b);
Var add(Var a, Var b);
Var sub(Var a, Var b);
Var hadamard(Var a, Var b);
Var scale(Var a, double s);
/// x (r x k) + row (1 x k) broadcast over rows.
Var add_row(Var x, Var row);
Var gelu(Var x);
Var tanh(Var x);
Var sigmoid(Var x);
/// Row-wise layer normalization with affine gamma/beta (1 x k each).
Var layer_norm(Var x, Var gamma, Var beta, double eps = 1e-5);
Var concat_cols(const std::vector<Var>& parts);
Var concat_rows(const std::vector<Var>& parts);
/// out.row(i) = x.row(index[i]); index -1 yields a zero row.
Var gather_rows(Var x, std::vector<int> index);
/// Patch gather: table is (R x K) of source rows (-1 = zero padding);
/// output row r is [x(table(r,0)) | x(table(r,1)) | ...], width K * x.cols().
Var gather_patches(Var x, const Eigen::MatrixXi& table);
/// Mean over consecutive blocks of `group` rows: (G*group x d) -> (G x d).
/// Exactly invariant to row order within a block.
Var group_mean_rows(Var x, int group);
/// Softmax over consecutive blocks of `group` entries of a column vector.
Var group_softmax(Var x, int group);
/// sum_i w_i x_i within each block: x (G*group x d), w (G*group x 1) -> (G x d).
Var group_weighted_sum(Var x, Var w, int group);
/// Stacks `times` copies of x vertically.
Var tile_rows(Var x, int times);
Var sum_all(Var x);
Var mean_all(Var x);
/// Mean binary cross-entropy of sigmoid(logits) against 0/1 labels.
Var bce_with_logits(Var logits, const Eigen::VectorXd& labels);
/// Mean squared error against a constant target.
Var mse(Var prediction, const Matrix& target);

/// Saved softmax weights of one attention call, one (nq x nk) block per
/// (group, head), ordered group-major.
struct AttentionWeights {
  int groups = 0;
  int heads = 0;
  std::vector<Matrix> blocks;
  [[nodiscard]] const Matrix& at(int group, int head) const {
    return blocks[static_cast<size_t>(group * heads + head)];
  }
};

/// Multi-head scaled dot-product attention over independent groups.
///
/// q is (G*nq x d), k and v are (G*nk x d). Group g's queries only see group
/// g's keys. Head j uses columns [j*d/h, (j+1)*d/h). Scores are multiplied by
/// `score_scale` before the softmax.
Var attention(Var q, Var k, Var v, int heads, int nq, int nk, double score_scale,
              AttentionWeights* record = nullptr);

}  // namespace latte::ad
