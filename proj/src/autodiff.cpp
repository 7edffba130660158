#include "latte/autodiff.hpp"

#include <algorithm>
#include <cmath>

#include "latte/error.hpp"

namespace latte::ad {

Var Tape::constant(Matrix value) {
  Node node;
  node.value = std::move(value);
  nodes_.push_back(std::move(node));
  return {this, static_cast<int>(nodes_.size()) - 1};
}

Var Tape::parameter(Parameter& p, bool force_grad) {
  Node node;
  node.external = &p.value;
  node.requires_grad = record_ && (p.trainable || force_grad);
  if (node.requires_grad) node.param = &p;
  nodes_.push_back(std::move(node));
  return {this, static_cast<int>(nodes_.size()) - 1};
}

Var Tape::parameter(const Parameter& p) {
  Node node;
  node.external = &p.value;
  nodes_.push_back(std::move(node));
  return {this, static_cast<int>(nodes_.size()) - 1};
}

Var Tape::push(Matrix value, std::initializer_list<Var> parents, Backward backward) {
  Node node;
  node.value = std::move(value);
  if (record_) {
    for (const Var& p : parents) {
      if (requires_grad(p.id())) {
        node.requires_grad = true;
        break;
      }
    }
    if (node.requires_grad) node.backward = std::move(backward);
  }
  nodes_.push_back(std::move(node));
  return {this, static_cast<int>(nodes_.size()) - 1};
}

Var Tape::push(Matrix value, const std::vector<Var>& parents, Backward backward) {
  Node node;
  node.value = std::move(value);
  if (record_) {
    for (const Var& p : parents) {
      if (requires_grad(p.id())) {
        node.requires_grad = true;
        break;
      }
    }
    if (node.requires_grad) node.backward = std::move(backward);
  }
  nodes_.push_back(std::move(node));
  return {this, static_cast<int>(nodes_.size()) - 1};
}

Matrix& Tape::grad_slot(int id) {
  Node& n = nodes_[static_cast<size_t>(id)];
  if (n.grad.size() == 0) {
    const Matrix& v = n.external != nullptr ? *n.external : n.value;
    n.grad = Matrix::Zero(v.rows(), v.cols());
  }
  return n.grad;
}

void Tape::accumulate(int id, const Matrix& contribution) {
  if (!requires_grad(id)) return;
  Matrix& g = grad_slot(id);
  g += contribution;
}

void Tape::backward(Var output) {
  if (output.rows() != 1 || output.cols() != 1) {
    throw InvalidArgument("backward() without a seed needs a 1x1 output");
  }
  backward(output, Matrix::Ones(1, 1));
}

void Tape::backward(Var output, const Matrix& seed) {
  if (!record_) throw InvalidArgument("backward() on a non-recording tape");
  if (!requires_grad(output.id())) return;
  grad_slot(output.id()) += seed;
  for (int id = output.id(); id >= 0; --id) {
    Node& n = nodes_[static_cast<size_t>(id)];
    if (n.grad.size() == 0) continue;
    if (n.backward) n.backward(*this, n.grad);
    if (n.param != nullptr) {
      if (n.param->grad.size() == 0) n.param->zero_grad();
      n.param->grad += n.grad;
    }
  }
}

namespace {

void require(bool ok, const char* what) {
  if (!ok) throw InvalidArgument(what);
}

constexpr double kGeluC = 0.7978845608028654;  // sqrt(2/pi)
constexpr double kGeluA = 0.044715;

}  // namespace

Var matmul(Var a, Var b) {
  require(a.cols() == b.rows(), "matmul: inner dimension mismatch");
  Tape& t = *a.tape();
  const int ia = a.id();
  const int ib = b.id();
  return t.push(a.value() * b.value(), {a, b}, [ia, ib](Tape& tp, const Matrix& g) {
    if (tp.requires_grad(ia)) tp.accumulate(ia, g * tp.value(ib).transpose());
    if (tp.requires_grad(ib)) tp.accumulate(ib, tp.value(ia).transpose() * g);
  });
}

Var add(Var a, Var b) {
  require(a.rows() == b.rows() && a.cols() == b.cols(), "add: shape mismatch");
  const int ia = a.id();
  const int ib = b.id();
  return a.tape()->push(a.value() + b.value(), {a, b}, [ia, ib](Tape& tp, const Matrix& g) {
    tp.accumulate(ia, g);
    tp.accumulate(ib, g);
  });
}

Var sub(Var a, Var b) {
  require(a.rows() == b.rows() && a.cols() == b.cols(), "sub: shape mismatch");
  const int ia = a.id();
  const int ib = b.id();
  return a.tape()->push(a.value() - b.value(), {a, b}, [ia, ib](Tape& tp, const Matrix& g) {
    tp.accumulate(ia, g);
    if (tp.requires_grad(ib)) tp.accumulate(ib, -g);
  });
}

Var hadamard(Var a, Var b) {
  require(a.rows() == b.rows() && a.cols() == b.cols(), "hadamard: shape mismatch");
  const int ia = a.id();
  const int ib = b.id();
  return a.tape()->push(a.value().cwiseProduct(b.value()), {a, b}, [ia, ib](Tape& tp, const Matrix& g) {
    if (tp.requires_grad(ia)) tp.accumulate(ia, g.cwiseProduct(tp.value(ib)));
    if (tp.requires_grad(ib)) tp.accumulate(ib, g.cwiseProduct(tp.value(ia)));
  });
}

Var scale(Var a, double s) {
  const int ia = a.id();
  return a.tape()->push(a.value() * s, {a}, [ia, s](Tape& tp, const Matrix& g) { tp.accumulate(ia, g * s); });
}

Var add_row(Var x, Var row) {
  require(row.rows() == 1 && row.cols() == x.cols(), "add_row: row must be 1 x cols");
  const int ix = x.id();
  const int ir = row.id();
  Matrix out = x.value().rowwise() + row.value().row(0);
  return x.tape()->push(std::move(out), {x, row}, [ix, ir](Tape& tp, const Matrix& g) {
    tp.accumulate(ix, g);
    if (tp.requires_grad(ir)) tp.accumulate(ir, g.colwise().sum());
  });
}

Var gelu(Var x) {
  const int ix = x.id();
  const Matrix& v = x.value();
  Matrix out = v.unaryExpr([](double u) {
    return 0.5 * u * (1.0 + std::tanh(kGeluC * (u + kGeluA * u * u * u)));
  });
  return x.tape()->push(std::move(out), {x}, [ix](Tape& tp, const Matrix& g) {
    const Matrix& in = tp.value(ix);
    Matrix d = in.unaryExpr([](double u) {
      const double th = std::tanh(kGeluC * (u + kGeluA * u * u * u));
      return 0.5 * (1.0 + th) + 0.5 * u * (1.0 - th * th) * kGeluC * (1.0 + 3.0 * kGeluA * u * u);
    });
    tp.accumulate(ix, g.cwiseProduct(d));
  });
}

Var tanh(Var x) {
  const int ix = x.id();
  Matrix out = x.value().array().tanh().matrix();
  Matrix saved = out;
  return x.tape()->push(std::move(out), {x}, [ix, saved = std::move(saved)](Tape& tp, const Matrix& g) {
    tp.accumulate(ix, g.cwiseProduct((1.0 - saved.array().square()).matrix()));
  });
}

Var sigmoid(Var x) {
  const int ix = x.id();
  Matrix out = x.value().unaryExpr([](double u) { return 1.0 / (1.0 + std::exp(-u)); });
  Matrix saved = out;
  return x.tape()->push(std::move(out), {x}, [ix, saved = std::move(saved)](Tape& tp, const Matrix& g) {
    tp.accumulate(ix, g.cwiseProduct((saved.array() * (1.0 - saved.array())).matrix()));
  });
}

Var layer_norm(Var x, Var gamma, Var beta, double eps) {
  const Eigen::Index k = x.cols();
  require(gamma.rows() == 1 && gamma.cols() == k && beta.rows() == 1 && beta.cols() == k,
          "layer_norm: gamma/beta must be 1 x cols");
  const Matrix& in = x.value();
  const Eigen::VectorXd mean = in.rowwise().mean();
  Matrix centered = in.colwise() - mean;
  const Eigen::VectorXd inv_std =
      ((centered.array().square().rowwise().sum() / static_cast<double>(k)) + eps).rsqrt().matrix();
  Matrix normed = centered.array().colwise() * inv_std.array();
  Matrix out = (normed.array().rowwise() * gamma.value().row(0).array()).rowwise() + beta.value().row(0).array();
  const int ix = x.id();
  const int ig = gamma.id();
  const int ib = beta.id();
  return x.tape()->push(std::move(out), {x, gamma, beta},
                        [ix, ig, ib, normed = std::move(normed), inv_std](Tape& tp, const Matrix& g) {
                          const double kk = static_cast<double>(g.cols());
                          if (tp.requires_grad(ig)) tp.accumulate(ig, g.cwiseProduct(normed).colwise().sum());
                          if (tp.requires_grad(ib)) tp.accumulate(ib, g.colwise().sum());
                          if (!tp.requires_grad(ix)) return;
                          const Matrix dn = g.array().rowwise() * tp.value(ig).row(0).array();
                          const Eigen::VectorXd mean_dn = dn.rowwise().sum() / kk;
                          const Eigen::VectorXd mean_dn_n = dn.cwiseProduct(normed).rowwise().sum() / kk;
                          Matrix dx = (dn.colwise() - mean_dn) - (normed.array().colwise() * mean_dn_n.array()).matrix();
                          dx = dx.array().colwise() * inv_std.array();
                          tp.accumulate(ix, dx);
                        });
}

Var concat_cols(const std::vector<Var>& parts) {
  require(!parts.empty(), "concat_cols: no inputs");
  const Eigen::Index r = parts.front().rows();
  Eigen::Index total = 0;
  for (const Var& p : parts) {
    require(p.rows() == r, "concat_cols: row mismatch");
    total += p.cols();
  }
  Matrix out(r, total);
  std::vector<std::pair<int, Eigen::Index>> layout;
  Eigen::Index offset = 0;
  for (const Var& p : parts) {
    out.middleCols(offset, p.cols()) = p.value();
    layout.emplace_back(p.id(), offset);
    offset += p.cols();
  }
  return parts.front().tape()->push(std::move(out), parts, [layout](Tape& tp, const Matrix& g) {
    for (const auto& [id, off] : layout) {
      if (tp.requires_grad(id)) tp.accumulate(id, g.middleCols(off, tp.value(id).cols()));
    }
  });
}

Var concat_rows(const std::vector<Var>& parts) {
  require(!parts.empty(), "concat_rows: no inputs");
  const Eigen::Index c = parts.front().cols();
  Eigen::Index total = 0;
  for (const Var& p : parts) {
    require(p.cols() == c, "concat_rows: column mismatch");
    total += p.rows();
  }
  Matrix out(total, c);
  std::vector<std::pair<int, Eigen::Index>> layout;
  Eigen::Index offset = 0;
  for (const Var& p : parts) {
    out.middleRows(offset, p.rows()) = p.value();
    layout.emplace_back(p.id(), offset);
    offset += p.rows();
  }
  return parts.front().tape()->push(std::move(out), parts, [layout](Tape& tp, const Matrix& g) {
    for (const auto& [id, off] : layout) {
      if (tp.requires_grad(id)) tp.accumulate(id, g.middleRows(off, tp.value(id).rows()));
    }
  });
}

Var gather_rows(Var x, std::vector<int> index) {
  const Matrix& in = x.value();
  Matrix out = Matrix::Zero(static_cast<Eigen::Index>(index.size()), in.cols());
  for (size_t i = 0; i < index.size(); ++i) {
    const int src = index[i];
    if (src < 0) continue;
    require(src < in.rows(), "gather_rows: index out of range");
    out.row(static_cast<Eigen::Index>(i)) = in.row(src);
  }
  const int ix = x.id();
  return x.tape()->push(std::move(out), {x}, [ix, index = std::move(index)](Tape& tp, const Matrix& g) {
    Matrix& gx = tp.grad_slot(ix);
    for (size_t i = 0; i < index.size(); ++i) {
      if (index[i] >= 0) gx.row(index[i]) += g.row(static_cast<Eigen::Index>(i));
    }
  });
}

Var gather_patches(Var x, const Eigen::MatrixXi& table) {
  const Matrix& in = x.value();
  const Eigen::Index c = in.cols();
  Matrix out = Matrix::Zero(table.rows(), table.cols() * c);
  for (Eigen::Index r = 0; r < table.rows(); ++r) {
    for (Eigen::Index k = 0; k < table.cols(); ++k) {
      const int src = table(r, k);
      if (src < 0) continue;
      require(src < in.rows(), "gather_patches: index out of range");
      out.block(r, k * c, 1, c) = in.row(src);
    }
  }
  const int ix = x.id();
  return x.tape()->push(std::move(out), {x}, [ix, table, c](Tape& tp, const Matrix& g) {
    Matrix& gx = tp.grad_slot(ix);
    for (Eigen::Index r = 0; r < table.rows(); ++r) {
      for (Eigen::Index k = 0; k < table.cols(); ++k) {
        const int src = table(r, k);
        if (src >= 0) gx.row(src) += g.block(r, k * c, 1, c);
      }
    }
  });
}

Var group_mean_rows(Var x, int group) {
  require(group > 0 && x.rows() % group == 0, "group_mean_rows: rows not divisible by group");
  const Eigen::Index groups = x.rows() / group;
  Matrix out(groups, x.cols());
  // Summing each column in sorted order makes the mean exactly invariant to
  // the order of rows within a group.
  std::vector<double> col(static_cast<size_t>(group));
  for (Eigen::Index gi = 0; gi < groups; ++gi) {
    for (Eigen::Index j = 0; j < x.cols(); ++j) {
      for (int r = 0; r < group; ++r) col[r] = x.value()(gi * group + r, j);
      std::sort(col.begin(), col.end());
      double acc = 0.0;
      for (double v : col) acc += v;
      out(gi, j) = acc / static_cast<double>(group);
    }
  }
  const int ix = x.id();
  return x.tape()->push(std::move(out), {x}, [ix, group](Tape& tp, const Matrix& g) {
    Matrix& gx = tp.grad_slot(ix);
    for (Eigen::Index gi = 0; gi < g.rows(); ++gi) {
      gx.middleRows(gi * group, group).rowwise() += g.row(gi) / static_cast<double>(group);
    }
  });
}

Var group_softmax(Var x, int group) {
  require(x.cols() == 1, "group_softmax: expects a column vector");
  require(group > 0 && x.rows() % group == 0, "group_softmax: rows not divisible by group");
  Matrix out(x.rows(), 1);
  for (Eigen::Index s = 0; s < x.rows(); s += group) {
    const auto seg = x.value().middleRows(s, group);
    const double m = seg.maxCoeff();
    Eigen::VectorXd e = (seg.array() - m).exp().matrix();
    out.middleRows(s, group) = e / e.sum();
  }
  const int ix = x.id();
  Matrix saved = out;
  return x.tape()->push(std::move(out), {x}, [ix, group, saved = std::move(saved)](Tape& tp, const Matrix& g) {
    Matrix dx(saved.rows(), 1);
    for (Eigen::Index s = 0; s < saved.rows(); s += group) {
      const auto p = saved.middleRows(s, group);
      const auto gs = g.middleRows(s, group);
      const double dot = p.cwiseProduct(gs).sum();
      dx.middleRows(s, group) = p.cwiseProduct((gs.array() - dot).matrix());
    }
    tp.accumulate(ix, dx);
  });
}

Var group_weighted_sum(Var x, Var w, int group) {
  require(w.cols() == 1 && w.rows() == x.rows(), "group_weighted_sum: weight shape mismatch");
  require(group > 0 && x.rows() % group == 0, "group_weighted_sum: rows not divisible by group");
  const Eigen::Index groups = x.rows() / group;
  Matrix out(groups, x.cols());
  for (Eigen::Index gi = 0; gi < groups; ++gi) {
    out.row(gi) = w.value().middleRows(gi * group, group).transpose() * x.value().middleRows(gi * group, group);
  }
  const int ix = x.id();
  const int iw = w.id();
  return x.tape()->push(std::move(out), {x, w}, [ix, iw, group](Tape& tp, const Matrix& g) {
    const Matrix& xv = tp.value(ix);
    const Matrix& wv = tp.value(iw);
    const bool gx_needed = tp.requires_grad(ix);
    const bool gw_needed = tp.requires_grad(iw);
    for (Eigen::Index gi = 0; gi < g.rows(); ++gi) {
      if (gx_needed) {
        tp.grad_slot(ix).middleRows(gi * group, group) += wv.middleRows(gi * group, group) * g.row(gi);
      }
      if (gw_needed) {
        tp.grad_slot(iw).middleRows(gi * group, group) += xv.middleRows(gi * group, group) * g.row(gi).transpose();
      }
    }
  });
}

Var tile_rows(Var x, int times) {
  require(times > 0, "tile_rows: times must be positive");
  Matrix out = x.value().replicate(times, 1);
  const int ix = x.id();
  return x.tape()->push(std::move(out), {x}, [ix, times](Tape& tp, const Matrix& g) {
    const Eigen::Index r = tp.value(ix).rows();
    Matrix acc = Matrix::Zero(r, g.cols());
    for (int i = 0; i < times; ++i) acc += g.middleRows(i * r, r);
    tp.accumulate(ix, acc);
  });
}

Var sum_all(Var x) {
  Matrix out(1, 1);
  out(0, 0) = x.value().sum();
  const int ix = x.id();
  return x.tape()->push(std::move(out), {x}, [ix](Tape& tp, const Matrix& g) {
    const Matrix& v = tp.value(ix);
    tp.accumulate(ix, Matrix::Constant(v.rows(), v.cols(), g(0, 0)));
  });
}

Var mean_all(Var x) {
  const double n = static_cast<double>(x.value().size());
  Matrix out(1, 1);
  out(0, 0) = x.value().sum() / n;
  const int ix = x.id();
  return x.tape()->push(std::move(out), {x}, [ix, n](Tape& tp, const Matrix& g) {
    const Matrix& v = tp.value(ix);
    tp.accumulate(ix, Matrix::Constant(v.rows(), v.cols(), g(0, 0) / n));
  });
}

Var bce_with_logits(Var logits, const Eigen::VectorXd& labels) {
  require(logits.cols() == 1 && logits.rows() == labels.size(), "bce_with_logits: shape mismatch");
  const Eigen::Index n = labels.size();
  require(n > 0, "bce_with_logits: empty batch");
  const Matrix& z = logits.value();
  double total = 0.0;
  for (Eigen::Index i = 0; i < n; ++i) {
    // log(1 + e^z) - y z, evaluated stably.
    const double zi = z(i, 0);
    total += std::max(zi, 0.0) - zi * labels[i] + std::log1p(std::exp(-std::abs(zi)));
  }
  Matrix out(1, 1);
  out(0, 0) = total / static_cast<double>(n);
  const int il = logits.id();
  return logits.tape()->push(std::move(out), {logits}, [il, labels](Tape& tp, const Matrix& g) {
    const Matrix& zz = tp.value(il);
    const double inv_n = 1.0 / static_cast<double>(labels.size());
    Matrix d(zz.rows(), 1);
    for (Eigen::Index i = 0; i < zz.rows(); ++i) {
      const double s = 1.0 / (1.0 + std::exp(-zz(i, 0)));
      d(i, 0) = (s - labels[i]) * inv_n * g(0, 0);
    }
    tp.accumulate(il, d);
  });
}

Var mse(Var prediction, const Matrix& target) {
  require(prediction.rows() == target.rows() && prediction.cols() == target.cols(), "mse: shape mismatch");
  const double n = static_cast<double>(target.size());
  Matrix diff = prediction.value() - target;
  Matrix out(1, 1);
  out(0, 0) = diff.squaredNorm() / n;
  const int ip = prediction.id();
  return prediction.tape()->push(std::move(out), {prediction}, [ip, diff = std::move(diff), n](Tape& tp, const Matrix& g) {
    tp.accumulate(ip, diff * (2.0 * g(0, 0) / n));
  });
}

Var attention(Var q, Var k, Var v, int heads, int nq, int nk, double score_scale, AttentionWeights* record) {
  const Eigen::Index d = q.cols();
  require(heads > 0 && d % heads == 0, "attention: width not divisible by heads");
  require(k.cols() == d && v.cols() == d, "attention: key/value width mismatch");
  require(nq > 0 && nk > 0 && q.rows() % nq == 0, "attention: query rows not divisible by nq");
  const Eigen::Index groups = q.rows() / nq;
  require(k.rows() == groups * nk && v.rows() == groups * nk, "attention: key/value rows mismatch");
  const Eigen::Index dh = d / heads;

  const Matrix& qv = q.value();
  const Matrix& kv = k.value();
  const Matrix& vv = v.value();
  Matrix out(q.rows(), d);
  std::vector<Matrix> probs(static_cast<size_t>(groups * heads));
  for (Eigen::Index g = 0; g < groups; ++g) {
    for (int h = 0; h < heads; ++h) {
      const auto qb = qv.block(g * nq, h * dh, nq, dh);
      const auto kb = kv.block(g * nk, h * dh, nk, dh);
      const auto vb = vv.block(g * nk, h * dh, nk, dh);
      Matrix s = (qb * kb.transpose()) * score_scale;
      const Eigen::VectorXd m = s.rowwise().maxCoeff();
      s = (s.colwise() - m).array().exp().matrix();
      const Eigen::VectorXd z = s.rowwise().sum();
      s = s.array().colwise() / z.array();
      out.block(g * nq, h * dh, nq, dh) = s * vb;
      probs[static_cast<size_t>(g * heads + h)] = std::move(s);
    }
  }
  if (record != nullptr) {
    record->groups = static_cast<int>(groups);
    record->heads = heads;
    record->blocks = probs;
  }
  const int iq = q.id();
  const int ik = k.id();
  const int iv = v.id();
  return q.tape()->push(
      std::move(out), {q, k, v},
      [iq, ik, iv, heads, nq, nk, dh, groups, score_scale, probs = std::move(probs)](Tape& tp, const Matrix& gout) {
        const Matrix& qv2 = tp.value(iq);
        const Matrix& kv2 = tp.value(ik);
        const Matrix& vv2 = tp.value(iv);
        const bool need_q = tp.requires_grad(iq);
        const bool need_k = tp.requires_grad(ik);
        const bool need_v = tp.requires_grad(iv);
        Matrix dq = need_q ? Matrix::Zero(qv2.rows(), qv2.cols()) : Matrix();
        Matrix dk = need_k ? Matrix::Zero(kv2.rows(), kv2.cols()) : Matrix();
        Matrix dv = need_v ? Matrix::Zero(vv2.rows(), vv2.cols()) : Matrix();
        for (Eigen::Index g = 0; g < groups; ++g) {
          for (int h = 0; h < heads; ++h) {
            const Matrix& p = probs[static_cast<size_t>(g * heads + h)];
            const auto go = gout.block(g * nq, h * dh, nq, dh);
            const auto vb = vv2.block(g * nk, h * dh, nk, dh);
            if (need_v) dv.block(g * nk, h * dh, nk, dh) += p.transpose() * go;
            if (!need_q && !need_k) continue;
            const Matrix dp = go * vb.transpose();
            const Eigen::VectorXd row_dot = dp.cwiseProduct(p).rowwise().sum();
            const Matrix ds = (p.array() * (dp.colwise() - row_dot).array()).matrix() * score_scale;
            if (need_q) dq.block(g * nq, h * dh, nq, dh) += ds * kv2.block(g * nk, h * dh, nk, dh);
            if (need_k) dk.block(g * nk, h * dh, nk, dh) += ds.transpose() * qv2.block(g * nq, h * dh, nq, dh);
          }
        }
        if (need_q) tp.accumulate(iq, dq);
        if (need_k) tp.accumulate(ik, dk);
        if (need_v) tp.accumulate(iv, dv);
      });
}

}  // namespace latte::ad
