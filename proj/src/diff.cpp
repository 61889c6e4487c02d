#include "gavatar/diff.hpp"

#include <cmath>
#include <iostream>
#include <numbers>

namespace gavatar::diff {

void ParamGroup::freeze_rows(const std::vector<int>& rows) {
  if (row_frozen.empty()) row_frozen.assign(value.rows(), 0);
  for (int r : rows) {
    require(r >= 0 && r < value.rows(), "freeze_rows: row out of range in " + name);
    row_frozen[r] = 1;
  }
}

ParamGroup& ParamStore::add(const std::string& name, MatX init, double lr_mult) {
  if (contains(name)) throw Error("ParamStore: duplicate group '" + name + "'");
  if (!(lr_mult > 0)) throw Error("ParamStore: learning-rate multiplier must be positive for '" + name + "'");
  auto g = std::make_unique<ParamGroup>();
  g->name = name;
  g->grad = MatX::Zero(init.rows(), init.cols());
  g->m = MatX::Zero(init.rows(), init.cols());
  g->v = MatX::Zero(init.rows(), init.cols());
  g->value = std::move(init);
  g->lr_mult = lr_mult;
  index_[name] = groups_.size();
  groups_.push_back(std::move(g));
  return *groups_.back();
}

ParamGroup& ParamStore::at(const std::string& name) {
  auto it = index_.find(name);
  if (it == index_.end()) throw Error("ParamStore: no group named '" + name + "'");
  return *groups_[it->second];
}

const ParamGroup& ParamStore::at(const std::string& name) const {
  auto it = index_.find(name);
  if (it == index_.end()) throw Error("ParamStore: no group named '" + name + "'");
  return *groups_[it->second];
}

void ParamStore::remove(const std::string& name) {
  auto it = index_.find(name);
  if (it == index_.end()) return;
  groups_.erase(groups_.begin() + static_cast<std::ptrdiff_t>(it->second));
  index_.clear();
  for (size_t i = 0; i < groups_.size(); ++i) index_[groups_[i]->name] = i;
}

std::vector<ParamGroup*> ParamStore::groups() {
  std::vector<ParamGroup*> out;
  for (auto& g : groups_) out.push_back(g.get());
  return out;
}

std::vector<const ParamGroup*> ParamStore::groups() const {
  std::vector<const ParamGroup*> out;
  for (auto& g : groups_) out.push_back(g.get());
  return out;
}

std::vector<ParamGroup*> ParamStore::with_prefix(const std::string& prefix) {
  std::vector<ParamGroup*> out;
  for (auto& g : groups_)
    if (g->name.compare(0, prefix.size(), prefix) == 0) out.push_back(g.get());
  return out;
}

void ParamStore::zero_grad() {
  for (auto& g : groups_) g->grad.setZero();
}

void ParamStore::set_frozen(const std::string& prefix, bool frozen) {
  for (ParamGroup* g : with_prefix(prefix)) g->frozen = frozen;
}

void ParamStore::set_lr_mult(const std::string& prefix, double mult) {
  if (!(mult > 0)) throw Error("ParamStore: learning-rate multiplier must be positive");
  for (ParamGroup* g : with_prefix(prefix)) g->lr_mult = mult;
}

void ParamStore::reset_optimizer() {
  step_ = 0;
  for (auto& g : groups_) {
    g->m.setZero();
    g->v.setZero();
  }
}

Eigen::Index ParamStore::num_scalars() const {
  Eigen::Index n = 0;
  for (auto& g : groups_) n += g->value.size();
  return n;
}

void adam_step(ParamStore& params, double lr, double beta1, double beta2, double eps) {
  for (auto& g : params.groups_) {
    if (g->grad.rows() != g->value.rows() || g->grad.cols() != g->value.cols())
      throw DimensionError("adam_step: gradient shape mismatch for '" + g->name + "'");
    if (!g->frozen && !g->grad.allFinite())
      throw NumericError("adam_step: non-finite gradient in '" + g->name + "'");
  }
  const long t = ++params.step_;
  const double c1 = 1.0 - std::pow(beta1, static_cast<double>(t));
  const double c2 = 1.0 - std::pow(beta2, static_cast<double>(t));
  for (auto& gp : params.groups_) {
    ParamGroup& g = *gp;
    if (g.frozen) continue;
    const double step = lr * g.lr_mult;
    const bool rowmask = !g.row_frozen.empty();
    for (Eigen::Index c = 0; c < g.value.cols(); ++c)
      for (Eigen::Index r = 0; r < g.value.rows(); ++r) {
        if (rowmask && g.row_frozen[r]) continue;
        const double gr = g.grad(r, c);
        double& m = g.m(r, c);
        double& v = g.v(r, c);
        m = beta1 * m + (1 - beta1) * gr;
        v = beta2 * v + (1 - beta2) * gr * gr;
        g.value(r, c) -= step * (m / c1) / (std::sqrt(v / c2) + eps);
      }
  }
}

double cosine_lr(long step, long total_steps, double lr0, double lr_min) {
  if (total_steps <= 0) throw Error("cosine_lr: total_steps must be positive");
  if (step < 0 || step > total_steps) {
    std::cerr << "warning: cosine_lr step " << step << " outside [0, " << total_steps << "], clamped\n";
    step = std::clamp(step, 0L, total_steps);
  }
  const double x = static_cast<double>(step) / static_cast<double>(total_steps);
  return lr_min + (lr0 - lr_min) * 0.5 * (1.0 + std::cos(std::numbers::pi * x));
}

// ---------------------------------------------------------------------------
// Tape

int Tape::push_value(MatX v, bool needs_grad) {
  values_.push_back(std::move(v));
  grads_.emplace_back();
  needs_grad_.push_back(needs_grad);
  bound_.push_back(nullptr);
  producer_.push_back(-1);
  return static_cast<int>(values_.size()) - 1;
}

Var Tape::constant(MatX value) { return {push_value(std::move(value), false)}; }

Var Tape::param(ParamGroup& group) {
  const int id = push_value(group.value, grad_enabled_ && !group.frozen);
  bound_[id] = &group;
  return {id};
}

std::vector<Var> Tape::record(std::span<const Var> inputs, std::vector<MatX> outputs, BackwardFn fn) {
  bool any = false;
  for (Var v : inputs) {
    require(v.valid() && v.id < static_cast<int>(values_.size()), "tape: invalid input variable");
    any = any || needs_grad_[v.id];
  }
  std::vector<Var> out;
  Node node;
  for (auto& o : outputs) {
    const int id = push_value(std::move(o), any);
    out.push_back({id});
    node.outputs.push_back(id);
  }
  if (any) {
    for (Var v : inputs) node.inputs.push_back(v.id);
    node.fn = std::move(fn);
    for (int id : node.outputs) producer_[id] = static_cast<int>(nodes_.size());
    nodes_.push_back(std::move(node));
  }
  return out;
}

Var Tape::record1(std::span<const Var> inputs, MatX output, BackwardFn fn) {
  std::vector<MatX> outs;
  outs.push_back(std::move(output));
  return record(inputs, std::move(outs), std::move(fn))[0];
}

const MatX& Tape::value(Var v) const {
  require(v.valid() && v.id < static_cast<int>(values_.size()), "tape: invalid variable");
  return values_[v.id];
}

bool Tape::requires_grad(Var v) const { return needs_grad_.at(v.id) != 0; }

const MatX& Tape::grad(Var v) const { return grads_.at(v.id); }

void Tape::backward(Var loss) {
  const MatX& L = value(loss);
  require(L.size() == 1, "backward: loss must be a scalar");
  if (!std::isfinite(L(0, 0))) throw NumericError("backward: loss is not finite");
  for (auto& g : grads_) g.resize(0, 0);
  grads_[loss.id] = MatX::Ones(1, 1);
  auto ensure = [&](int id) -> MatX& {
    MatX& g = grads_[id];
    if (g.size() == 0 && values_[id].size() != 0) g = MatX::Zero(values_[id].rows(), values_[id].cols());
    if (g.rows() != values_[id].rows() || g.cols() != values_[id].cols())
      g = MatX::Zero(values_[id].rows(), values_[id].cols());
    return g;
  };
  const int last = needs_grad_[loss.id] ? producer_[loss.id] : -1;
  for (int n = last; n >= 0; --n) {
    Node& node = nodes_[n];
    bool reached = false;
    for (int o : node.outputs) reached = reached || grads_[o].size() != 0;
    if (!reached) continue;
    std::vector<const MatX*> og;
    for (int o : node.outputs) og.push_back(&ensure(o));
    std::vector<MatX*> ig;
    for (int i : node.inputs) ig.push_back(needs_grad_[i] ? &ensure(i) : nullptr);
    node.fn(og, ig);
  }
  for (size_t i = 0; i < values_.size(); ++i) {
    if (bound_[i] && needs_grad_[i] && grads_[i].size() != 0) {
      ParamGroup& g = *bound_[i];
      if (g.grad.rows() != g.value.rows() || g.grad.cols() != g.value.cols())
        g.grad = MatX::Zero(g.value.rows(), g.value.cols());
      g.grad += grads_[i];
    }
  }
}

// ---------------------------------------------------------------------------
// Primitive ops

namespace {

void same_shape(const MatX& a, const MatX& b, const char* op) {
  if (a.rows() != b.rows() || a.cols() != b.cols())
    throw DimensionError(std::string(op) + ": shape mismatch " + std::to_string(a.rows()) + "x" +
                         std::to_string(a.cols()) + " vs " + std::to_string(b.rows()) + "x" +
                         std::to_string(b.cols()));
}

template <class F, class G>
Var unary(Tape& t, Var a, F f, G dfdx) {
  const MatX& x = t.value(a);
  MatX y = x.unaryExpr(f);
  auto fn = [x, y, dfdx](std::span<const MatX* const> og, std::span<MatX* const> ig) {
    if (ig[0]) *ig[0] += og[0]->cwiseProduct(x.binaryExpr(y, dfdx));
  };
  Var in[] = {a};
  return t.record1(in, std::move(y), fn);
}

}  // namespace

Var add(Tape& t, Var a, Var b) {
  same_shape(t.value(a), t.value(b), "add");
  Var in[] = {a, b};
  return t.record1(in, t.value(a) + t.value(b), [](auto og, auto ig) {
    if (ig[0]) *ig[0] += *og[0];
    if (ig[1]) *ig[1] += *og[0];
  });
}

Var sub(Tape& t, Var a, Var b) {
  same_shape(t.value(a), t.value(b), "sub");
  Var in[] = {a, b};
  return t.record1(in, t.value(a) - t.value(b), [](auto og, auto ig) {
    if (ig[0]) *ig[0] += *og[0];
    if (ig[1]) *ig[1] -= *og[0];
  });
}

Var mul(Tape& t, Var a, Var b) {
  same_shape(t.value(a), t.value(b), "mul");
  const MatX x = t.value(a), y = t.value(b);
  Var in[] = {a, b};
  return t.record1(in, x.cwiseProduct(y), [x, y](auto og, auto ig) {
    if (ig[0]) *ig[0] += og[0]->cwiseProduct(y);
    if (ig[1]) *ig[1] += og[0]->cwiseProduct(x);
  });
}

Var scale(Tape& t, Var a, double s) {
  Var in[] = {a};
  return t.record1(in, t.value(a) * s, [s](auto og, auto ig) {
    if (ig[0]) *ig[0] += s * *og[0];
  });
}

Var add_scalar(Tape& t, Var a, double s) {
  Var in[] = {a};
  return t.record1(in, t.value(a).array() + s, [](auto og, auto ig) {
    if (ig[0]) *ig[0] += *og[0];
  });
}

Var matmul(Tape& t, Var a, Var b) {
  const MatX& x = t.value(a);
  const MatX& y = t.value(b);
  if (x.cols() != y.rows()) throw DimensionError("matmul: inner dimension mismatch");
  MatX out = x * y;
  const bool need_x = t.requires_grad(b), need_y = t.requires_grad(a);
  // Each input's adjoint needs only the other operand.
  auto xs = std::make_shared<MatX>(need_x ? x : MatX());
  auto ys = std::make_shared<MatX>(need_y ? y : MatX());
  Var in[] = {a, b};
  return t.record1(in, std::move(out), [xs, ys](auto og, auto ig) {
    if (ig[0]) ig[0]->noalias() += *og[0] * ys->transpose();
    if (ig[1]) ig[1]->noalias() += xs->transpose() * *og[0];
  });
}

Var add_row(Tape& t, Var a, Var r) {
  const MatX& x = t.value(a);
  const MatX& b = t.value(r);
  if (b.rows() != 1 || b.cols() != x.cols()) throw DimensionError("add_row: row must be 1 x cols");
  MatX out = x.rowwise() + b.row(0);
  Var in[] = {a, r};
  return t.record1(in, std::move(out), [](auto og, auto ig) {
    if (ig[0]) *ig[0] += *og[0];
    if (ig[1]) *ig[1] += og[0]->colwise().sum();
  });
}

Var sum(Tape& t, Var a) {
  Var in[] = {a};
  return t.record1(in, MatX::Constant(1, 1, t.value(a).sum()), [](auto og, auto ig) {
    if (ig[0]) ig[0]->array() += (*og[0])(0, 0);
  });
}

Var mean(Tape& t, Var a) {
  const MatX& x = t.value(a);
  require(x.size() > 0, "mean: empty input");
  const double inv = 1.0 / static_cast<double>(x.size());
  Var in[] = {a};
  return t.record1(in, MatX::Constant(1, 1, x.sum() * inv), [inv](auto og, auto ig) {
    if (ig[0]) ig[0]->array() += (*og[0])(0, 0) * inv;
  });
}

Var weighted_sum(Tape& t, std::span<const Var> terms, std::span<const double> weights) {
  require(terms.size() == weights.size(), "weighted_sum: one weight per term");
  double v = 0;
  for (size_t i = 0; i < terms.size(); ++i) {
    require(t.value(terms[i]).size() == 1, "weighted_sum: terms must be scalars");
    v += weights[i] * t.value(terms[i])(0, 0);
  }
  std::vector<double> w(weights.begin(), weights.end());
  return t.record1(terms, MatX::Constant(1, 1, v), [w](auto og, auto ig) {
    for (size_t i = 0; i < w.size(); ++i)
      if (ig[i]) (*ig[i])(0, 0) += w[i] * (*og[0])(0, 0);
  });
}

Var abs_mean(Tape& t, Var a) {
  const MatX& x = t.value(a);
  require(x.size() > 0, "abs_mean: empty input");
  const double inv = 1.0 / static_cast<double>(x.size());
  MatX sgn = x.unaryExpr([](double v) { return static_cast<double>((v > 0) - (v < 0)); });
  Var in[] = {a};
  return t.record1(in, MatX::Constant(1, 1, x.cwiseAbs().sum() * inv), [sgn, inv](auto og, auto ig) {
    if (ig[0]) *ig[0] += ((*og[0])(0, 0) * inv) * sgn;
  });
}

Var square_mean(Tape& t, Var a) {
  const MatX x = t.value(a);
  require(x.size() > 0, "square_mean: empty input");
  const double inv = 1.0 / static_cast<double>(x.size());
  Var in[] = {a};
  return t.record1(in, MatX::Constant(1, 1, x.squaredNorm() * inv), [x, inv](auto og, auto ig) {
    if (ig[0]) *ig[0] += (2.0 * inv * (*og[0])(0, 0)) * x;
  });
}

Var frobenius(Tape& t, Var a) {
  const MatX x = t.value(a);
  const double n = x.norm();
  Var in[] = {a};
  return t.record1(in, MatX::Constant(1, 1, n), [x, n](auto og, auto ig) {
    if (ig[0] && n > 0) *ig[0] += ((*og[0])(0, 0) / n) * x;
  });
}

Var max_floor(Tape& t, Var a, double eps) {
  return unary(
      t, a, [eps](double v) { return v > eps ? v : eps; }, [eps](double x, double) { return x > eps ? 1.0 : 0.0; });
}

Var relu(Tape& t, Var a) {
  return unary(
      t, a, [](double v) { return v > 0 ? v : 0.0; }, [](double x, double) { return x > 0 ? 1.0 : 0.0; });
}

Var leaky_relu(Tape& t, Var a, double slope) {
  return unary(
      t, a, [slope](double v) { return v > 0 ? v : slope * v; },
      [slope](double x, double) { return x > 0 ? 1.0 : slope; });
}

Var sigmoid(Tape& t, Var a) {
  return unary(
      t, a, [](double v) { return 1.0 / (1.0 + std::exp(-v)); }, [](double, double y) { return y * (1 - y); });
}

Var tanh(Tape& t, Var a) {
  return unary(
      t, a, [](double v) { return std::tanh(v); }, [](double, double y) { return 1 - y * y; });
}

Var exp(Tape& t, Var a) {
  return unary(
      t, a, [](double v) { return std::exp(v); }, [](double, double y) { return y; });
}

Var clamp(Tape& t, Var a, double lo, double hi) {
  return unary(
      t, a, [lo, hi](double v) { return std::clamp(v, lo, hi); },
      [lo, hi](double x, double) { return (x > lo && x < hi) ? 1.0 : 0.0; });
}

Var cols(Tape& t, Var a, int first, int count) {
  const MatX& x = t.value(a);
  require(first >= 0 && count >= 0 && first + count <= x.cols(), "cols: range out of bounds");
  Var in[] = {a};
  return t.record1(in, x.middleCols(first, count), [first, count](auto og, auto ig) {
    if (ig[0]) ig[0]->middleCols(first, count) += *og[0];
  });
}

Var concat_cols(Tape& t, std::span<const Var> parts) {
  require(!parts.empty(), "concat_cols: no inputs");
  const Eigen::Index n = t.value(parts[0]).rows();
  std::vector<Eigen::Index> widths;
  Eigen::Index total = 0;
  for (Var p : parts) {
    require(t.value(p).rows() == n, "concat_cols: row count mismatch");
    widths.push_back(t.value(p).cols());
    total += widths.back();
  }
  MatX out(n, total);
  Eigen::Index off = 0;
  for (size_t i = 0; i < parts.size(); ++i) {
    out.middleCols(off, widths[i]) = t.value(parts[i]);
    off += widths[i];
  }
  return t.record1(parts, std::move(out), [widths](auto og, auto ig) {
    Eigen::Index o = 0;
    for (size_t i = 0; i < widths.size(); ++i) {
      if (ig[i]) *ig[i] += og[0]->middleCols(o, widths[i]);
      o += widths[i];
    }
  });
}

Var row(Tape& t, Var a, int r) {
  const MatX& x = t.value(a);
  require(r >= 0 && r < x.rows(), "row: index out of range");
  Var in[] = {a};
  return t.record1(in, x.row(r), [r](auto og, auto ig) {
    if (ig[0]) ig[0]->row(r) += og[0]->row(0);
  });
}

Var gather_rows(Tape& t, Var a, std::span<const int> rows) {
  const MatX& x = t.value(a);
  std::vector<int> idx(rows.begin(), rows.end());
  MatX out(static_cast<Eigen::Index>(idx.size()), x.cols());
  for (size_t i = 0; i < idx.size(); ++i) {
    require(idx[i] >= 0 && idx[i] < x.rows(), "gather_rows: index out of range");
    out.row(static_cast<Eigen::Index>(i)) = x.row(idx[i]);
  }
  Var in[] = {a};
  return t.record1(in, std::move(out), [idx](auto og, auto ig) {
    if (!ig[0]) return;
    for (size_t i = 0; i < idx.size(); ++i) ig[0]->row(idx[i]) += og[0]->row(static_cast<Eigen::Index>(i));
  });
}

Var scatter_rows(Tape& t, std::span<const Var> parts, std::span<const std::vector<int>> rows, int n) {
  require(parts.size() == rows.size(), "scatter_rows: one index list per part");
  Eigen::Index c = -1;
  for (Var p : parts)
    if (t.value(p).rows() > 0) c = t.value(p).cols();
  for (Var p : parts)
    if (c < 0) c = t.value(p).cols();
  MatX out = MatX::Zero(n, std::max<Eigen::Index>(c, 0));
  for (size_t k = 0; k < parts.size(); ++k) {
    const MatX& x = t.value(parts[k]);
    require(x.rows() == static_cast<Eigen::Index>(rows[k].size()), "scatter_rows: part size mismatch");
    for (size_t i = 0; i < rows[k].size(); ++i) out.row(rows[k][i]) = x.row(static_cast<Eigen::Index>(i));
  }
  std::vector<std::vector<int>> idx(rows.begin(), rows.end());
  return t.record1(parts, std::move(out), [idx](auto og, auto ig) {
    for (size_t k = 0; k < idx.size(); ++k) {
      if (!ig[k]) continue;
      for (size_t i = 0; i < idx[k].size(); ++i) ig[k]->row(static_cast<Eigen::Index>(i)) += og[0]->row(idx[k][i]);
    }
  });
}

Var normalize_rows(Tape& t, Var a) {
  const MatX x = t.value(a);
  VecX norms = x.rowwise().norm();
  for (Eigen::Index i = 0; i < norms.size(); ++i)
    if (!(norms[i] > 0)) throw NumericError("normalize_rows: zero-length row");
  MatX y = x.array().colwise() / norms.array();
  Var in[] = {a};
  return t.record1(in, y, [y, norms](auto og, auto ig) {
    if (!ig[0]) return;
    // d(x/|x|) = (g - y (y.g)) / |x|
    const VecX proj = og[0]->cwiseProduct(y).rowwise().sum();
    const MatX tangent = *og[0] - (y.array().colwise() * proj.array()).matrix();
    *ig[0] += (tangent.array().colwise() / norms.array()).matrix();
  });
}

Var mul_mask(Tape& t, Var a, const MatX& mask) {
  same_shape(t.value(a), mask, "mul_mask");
  Var in[] = {a};
  return t.record1(in, t.value(a).cwiseProduct(mask), [mask](auto og, auto ig) {
    if (ig[0]) *ig[0] += og[0]->cwiseProduct(mask);
  });
}

// ---------------------------------------------------------------------------
// Image ops

namespace {

MatX im2col3(const MatX& x, int H, int W) {
  const Eigen::Index C = x.cols();
  MatX cols = MatX::Zero(static_cast<Eigen::Index>(H) * W, 9 * C);
  for (int tap = 0; tap < 9; ++tap) {
    const int dy = tap / 3 - 1, dx = tap % 3 - 1;
    for (Eigen::Index c = 0; c < C; ++c) {
      double* dst = cols.col(tap * C + c).data();
      const double* src = x.col(c).data();
      for (int y = 0; y < H; ++y) {
        const int sy = y + dy;
        if (sy < 0 || sy >= H) continue;
        const int x0 = std::max(0, -dx), x1 = std::min(W, W - dx);
        for (int xx = x0; xx < x1; ++xx) dst[y * W + xx] = src[sy * W + xx + dx];
      }
    }
  }
  return cols;
}

void col2im3(const MatX& cols, int H, int W, MatX& gx) {
  const Eigen::Index C = gx.cols();
  for (int tap = 0; tap < 9; ++tap) {
    const int dy = tap / 3 - 1, dx = tap % 3 - 1;
    for (Eigen::Index c = 0; c < C; ++c) {
      const double* src = cols.col(tap * C + c).data();
      double* dst = gx.col(c).data();
      for (int y = 0; y < H; ++y) {
        const int sy = y + dy;
        if (sy < 0 || sy >= H) continue;
        const int x0 = std::max(0, -dx), x1 = std::min(W, W - dx);
        for (int xx = x0; xx < x1; ++xx) dst[sy * W + xx + dx] += src[y * W + xx];
      }
    }
  }
}

}  // namespace

Var conv3x3(Tape& t, Var x, Var w, Var b, int height, int width) {
  const MatX& X = t.value(x);
  const MatX& Wt = t.value(w);
  const MatX& B = t.value(b);
  if (X.rows() != static_cast<Eigen::Index>(height) * width)
    throw DimensionError("conv3x3: input has " + std::to_string(X.rows()) + " pixels, expected " +
                         std::to_string(height * width));
  if (Wt.rows() != 9 * X.cols()) throw DimensionError("conv3x3: weight rows must be 9 * input channels");
  if (B.rows() != 1 || B.cols() != Wt.cols()) throw DimensionError("conv3x3: bias must be 1 x output channels");
  auto colm = std::make_shared<MatX>(im2col3(X, height, width));
  MatX out = *colm * Wt;
  out.rowwise() += B.row(0);
  const bool need_x = t.requires_grad(x);
  auto wk = std::make_shared<MatX>(need_x ? Wt : MatX());
  Var in[] = {x, w, b};
  return t.record1(in, std::move(out), [colm, wk, height, width](auto og, auto ig) {
    if (ig[1]) ig[1]->noalias() += colm->transpose() * *og[0];
    if (ig[2]) *ig[2] += og[0]->colwise().sum();
    if (ig[0]) {
      const MatX dcols = *og[0] * wk->transpose();
      col2im3(dcols, height, width, *ig[0]);
    }
  });
}

Var avg_pool2(Tape& t, Var x, int height, int width) {
  const MatX& X = t.value(x);
  require(X.rows() == static_cast<Eigen::Index>(height) * width, "avg_pool2: pixel count mismatch");
  const int h2 = height / 2, w2 = width / 2;
  require(h2 > 0 && w2 > 0, "avg_pool2: image too small");
  MatX out(static_cast<Eigen::Index>(h2) * w2, X.cols());
  for (Eigen::Index c = 0; c < X.cols(); ++c)
    for (int y = 0; y < h2; ++y)
      for (int xx = 0; xx < w2; ++xx) {
        const auto p = [&](int yy, int xc) { return X(static_cast<Eigen::Index>(yy) * width + xc, c); };
        out(y * w2 + xx, c) = 0.25 * (p(2 * y, 2 * xx) + p(2 * y, 2 * xx + 1) + p(2 * y + 1, 2 * xx) +
                                      p(2 * y + 1, 2 * xx + 1));
      }
  Var in[] = {x};
  return t.record1(in, std::move(out), [h2, w2, width](auto og, auto ig) {
    if (!ig[0]) return;
    for (Eigen::Index c = 0; c < og[0]->cols(); ++c)
      for (int y = 0; y < h2; ++y)
        for (int xx = 0; xx < w2; ++xx) {
          const double g = 0.25 * (*og[0])(y * w2 + xx, c);
          for (int k = 0; k < 4; ++k)
            (*ig[0])(static_cast<Eigen::Index>(2 * y + k / 2) * width + 2 * xx + k % 2, c) += g;
        }
  });
}

MatX image_to_mat(const Image& img) {
  MatX m(static_cast<Eigen::Index>(img.plane()), img.channels);
  std::copy(img.data.begin(), img.data.end(), m.data());
  return m;
}

Image mat_to_image(const MatX& m, int height, int width) {
  require(m.rows() == static_cast<Eigen::Index>(height) * width, "mat_to_image: pixel count mismatch");
  Image img(static_cast<int>(m.cols()), height, width);
  std::copy(m.data(), m.data() + m.size(), img.data.begin());
  return img;
}

}  // namespace gavatar::diff
