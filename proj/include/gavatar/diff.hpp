#pragma once

// Reverse-mode tape over dense matrices, parameter store, Adam and the cosine
// learning-rate schedule.

#include "gavatar/common.hpp"

#include <functional>
#include <map>
#include <memory>

namespace gavatar::diff {

struct ParamGroup {
  std::string name;
  MatX value;
  MatX grad;
  double lr_mult = 1.0;
  bool frozen = false;
  std::vector<uint8_t> row_frozen;  // empty or one flag per row
  MatX m;                           // Adam first moment
  MatX v;                           // Adam second moment

  void freeze_rows(const std::vector<int>& rows);
};

class ParamStore {
 public:
  ParamGroup& add(const std::string& name, MatX init, double lr_mult = 1.0);
  ParamGroup& at(const std::string& name);
  const ParamGroup& at(const std::string& name) const;
  bool contains(const std::string& name) const { return index_.count(name) != 0; }
  void remove(const std::string& name);

  /// Groups in insertion order.
  std::vector<ParamGroup*> groups();
  std::vector<const ParamGroup*> groups() const;
  std::vector<ParamGroup*> with_prefix(const std::string& prefix);

  void zero_grad();
  void set_frozen(const std::string& prefix, bool frozen);
  void set_lr_mult(const std::string& prefix, double mult);
  long step() const { return step_; }
  void set_step(long s) { step_ = s; }
  void reset_optimizer();

  size_t size() const { return groups_.size(); }
  Eigen::Index num_scalars() const;

 private:
  friend void adam_step(ParamStore&, double, double, double, double);
  std::vector<std::unique_ptr<ParamGroup>> groups_;
  std::map<std::string, size_t> index_;
  long step_ = 0;
};

/// Bias-corrected Adam over every non-frozen group; frozen groups and frozen rows stay bit-identical.
/// Throws NumericError on a non-finite gradient and DimensionError on a shape mismatch.
void adam_step(ParamStore& params, double lr, double beta1 = 0.9, double beta2 = 0.999, double eps = 1e-8);

/// lr_min + (lr0 - lr_min) * (1 + cos(pi * step / total)) / 2; out-of-range steps are clamped with a warning.
double cosine_lr(long step, long total_steps, double lr0, double lr_min = 0.0);

struct Var {
  int id = -1;
  bool valid() const { return id >= 0; }
};

/// Receives one gradient per output and one accumulator per input (null when
/// that input needs no gradient).
using BackwardFn = std::function<void(std::span<const MatX* const> out_grads, std::span<MatX* const> in_grads)>;

class Tape {
 public:
  /// With grad_enabled = false every parameter leaf behaves like a constant and nothing is recorded.
  explicit Tape(bool grad_enabled = true) : grad_enabled_(grad_enabled) {}
  Var constant(MatX value);
  /// Leaf bound to a group; backward adds into group.grad unless the group is frozen.
  Var param(ParamGroup& group);
  std::vector<Var> record(std::span<const Var> inputs, std::vector<MatX> outputs, BackwardFn fn);
  Var record1(std::span<const Var> inputs, MatX output, BackwardFn fn);

  const MatX& value(Var v) const;
  bool requires_grad(Var v) const;
  /// Gradient after backward(); an empty matrix if the node was not reached.
  const MatX& grad(Var v) const;
  /// Seeds d(loss)=1 and runs the recorded adjoints in reverse order.
  void backward(Var loss);
  size_t size() const { return values_.size(); }

 private:
  struct Node {
    std::vector<int> inputs;
    std::vector<int> outputs;
    BackwardFn fn;
  };
  int push_value(MatX v, bool needs_grad);
  std::vector<MatX> values_;
  std::vector<MatX> grads_;
  std::vector<uint8_t> needs_grad_;
  std::vector<ParamGroup*> bound_;
  std::vector<int> producer_;
  std::vector<Node> nodes_;
  bool grad_enabled_ = true;
};

// Primitive operations. Shapes follow Eigen semantics; every op is differentiable.
Var add(Tape& t, Var a, Var b);
Var sub(Tape& t, Var a, Var b);
Var mul(Tape& t, Var a, Var b);  // elementwise
Var scale(Tape& t, Var a, double s);
Var add_scalar(Tape& t, Var a, double s);
Var matmul(Tape& t, Var a, Var b);
Var add_row(Tape& t, Var a, Var row);  // broadcast a 1 x m row over n x m
Var sum(Tape& t, Var a);
Var mean(Tape& t, Var a);
Var weighted_sum(Tape& t, std::span<const Var> terms, std::span<const double> weights);  // scalar terms
Var abs_mean(Tape& t, Var a);                                                             // sign(0) = 0
Var square_mean(Tape& t, Var a);
Var frobenius(Tape& t, Var a);            // ||a||_2 over all entries
Var max_floor(Tape& t, Var a, double eps);  // elementwise max(a, eps), gradient 0 on ties
Var relu(Tape& t, Var a);
Var leaky_relu(Tape& t, Var a, double slope);
Var sigmoid(Tape& t, Var a);
Var tanh(Tape& t, Var a);
Var exp(Tape& t, Var a);
Var clamp(Tape& t, Var a, double lo, double hi);
Var cols(Tape& t, Var a, int first, int count);
Var concat_cols(Tape& t, std::span<const Var> parts);
Var row(Tape& t, Var a, int r);
Var gather_rows(Tape& t, Var a, std::span<const int> rows);
/// Rows of part k land at positions rows[k] of an n-row result.
Var scatter_rows(Tape& t, std::span<const Var> parts, std::span<const std::vector<int>> rows, int n);
Var normalize_rows(Tape& t, Var a);
Var mul_mask(Tape& t, Var a, const MatX& mask);  // elementwise product with a constant

// Image operations. Images are (H*W) x C matrices in planar layout.
Var conv3x3(Tape& t, Var x, Var w, Var b, int height, int width);  // w: (9*Cin) x Cout, b: 1 x Cout, zero padding
Var avg_pool2(Tape& t, Var x, int height, int width);              // floor(H/2) x floor(W/2)

MatX image_to_mat(const Image& img);
Image mat_to_image(const MatX& m, int height, int width);

}  // namespace gavatar::diff
