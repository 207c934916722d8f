#pragma once

#include <cstdint>
#include <functional>
#include <memory>
#include <string>
#include <vector>

#include "ddep/param_set.hpp"
#include "ddep/tensor.hpp"

namespace ddep::ad {

class Tape;

/// Handle to a value recorded on a Tape.
struct Var {
  Tape* tape = nullptr;
  int id = -1;

  const Tensor& value() const;
  const Shape& shape() const { return value().shape(); }
};

/// Linear record of a forward computation. `backward` walks it in reverse
/// and accumulates gradients into every node that requires them. Nodes whose
/// inputs need no gradient store no closure, so inference through a Tape
/// costs only the forward pass.
class Tape {
 public:
  using BackwardFn = std::function<void(Tape&, int self)>;

  /// With gradients disabled no node requires grad and no closures are kept.
  explicit Tape(bool grad_enabled = true) : grad_enabled_(grad_enabled) {}
  bool grad_enabled() const { return grad_enabled_; }

  Var constant(Tensor value);
  Var leaf(Tensor value, bool requires_grad);
  /// Binds a ParamSet entry; requires grad iff the entry is trainable.
  Var parameter(const ParamSet& params, const std::string& name);

  Var record(Tensor value, std::vector<int> inputs, BackwardFn fn);

  bool requires_grad(int id) const { return nodes_[static_cast<std::size_t>(id)].requires_grad; }
  bool requires_grad(Var v) const { return requires_grad(v.id); }
  const Tensor& value(int id) const { return nodes_[static_cast<std::size_t>(id)].value; }
  /// Gradient of the node; empty tensor if nothing flowed into it.
  const Tensor& grad(int id) const { return nodes_[static_cast<std::size_t>(id)].grad; }
  const Tensor& grad(Var v) const { return grad(v.id); }
  /// Gradient buffer of an input, allocated (zeroed) on first use.
  Tensor& grad_buffer(int id);

  /// Seeds d(scalar)/d(scalar) = 1 and runs all closures in reverse order.
  void backward(Var scalar);
  /// Adds gradients of bound parameter leaves into the ParamSet.
  void accumulate_into(ParamSet& params) const;

  std::size_t size() const { return nodes_.size(); }

 private:
  struct Node {
    Tensor value;
    Tensor grad;
    bool requires_grad = false;
    std::vector<int> inputs;
    BackwardFn backward;
    std::string param_name;
  };
  std::vector<Node> nodes_;
  bool grad_enabled_ = true;
};

// Op vocabulary. Shapes are NCHW unless noted. Every op raises ShapeMismatch
// naming both shapes on incompatible inputs.

/// weight [Cout, Cin, k, k]; bias [Cout] or an invalid Var for none.
Var conv2d(Var x, Var weight, Var bias, int stride, int padding);
Var upsample_nearest2x(Var x);
Var relu(Var x);
/// scale/shift [C]; C must be divisible by groups.
Var group_norm(Var x, Var scale, Var shift, int groups, float eps = 1e-5f);
/// [N, C, H, W] -> [N, C]
Var global_avg_pool(Var x);
/// x [N, F], weight [O, F], bias [O] -> [N, O]
Var dense(Var x, Var weight, Var bias);
Var add(Var a, Var b);
/// Concatenates along the channel axis.
Var concat_channels(Var a, Var b);
/// Scaled dot-product self-attention over spatial positions. q, k, v are
/// [N, C, H, W]; every position attends to every position.
Var spatial_attention(Var q, Var k, Var v);

/// Mean softmax cross-entropy. logits [N, C] with labels [N], or
/// [N, C, H, W] with labels [N*H*W] in NHW order. Labels equal to
/// `ignore_index` contribute neither loss nor gradient.
Var softmax_cross_entropy(Var logits, std::vector<int> labels, int ignore_index = 255);
/// Mean of squared differences; target receives no gradient.
Var mean_squared_error(Var prediction, const Tensor& target);
/// Sum of x * weights; handy as a generic scalar probe in gradient checks.
Var weighted_sum(Var x, const Tensor& weights);

}  // namespace ddep::ad
