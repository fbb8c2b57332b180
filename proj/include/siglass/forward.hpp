#pragma once

#include <string>
#include <unordered_map>
#include <vector>

#include "siglass/kernels.hpp"
#include "siglass/model_ir.hpp"

namespace siglass {

struct ForwardOptions {
  /// Report terminal Sigmoid outputs as their pre-activation scores.
  bool strip_terminal_sigmoid = false;
  /// When set, receives the piece signature of the pass (branch choices of
  /// every ReLU/LeakyReLU/Abs element and every MaxPool window argmax).
  std::vector<int>* signature = nullptr;
};

namespace detail {

inline void check_inputs(const ModelGraph& g, const std::vector<Shape>& shapes) {
  if (shapes.size() != g.inputs.size())
    throw Error(ErrorKind::ShapeMismatch, "expected " + std::to_string(g.inputs.size()) + " inputs, got " +
                                              std::to_string(shapes.size()));
  for (std::size_t i = 0; i < shapes.size(); ++i)
    if (shapes[i] != g.inputs[i].shape)
      throw Error(ErrorKind::ShapeMismatch,
                  "input " + g.inputs[i].name + " expects " + shape_string(g.inputs[i].shape) + ", got " +
                      shape_string(shapes[i]),
                  {g.inputs[i].name});
}

struct ConcreteEnv {
  const ModelGraph& g;
  const NodeSpec& n;
  const std::unordered_map<std::string, Tensor>& values;
  std::vector<Shape> out_shapes;

  bool is_static(std::size_t i) const { return g.is_static(n.inputs.at(i)); }
  const Tensor& constant(std::size_t i) const { return g.constant(n.inputs.at(i)); }
  const Tensor& value(std::size_t i) const {
    const auto& name = n.inputs.at(i);
    if (g.is_static(name)) return g.constant(name);
    return values.at(name);
  }
  const Shape& output_shape(std::size_t k) const { return out_shapes.at(k); }
  StaticLookup statics() const {
    return [this](std::size_t i) -> const Tensor* {
      return n.has_input(i) && is_static(i) ? &constant(i) : nullptr;
    };
  }
};

}  // namespace detail

/// Plain evaluation of the graph on concrete inputs.
inline std::vector<Tensor> forward(const ModelGraph& g, const std::vector<Tensor>& inputs,
                                   const ForwardOptions& options = {}) {
  std::vector<Shape> shapes;
  for (const auto& t : inputs) shapes.push_back(t.shape);
  detail::check_inputs(g, shapes);

  std::unordered_map<std::string, Tensor> values;
  for (std::size_t i = 0; i < inputs.size(); ++i) values[g.inputs[i].name] = inputs[i];
  for (std::size_t i = 0; i < g.nodes.size(); ++i) {
    if (g.node_is_static[i]) continue;
    const auto& n = g.nodes[i];
    if (n.op == OpType::Sigmoid && options.strip_terminal_sigmoid) {
      values[n.outputs[0]] = values.at(n.inputs[0]);
      continue;
    }
    detail::ConcreteEnv env{g, n, values, {g.shape_of(n.outputs[0])}};
    values[n.outputs[0]] = std::move(kernels::eval_concrete(n, env, options.signature)[0]);
  }
  std::vector<Tensor> outs;
  for (const auto& o : g.outputs) outs.push_back(g.is_static(o.name) ? g.constant(o.name) : values.at(o.name));
  return outs;
}

inline double sigmoid(double v) { return 1.0 / (1.0 + std::exp(-v)); }

/// Applies terminal Sigmoids to outputs produced with strip_terminal_sigmoid.
inline std::vector<Tensor> restore_terminal_sigmoid(const ModelGraph& g, std::vector<Tensor> outs) {
  for (std::size_t k = 0; k < outs.size(); ++k)
    if (g.terminal_sigmoid(k) >= 0)
      for (auto& v : outs[k].data) v = sigmoid(v);
  return outs;
}

}  // namespace siglass
