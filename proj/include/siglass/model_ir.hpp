#pragma once

// JSON computation-graph IR: parsing, validation, topological ordering,
// shape inference and folding of weight-only subgraphs.

#include <algorithm>
#include <map>
#include <queue>
#include <set>
#include <string>
#include <unordered_map>
#include <vector>

#include "json.hpp"
#include "siglass/error.hpp"
#include "siglass/kernels.hpp"
#include "siglass/ops.hpp"
#include "siglass/tensor.hpp"
#include "siglass/tensor_io.hpp"

namespace siglass {

inline constexpr int kIrVersion = 1;

struct ValueInfo {
  std::string name;
  Shape shape;  // empty for outputs declared without a shape
};

/// Immutable after `finalize_graph`; safe to share across threads.
struct ModelGraph {
  std::vector<ValueInfo> inputs;
  std::vector<ValueInfo> outputs;
  std::vector<NodeSpec> nodes;  // topological order once finalized
  std::map<std::string, Tensor> initializers;

  // Derived by finalize_graph.
  std::unordered_map<std::string, Shape> shapes;      // every edge
  std::unordered_map<std::string, Tensor> constants;  // initializers plus folded node outputs
  std::vector<bool> node_is_static;
  std::unordered_map<std::string, int> producer;      // edge -> node index; absent for inputs/initializers

  bool is_static(const std::string& edge) const { return constants.count(edge) != 0; }

  const Tensor& constant(const std::string& edge) const {
    auto it = constants.find(edge);
    if (it == constants.end()) throw Error(ErrorKind::InternalInconsistency, "no constant " + edge, {edge});
    return it->second;
  }

  const Shape& shape_of(const std::string& edge) const { return shapes.at(edge); }

  /// Index of the Sigmoid node producing output `k`, or -1.
  int terminal_sigmoid(std::size_t k) const {
    auto it = producer.find(outputs.at(k).name);
    if (it == producer.end()) return -1;
    return nodes[it->second].op == OpType::Sigmoid ? it->second : -1;
  }

  std::size_t input_index(const std::string& name) const {
    for (std::size_t i = 0; i < inputs.size(); ++i)
      if (inputs[i].name == name) return i;
    return inputs.size();
  }
};

namespace detail {

/// Env for concrete evaluation while folding; every operand is a constant.
struct FoldEnv {
  const ModelGraph& g;
  const NodeSpec& n;
  std::vector<Shape> out_shapes;

  bool is_static(std::size_t) const { return true; }
  const Tensor& constant(std::size_t i) const { return g.constant(n.inputs.at(i)); }
  const Tensor& value(std::size_t i) const { return constant(i); }
  const Shape& output_shape(std::size_t k) const { return out_shapes.at(k); }
  StaticLookup statics() const {
    return [this](std::size_t i) -> const Tensor* { return n.has_input(i) ? &constant(i) : nullptr; };
  }
};

inline void check_linear_usage(const ModelGraph& g, const NodeSpec& n, std::vector<std::string>& offending) {
  auto st = [&](std::size_t i) { return !n.has_input(i) || g.is_static(n.inputs[i]); };
  bool ok = true;
  switch (n.op) {
    case OpType::Conv:
    case OpType::ConvTranspose:
      ok = st(1) && st(2);
      break;
    case OpType::Gemm:
      ok = (st(0) || st(1)) && st(2);
      break;
    case OpType::MatMul:
      ok = st(0) || st(1);
      break;
    case OpType::BatchNormalization:
      ok = st(1) && st(2) && st(3) && st(4);
      break;
    case OpType::Reshape:
      ok = st(1);
      break;
    case OpType::Slice:
      ok = st(1) && st(2) && st(3) && st(4);
      break;
    default:
      break;
  }
  if (!ok) offending.push_back(n.name);
}

}  // namespace detail

/// Validates and completes a graph: orders nodes topologically, infers every
/// edge shape, folds nodes whose inputs are all constant, and enforces the
/// operator rules (linear use of weights, terminal-only Sigmoid).
inline ModelGraph finalize_graph(ModelGraph g) {
  // Names and producers.
  std::set<std::string> defined;
  for (const auto& in : g.inputs) {
    if (in.shape.empty()) throw Error(ErrorKind::MalformedDocument, "input " + in.name + " needs a shape");
    if (!defined.insert(in.name).second)
      throw Error(ErrorKind::MalformedDocument, "duplicate tensor name " + in.name, {in.name});
  }
  for (const auto& [name, t] : g.initializers) {
    if (!defined.insert(name).second)
      throw Error(ErrorKind::MalformedDocument, "duplicate tensor name " + name, {name});
  }
  std::set<std::string> node_names;
  std::unordered_map<std::string, std::size_t> produced_by;
  for (std::size_t i = 0; i < g.nodes.size(); ++i) {
    auto& n = g.nodes[i];
    if (n.name.empty()) n.name = std::string(op_name(n.op)) + "_" + std::to_string(i);
    if (!node_names.insert(n.name).second)
      throw Error(ErrorKind::MalformedDocument, "duplicate node name " + n.name, {n.name});
    if (n.outputs.size() != 1)
      throw Error(ErrorKind::MalformedDocument, n.name + ": every node must have exactly one output", {n.name});
    for (const auto& o : n.outputs) {
      if (defined.count(o) || produced_by.count(o))
        throw Error(ErrorKind::MalformedDocument, "tensor " + o + " is defined twice", {o});
      produced_by[o] = i;
    }
  }
  for (const auto& n : g.nodes)
    for (const auto& in : n.inputs)
      if (!in.empty() && !defined.count(in) && !produced_by.count(in))
        throw Error(ErrorKind::MalformedDocument, n.name + ": undefined input " + in, {in});
  for (const auto& out : g.outputs)
    if (!defined.count(out.name) && !produced_by.count(out.name))
      throw Error(ErrorKind::MalformedDocument, "graph output " + out.name + " is never produced", {out.name});

  // Kahn's algorithm; among ready nodes the earliest declared goes first.
  std::vector<int> pending(g.nodes.size(), 0);
  std::vector<std::vector<std::size_t>> consumers(g.nodes.size());
  for (std::size_t i = 0; i < g.nodes.size(); ++i) {
    for (const auto& in : g.nodes[i].inputs) {
      auto it = produced_by.find(in);
      if (it == produced_by.end()) continue;
      ++pending[i];
      consumers[it->second].push_back(i);
    }
  }
  std::priority_queue<std::size_t, std::vector<std::size_t>, std::greater<>> ready;
  for (std::size_t i = 0; i < g.nodes.size(); ++i)
    if (pending[i] == 0) ready.push(i);
  std::vector<std::size_t> order;
  while (!ready.empty()) {
    const auto i = ready.top();
    ready.pop();
    order.push_back(i);
    for (auto c : consumers[i])
      if (--pending[c] == 0) ready.push(c);
  }
  if (order.size() != g.nodes.size()) {
    std::vector<std::string> stuck;
    for (std::size_t i = 0; i < g.nodes.size(); ++i)
      if (pending[i] > 0) stuck.push_back(g.nodes[i].name);
    throw Error(ErrorKind::CyclicGraph, "graph contains a cycle", stuck);
  }
  std::vector<NodeSpec> sorted;
  sorted.reserve(order.size());
  for (auto i : order) sorted.push_back(std::move(g.nodes[i]));
  g.nodes = std::move(sorted);

  // Sigmoid may only feed a graph output directly.
  std::set<std::string> graph_outputs;
  for (const auto& o : g.outputs) graph_outputs.insert(o.name);
  std::set<std::string> consumed;
  for (const auto& n : g.nodes)
    for (const auto& in : n.inputs) consumed.insert(in);
  std::vector<std::string> offending;
  for (const auto& n : g.nodes)
    if (n.op == OpType::Sigmoid && (!graph_outputs.count(n.outputs[0]) || consumed.count(n.outputs[0])))
      offending.push_back(n.name);
  if (!offending.empty())
    throw Error(ErrorKind::UnsupportedOperator, "Sigmoid is only supported as a terminal activation", offending);

  // Shapes, static analysis and folding in topological order.
  g.shapes.clear();
  g.constants.clear();
  g.producer.clear();
  for (const auto& in : g.inputs) g.shapes[in.name] = in.shape;
  for (const auto& [name, t] : g.initializers) {
    g.shapes[name] = t.shape;
    g.constants[name] = t;
  }
  g.node_is_static.assign(g.nodes.size(), false);
  for (std::size_t i = 0; i < g.nodes.size(); ++i) {
    const auto& n = g.nodes[i];
    g.producer[n.outputs[0]] = static_cast<int>(i);
    std::vector<Shape> in_shapes;
    bool all_static = true;
    for (const auto& in : n.inputs) {
      in_shapes.push_back(in.empty() ? Shape{} : g.shapes.at(in));
      if (!in.empty() && !g.is_static(in)) all_static = false;
    }
    StaticLookup statics = [&](std::size_t k) -> const Tensor* {
      return n.has_input(k) && g.is_static(n.inputs[k]) ? &g.constants.at(n.inputs[k]) : nullptr;
    };
    auto out_shapes = infer_output_shapes(n, in_shapes, statics);
    g.shapes[n.outputs[0]] = out_shapes[0];
    if (all_static) {
      g.node_is_static[i] = true;
      detail::FoldEnv env{g, n, out_shapes};
      g.constants[n.outputs[0]] = kernels::eval_concrete(n, env)[0];
    } else {
      detail::check_linear_usage(g, n, offending);
    }
  }
  if (!offending.empty())
    throw Error(ErrorKind::UnsupportedOperator, "operator used non-linearly in its data operands", offending);

  for (auto& out : g.outputs) {
    const auto& inferred = g.shapes.at(out.name);
    if (out.shape.empty())
      out.shape = inferred;
    else if (out.shape != inferred)
      throw Error(ErrorKind::ShapeMismatch,
                  "output " + out.name + " declared " + shape_string(out.shape) + " but inferred " +
                      shape_string(inferred),
                  {out.name});
  }
  return g;
}

/// Parses and validates a JSON IR document.
inline ModelGraph parse_model(const Json& doc) {
  if (!doc.is_object()) throw Error(ErrorKind::MalformedDocument, "model document must be an object");
  if (!doc.contains("ir_version") || !doc.at("ir_version").is_number_integer() ||
      doc.at("ir_version").get<int>() != kIrVersion)
    throw Error(ErrorKind::MalformedDocument, "ir_version must be " + std::to_string(kIrVersion));
  for (const char* key : {"inputs", "outputs", "nodes"})
    if (!doc.contains(key) || !doc.at(key).is_array())
      throw Error(ErrorKind::MalformedDocument, std::string("missing array ") + key);

  ModelGraph g;
  auto value_info = [](const Json& j, bool need_shape) {
    if (!j.is_object() || !j.contains("name") || !j.at("name").is_string())
      throw Error(ErrorKind::MalformedDocument, "value info needs a name");
    ValueInfo v{j.at("name").get<std::string>(), {}};
    if (j.contains("shape"))
      v.shape = parse_shape(j.at("shape"));
    else if (need_shape)
      throw Error(ErrorKind::MalformedDocument, "input " + v.name + " needs a shape");
    return v;
  };
  for (const auto& j : doc.at("inputs")) g.inputs.push_back(value_info(j, true));
  for (const auto& j : doc.at("outputs")) g.outputs.push_back(value_info(j, false));
  if (doc.contains("initializers")) {
    for (const auto& j : doc.at("initializers")) {
      if (!j.contains("name")) throw Error(ErrorKind::MalformedDocument, "initializer needs a name");
      const auto name = j.at("name").get<std::string>();
      if (g.initializers.count(name))
        throw Error(ErrorKind::MalformedDocument, "duplicate initializer " + name, {name});
      g.initializers.emplace(name, tensor_from_json(j));
    }
  }
  std::vector<std::string> unsupported;
  const auto& node_docs = doc.at("nodes");
  for (std::size_t idx = 0; idx < node_docs.size(); ++idx) {
    const auto& j = node_docs[idx];
    if (!j.is_object() || !j.contains("op_type") || !j.contains("inputs") || !j.contains("outputs"))
      throw Error(ErrorKind::MalformedDocument, "node needs op_type, inputs and outputs");
    NodeSpec n;
    n.name = j.value("name", std::string{});
    const auto op = j.at("op_type").get<std::string>();
    auto parsed = op_from_string(op);
    if (!parsed) {
      unsupported.push_back(n.name.empty() ? op + "_" + std::to_string(idx) : n.name);
      continue;
    }
    n.op = *parsed;
    n.inputs = j.at("inputs").get<std::vector<std::string>>();
    n.outputs = j.at("outputs").get<std::vector<std::string>>();
    if (j.contains("attrs")) {
      if (!j.at("attrs").is_object()) throw Error(ErrorKind::MalformedDocument, "attrs must be an object");
      n.attrs = j.at("attrs");
    }
    g.nodes.push_back(std::move(n));
  }
  if (!unsupported.empty()) {
    std::string names;
    for (const auto& u : unsupported) names += (names.empty() ? "" : ", ") + u;
    throw Error(ErrorKind::UnsupportedOperator, "unsupported operator in node(s): " + names, unsupported);
  }
  return finalize_graph(std::move(g));
}

inline ModelGraph parse_model(const std::string& text) { return parse_model(parse_json_text(text, "model")); }

inline ModelGraph load_model_file(const std::string& path) {
  return parse_model(parse_json_text(read_text_file(path), path));
}

inline Json serialize_model(const ModelGraph& g, bool base64 = true) {
  Json doc;
  doc["ir_version"] = kIrVersion;
  auto infos = [](const std::vector<ValueInfo>& v) {
    Json a = Json::array();
    for (const auto& i : v) a.push_back({{"name", i.name}, {"shape", i.shape}});
    return a;
  };
  doc["inputs"] = infos(g.inputs);
  doc["outputs"] = infos(g.outputs);
  doc["initializers"] = Json::array();
  for (const auto& [name, t] : g.initializers) {
    Json j = tensor_to_json(t, base64);
    j["name"] = name;
    doc["initializers"].push_back(j);
  }
  doc["nodes"] = Json::array();
  for (const auto& n : g.nodes)
    doc["nodes"].push_back({{"name", n.name},
                            {"op_type", std::string(op_name(n.op))},
                            {"inputs", n.inputs},
                            {"outputs", n.outputs},
                            {"attrs", n.attrs}});
  return doc;
}

}  // namespace siglass
