#pragma once

// Supported operator registry, attribute decoding and shape inference.
// Every operator here is linear or piecewise-linear in its dynamic operand,
// except Sigmoid, which is only admitted as a terminal activation.

#include <algorithm>
#include <cstdint>
#include <functional>
#include <optional>
#include <string>
#include <string_view>
#include <vector>

#include "json.hpp"
#include "siglass/error.hpp"
#include "siglass/tensor.hpp"

namespace siglass {

enum class OpType {
  Conv,
  ConvTranspose,
  Gemm,
  MatMul,
  Add,
  Sub,
  Neg,
  MulScalar,
  Relu,
  LeakyRelu,
  MaxPool,
  AveragePool,
  GlobalAveragePool,
  BatchNormalization,
  Flatten,
  Reshape,
  Transpose,
  Concat,
  Slice,
  UpsampleNearest,
  Abs,
  Sigmoid,
};

inline constexpr std::pair<OpType, std::string_view> kOpNames[] = {
    {OpType::Conv, "Conv"},
    {OpType::ConvTranspose, "ConvTranspose"},
    {OpType::Gemm, "Gemm"},
    {OpType::MatMul, "MatMul"},
    {OpType::Add, "Add"},
    {OpType::Sub, "Sub"},
    {OpType::Neg, "Neg"},
    {OpType::MulScalar, "MulScalar"},
    {OpType::Relu, "Relu"},
    {OpType::LeakyRelu, "LeakyRelu"},
    {OpType::MaxPool, "MaxPool"},
    {OpType::AveragePool, "AveragePool"},
    {OpType::GlobalAveragePool, "GlobalAveragePool"},
    {OpType::BatchNormalization, "BatchNormalization"},
    {OpType::Flatten, "Flatten"},
    {OpType::Reshape, "Reshape"},
    {OpType::Transpose, "Transpose"},
    {OpType::Concat, "Concat"},
    {OpType::Slice, "Slice"},
    {OpType::UpsampleNearest, "UpsampleNearest"},
    {OpType::Abs, "Abs"},
    {OpType::Sigmoid, "Sigmoid"},
};

inline std::optional<OpType> op_from_string(std::string_view name) {
  for (const auto& [op, n] : kOpNames)
    if (n == name) return op;
  return std::nullopt;
}

inline std::string_view op_name(OpType op) {
  for (const auto& [o, n] : kOpNames)
    if (o == op) return n;
  return "?";
}

/// Ops whose output is a piecewise selection among affine pieces.
inline bool is_piecewise(OpType op) {
  return op == OpType::Relu || op == OpType::LeakyRelu || op == OpType::Abs ||
         op == OpType::MaxPool;
}

struct NodeSpec {
  std::string name;
  OpType op = OpType::Relu;
  std::vector<std::string> inputs;  // "" marks an omitted optional input
  std::vector<std::string> outputs;
  nlohmann::json attrs = nlohmann::json::object();

  bool has_input(std::size_t i) const { return i < inputs.size() && !inputs[i].empty(); }
};

namespace attr {

inline std::int64_t get_int(const NodeSpec& n, const char* key, std::int64_t fallback) {
  if (!n.attrs.contains(key)) return fallback;
  const auto& v = n.attrs.at(key);
  if (!v.is_number_integer())
    throw Error(ErrorKind::MalformedDocument, n.name + ": attribute " + key + " must be an integer");
  return v.get<std::int64_t>();
}

inline double get_float(const NodeSpec& n, const char* key, double fallback) {
  if (!n.attrs.contains(key)) return fallback;
  const auto& v = n.attrs.at(key);
  if (!v.is_number())
    throw Error(ErrorKind::MalformedDocument, n.name + ": attribute " + key + " must be a number");
  return v.get<double>();
}

inline std::optional<std::vector<std::int64_t>> get_ints(const NodeSpec& n, const char* key) {
  if (!n.attrs.contains(key)) return std::nullopt;
  const auto& v = n.attrs.at(key);
  if (!v.is_array())
    throw Error(ErrorKind::MalformedDocument, n.name + ": attribute " + key + " must be an array");
  std::vector<std::int64_t> out;
  for (const auto& e : v) {
    if (!e.is_number_integer())
      throw Error(ErrorKind::MalformedDocument,
                  n.name + ": attribute " + key + " must contain integers");
    out.push_back(e.get<std::int64_t>());
  }
  return out;
}

inline std::vector<std::int64_t> get_ints(const NodeSpec& n, const char* key,
                                          std::vector<std::int64_t> fallback) {
  auto v = get_ints(n, key);
  return v ? *v : fallback;
}

}  // namespace attr

/// 2-D sliding-window geometry shared by Conv, ConvTranspose and pooling.
struct WindowParams {
  std::int64_t kh = 1, kw = 1;
  std::int64_t sh = 1, sw = 1;
  std::int64_t dh = 1, dw = 1;
  std::int64_t pt = 0, pl = 0, pb = 0, pr = 0;
  std::int64_t group = 1;
  std::int64_t oph = 0, opw = 0;  // ConvTranspose output_padding
  bool count_include_pad = false;
};

inline void require_rank(const NodeSpec& n, const Shape& s, std::size_t rank, const std::string& edge) {
  if (s.size() != rank)
    throw Error(ErrorKind::ShapeMismatch,
                n.name + ": expected rank " + std::to_string(rank) + " for " + edge + ", got " +
                    shape_string(s),
                {edge});
}

inline WindowParams window_params(const NodeSpec& n, std::optional<std::pair<std::int64_t, std::int64_t>> kernel) {
  WindowParams p;
  if (n.attrs.contains("auto_pad")) {
    const auto mode = n.attrs.at("auto_pad").get<std::string>();
    if (mode != "NOTSET")
      throw Error(ErrorKind::MalformedDocument, n.name + ": auto_pad must be NOTSET; pads must be explicit");
  }
  if (attr::get_int(n, "ceil_mode", 0) != 0)
    throw Error(ErrorKind::MalformedDocument, n.name + ": ceil_mode is not supported");
  auto ks = attr::get_ints(n, "kernel_shape");
  if (ks) {
    if (ks->size() != 2) throw Error(ErrorKind::MalformedDocument, n.name + ": kernel_shape must have 2 entries");
    if (kernel && (kernel->first != (*ks)[0] || kernel->second != (*ks)[1]))
      throw Error(ErrorKind::ShapeMismatch, n.name + ": kernel_shape disagrees with weight shape", {n.inputs.at(1)});
    p.kh = (*ks)[0];
    p.kw = (*ks)[1];
  } else if (kernel) {
    p.kh = kernel->first;
    p.kw = kernel->second;
  } else {
    throw Error(ErrorKind::MalformedDocument, n.name + ": kernel_shape is required");
  }
  const auto strides = attr::get_ints(n, "strides", {1, 1});
  const auto dil = attr::get_ints(n, "dilations", {1, 1});
  const auto pads = attr::get_ints(n, "pads", {0, 0, 0, 0});
  if (strides.size() != 2 || dil.size() != 2 || pads.size() != 4)
    throw Error(ErrorKind::MalformedDocument, n.name + ": strides/dilations need 2 entries, pads 4");
  p.sh = strides[0];
  p.sw = strides[1];
  p.dh = dil[0];
  p.dw = dil[1];
  p.pt = pads[0];
  p.pl = pads[1];
  p.pb = pads[2];
  p.pr = pads[3];
  p.group = attr::get_int(n, "group", 1);
  const auto op = attr::get_ints(n, "output_padding", {0, 0});
  if (op.size() != 2) throw Error(ErrorKind::MalformedDocument, n.name + ": output_padding needs 2 entries");
  p.oph = op[0];
  p.opw = op[1];
  p.count_include_pad = attr::get_int(n, "count_include_pad", 0) != 0;
  if (p.kh <= 0 || p.kw <= 0 || p.sh <= 0 || p.sw <= 0 || p.dh <= 0 || p.dw <= 0 || p.group <= 0)
    throw Error(ErrorKind::MalformedDocument, n.name + ": kernel, stride, dilation and group must be positive");
  if (p.pt < 0 || p.pl < 0 || p.pb < 0 || p.pr < 0 || p.oph < 0 || p.opw < 0)
    throw Error(ErrorKind::MalformedDocument, n.name + ": pads must be non-negative");
  return p;
}

inline std::int64_t window_out_dim(std::int64_t in, std::int64_t k, std::int64_t s, std::int64_t d,
                                   std::int64_t pad_begin, std::int64_t pad_end) {
  return (in + pad_begin + pad_end - d * (k - 1) - 1) / s + 1;
}

inline std::int64_t normalize_axis(const NodeSpec& n, std::int64_t axis, std::size_t rank, bool inclusive = false) {
  const auto r = static_cast<std::int64_t>(rank);
  if (axis < 0) axis += r;
  if (axis < 0 || axis > r || (!inclusive && axis == r))
    throw Error(ErrorKind::MalformedDocument, n.name + ": axis out of range");
  return axis;
}

/// Numpy-style broadcast of two shapes.
inline Shape broadcast_shapes(const NodeSpec& n, const Shape& a, const Shape& b) {
  const std::size_t r = std::max(a.size(), b.size());
  Shape out(r);
  for (std::size_t i = 0; i < r; ++i) {
    const std::int64_t da = i < r - a.size() ? 1 : a[i - (r - a.size())];
    const std::int64_t db = i < r - b.size() ? 1 : b[i - (r - b.size())];
    if (da != db && da != 1 && db != 1)
      throw Error(ErrorKind::ShapeMismatch,
                  n.name + ": cannot broadcast " + shape_string(a) + " with " + shape_string(b),
                  {n.inputs.at(0), n.inputs.at(1)});
    out[i] = std::max(da, db);
  }
  return out;
}

inline std::vector<std::int64_t> to_ints(const Tensor& t) {
  std::vector<std::int64_t> out;
  out.reserve(t.size());
  for (double v : t.data) out.push_back(static_cast<std::int64_t>(v));
  return out;
}

inline Shape reshape_target(const NodeSpec& n, const Shape& in, const std::vector<std::int64_t>& spec) {
  Shape out(spec.size());
  std::int64_t known = 1;
  int infer_at = -1;
  const bool allowzero = attr::get_int(n, "allowzero", 0) != 0;
  for (std::size_t i = 0; i < spec.size(); ++i) {
    std::int64_t d = spec[i];
    if (d == 0 && !allowzero) {
      if (i >= in.size()) throw Error(ErrorKind::ShapeMismatch, n.name + ": reshape 0 beyond input rank", {n.outputs.at(0)});
      d = in[i];
    }
    if (d == -1) {
      if (infer_at >= 0) throw Error(ErrorKind::MalformedDocument, n.name + ": more than one -1 in reshape");
      infer_at = static_cast<int>(i);
      continue;
    }
    if (d <= 0) throw Error(ErrorKind::MalformedDocument, n.name + ": invalid reshape dim");
    out[i] = d;
    known *= d;
  }
  const auto total = numel(in);
  if (infer_at >= 0) {
    if (known == 0 || total % known != 0)
      throw Error(ErrorKind::ShapeMismatch, n.name + ": cannot infer reshape dim", {n.outputs.at(0)});
    out[infer_at] = total / known;
  }
  if (numel(out) != total)
    throw Error(ErrorKind::ShapeMismatch,
                n.name + ": reshape " + shape_string(in) + " to " + shape_string(out) + " changes size",
                {n.outputs.at(0)});
  return out;
}

/// Resolved Slice arguments: per-axis start, step and output length.
struct SliceSpec {
  std::vector<std::int64_t> start, step, count;
};

using StaticLookup = std::function<const Tensor*(std::size_t input_index)>;

inline SliceSpec slice_spec(const NodeSpec& n, const Shape& in, const StaticLookup& statics) {
  auto fetch = [&](std::size_t idx, const char* key) -> std::optional<std::vector<std::int64_t>> {
    if (n.has_input(idx)) {
      const Tensor* t = statics(idx);
      if (!t) throw Error(ErrorKind::UnsupportedOperator, n.name + ": Slice parameters must be constant", {n.name});
      return to_ints(*t);
    }
    return attr::get_ints(n, key);
  };
  auto starts = fetch(1, "starts");
  auto ends = fetch(2, "ends");
  if (!starts || !ends || starts->size() != ends->size())
    throw Error(ErrorKind::MalformedDocument, n.name + ": Slice needs matching starts and ends");
  auto axes = fetch(3, "axes");
  auto steps = fetch(4, "steps");
  const std::size_t r = in.size();
  SliceSpec s;
  s.start.assign(r, 0);
  s.step.assign(r, 1);
  s.count.assign(in.begin(), in.end());
  for (std::size_t k = 0; k < starts->size(); ++k) {
    const std::int64_t axis = normalize_axis(n, axes ? axes->at(k) : static_cast<std::int64_t>(k), r);
    const std::int64_t dim = in[axis];
    const std::int64_t step = steps ? steps->at(k) : 1;
    if (step == 0) throw Error(ErrorKind::MalformedDocument, n.name + ": Slice step 0");
    std::int64_t b = (*starts)[k], e = (*ends)[k];
    if (b < 0) b += dim;
    if (e < 0) e += dim;
    if (step > 0) {
      b = std::clamp<std::int64_t>(b, 0, dim);
      e = std::clamp<std::int64_t>(e, 0, dim);
      s.count[axis] = e > b ? (e - b + step - 1) / step : 0;
    } else {
      b = std::clamp<std::int64_t>(b, 0, dim - 1);
      e = std::clamp<std::int64_t>(e, -1, dim - 1);
      s.count[axis] = b > e ? (b - e + (-step) - 1) / (-step) : 0;
    }
    s.start[axis] = b;
    s.step[axis] = step;
  }
  for (auto c : s.count)
    if (c <= 0) throw Error(ErrorKind::ShapeMismatch, n.name + ": Slice produces an empty tensor", {n.outputs.at(0)});
  return s;
}

struct GemmParams {
  bool trans_a = false, trans_b = false;
  double alpha = 1.0, beta = 1.0;
};

inline GemmParams gemm_params(const NodeSpec& n) {
  return {attr::get_int(n, "transA", 0) != 0, attr::get_int(n, "transB", 0) != 0,
          attr::get_float(n, "alpha", 1.0), attr::get_float(n, "beta", 1.0)};
}

inline std::vector<std::int64_t> transpose_perm(const NodeSpec& n, std::size_t rank) {
  std::vector<std::int64_t> perm(rank);
  for (std::size_t i = 0; i < rank; ++i) perm[i] = static_cast<std::int64_t>(rank - 1 - i);
  perm = attr::get_ints(n, "perm", perm);
  if (perm.size() != rank) throw Error(ErrorKind::ShapeMismatch, n.name + ": perm rank mismatch", {n.inputs.at(0)});
  std::vector<bool> seen(rank, false);
  for (auto p : perm) {
    if (p < 0 || p >= static_cast<std::int64_t>(rank) || seen[p])
      throw Error(ErrorKind::MalformedDocument, n.name + ": perm is not a permutation");
    seen[p] = true;
  }
  return perm;
}

inline std::vector<std::int64_t> upsample_scales(const NodeSpec& n, std::size_t rank) {
  auto scales = attr::get_ints(n, "scales");
  if (!scales || scales->size() != rank)
    throw Error(ErrorKind::MalformedDocument, n.name + ": scales must have one positive integer per dim");
  for (auto s : *scales)
    if (s <= 0) throw Error(ErrorKind::MalformedDocument, n.name + ": scales must be positive");
  return *scales;
}

/// Output shapes of `n` given its input shapes. `statics` returns constant
/// operand values where the op needs them (Reshape, Slice), or nullptr.
inline std::vector<Shape> infer_output_shapes(const NodeSpec& n, const std::vector<Shape>& in,
                                              const StaticLookup& statics) {
  auto need_inputs = [&](std::size_t k) {
    for (std::size_t i = 0; i < k; ++i)
      if (!n.has_input(i))
        throw Error(ErrorKind::MalformedDocument, n.name + ": missing required input " + std::to_string(i));
  };
  switch (n.op) {
    case OpType::Conv: {
      need_inputs(2);
      require_rank(n, in[0], 4, n.inputs[0]);
      require_rank(n, in[1], 4, n.inputs[1]);
      const auto p = window_params(n, std::make_pair(in[1][2], in[1][3]));
      if (in[0][1] % p.group != 0 || in[1][0] % p.group != 0 || in[1][1] * p.group != in[0][1])
        throw Error(ErrorKind::ShapeMismatch, n.name + ": channel/group mismatch", {n.inputs[1]});
      if (n.has_input(2) && (in[2].size() != 1 || in[2][0] != in[1][0]))
        throw Error(ErrorKind::ShapeMismatch, n.name + ": bias length mismatch", {n.inputs[2]});
      const auto oh = window_out_dim(in[0][2], p.kh, p.sh, p.dh, p.pt, p.pb);
      const auto ow = window_out_dim(in[0][3], p.kw, p.sw, p.dw, p.pl, p.pr);
      if (oh <= 0 || ow <= 0) throw Error(ErrorKind::ShapeMismatch, n.name + ": empty output", {n.outputs[0]});
      return {{in[0][0], in[1][0], oh, ow}};
    }
    case OpType::ConvTranspose: {
      need_inputs(2);
      require_rank(n, in[0], 4, n.inputs[0]);
      require_rank(n, in[1], 4, n.inputs[1]);
      if (n.attrs.contains("output_shape"))
        throw Error(ErrorKind::MalformedDocument, n.name + ": output_shape is not supported; use explicit pads");
      const auto p = window_params(n, std::make_pair(in[1][2], in[1][3]));
      if (in[1][0] != in[0][1] || in[0][1] % p.group != 0)
        throw Error(ErrorKind::ShapeMismatch, n.name + ": channel/group mismatch", {n.inputs[1]});
      const auto m = in[1][1] * p.group;
      if (n.has_input(2) && (in[2].size() != 1 || in[2][0] != m))
        throw Error(ErrorKind::ShapeMismatch, n.name + ": bias length mismatch", {n.inputs[2]});
      const auto oh = p.sh * (in[0][2] - 1) + p.oph + (p.kh - 1) * p.dh + 1 - p.pt - p.pb;
      const auto ow = p.sw * (in[0][3] - 1) + p.opw + (p.kw - 1) * p.dw + 1 - p.pl - p.pr;
      if (oh <= 0 || ow <= 0) throw Error(ErrorKind::ShapeMismatch, n.name + ": empty output", {n.outputs[0]});
      return {{in[0][0], m, oh, ow}};
    }
    case OpType::Gemm: {
      need_inputs(2);
      require_rank(n, in[0], 2, n.inputs[0]);
      require_rank(n, in[1], 2, n.inputs[1]);
      const auto g = gemm_params(n);
      const auto m = g.trans_a ? in[0][1] : in[0][0];
      const auto k = g.trans_a ? in[0][0] : in[0][1];
      const auto kb = g.trans_b ? in[1][1] : in[1][0];
      const auto nn = g.trans_b ? in[1][0] : in[1][1];
      if (k != kb) throw Error(ErrorKind::ShapeMismatch, n.name + ": inner dimensions differ", {n.inputs[0], n.inputs[1]});
      Shape out{m, nn};
      if (n.has_input(2) && broadcast_shapes(n, out, in[2]) != out)
        throw Error(ErrorKind::ShapeMismatch, n.name + ": C does not broadcast to output", {n.inputs[2]});
      return {out};
    }
    case OpType::MatMul: {
      need_inputs(2);
      if (in[0].size() < 2 || in[1].size() < 2)
        throw Error(ErrorKind::ShapeMismatch, n.name + ": MatMul operands need rank >= 2", {n.inputs[0]});
      const auto& a = in[0];
      const auto& b = in[1];
      if (a[a.size() - 1] != b[b.size() - 2])
        throw Error(ErrorKind::ShapeMismatch, n.name + ": inner dimensions differ", {n.inputs[0], n.inputs[1]});
      Shape ba(a.begin(), a.end() - 2), bb(b.begin(), b.end() - 2);
      Shape out = broadcast_shapes(n, ba, bb);
      out.push_back(a[a.size() - 2]);
      out.push_back(b[b.size() - 1]);
      return {out};
    }
    case OpType::Add:
    case OpType::Sub:
      need_inputs(2);
      return {broadcast_shapes(n, in[0], in[1])};
    case OpType::Neg:
    case OpType::MulScalar:
    case OpType::Relu:
    case OpType::LeakyRelu:
    case OpType::Abs:
    case OpType::Sigmoid:
      need_inputs(1);
      return {in[0]};
    case OpType::MaxPool:
    case OpType::AveragePool: {
      need_inputs(1);
      require_rank(n, in[0], 4, n.inputs[0]);
      const auto p = window_params(n, std::nullopt);
      const auto oh = window_out_dim(in[0][2], p.kh, p.sh, p.dh, p.pt, p.pb);
      const auto ow = window_out_dim(in[0][3], p.kw, p.sw, p.dw, p.pl, p.pr);
      if (oh <= 0 || ow <= 0) throw Error(ErrorKind::ShapeMismatch, n.name + ": empty output", {n.outputs[0]});
      if (p.pt >= p.kh || p.pb >= p.kh || p.pl >= p.kw || p.pr >= p.kw)
        throw Error(ErrorKind::MalformedDocument, n.name + ": pooling pad must be smaller than kernel");
      return {{in[0][0], in[0][1], oh, ow}};
    }
    case OpType::GlobalAveragePool:
      need_inputs(1);
      require_rank(n, in[0], 4, n.inputs[0]);
      return {{in[0][0], in[0][1], 1, 1}};
    case OpType::BatchNormalization: {
      need_inputs(5);
      if (in[0].size() < 2) throw Error(ErrorKind::ShapeMismatch, n.name + ": input rank < 2", {n.inputs[0]});
      for (std::size_t i = 1; i < 5; ++i)
        if (in[i] != Shape{in[0][1]})
          throw Error(ErrorKind::ShapeMismatch, n.name + ": parameter length must equal channels", {n.inputs[i]});
      return {in[0]};
    }
    case OpType::Flatten: {
      need_inputs(1);
      const auto axis = normalize_axis(n, attr::get_int(n, "axis", 1), in[0].size(), true);
      std::int64_t lead = 1, tail = 1;
      for (std::size_t i = 0; i < in[0].size(); ++i) (static_cast<std::int64_t>(i) < axis ? lead : tail) *= in[0][i];
      return {{lead, tail}};
    }
    case OpType::Reshape: {
      need_inputs(1);
      std::vector<std::int64_t> spec;
      if (n.has_input(1)) {
        const Tensor* t = statics(1);
        if (!t) throw Error(ErrorKind::UnsupportedOperator, n.name + ": Reshape shape must be constant", {n.name});
        spec = to_ints(*t);
      } else {
        auto s = attr::get_ints(n, "shape");
        if (!s) throw Error(ErrorKind::MalformedDocument, n.name + ": Reshape needs a shape");
        spec = *s;
      }
      return {reshape_target(n, in[0], spec)};
    }
    case OpType::Transpose: {
      need_inputs(1);
      const auto perm = transpose_perm(n, in[0].size());
      Shape out(in[0].size());
      for (std::size_t i = 0; i < perm.size(); ++i) out[i] = in[0][perm[i]];
      return {out};
    }
    case OpType::Concat: {
      if (in.empty()) throw Error(ErrorKind::MalformedDocument, n.name + ": Concat needs inputs");
      if (!n.attrs.contains("axis")) throw Error(ErrorKind::MalformedDocument, n.name + ": Concat needs axis");
      const auto axis = normalize_axis(n, attr::get_int(n, "axis", 0), in[0].size());
      Shape out = in[0];
      for (std::size_t i = 1; i < in.size(); ++i) {
        if (in[i].size() != out.size())
          throw Error(ErrorKind::ShapeMismatch, n.name + ": Concat rank mismatch", {n.inputs[i]});
        for (std::size_t d = 0; d < out.size(); ++d)
          if (static_cast<std::int64_t>(d) != axis && in[i][d] != out[d])
            throw Error(ErrorKind::ShapeMismatch, n.name + ": Concat dim mismatch", {n.inputs[i]});
        out[axis] += in[i][axis];
      }
      return {out};
    }
    case OpType::Slice: {
      need_inputs(1);
      const auto s = slice_spec(n, in[0], statics);
      return {Shape(s.count.begin(), s.count.end())};
    }
    case OpType::UpsampleNearest: {
      need_inputs(1);
      const auto scales = upsample_scales(n, in[0].size());
      Shape out(in[0]);
      for (std::size_t i = 0; i < out.size(); ++i) out[i] *= scales[i];
      return {out};
    }
  }
  throw Error(ErrorKind::UnsupportedOperator, n.name, {n.name});
}

}  // namespace siglass
