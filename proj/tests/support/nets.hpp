#pragma once

// Builders for small random models used across the test suites.

#include <cmath>
#include <cstdint>
#include <random>
#include <string>
#include <vector>

#include "siglass/interval.hpp"
#include "siglass/model_ir.hpp"
#include "siglass/tensor.hpp"
#include "siglass/tensor_io.hpp"

namespace siglass::test_nets {

inline Tensor random_tensor(const Shape& shape, std::mt19937_64& rng, double scale = 1.0, double mean = 0.0) {
  std::normal_distribution<double> nd(mean, scale);
  Tensor t(shape);
  for (auto& v : t.data) v = nd(rng);
  return t;
}

/// Sequential model writer: each call appends one node fed by the previous
/// one and tracks the running shape.
class NetBuilder {
 public:
  NetBuilder(Shape input_shape, std::uint64_t seed) : shape_(std::move(input_shape)), rng_(seed) {
    doc_["ir_version"] = kIrVersion;
    doc_["inputs"] = Json::array({{{"name", "x"}, {"shape", shape_}}});
    doc_["initializers"] = Json::array();
    doc_["nodes"] = Json::array();
  }

  NetBuilder& conv(std::int64_t out_channels, int k = 3, double weight_scale = 0.5, double bias_scale = 0.1,
                   double weight_mean = 0.0) {
    const auto cin = shape_[1];
    const auto w = add_init(random_tensor({out_channels, cin, k, k}, rng_, weight_scale, weight_mean));
    const auto b = add_init(random_tensor({out_channels}, rng_, bias_scale));
    const int p = k / 2;
    node("Conv", {cur_, w, b}, {{"kernel_shape", {k, k}}, {"pads", {p, p, p, p}}, {"strides", {1, 1}}});
    shape_[1] = out_channels;
    return *this;
  }

  NetBuilder& conv_transpose(std::int64_t out_channels, double weight_scale = 0.5) {
    const auto cin = shape_[1];
    const auto w = add_init(random_tensor({cin, out_channels, 2, 2}, rng_, weight_scale));
    node("ConvTranspose", {cur_, w}, {{"kernel_shape", {2, 2}}, {"strides", {2, 2}}});
    shape_[1] = out_channels;
    shape_[2] *= 2;
    shape_[3] *= 2;
    return *this;
  }

  NetBuilder& relu() { return node("Relu", {cur_}); }
  NetBuilder& leaky_relu(double alpha = 0.1) { return node("LeakyRelu", {cur_}, {{"alpha", alpha}}); }
  NetBuilder& abs() { return node("Abs", {cur_}); }
  NetBuilder& neg() { return node("Neg", {cur_}); }
  NetBuilder& sigmoid() { return node("Sigmoid", {cur_}); }

  NetBuilder& max_pool(int k = 2) {
    node("MaxPool", {cur_}, {{"kernel_shape", {k, k}}, {"strides", {k, k}}});
    shape_[2] /= k;
    shape_[3] /= k;
    return *this;
  }

  NetBuilder& max_pool_same(int k = 3) {
    const int p = k / 2;
    return node("MaxPool", {cur_}, {{"kernel_shape", {k, k}}, {"strides", {1, 1}}, {"pads", {p, p, p, p}}});
  }

  NetBuilder& average_pool(int k = 2) {
    node("AveragePool", {cur_}, {{"kernel_shape", {k, k}}, {"strides", {k, k}}});
    shape_[2] /= k;
    shape_[3] /= k;
    return *this;
  }

  NetBuilder& upsample(int s = 2) {
    node("UpsampleNearest", {cur_}, {{"scales", {1, 1, s, s}}});
    shape_[2] *= s;
    shape_[3] *= s;
    return *this;
  }

  NetBuilder& batch_norm() {
    const auto c = shape_[1];
    std::uniform_real_distribution<double> pos(0.5, 1.5);
    Tensor var({c});
    for (auto& v : var.data) v = pos(rng_);
    const auto s = add_init(random_tensor({c}, rng_));
    const auto b = add_init(random_tensor({c}, rng_, 0.1));
    const auto m = add_init(random_tensor({c}, rng_, 0.1));
    const auto v = add_init(var);
    return node("BatchNormalization", {cur_, s, b, m, v}, {{"epsilon", 1e-5}});
  }

  /// Flatten, Gemm to `units`, then (optionally) reshape back to the image.
  NetBuilder& dense(std::int64_t units, double weight_scale = 0.3) {
    const auto in = numel(shape_);
    node("Flatten", {cur_}, {{"axis", 1}});
    const auto w = add_init(random_tensor({units, in}, rng_, weight_scale));
    const auto b = add_init(random_tensor({units}, rng_, 0.1));
    node("Gemm", {cur_, w, b}, {{"transB", 1}});
    shape_ = {1, units};
    return *this;
  }

  NetBuilder& reshape(Shape s) {
    Tensor t({static_cast<std::int64_t>(s.size())});
    for (std::size_t i = 0; i < s.size(); ++i) t.data[i] = static_cast<double>(s[i]);
    const auto name = add_init(t);
    node("Reshape", {cur_, name});
    shape_ = std::move(s);
    return *this;
  }

  /// Adds a skip connection: output = current + `other` (an earlier edge name).
  NetBuilder& add_edge(const std::string& other) { return node("Add", {cur_, other}); }

  const std::string& current() const { return cur_; }
  const Shape& shape() const { return shape_; }
  std::mt19937_64& rng() { return rng_; }

  Json json() const {
    Json d = doc_;
    d["outputs"] = Json::array({{{"name", cur_}}});
    return d;
  }

  ModelGraph build() const { return parse_model(json()); }

 private:
  std::string add_init(const Tensor& t) {
    const auto name = "w" + std::to_string(counter_++);
    Json j = tensor_to_json(t, true);
    j["name"] = name;
    doc_["initializers"].push_back(j);
    return name;
  }

  NetBuilder& node(const std::string& op, std::vector<std::string> inputs, Json attrs = Json::object()) {
    const auto out = "t" + std::to_string(counter_++);
    doc_["nodes"].push_back({{"name", op + "_" + out}, {"op_type", op}, {"inputs", inputs}, {"outputs", {out}},
                             {"attrs", attrs}});
    cur_ = out;
    return *this;
  }

  Json doc_;
  Shape shape_;
  std::string cur_ = "x";
  std::mt19937_64 rng_;
  int counter_ = 0;
};

/// The fixed scorer used by the simulation studies: Conv 3x3 -> Relu ->
/// Conv 3x3 on 1x8x8 inputs, with positive-mean random filters so that the
/// score behaves like a blob detector.
inline Json study_scorer_json(std::uint64_t seed = 7) {
  return NetBuilder({1, 1, 8, 8}, seed).conv(4, 3, 0.05, 0.05, 0.15).relu().conv(1, 3, 0.03, 0.05, 0.1).json();
}

inline ModelGraph study_scorer(std::uint64_t seed = 7) { return parse_model(study_scorer_json(seed)); }

inline Tensor line_point(const Tensor& a, const Tensor& b, double z) {
  Tensor x(a.shape);
  for (std::size_t i = 0; i < x.size(); ++i) x.data[i] = a.data[i] + b.data[i] * z;
  return x;
}

/// Points strictly inside `iv`, with infinite ends replaced by z +/- span.
inline std::vector<double> interior_points(const Interval& iv, double z, int count, std::mt19937_64& rng,
                                           double span = 5) {
  const double lo = std::isfinite(iv.lo) ? iv.lo : z - span;
  const double hi = std::isfinite(iv.hi) ? iv.hi : z + span;
  std::uniform_real_distribution<double> u(0.02, 0.98);
  std::vector<double> out;
  for (int i = 0; i < count; ++i) out.push_back(lo + (hi - lo) * u(rng));
  return out;
}

/// One of four piecewise-linear architectures mapping 1x1x8x8 to 1x1x8x8,
/// chosen by seed % 4.
inline ModelGraph random_net(std::uint64_t seed) {
  NetBuilder nb({1, 1, 8, 8}, seed);
  switch (seed % 4) {
    case 0:
      nb.conv(3).relu().max_pool().conv(1).upsample();
      break;
    case 1: {
      nb.conv(2).leaky_relu(0.2);
      const auto skip = nb.current();
      nb.conv(2).relu().add_edge(skip).max_pool_same().conv(1);
      break;
    }
    case 2:
      nb.conv(3).batch_norm().relu().max_pool().conv_transpose(2).abs().conv(1);
      break;
    default:
      nb.conv(2).relu().average_pool().upsample().neg().relu().conv(1);
      break;
  }
  return nb.build();
}

}  // namespace siglass::test_nets
