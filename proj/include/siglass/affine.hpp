#pragma once

// Propagation of an affine input family x(z) = a + b*z through a model.
// Every activation is tracked as an exact affine function of z together with
// the z-interval on which the current piece of each piecewise op stays fixed.

#include <cmath>
#include <cstdint>
#include <string>
#include <unordered_map>
#include <vector>

#include "siglass/forward.hpp"
#include "siglass/interval.hpp"
#include "siglass/kernels.hpp"
#include "siglass/model_ir.hpp"

namespace siglass {

/// a + b*z.
struct Affine {
  double a = 0.0;
  double b = 0.0;

  constexpr Affine() = default;
  constexpr Affine(double value) : a(value) {}  // NOLINT: constants lift implicitly
  constexpr Affine(double intercept, double slope) : a(intercept), b(slope) {}

  constexpr double at(double z) const { return a + b * z; }

  Affine& operator+=(const Affine& o) {
    a += o.a;
    b += o.b;
    return *this;
  }
  Affine& operator-=(const Affine& o) {
    a -= o.a;
    b -= o.b;
    return *this;
  }
  friend Affine operator+(Affine x, const Affine& y) { return x += y; }
  friend Affine operator-(Affine x, const Affine& y) { return x -= y; }
  friend Affine operator-(const Affine& x) { return {-x.a, -x.b}; }
  friend Affine operator*(const Affine& x, double s) { return {x.a * s, x.b * s}; }
  friend Affine operator*(double s, const Affine& x) { return {s * x.a, s * x.b}; }
  friend bool operator==(const Affine&, const Affine&) = default;
};

/// Elementwise affine family: value at z is bias + coeff*z.
using ParamTensor = BasicTensor<Affine>;

inline ParamTensor make_param(const Tensor& bias, const Tensor& coeff) {
  if (bias.shape != coeff.shape)
    throw Error(ErrorKind::ShapeMismatch, "bias and coeff shapes differ: " + shape_string(bias.shape) + " vs " +
                                              shape_string(coeff.shape));
  ParamTensor p(bias.shape);
  for (std::size_t i = 0; i < p.size(); ++i) p.data[i] = {bias.data[i], coeff.data[i]};
  return p;
}

inline ParamTensor constant_param(const Tensor& t) {
  return map_tensor<Affine>(t, [](double v) { return Affine(v); });
}

inline Tensor bias_of(const ParamTensor& p) { return map_tensor<double>(p, [](const Affine& v) { return v.a; }); }
inline Tensor coeff_of(const ParamTensor& p) { return map_tensor<double>(p, [](const Affine& v) { return v.b; }); }
inline Tensor evaluate(const ParamTensor& p, double z) {
  return map_tensor<double>(p, [z](const Affine& v) { return v.at(z); });
}

/// Tightens `iv` to the side of the root of a + b*z on which z lies, where
/// "positive" means a + b*z > 0 (zeros take the non-positive side). Returns
/// the side. b == 0 leaves `iv` unchanged.
inline bool sign_piece(double a, double b, double z, Interval& iv) {
  const bool positive = a + b * z > 0.0;
  if (b != 0.0) {
    const double root = -a / b;
    if (positive == (b > 0.0))
      iv.raise_lo(root);
    else
      iv.lower_hi(root);
  }
  return positive;
}

struct Piece {
  double a = 0.0;
  double b = 0.0;
  Interval interval;
};

/// Active piece of ReLU(a + b*z) at z and the sub-interval of `iv` on which
/// it stays active.
inline Piece relu_piece(double a, double b, Interval iv, double z) {
  const bool positive = sign_piece(a, b, z, iv);
  return positive ? Piece{a, b, iv} : Piece{0.0, 0.0, iv};
}

/// Tightens `iv` so that candidate `best` stays >= every other candidate.
template <class Get>
inline void constrain_max(std::size_t count, std::size_t best, Get&& get, Interval& iv) {
  const Affine& w = get(best);
  for (std::size_t j = 0; j < count; ++j) {
    if (j == best) continue;
    const Affine& o = get(j);
    const double da = w.a - o.a;
    const double db = w.b - o.b;
    if (db > 0.0)
      iv.raise_lo(-da / db);
    else if (db < 0.0)
      iv.lower_hi(-da / db);
  }
}

/// Argmax (lowest index on ties) of candidate lines at z.
template <class Get>
inline std::size_t argmax_at(std::size_t count, Get&& get, double z) {
  std::size_t best = 0;
  double best_v = get(0).at(z);
  for (std::size_t j = 1; j < count; ++j) {
    const double v = get(j).at(z);
    if (v > best_v) {
      best = j;
      best_v = v;
    }
  }
  return best;
}

/// Selected line among `candidates` at z, with `iv` narrowed to where it
/// remains the maximum.
inline Piece max_piece(const std::vector<Affine>& candidates, Interval iv, double z) {
  auto get = [&](std::size_t j) -> const Affine& { return candidates[j]; };
  const auto best = argmax_at(candidates.size(), get, z);
  constrain_max(candidates.size(), best, get, iv);
  return {candidates[best].a, candidates[best].b, iv};
}

struct PropagationStats {
  std::uint64_t propagations = 0;
  std::uint64_t node_evaluations = 0;
  std::uint64_t cache_hits = 0;
};

struct PropagationResult {
  std::vector<ParamTensor> outputs;
  Interval valid;
};

/// Single-owner propagation state over one line. With memoization, a node's
/// cached output is reused while the query z lies strictly inside the
/// node's validity interval (which already includes its ancestors').
class PropagationSession {
 public:
  PropagationSession(const ModelGraph& graph, std::vector<ParamTensor> inputs, bool memoize = true)
      : graph_(graph), inputs_(std::move(inputs)), memoize_(memoize), cache_(graph.nodes.size()) {
    std::vector<Shape> shapes;
    for (const auto& p : inputs_) shapes.push_back(p.shape);
    detail::check_inputs(graph_, shapes);
    for (std::size_t i = 0; i < graph_.inputs.size(); ++i) slot_[graph_.inputs[i].name] = -1 - static_cast<int>(i);
    for (std::size_t i = 0; i < graph_.nodes.size(); ++i)
      if (!graph_.node_is_static[i]) slot_[graph_.nodes[i].outputs[0]] = static_cast<int>(i);
  }

  /// Convenience for a line through input `input_index`; other inputs are
  /// held at the given constant values.
  static std::vector<ParamTensor> line_inputs(const std::vector<Tensor>& fixed, std::size_t input_index,
                                              const Tensor& a, const Tensor& b) {
    std::vector<ParamTensor> out;
    for (std::size_t i = 0; i < fixed.size(); ++i)
      out.push_back(i == input_index ? make_param(a, b) : constant_param(fixed[i]));
    return out;
  }

  const ModelGraph& graph() const { return graph_; }
  const PropagationStats& stats() const { return stats_; }
  bool memoize() const { return memoize_; }

  /// Drops cached nodes whose validity interval does not strictly contain
  /// z_new. Descendants have nested intervals, so they are dropped with them.
  void advance(double z_new) {
    for (auto& e : cache_)
      if (e.present && !(memoize_ && e.valid.interior_contains(z_new))) e.present = false;
  }

  PropagationResult propagate(double z) {
    if (!std::isfinite(z)) throw Error(ErrorKind::InternalInconsistency, "propagate needs a finite z");
    advance(z);
    ++stats_.propagations;
    Interval valid;
    for (std::size_t i = 0; i < graph_.nodes.size(); ++i) {
      if (graph_.node_is_static[i]) continue;
      auto& e = cache_[i];
      if (e.present) {
        ++stats_.cache_hits;
      } else {
        evaluate_node(i, z);
        ++stats_.node_evaluations;
      }
      valid = intersect(valid, e.valid);
    }
    require_nonempty(valid, "propagate");
    PropagationResult r;
    r.valid = valid;
    for (const auto& o : graph_.outputs) r.outputs.push_back(value_of(o.name));
    return r;
  }

 private:
  struct Entry {
    ParamTensor value;
    Interval valid;
    bool present = false;
  };

  ParamTensor value_of(const std::string& edge) const {
    if (graph_.is_static(edge)) return constant_param(graph_.constant(edge));
    return ref(edge);
  }

  const ParamTensor& ref(const std::string& edge) const {
    const int s = slot_.at(edge);
    return s < 0 ? inputs_[-1 - s] : cache_[s].value;
  }

  Interval interval_of(const std::string& edge) const {
    if (graph_.is_static(edge)) return {};
    const int s = slot_.at(edge);
    return s < 0 ? Interval{} : cache_[s].valid;
  }

  struct Env {
    const PropagationSession& self;
    const NodeSpec& n;
    std::vector<Shape> out_shapes;

    bool is_static(std::size_t i) const { return self.graph_.is_static(n.inputs.at(i)); }
    const Tensor& constant(std::size_t i) const { return self.graph_.constant(n.inputs.at(i)); }
    const ParamTensor& value(std::size_t i) const { return self.ref(n.inputs.at(i)); }
    const Shape& output_shape(std::size_t k) const { return out_shapes.at(k); }
    StaticLookup statics() const {
      return [this](std::size_t i) -> const Tensor* {
        return n.has_input(i) && is_static(i) ? &constant(i) : nullptr;
      };
    }
  };

  void evaluate_node(std::size_t i, double z) {
    const auto& n = graph_.nodes[i];
    Interval valid;
    for (const auto& in : n.inputs)
      if (!in.empty()) valid = intersect(valid, interval_of(in));
    Env env{*this, n, {graph_.shape_of(n.outputs[0])}};
    ParamTensor out;
    switch (n.op) {
      case OpType::Relu:
      case OpType::LeakyRelu:
      case OpType::Abs: {
        const auto& x = env.value(0);
        const double alpha = n.op == OpType::LeakyRelu ? attr::get_float(n, "alpha", 0.01) : 0.0;
        out = ParamTensor(x.shape);
        for (std::size_t k = 0; k < x.size(); ++k) {
          const Affine& v = x.data[k];
          const bool positive = sign_piece(v.a, v.b, z, valid);
          if (positive)
            out.data[k] = v;
          else if (n.op == OpType::Abs)
            out.data[k] = -v;
          else if (n.op == OpType::LeakyRelu)
            out.data[k] = v * alpha;
        }
        break;
      }
      case OpType::MaxPool: {
        const auto& x = env.value(0);
        out = ParamTensor(env.output_shape(0));
        kernels::for_each_pool_window(x.shape, window_params(n, std::nullopt), out.shape,
                                      [&](std::size_t o, const std::vector<std::size_t>& win) {
                                        auto get = [&](std::size_t j) -> const Affine& { return x.data[win[j]]; };
                                        const auto best = argmax_at(win.size(), get, z);
                                        constrain_max(win.size(), best, get, valid);
                                        out.data[o] = x.data[win[best]];
                                      });
        break;
      }
      case OpType::Sigmoid:
        out = env.value(0);
        break;
      default:
        out = std::move(kernels::eval_linear<Affine>(n, env)[0]);
        break;
    }
    for (const auto& v : out.data)
      if (!std::isfinite(v.a) || !std::isfinite(v.b))
        throw Error(ErrorKind::NonFiniteActivation, n.name + ": non-finite activation", {n.name});
    require_nonempty(valid, n.name.c_str());
    cache_[i] = Entry{std::move(out), valid, true};
  }

  const ModelGraph& graph_;
  std::vector<ParamTensor> inputs_;
  bool memoize_;
  std::vector<Entry> cache_;
  std::unordered_map<std::string, int> slot_;
  PropagationStats stats_;
};

}  // namespace siglass
