#pragma once

// Selective inference for a thresholded ROI: line construction, the
// parametric sweep over the line, and the resulting p-values.

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <optional>
#include <string>
#include <vector>

#include "siglass/affine.hpp"
#include "siglass/covariance.hpp"
#include "siglass/forward.hpp"
#include "siglass/hypothesis.hpp"
#include "siglass/interval.hpp"
#include "siglass/model_ir.hpp"
#include "siglass/tensor_io.hpp"
#include "siglass/truncated_normal.hpp"

namespace siglass {

enum class Mode { Parametric, OverConditioning };

inline const char* mode_name(Mode m) { return m == Mode::Parametric ? "parametric" : "over_conditioning"; }

inline Mode mode_from_string(std::string_view s) {
  if (s == "parametric") return Mode::Parametric;
  if (s == "over_conditioning" || s == "over-conditioning") return Mode::OverConditioning;
  throw Error(ErrorKind::InvalidConfig, "unknown mode '" + std::string(s) + "'");
}

struct InferenceOptions {
  Mode mode = Mode::Parametric;
  /// Search half-width in units of sigma_eta.
  double z_range = 10.0;
  /// Sweep step; 1e-6 * max(1, sigma_eta) when unset.
  std::optional<double> epsilon;
  bool memoize = true;
  /// Consecutive sub-10*epsilon intervals tolerated before giving up.
  int stall_limit = 1000;

  void validate() const {
    if (!(z_range > 0.0) || !std::isfinite(z_range)) throw Error(ErrorKind::InvalidConfig, "z_range must be positive");
    if (epsilon && !(*epsilon > 0.0)) throw Error(ErrorKind::InvalidConfig, "epsilon must be positive");
    if (stall_limit < 1) throw Error(ErrorKind::InvalidConfig, "stall_limit must be >= 1");
  }
};

struct SearchDiagnostics {
  std::uint64_t intervals_visited = 0;
  std::uint64_t accepted_intervals = 0;
  std::uint64_t propagations = 0;
  std::uint64_t node_evaluations = 0;
  std::uint64_t cache_hits = 0;
  double z_min = 0.0;
  double z_max = 0.0;
  double epsilon = 0.0;
  bool bounds_extended = false;
};

/// Everything fixed for one inference: the model, the hypothesis, and the
/// line through input `i_idx`.
class LineProblem {
 public:
  LineProblem(const ModelGraph& graph, const HypothesisConfig& cfg, const std::vector<Tensor>& inputs,
              const LineParams& line, bool memoize)
      : cfg_(cfg),
        tau_(effective_threshold(cfg, graph.terminal_sigmoid(cfg.o_idx) >= 0)),
        line_input_(restrict_line(inputs.at(cfg.i_idx).shape, line)),
        session_(graph, with_line(inputs, cfg.i_idx, line_input_), memoize) {}

  /// Over-conditioning interval at z and the ROI realized there.
  Selection oc_region(double z) {
    auto r = session_.propagate(z);
    ParamTensor score = std::move(r.outputs.at(cfg_.o_idx));
    Interval valid = r.valid;
    if (!cfg_.post_process.empty())
      score = apply_post_process(cfg_.post_process, std::move(score), line_input_, z, &valid);
    auto sel = selection_constraints(cfg_, score, z, tau_, valid);
    const double tol = 1e-9 * std::max(1.0, std::abs(z));
    if (!(sel.interval.lo <= z + tol && z - tol <= sel.interval.hi))
      throw Error(ErrorKind::InternalInconsistency, "over-conditioning interval excludes z = " + std::to_string(z));
    return sel;
  }

  const PropagationSession& session() const { return session_; }
  double tau_effective() const { return tau_; }

 private:
  /// The tested input's part of the line (the first n coordinates).
  static ParamTensor restrict_line(const Shape& shape, const LineParams& line) {
    const auto n = static_cast<std::size_t>(numel(shape));
    if (line.a.size() < n || line.b.size() < n)
      throw Error(ErrorKind::ShapeMismatch, "line is shorter than the tested input");
    ParamTensor p(shape);
    for (std::size_t i = 0; i < n; ++i) p.data[i] = {line.a[i], line.b[i]};
    return p;
  }

  static std::vector<ParamTensor> with_line(const std::vector<Tensor>& inputs, std::size_t idx,
                                            const ParamTensor& line_input) {
    std::vector<ParamTensor> out;
    for (std::size_t i = 0; i < inputs.size(); ++i) out.push_back(i == idx ? line_input : constant_param(inputs[i]));
    return out;
  }

  const HypothesisConfig& cfg_;
  double tau_;
  ParamTensor line_input_;
  PropagationSession session_;
};

/// Algorithm-1 sweep from z_min to z_max; returns the union of visited
/// over-conditioning intervals whose ROI equals `observed`, clipped to the
/// search window.
inline IntervalUnion parametric_search(LineProblem& problem, const Roi& observed, double z_min, double z_max,
                                       double epsilon, int stall_limit, SearchDiagnostics* diag = nullptr) {
  if (!(z_min < z_max)) throw Error(ErrorKind::InvalidConfig, "search bounds must satisfy z_min < z_max");
  IntervalUnion region;
  const Interval window{z_min, z_max};
  auto merge_gap = [](double v) { return 1e-12 * std::max(1.0, std::abs(v)); };
  double z = z_min;
  int stall = 0;
  std::uint64_t visited = 0, accepted = 0;
  while (z < z_max) {
    const auto sel = problem.oc_region(z);
    ++visited;
    if (sel.roi == observed) {
      const auto clipped = intersect(sel.interval, window);
      if (clipped.lo <= clipped.hi) {
        region.add(clipped, merge_gap(clipped.hi));
        ++accepted;
      }
    }
    if (sel.interval.width() < 10.0 * epsilon) {
      if (++stall > stall_limit)
        throw Error(ErrorKind::StalledSearch, "more than " + std::to_string(stall_limit) +
                                                  " consecutive intervals narrower than 10*epsilon near z = " +
                                                  std::to_string(z));
    } else {
      stall = 0;
    }
    if (!std::isfinite(sel.interval.hi)) break;
    const double next = std::max(sel.interval.hi, z) + epsilon;
    z = next > z ? next : std::nextafter(z, kInf);
  }
  if (diag) {
    diag->intervals_visited += visited;
    diag->accepted_intervals += accepted;
  }
  return region;
}

/// Interval endpoint as JSON; infinities become the strings "-inf"/"inf".
inline Json endpoint_json(double v) {
  if (std::isfinite(v)) return v;
  return v > 0 ? "inf" : "-inf";
}

inline Json interval_json(const Interval& iv) { return Json::array({endpoint_json(iv.lo), endpoint_json(iv.hi)}); }

struct InferenceResult {
  Mode mode = Mode::Parametric;
  double p_value = 1.0;
  /// log p_value; finite even when p_value underflows.
  double log_p_value = 0.0;
  double naive_p_value = 1.0;
  double log_naive_p_value = 0.0;
  double z_obs = 0.0;
  double sigma_eta = 0.0;
  IntervalUnion truncation_region;
  /// Over-conditioning interval at z_obs (unclipped).
  Interval oc_interval;
  std::vector<Tensor> output;
  Tensor score_map;
  Roi roi;
  std::vector<std::int64_t> non_roi;
  SearchDiagnostics diagnostics;

  /// min(1, exp(log naive_p + log_num_comparisons)).
  double bonferroni_p_value(double log_num_comparisons) const {
    const double l = log_naive_p_value + log_num_comparisons;
    return l >= 0.0 ? 1.0 : std::exp(l);
  }

  Json to_json(std::optional<double> log_num_comparisons = std::nullopt, bool include_tensors = false) const {
    Json j;
    j["mode"] = mode_name(mode);
    j["p_value"] = p_value;
    j["log_p_value"] = log_p_value;
    j["naive_p_value"] = naive_p_value;
    j["log_naive_p_value"] = log_naive_p_value;
    if (log_num_comparisons) {
      j["log_num_comparisons"] = *log_num_comparisons;
      j["bonferroni_p_value"] = bonferroni_p_value(*log_num_comparisons);
    }
    j["z_obs"] = z_obs;
    j["sigma_eta"] = sigma_eta;
    Json segs = Json::array();
    for (const auto& s : truncation_region.segments()) segs.push_back(interval_json(s));
    j["truncation_region"] = segs;
    j["roi"] = roi.pixels;
    j["non_roi"] = non_roi;
    const auto& d = diagnostics;
    j["diagnostics"] = {{"intervals_visited", d.intervals_visited},
                        {"accepted_intervals", d.accepted_intervals},
                        {"propagations", d.propagations},
                        {"node_evaluations", d.node_evaluations},
                        {"cache_hits", d.cache_hits},
                        {"z_min", d.z_min},
                        {"z_max", d.z_max},
                        {"epsilon", d.epsilon},
                        {"bounds_extended", d.bounds_extended},
                        {"oc_interval", interval_json(oc_interval)}};
    if (include_tensors) {
      j["score_map"] = tensor_to_json(score_map, false);
      Json outs = Json::array();
      for (const auto& o : output) outs.push_back(tensor_to_json(o, false));
      j["output"] = outs;
    }
    return j;
  }
};

/// Runs a full inference. `inputs` are the graph inputs; `reference` is
/// required for ReferenceMeanDiff and must match inputs[i_idx]. `ref_cov`
/// defaults to `cov`.
inline InferenceResult inference(const ModelGraph& graph, const HypothesisConfig& cfg, const std::vector<Tensor>& inputs,
                                 const Covariance& cov, const InferenceOptions& opt = {},
                                 const std::optional<Tensor>& reference = std::nullopt,
                                 const std::optional<Covariance>& ref_cov = std::nullopt) {
  cfg.validate();
  opt.validate();
  if (cfg.i_idx >= graph.inputs.size()) throw Error(ErrorKind::InvalidConfig, "i_idx out of range");
  if (cfg.o_idx >= graph.outputs.size()) throw Error(ErrorKind::InvalidConfig, "o_idx out of range");
  const bool sigmoid = graph.terminal_sigmoid(cfg.o_idx) >= 0;
  check_sigmoid_config(cfg, sigmoid);
  const double tau = effective_threshold(cfg, sigmoid);

  InferenceResult res;
  res.mode = opt.mode;
  ForwardOptions fo;
  fo.strip_terminal_sigmoid = true;
  const auto stripped = forward(graph, inputs, fo);
  res.output = restore_terminal_sigmoid(graph, stripped);

  const Tensor& x = inputs[cfg.i_idx];
  const auto raw_score = post_processed_score(cfg, inputs, stripped);
  if (raw_score.size() != x.size())
    throw Error(ErrorKind::ShapeMismatch, "score map has " + std::to_string(raw_score.size()) +
                                              " pixels but the tested input has " + std::to_string(x.size()));
  res.score_map = cfg.use_norm ? normalize_score(cfg, raw_score) : raw_score;
  res.roi = extract_roi(cfg, raw_score, tau);
  res.non_roi = non_roi(cfg, res.roi, raw_score.shape);
  const auto eta = build_eta(cfg, res.roi, raw_score.shape);

  std::vector<double> xs = x.data;
  Covariance full_cov = cov;
  if (cfg.preset == Preset::ReferenceMeanDiff) {
    if (!reference) throw Error(ErrorKind::InvalidConfig, "reference-mean-diff needs a reference image");
    if (reference->shape != x.shape)
      throw Error(ErrorKind::ShapeMismatch, "reference shape " + shape_string(reference->shape) +
                                                " differs from input " + shape_string(x.shape));
    xs.insert(xs.end(), reference->data.begin(), reference->data.end());
    full_cov = Covariance::block_diagonal(cov, ref_cov.value_or(cov), x.size());
  }
  const auto line = line_params(xs, eta, full_cov);
  res.z_obs = line.z_obs;
  res.sigma_eta = line.sigma_eta;
  res.log_naive_p_value = log_two_sided_normal_p(line.z_obs, line.sigma_eta);
  res.naive_p_value = std::exp(res.log_naive_p_value);

  LineProblem problem(graph, cfg, inputs, line, opt.memoize);

  auto& d = res.diagnostics;
  d.epsilon = opt.epsilon.value_or(1e-6 * std::max(1.0, line.sigma_eta));
  const auto at_obs = problem.oc_region(line.z_obs);
  if (!(at_obs.roi == res.roi))
    throw Error(ErrorKind::InternalInconsistency, "ROI along the line differs from the observed ROI at z_obs");
  res.oc_interval = at_obs.interval;

  if (opt.mode == Mode::OverConditioning) {
    res.truncation_region.add(at_obs.interval);
    d.z_min = at_obs.interval.lo;
    d.z_max = at_obs.interval.hi;
    d.intervals_visited = 1;
    d.accepted_intervals = 1;
  } else {
    d.z_min = -opt.z_range * line.sigma_eta;
    d.z_max = opt.z_range * line.sigma_eta;
    if (line.z_obs - line.sigma_eta < d.z_min || line.z_obs + line.sigma_eta > d.z_max) {
      d.bounds_extended = true;
      d.z_min = std::min(d.z_min, line.z_obs - line.sigma_eta);
      d.z_max = std::max(d.z_max, line.z_obs + line.sigma_eta);
    }
    res.truncation_region = parametric_search(problem, res.roi, d.z_min, d.z_max, d.epsilon, opt.stall_limit, &d);
    const auto clipped = intersect(at_obs.interval, Interval{d.z_min, d.z_max});
    res.truncation_region.add(clipped, 1e-12 * std::max(1.0, std::abs(clipped.hi)));
  }
  const auto& st = problem.session().stats();
  d.propagations = st.propagations;
  d.node_evaluations = st.node_evaluations;
  d.cache_hits = st.cache_hits;

  res.log_p_value = log_two_sided_p(res.truncation_region, line.z_obs, line.sigma_eta);
  res.p_value = std::exp(res.log_p_value);
  return res;
}

}  // namespace siglass
