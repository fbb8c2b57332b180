#pragma once

// Score maps, ROI extraction, test directions and the selection constraints
// that keep the ROI fixed along the search line.

#include <algorithm>
#include <cmath>
#include <optional>
#include <string>
#include <string_view>
#include <vector>

#include "siglass/affine.hpp"
#include "siglass/error.hpp"
#include "siglass/interval.hpp"
#include "siglass/tensor.hpp"

namespace siglass {

enum class Preset { BackMeanDiff, NeighborMeanDiff, ReferenceMeanDiff };
enum class PostKind { InputDiff, Abs, Neg, AverageFilter, GaussianFilter };

inline const char* preset_name(Preset p) {
  switch (p) {
    case Preset::BackMeanDiff: return "back-mean-diff";
    case Preset::NeighborMeanDiff: return "neighbor-mean-diff";
    case Preset::ReferenceMeanDiff: return "reference-mean-diff";
  }
  return "?";
}

inline Preset preset_from_string(std::string_view s) {
  for (auto p : {Preset::BackMeanDiff, Preset::NeighborMeanDiff, Preset::ReferenceMeanDiff})
    if (s == preset_name(p)) return p;
  if (s == "BackMeanDiff") return Preset::BackMeanDiff;
  if (s == "NeighborMeanDiff") return Preset::NeighborMeanDiff;
  if (s == "ReferenceMeanDiff") return Preset::ReferenceMeanDiff;
  throw Error(ErrorKind::InvalidConfig, "unknown hypothesis '" + std::string(s) + "'");
}

struct PostProcessSpec {
  PostKind kind = PostKind::Abs;
  int kernel_size = 3;
  double sigma = 1.0;

  friend bool operator==(const PostProcessSpec&, const PostProcessSpec&) = default;
};

/// Parses one item of a post-process list: `input-diff`, `abs`, `neg`,
/// `average[:k]`, `gaussian[:k[:sigma]]`.
inline PostProcessSpec parse_post_process(std::string_view item) {
  std::vector<std::string> parts;
  std::size_t start = 0;
  while (true) {
    const auto colon = item.find(':', start);
    parts.emplace_back(item.substr(start, colon - start));
    if (colon == std::string_view::npos) break;
    start = colon + 1;
  }
  const auto& name = parts[0];
  PostProcessSpec s;
  auto bad = [&] { return Error(ErrorKind::InvalidConfig, "bad post-process item '" + std::string(item) + "'"); };
  try {
    if (name == "input-diff" || name == "InputDiff") {
      s.kind = PostKind::InputDiff;
    } else if (name == "abs" || name == "Abs") {
      s.kind = PostKind::Abs;
    } else if (name == "neg" || name == "Neg") {
      s.kind = PostKind::Neg;
    } else if (name == "average" || name == "AverageFilter") {
      s.kind = PostKind::AverageFilter;
      if (parts.size() > 2) throw bad();
      if (parts.size() > 1) s.kernel_size = std::stoi(parts[1]);
    } else if (name == "gaussian" || name == "GaussianFilter") {
      s.kind = PostKind::GaussianFilter;
      if (parts.size() > 3) throw bad();
      if (parts.size() > 1) s.kernel_size = std::stoi(parts[1]);
      if (parts.size() > 2) s.sigma = std::stod(parts[2]);
    } else {
      throw bad();
    }
  } catch (const std::logic_error&) {
    throw bad();
  }
  if (parts.size() > 1 && s.kind != PostKind::AverageFilter && s.kind != PostKind::GaussianFilter) throw bad();
  return s;
}

inline std::vector<PostProcessSpec> parse_post_process_list(std::string_view list) {
  std::vector<PostProcessSpec> out;
  if (list.empty()) return out;
  std::size_t start = 0;
  while (true) {
    const auto comma = list.find(',', start);
    out.push_back(parse_post_process(list.substr(start, comma - start)));
    if (comma == std::string_view::npos) break;
    start = comma + 1;
  }
  return out;
}

struct HypothesisConfig {
  Preset preset = Preset::BackMeanDiff;
  double threshold = 0.5;
  std::size_t i_idx = 0;
  std::size_t o_idx = 0;
  std::vector<PostProcessSpec> post_process;
  bool use_norm = false;
  int neighborhood_range = 1;
  /// Nonzero entries are excluded from the ROI and from every comparison region.
  std::optional<Tensor> mask;

  void validate() const {
    if (!std::isfinite(threshold)) throw Error(ErrorKind::InvalidConfig, "threshold must be finite");
    if (use_norm && !(threshold > 0.0 && threshold < 1.0))
      throw Error(ErrorKind::InvalidConfig, "use_norm requires a threshold in (0, 1)");
    if (neighborhood_range < 1) throw Error(ErrorKind::InvalidConfig, "neighborhood_range must be >= 1");
    for (const auto& p : post_process) {
      if (p.kind == PostKind::AverageFilter || p.kind == PostKind::GaussianFilter) {
        if (p.kernel_size < 1 || p.kernel_size % 2 == 0)
          throw Error(ErrorKind::InvalidConfig, "filter kernel_size must be odd and positive");
        if (p.kind == PostKind::GaussianFilter && !(p.sigma > 0.0 && std::isfinite(p.sigma)))
          throw Error(ErrorKind::InvalidConfig, "gaussian sigma must be positive");
      }
    }
  }

  bool is_masked(std::size_t i) const { return mask && mask->data[i] != 0.0; }
};

struct Roi {
  std::vector<std::int64_t> pixels;
  std::int64_t n = 0;

  bool contains(std::int64_t i) const { return std::binary_search(pixels.begin(), pixels.end(), i); }
  friend bool operator==(const Roi&, const Roi&) = default;
};

// ---------------------------------------------------------------------------
// Filters

/// k x k kernel normalized to sum 1, row-major.
inline std::vector<double> filter_kernel(const PostProcessSpec& spec) {
  const int k = spec.kernel_size;
  const int c = k / 2;
  std::vector<double> w(static_cast<std::size_t>(k) * k, 1.0);
  if (spec.kind == PostKind::GaussianFilter)
    for (int dy = -c; dy <= c; ++dy)
      for (int dx = -c; dx <= c; ++dx)
        w[(dy + c) * k + dx + c] = std::exp(-(dx * dx + dy * dy) / (2.0 * spec.sigma * spec.sigma));
  double sum = 0.0;
  for (double v : w) sum += v;
  for (double& v : w) v /= sum;
  return w;
}

/// Image (H, W) of the trailing two dims; rank-1 tensors count as one row.
inline std::pair<std::int64_t, std::int64_t> image_dims(const Shape& s) {
  if (s.empty()) return {1, 1};
  if (s.size() == 1) return {1, s[0]};
  return {s[s.size() - 2], s[s.size() - 1]};
}

/// Same-size 2-D correlation over the trailing two dims with zero padding.
template <class T>
BasicTensor<T> apply_filter(const BasicTensor<T>& x, const PostProcessSpec& spec) {
  const auto w = filter_kernel(spec);
  const int k = spec.kernel_size, c = k / 2;
  const auto [H, W] = image_dims(x.shape);
  const std::int64_t planes = H * W == 0 ? 0 : static_cast<std::int64_t>(x.size()) / (H * W);
  BasicTensor<T> out(x.shape);
  for (std::int64_t p = 0; p < planes; ++p) {
    const std::size_t base = static_cast<std::size_t>(p * H * W);
    for (std::int64_t h = 0; h < H; ++h)
      for (std::int64_t v = 0; v < W; ++v) {
        T acc{};
        for (int dy = -c; dy <= c; ++dy) {
          const auto hh = h + dy;
          if (hh < 0 || hh >= H) continue;
          for (int dx = -c; dx <= c; ++dx) {
            const auto ww = v + dx;
            if (ww < 0 || ww >= W) continue;
            acc += x.data[base + static_cast<std::size_t>(hh * W + ww)] * w[(dy + c) * k + dx + c];
          }
        }
        out.data[base + static_cast<std::size_t>(h * W + v)] = acc;
      }
  }
  return out;
}

// ---------------------------------------------------------------------------
// Score chain

namespace detail {

inline double abs_piece(double v, double, Interval*) { return std::abs(v); }

inline Affine abs_piece(const Affine& v, double z, Interval* valid) {
  Interval scratch;
  const bool positive = sign_piece(v.a, v.b, z, valid ? *valid : scratch);
  return positive ? v : -v;
}

}  // namespace detail

/// Applies the post-process chain to `out`. For Affine elements, `valid` is
/// narrowed to where every Abs keeps its sign at z.
template <class T>
BasicTensor<T> apply_post_process(const std::vector<PostProcessSpec>& chain, BasicTensor<T> out,
                                  const BasicTensor<T>& input, double z = 0.0, Interval* valid = nullptr) {
  for (const auto& p : chain) {
    switch (p.kind) {
      case PostKind::InputDiff:
        if (input.size() != out.size())
          throw Error(ErrorKind::ShapeMismatch, "input-diff needs matching sizes, got output " +
                                                    shape_string(out.shape) + " and input " + shape_string(input.shape));
        for (std::size_t i = 0; i < out.size(); ++i) out.data[i] -= input.data[i];
        break;
      case PostKind::Abs:
        for (auto& v : out.data) v = detail::abs_piece(v, z, valid);
        break;
      case PostKind::Neg:
        for (auto& v : out.data) v = -v;
        break;
      case PostKind::AverageFilter:
      case PostKind::GaussianFilter:
        out = apply_filter(out, p);
        break;
    }
  }
  return out;
}

/// Threshold on the score actually compared: logit(tau) when the graph's
/// terminal Sigmoid was stripped.
inline double effective_threshold(const HypothesisConfig& cfg, bool sigmoid_stripped) {
  if (!sigmoid_stripped) return cfg.threshold;
  if (!(cfg.threshold > 0.0 && cfg.threshold < 1.0))
    throw Error(ErrorKind::InvalidConfig, "a sigmoid output needs a threshold in (0, 1)");
  return std::log(cfg.threshold) - std::log1p(-cfg.threshold);
}

/// Checks the combinations that the logit transform cannot express.
inline void check_sigmoid_config(const HypothesisConfig& cfg, bool sigmoid_stripped) {
  if (!sigmoid_stripped) return;
  if (!cfg.post_process.empty() || cfg.use_norm)
    throw Error(ErrorKind::InvalidConfig,
                "post_process and use_norm are not supported on an output ending in Sigmoid");
}

/// Score before any normalization.
inline Tensor post_processed_score(const HypothesisConfig& cfg, const std::vector<Tensor>& inputs,
                                   const std::vector<Tensor>& outputs) {
  if (cfg.o_idx >= outputs.size()) throw Error(ErrorKind::InvalidConfig, "o_idx out of range");
  if (cfg.i_idx >= inputs.size()) throw Error(ErrorKind::InvalidConfig, "i_idx out of range");
  return apply_post_process(cfg.post_process, outputs[cfg.o_idx], inputs[cfg.i_idx]);
}

namespace detail {

inline void check_mask(const HypothesisConfig& cfg, std::size_t n) {
  if (cfg.mask && cfg.mask->size() != n)
    throw Error(ErrorKind::ShapeMismatch, "mask has " + std::to_string(cfg.mask->size()) + " entries, score has " +
                                              std::to_string(n));
}

/// Lowest-index argmax (sign = 1) or argmin (sign = -1) over unmasked pixels.
template <class Get>
std::size_t extreme_index(const HypothesisConfig& cfg, std::size_t n, Get&& get, int sign) {
  std::size_t best = n;
  for (std::size_t i = 0; i < n; ++i) {
    if (cfg.is_masked(i)) continue;
    if (best == n || sign * get(i) > sign * get(best)) best = i;
  }
  return best;
}

}  // namespace detail

/// Min-max normalized score map over unmasked pixels (masked pixels are
/// normalized with the same constants).
inline Tensor normalize_score(const HypothesisConfig& cfg, const Tensor& s) {
  detail::check_mask(cfg, s.size());
  auto get = [&](std::size_t i) { return s.data[i]; };
  const auto hi = detail::extreme_index(cfg, s.size(), get, 1);
  if (hi == s.size()) throw Error(ErrorKind::EmptyRoi, "every pixel is masked");
  const auto lo = detail::extreme_index(cfg, s.size(), get, -1);
  const double mn = s.data[lo], mx = s.data[hi];
  if (!(mx > mn)) throw Error(ErrorKind::DegenerateNormalization, "score map is constant; cannot normalize");
  return map_tensor<double>(s, [&](double v) { return (v - mn) / (mx - mn); });
}

/// Score map as reported: post-processed, normalized under use_norm.
inline Tensor score_map(const HypothesisConfig& cfg, const std::vector<Tensor>& inputs,
                        const std::vector<Tensor>& outputs) {
  auto s = post_processed_score(cfg, inputs, outputs);
  return cfg.use_norm ? normalize_score(cfg, s) : s;
}

/// Pixels with score >= tau (linearized under use_norm), excluding masked
/// ones. Does not check for degenerate results.
inline Roi threshold_pixels(const HypothesisConfig& cfg, const Tensor& score, double tau) {
  const auto n = score.size();
  detail::check_mask(cfg, n);
  Roi r;
  r.n = static_cast<std::int64_t>(n);
  double cut = tau;
  if (cfg.use_norm) {
    auto get = [&](std::size_t i) { return score.data[i]; };
    const auto hi = detail::extreme_index(cfg, n, get, 1);
    if (hi == n) return r;
    const auto lo = detail::extreme_index(cfg, n, get, -1);
    cut = score.data[lo] + tau * (score.data[hi] - score.data[lo]);
  }
  for (std::size_t i = 0; i < n; ++i)
    if (!cfg.is_masked(i) && score.data[i] >= cut) r.pixels.push_back(static_cast<std::int64_t>(i));
  return r;
}

inline std::size_t unmasked_count(const HypothesisConfig& cfg, std::size_t n) {
  std::size_t c = 0;
  for (std::size_t i = 0; i < n; ++i) c += !cfg.is_masked(i);
  return c;
}

/// ROI of a post-processed (unnormalized) score; rejects empty and full ROIs.
inline Roi extract_roi(const HypothesisConfig& cfg, const Tensor& score, double tau) {
  if (cfg.use_norm) normalize_score(cfg, score);
  auto r = threshold_pixels(cfg, score, tau);
  if (r.pixels.empty()) throw Error(ErrorKind::EmptyRoi, "no pixel reaches the threshold");
  if (r.pixels.size() == unmasked_count(cfg, score.size()))
    throw Error(ErrorKind::FullRoi, "every unmasked pixel reaches the threshold");
  return r;
}

/// Unmasked pixels within Chebyshev distance r of the ROI in the same
/// (H, W) plane, excluding the ROI itself.
inline std::vector<std::int64_t> neighborhood(const HypothesisConfig& cfg, const Roi& roi, const Shape& shape) {
  const auto [H, W] = image_dims(shape);
  const int r = cfg.neighborhood_range;
  if (r < 1) throw Error(ErrorKind::InvalidConfig, "neighborhood_range must be >= 1");
  std::vector<char> mark(static_cast<std::size_t>(roi.n), 0);
  for (auto p : roi.pixels) {
    const auto plane = p / (H * W), h = (p % (H * W)) / W, w = p % W;
    for (auto hh = std::max<std::int64_t>(0, h - r); hh <= std::min<std::int64_t>(H - 1, h + r); ++hh)
      for (auto ww = std::max<std::int64_t>(0, w - r); ww <= std::min<std::int64_t>(W - 1, w + r); ++ww)
        mark[static_cast<std::size_t>(plane * H * W + hh * W + ww)] = 1;
  }
  std::vector<std::int64_t> out;
  for (std::int64_t i = 0; i < roi.n; ++i)
    if (mark[i] && !roi.contains(i) && !cfg.is_masked(i)) out.push_back(i);
  if (out.empty()) throw Error(ErrorKind::EmptyNeighborhood, "ROI neighborhood is empty");
  return out;
}

/// Pixels the ROI is compared against: the neighborhood for
/// NeighborMeanDiff, otherwise the unmasked complement.
inline std::vector<std::int64_t> non_roi(const HypothesisConfig& cfg, const Roi& roi, const Shape& shape) {
  if (cfg.preset == Preset::NeighborMeanDiff) return neighborhood(cfg, roi, shape);
  std::vector<std::int64_t> out;
  for (std::int64_t i = 0; i < roi.n; ++i)
    if (!roi.contains(i) && !cfg.is_masked(i)) out.push_back(i);
  return out;
}

/// Test direction; length 2n (test block, then reference block) for
/// ReferenceMeanDiff.
inline std::vector<double> build_eta(const HypothesisConfig& cfg, const Roi& roi, const Shape& shape) {
  if (roi.pixels.empty()) throw Error(ErrorKind::EmptyRoi, "ROI is empty");
  const auto n = static_cast<std::size_t>(roi.n);
  const double in = 1.0 / static_cast<double>(roi.pixels.size());
  if (cfg.preset == Preset::ReferenceMeanDiff) {
    std::vector<double> eta(2 * n, 0.0);
    for (auto p : roi.pixels) {
      eta[p] = in;
      eta[n + p] = -in;
    }
    return eta;
  }
  const auto other = non_roi(cfg, roi, shape);
  if (other.empty()) throw Error(ErrorKind::FullRoi, "ROI covers every unmasked pixel");
  std::vector<double> eta(n, 0.0);
  const double out = 1.0 / static_cast<double>(other.size());
  for (auto p : roi.pixels) eta[p] = in;
  for (auto p : other) eta[p] = -out;
  return eta;
}

// ---------------------------------------------------------------------------
// Selection along the line

struct Selection {
  Interval interval;
  Roi roi;
};

/// ROI realized at z by an affine score, together with the sub-interval of
/// `base` around z on which every unmasked pixel keeps its status. Under
/// use_norm the argmax/argmin identities are held fixed as well.
inline Selection selection_constraints(const HypothesisConfig& cfg, const ParamTensor& score, double z, double tau,
                                       Interval base = {}) {
  const auto n = score.size();
  detail::check_mask(cfg, n);
  Selection sel;
  sel.roi.n = static_cast<std::int64_t>(n);
  Interval& iv = sel.interval;
  iv = base;

  Affine cut(tau);
  if (cfg.use_norm) {
    auto get = [&](std::size_t i) { return score.data[i].at(z); };
    const auto hi = detail::extreme_index(cfg, n, get, 1);
    if (hi == n) throw Error(ErrorKind::EmptyRoi, "every pixel is masked");
    const auto lo = detail::extreme_index(cfg, n, get, -1);
    for (std::size_t j = 0; j < n; ++j) {
      if (cfg.is_masked(j)) continue;
      // score[hi] >= score[j] and score[j] >= score[lo].
      const Affine up = score.data[hi] - score.data[j];
      const Affine down = score.data[j] - score.data[lo];
      for (const Affine& d : {up, down}) {
        if (d.b > 0.0)
          iv.raise_lo(-d.a / d.b);
        else if (d.b < 0.0)
          iv.lower_hi(-d.a / d.b);
      }
    }
    cut = score.data[lo] * (1.0 - tau) + score.data[hi] * tau;
  }

  for (std::size_t i = 0; i < n; ++i) {
    if (cfg.is_masked(i)) continue;
    const Affine d = score.data[i] - cut;
    const bool in = d.at(z) >= 0.0;
    if (in) sel.roi.pixels.push_back(static_cast<std::int64_t>(i));
    if (d.b != 0.0) {
      const double root = -d.a / d.b;
      if (in == (d.b > 0.0))
        iv.raise_lo(root);
      else
        iv.lower_hi(root);
    }
  }
  require_nonempty(iv, "selection_constraints");
  return sel;
}

}  // namespace siglass
