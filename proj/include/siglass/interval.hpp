#pragma once

#include <algorithm>
#include <cmath>
#include <limits>
#include <string>
#include <vector>

#include "siglass/error.hpp"

namespace siglass {

inline constexpr double kInf = std::numeric_limits<double>::infinity();

/// Closed segment of the search line. Endpoints may be infinite.
struct Interval {
  double lo = -kInf;
  double hi = kInf;

  static Interval whole() { return {}; }

  bool contains(double z) const noexcept { return lo <= z && z <= hi; }
  bool interior_contains(double z) const noexcept { return lo < z && z < hi; }
  double width() const noexcept { return hi - lo; }
  bool is_whole() const noexcept { return lo == -kInf && hi == kInf; }

  /// Tightens the lower end; keeps the tighter of the two bounds.
  void raise_lo(double v) noexcept { lo = std::max(lo, v); }
  void lower_hi(double v) noexcept { hi = std::min(hi, v); }

  friend bool operator==(const Interval&, const Interval&) = default;
};

inline Interval intersect(const Interval& x, const Interval& y) {
  return {std::max(x.lo, y.lo), std::min(x.hi, y.hi)};
}

/// Raises InternalInconsistency when floating error produced an empty
/// intersection; intersections are never fuzzed.
inline void require_nonempty(const Interval& iv, const char* where) {
  if (!(iv.lo <= iv.hi)) {
    throw Error(ErrorKind::InternalInconsistency,
                std::string(where) + ": empty interval [" + std::to_string(iv.lo) + ", " +
                    std::to_string(iv.hi) + "]");
  }
}

/// Sorted, pairwise-disjoint union of closed segments.
class IntervalUnion {
 public:
  IntervalUnion() = default;
  explicit IntervalUnion(Interval iv) { add(iv); }

  /// Adds a segment, merging with anything it overlaps or touches within
  /// `merge_gap`.
  void add(Interval iv, double merge_gap = 0.0) {
    if (!(iv.lo <= iv.hi)) return;
    std::vector<Interval> out;
    out.reserve(segments_.size() + 1);
    bool placed = false;
    for (const auto& s : segments_) {
      if (s.hi + merge_gap < iv.lo) {
        out.push_back(s);
      } else if (iv.hi + merge_gap < s.lo) {
        if (!placed) {
          out.push_back(iv);
          placed = true;
        }
        out.push_back(s);
      } else {
        iv.lo = std::min(iv.lo, s.lo);
        iv.hi = std::max(iv.hi, s.hi);
      }
    }
    if (!placed) out.push_back(iv);
    segments_ = std::move(out);
  }

  const std::vector<Interval>& segments() const noexcept { return segments_; }
  bool empty() const noexcept { return segments_.empty(); }
  std::size_t size() const noexcept { return segments_.size(); }

  bool contains(double z) const noexcept {
    return std::any_of(segments_.begin(), segments_.end(),
                       [z](const Interval& s) { return s.contains(z); });
  }

  /// True when `iv` lies inside a single segment.
  bool covers(const Interval& iv) const noexcept {
    return std::any_of(segments_.begin(), segments_.end(),
                       [&](const Interval& s) { return s.lo <= iv.lo && iv.hi <= s.hi; });
  }

  friend bool operator==(const IntervalUnion&, const IntervalUnion&) = default;

 private:
  std::vector<Interval> segments_;
};

}  // namespace siglass
