#pragma once

// Reproducible synthetic images: i.i.d. Gaussian pixels with an optional
// shifted square. The generator is xoshiro256++ seeded through SplitMix64,
// normals come from Box-Muller, so streams are identical on every platform.

#include <array>
#include <cmath>
#include <cstdint>
#include <numbers>
#include <optional>
#include <string>
#include <vector>

#include "siglass/error.hpp"
#include "siglass/tensor.hpp"

namespace siglass {

inline std::uint64_t splitmix64(std::uint64_t& state) {
  std::uint64_t z = (state += 0x9e3779b97f4a7c15ULL);
  z = (z ^ (z >> 30)) * 0xbf58476d1ce4e5b9ULL;
  z = (z ^ (z >> 27)) * 0x94d049bb133111ebULL;
  return z ^ (z >> 31);
}

class Xoshiro256pp {
 public:
  using result_type = std::uint64_t;

  explicit Xoshiro256pp(std::uint64_t seed) {
    for (auto& w : s_) w = splitmix64(seed);
  }

  static constexpr result_type min() { return 0; }
  static constexpr result_type max() { return ~result_type{0}; }

  result_type operator()() {
    const std::uint64_t result = rotl(s_[0] + s_[3], 23) + s_[0];
    const std::uint64_t t = s_[1] << 17;
    s_[2] ^= s_[0];
    s_[3] ^= s_[1];
    s_[1] ^= s_[2];
    s_[0] ^= s_[3];
    s_[2] ^= t;
    s_[3] = rotl(s_[3], 45);
    return result;
  }

  /// Uniform in (0, 1], 53-bit resolution.
  double uniform_open0() { return static_cast<double>(((*this)() >> 11) + 1) * 0x1.0p-53; }
  /// Uniform in [0, 1), 53-bit resolution.
  double uniform() { return static_cast<double>((*this)() >> 11) * 0x1.0p-53; }

 private:
  static constexpr std::uint64_t rotl(std::uint64_t x, int k) { return (x << k) | (x >> (64 - k)); }
  std::array<std::uint64_t, 4> s_{};
};

/// Standard normals in Box-Muller pairs (cos branch first).
class BoxMuller {
 public:
  explicit BoxMuller(Xoshiro256pp& rng) : rng_(rng) {}

  double operator()() {
    if (spare_) {
      const double v = *spare_;
      spare_.reset();
      return v;
    }
    const double r = std::sqrt(-2.0 * std::log(rng_.uniform_open0()));
    const double theta = 2.0 * std::numbers::pi * rng_.uniform();
    spare_ = r * std::sin(theta);
    return r * std::cos(theta);
  }

 private:
  Xoshiro256pp& rng_;
  std::optional<double> spare_;
};

struct SynthSpec {
  std::int64_t n_samples = 1;
  std::int64_t channels = 1;
  std::int64_t height = 16;
  std::int64_t width = 16;
  double loc = 0.0;
  double scale = 1.0;
  double local_signal = 0.0;
  /// floor(min(height, width) / 3) when unset.
  std::optional<std::int64_t> local_size;
  std::uint64_t seed = 0;

  std::int64_t square_size() const { return local_size.value_or(std::min(height, width) / 3); }

  void validate() const {
    if (n_samples < 0) throw Error(ErrorKind::InvalidSpec, "n_samples must be >= 0");
    if (channels < 1 || height < 1 || width < 1) throw Error(ErrorKind::InvalidSpec, "shape dims must be positive");
    if (!(scale > 0.0) || !std::isfinite(scale)) throw Error(ErrorKind::InvalidSpec, "scale must be positive");
    if (!std::isfinite(loc) || !std::isfinite(local_signal))
      throw Error(ErrorKind::InvalidSpec, "loc and local_signal must be finite");
    const auto k = square_size();
    if (k < 1 || k > std::min(height, width))
      throw Error(ErrorKind::InvalidSpec, "local_size " + std::to_string(k) + " must lie in [1, min(H, W)]");
  }

  Shape image_shape() const { return {1, channels, height, width}; }
};

struct SynthSample {
  Tensor image;
  /// 1 on the signal square, 0 elsewhere (all zero when there is no signal).
  Tensor mask;
  int label = 0;
};

/// Sample `index` of the stream; independent of every other index.
inline SynthSample generate_sample(const SynthSpec& spec, std::uint64_t index) {
  spec.validate();
  Xoshiro256pp rng(spec.seed + index);
  BoxMuller normal(rng);
  SynthSample s{Tensor(spec.image_shape()), Tensor(spec.image_shape()), spec.local_signal != 0.0 ? 1 : 0};
  for (auto& v : s.image.data) v = spec.loc + spec.scale * normal();

  const auto k = spec.square_size();
  const auto top = static_cast<std::int64_t>(rng() % static_cast<std::uint64_t>(spec.height - k + 1));
  const auto left = static_cast<std::int64_t>(rng() % static_cast<std::uint64_t>(spec.width - k + 1));
  if (s.label) {
    const auto plane = spec.height * spec.width;
    for (std::int64_t c = 0; c < spec.channels; ++c)
      for (auto h = top; h < top + k; ++h)
        for (auto w = left; w < left + k; ++w) {
          const auto i = static_cast<std::size_t>(c * plane + h * spec.width + w);
          s.image.data[i] += spec.local_signal;
          s.mask.data[i] = 1.0;
        }
  }
  return s;
}

inline std::vector<SynthSample> generate(const SynthSpec& spec) {
  spec.validate();
  std::vector<SynthSample> out;
  out.reserve(static_cast<std::size_t>(spec.n_samples));
  for (std::int64_t i = 0; i < spec.n_samples; ++i) out.push_back(generate_sample(spec, static_cast<std::uint64_t>(i)));
  return out;
}

}  // namespace siglass
