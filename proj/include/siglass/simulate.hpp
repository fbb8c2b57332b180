#pragma once

// Monte-Carlo studies over synthetic images: per-trial p-values and the
// summaries used for uniformity and power checks.

#include <algorithm>
#include <atomic>
#include <cmath>
#include <cstdint>
#include <exception>
#include <mutex>
#include <optional>
#include <string>
#include <thread>
#include <vector>

#include "siglass/inference.hpp"
#include "siglass/synthdata.hpp"

namespace siglass {

/// One-sample Kolmogorov-Smirnov statistic against Uniform(0, 1).
inline double ks_statistic_uniform(std::vector<double> p) {
  if (p.empty()) return 0.0;
  std::sort(p.begin(), p.end());
  const double n = static_cast<double>(p.size());
  double d = 0.0;
  for (std::size_t i = 0; i < p.size(); ++i) {
    const double u = std::clamp(p[i], 0.0, 1.0);
    d = std::max({d, (static_cast<double>(i) + 1.0) / n - u, u - static_cast<double>(i) / n});
  }
  return d;
}

/// Asymptotic Kolmogorov tail with Stephens' small-sample correction.
inline double ks_pvalue(double d, std::size_t n) {
  if (n == 0) return 1.0;
  const double sn = std::sqrt(static_cast<double>(n));
  const double lambda = (sn + 0.12 + 0.11 / sn) * d;
  if (lambda < 1e-3) return 1.0;
  double sum = 0.0;
  for (int k = 1; k <= 100; ++k) {
    const double term = std::exp(-2.0 * k * k * lambda * lambda);
    sum += (k % 2 ? 1.0 : -1.0) * term;
    if (term < 1e-17) break;
  }
  return std::clamp(2.0 * sum, 0.0, 1.0);
}

inline constexpr double kAlphas[] = {0.01, 0.05, 0.1};

struct PValueSummary {
  std::size_t count = 0;
  std::vector<double> rejection_rates;  // one per kAlphas entry
  double ks_statistic = 0.0;
  double ks_pvalue = 1.0;
  std::vector<double> sorted;

  double rejection_rate(double alpha) const {
    if (sorted.empty()) return 0.0;
    const auto k = std::count_if(sorted.begin(), sorted.end(), [alpha](double p) { return p <= alpha; });
    return static_cast<double>(k) / static_cast<double>(sorted.size());
  }

  static PValueSummary of(std::vector<double> p) {
    PValueSummary s;
    std::sort(p.begin(), p.end());
    s.count = p.size();
    s.sorted = std::move(p);
    for (double a : kAlphas) s.rejection_rates.push_back(s.rejection_rate(a));
    s.ks_statistic = ks_statistic_uniform(s.sorted);
    s.ks_pvalue = siglass::ks_pvalue(s.ks_statistic, s.count);
    return s;
  }

  Json to_json() const {
    Json rates = Json::object();
    for (std::size_t i = 0; i < rejection_rates.size(); ++i) rates[std::to_string(kAlphas[i])] = rejection_rates[i];
    return {{"count", count}, {"rejection_rates", rates}, {"ks_statistic", ks_statistic},
            {"ks_pvalue", ks_pvalue}, {"sorted", sorted}};
  }
};

struct SimulationConfig {
  HypothesisConfig hypothesis;
  InferenceOptions options;
  /// Image stream; n_samples is the trial count and scale^2 the noise variance.
  SynthSpec data;
  double log_num_comparisons = 0.0;
  unsigned jobs = 1;
};

struct TrialRecord {
  std::uint64_t index = 0;
  bool degenerate = false;
  std::string degenerate_reason;
  double p_selective = 1.0;
  double p_naive = 1.0;
  double p_bonferroni = 1.0;
  std::uint64_t intervals_visited = 0;
};

struct SimulationReport {
  std::vector<TrialRecord> trials;
  std::size_t degenerate = 0;
  PValueSummary selective, naive, bonferroni;

  Json to_json() const {
    Json t = Json::array();
    for (const auto& r : trials) {
      Json j{{"index", r.index}, {"degenerate", r.degenerate}};
      if (r.degenerate) {
        j["reason"] = r.degenerate_reason;
      } else {
        j["p_selective"] = r.p_selective;
        j["p_naive"] = r.p_naive;
        j["p_bonferroni"] = r.p_bonferroni;
        j["intervals_visited"] = r.intervals_visited;
      }
      t.push_back(std::move(j));
    }
    return {{"trials", t},
            {"degenerate", degenerate},
            {"summary",
             {{"selective", selective.to_json()}, {"naive", naive.to_json()}, {"bonferroni", bonferroni.to_json()}}}};
  }
};

namespace detail {

/// Reference images use a separate stream so they never coincide with a
/// test image of another trial.
inline SynthSpec reference_stream(const SynthSpec& data) {
  SynthSpec ref = data;
  ref.local_signal = 0.0;
  std::uint64_t s = data.seed ^ 0x5eed5eed5eed5eedULL;
  ref.seed = splitmix64(s);
  return ref;
}

}  // namespace detail

inline TrialRecord run_trial(const ModelGraph& graph, const SimulationConfig& cfg, std::uint64_t index) {
  TrialRecord r;
  r.index = index;
  const auto sample = generate_sample(cfg.data, index);
  std::optional<Tensor> reference;
  if (cfg.hypothesis.preset == Preset::ReferenceMeanDiff)
    reference = generate_sample(detail::reference_stream(cfg.data), index).image;
  const auto cov = Covariance::scalar(cfg.data.scale * cfg.data.scale);
  try {
    const auto res = inference(graph, cfg.hypothesis, {sample.image}, cov, cfg.options, reference);
    r.p_selective = res.p_value;
    r.p_naive = res.naive_p_value;
    r.p_bonferroni = res.bonferroni_p_value(cfg.log_num_comparisons);
    r.intervals_visited = res.diagnostics.intervals_visited;
  } catch (const Error& e) {
    if (!is_degenerate(e.kind())) throw;
    r.degenerate = true;
    r.degenerate_reason = to_string(e.kind());
  }
  return r;
}

/// Runs every trial of `cfg.data`; records are ordered by trial index.
/// Degenerate trials are kept in the record list and counted, and excluded
/// from the summaries. Any other error aborts the run.
inline SimulationReport run_simulation(const ModelGraph& graph, const SimulationConfig& cfg) {
  cfg.data.validate();
  if (cfg.data.n_samples < 1) throw Error(ErrorKind::InvalidConfig, "trials must be >= 1");
  if (graph.inputs.size() != 1) throw Error(ErrorKind::InvalidConfig, "simulation needs a single-input model");
  const auto n = static_cast<std::size_t>(cfg.data.n_samples);
  SimulationReport rep;
  rep.trials.resize(n);

  std::atomic<std::size_t> next{0};
  std::exception_ptr failure;
  std::mutex failure_mu;
  auto worker = [&] {
    while (true) {
      const auto i = next.fetch_add(1);
      if (i >= n) return;
      try {
        rep.trials[i] = run_trial(graph, cfg, i);
      } catch (...) {
        std::lock_guard lock(failure_mu);
        if (!failure) failure = std::current_exception();
        next = n;
        return;
      }
    }
  };
  const unsigned jobs = std::max(1u, std::min<unsigned>(cfg.jobs, static_cast<unsigned>(n)));
  if (jobs == 1) {
    worker();
  } else {
    std::vector<std::thread> pool;
    for (unsigned j = 0; j < jobs; ++j) pool.emplace_back(worker);
    for (auto& t : pool) t.join();
  }
  if (failure) std::rethrow_exception(failure);

  std::vector<double> sel, nai, bon;
  for (const auto& r : rep.trials) {
    if (r.degenerate) {
      ++rep.degenerate;
      continue;
    }
    sel.push_back(r.p_selective);
    nai.push_back(r.p_naive);
    bon.push_back(r.p_bonferroni);
  }
  rep.selective = PValueSummary::of(std::move(sel));
  rep.naive = PValueSummary::of(std::move(nai));
  rep.bonferroni = PValueSummary::of(std::move(bon));
  return rep;
}

}  // namespace siglass
