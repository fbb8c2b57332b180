#include <gtest/gtest.h>

#include <cmath>
#include <numbers>
#include <random>

#include "siglass/inference.hpp"
#include "support/grid_oracle.hpp"
#include "support/nets.hpp"

using namespace siglass;
using test_nets::NetBuilder;
using test_nets::random_tensor;

namespace {

ErrorKind kind_of(const std::function<void()>& f) {
  try {
    f();
  } catch (const Error& e) {
    return e.kind();
  }
  ADD_FAILURE() << "no error raised";
  return ErrorKind::InternalInconsistency;
}

double dot(const std::vector<double>& u, const std::vector<double>& v) {
  double s = 0.0;
  for (std::size_t i = 0; i < u.size(); ++i) s += u[i] * v[i];
  return s;
}

ModelGraph relu_identity(const Shape& shape) {
  Json doc{{"ir_version", 1},
           {"inputs", Json::array({{{"name", "x"}, {"shape", shape}}})},
           {"outputs", Json::array({{{"name", "y"}}})},
           {"initializers", Json::array()},
           {"nodes", Json::array({{{"name", "r"}, {"op_type", "Relu"}, {"inputs", {"x"}}, {"outputs", {"y"}}}})}};
  return parse_model(doc);
}

HypothesisConfig config(Preset p = Preset::BackMeanDiff, double tau = 0.5) {
  HypothesisConfig c;
  c.preset = p;
  c.threshold = tau;
  return c;
}

/// Random null image on which inference is not degenerate.
std::optional<InferenceResult> try_inference(const ModelGraph& g, const HypothesisConfig& c, const Tensor& x,
                                             const InferenceOptions& o = {}) {
  try {
    return inference(g, c, {x}, Covariance::scalar(1.0), o);
  } catch (const Error& e) {
    if (is_degenerate(e.kind())) return std::nullopt;
    throw;
  }
}

InferenceOptions oc_options() {
  InferenceOptions o;
  o.mode = Mode::OverConditioning;
  return o;
}

}  // namespace

TEST(LineParams, UnitDirection) {
  const auto l = line_params({3, 5}, {1, 0}, Covariance::scalar(1));
  EXPECT_EQ(l.b, (std::vector<double>{1, 0}));
  EXPECT_EQ(l.a, (std::vector<double>{0, 5}));
  EXPECT_EQ(l.z_obs, 3);
  EXPECT_EQ(l.sigma_eta, 1);
}

TEST(LineParams, DiagonalCovariance) {
  const auto l = line_params({0.3, -2}, {1, 1}, Covariance::diagonal({1, 4}));
  EXPECT_NEAR(l.b[0], 0.2, 1e-15);
  EXPECT_NEAR(l.b[1], 0.8, 1e-15);
  EXPECT_NEAR(l.sigma_eta, std::sqrt(5.0), 1e-15);
}

TEST(LineParams, Invariants) {
  std::mt19937_64 rng(3);
  Eigen::MatrixXd m = Eigen::MatrixXd::Random(6, 6);
  const auto cov = Covariance::full(m * m.transpose() + Eigen::MatrixXd::Identity(6, 6));
  for (int t = 0; t < 20; ++t) {
    const auto x = random_tensor({6}, rng).data;
    const auto eta = random_tensor({6}, rng).data;
    const auto l = line_params(x, eta, cov);
    double xn = 0;
    for (double v : x) xn += v * v;
    for (std::size_t i = 0; i < 6; ++i) EXPECT_NEAR(l.a[i] + l.b[i] * l.z_obs, x[i], 1e-10 * (1 + std::abs(x[i])));
    EXPECT_NEAR(dot(eta, l.b), 1.0, 1e-10);
    EXPECT_NEAR(dot(eta, l.a), 0.0, 1e-10 * std::sqrt(xn));
  }
}

TEST(Covariance, Validation) {
  EXPECT_THROW(Covariance::scalar(0), Error);
  EXPECT_THROW(Covariance::diagonal({1, -1}), Error);
  Eigen::MatrixXd asym(2, 2);
  asym << 1, 0.5, 0.4, 1;
  EXPECT_EQ(kind_of([&] { Covariance::full(asym); }), ErrorKind::SingularCovariance);
  Eigen::MatrixXd singular(2, 2);
  singular << 1, 1, 1, 1;
  EXPECT_EQ(kind_of([&] { Covariance::full(singular); }), ErrorKind::SingularCovariance);
  EXPECT_EQ(kind_of([] { line_params({1, 2}, {1, 2, 3}, Covariance::scalar(1)); }), ErrorKind::ShapeMismatch);
  EXPECT_EQ(kind_of([] { line_params({1, 2}, {0, 0}, Covariance::scalar(1)); }), ErrorKind::SingularCovariance);
}

TEST(Naive, CenterIsOne) { EXPECT_EQ(log_two_sided_normal_p(0, 2), 0.0); }

TEST(Bonferroni, SaturatesAtOne) {
  InferenceResult r;
  r.naive_p_value = 0.0928;
  r.log_naive_p_value = std::log(0.0928);
  EXPECT_EQ(r.bonferroni_p_value(256 * std::numbers::ln2), 1.0);
  EXPECT_NEAR(r.bonferroni_p_value(std::log(2.0)), 0.1856, 1e-15);
  r.log_naive_p_value = -600;
  EXPECT_NEAR(r.bonferroni_p_value(64 * std::numbers::ln2) / std::exp(-600 + 64 * std::numbers::ln2), 1.0, 1e-12);
  EXPECT_GE(r.bonferroni_p_value(0.0), std::exp(-600.0));
}

// Identity scores: ROI {0} survives exactly while x0 >= tau and x1 < tau.
TEST(OcRegion, IdentityModelCrossings) {
  const auto g = relu_identity({1, 1, 1, 2});
  auto c = config(Preset::BackMeanDiff, 0.5);
  const auto res = inference(g, c, {Tensor({1, 1, 1, 2}, {2, -1})}, Covariance::scalar(1),
                             oc_options());
  EXPECT_EQ(res.roi.pixels, std::vector<std::int64_t>{0});
  EXPECT_DOUBLE_EQ(res.z_obs, 3.0);
  // x(z) = (0.5 + z/2, 0.5 - z/2); ReLU knots at -1 and 1.
  EXPECT_DOUBLE_EQ(res.oc_interval.lo, 1.0);
  EXPECT_EQ(res.oc_interval.hi, kInf);
}

TEST(ParametricSearch, SingleKnotToy) {
  const auto g = relu_identity({1, 1, 1, 2});
  const auto res = inference(g, config(), {Tensor({1, 1, 1, 2}, {2, -1})}, Covariance::scalar(1));
  ASSERT_EQ(res.truncation_region.size(), 1u);
  const auto seg = res.truncation_region.segments()[0];
  EXPECT_NEAR(seg.lo, 0.0, 1e-12);
  EXPECT_DOUBLE_EQ(seg.hi, 10 * std::sqrt(2.0));
  EXPECT_GE(res.diagnostics.intervals_visited, 3u);
  EXPECT_GE(res.diagnostics.accepted_intervals, 2u);
}

TEST(ParametricSearch, PureLinearModelIsOneSegment) {
  const auto g = NetBuilder({1, 1, 6, 6}, 2).conv(2).conv(1).build();
  std::mt19937_64 rng(1);
  int checked = 0;
  for (int t = 0; t < 10; ++t) {
    const auto r = try_inference(g, config(Preset::BackMeanDiff, 0.0), random_tensor({1, 1, 6, 6}, rng));
    if (!r) continue;
    ++checked;
    ASSERT_EQ(r->truncation_region.size(), 1u);
    EXPECT_EQ(r->truncation_region.segments()[0],
              intersect(r->oc_interval, Interval{r->diagnostics.z_min, r->diagnostics.z_max}));
  }
  EXPECT_GT(checked, 3);
}

// A score independent of the input keeps the ROI on the whole window.
TEST(ParametricSearch, ConstantScoreCoversWindow) {
  std::mt19937_64 rng(4);
  Tensor offset = random_tensor({1, 1, 4, 4}, rng);
  Json c = tensor_to_json(offset);
  c["name"] = "c";
  Json doc{{"ir_version", 1},
           {"inputs", Json::array({{{"name", "x"}, {"shape", {1, 1, 4, 4}}}})},
           {"outputs", Json::array({{{"name", "y"}}})},
           {"initializers", Json::array({c})},
           {"nodes", Json::array({{{"name", "m"}, {"op_type", "MulScalar"}, {"inputs", {"x"}}, {"outputs", {"h"}},
                                   {"attrs", {{"scale", 0.0}}}},
                                  {{"name", "a"}, {"op_type", "Add"}, {"inputs", {"h", "c"}}, {"outputs", {"y"}}}})}};
  const auto g = parse_model(doc);
  const auto r = try_inference(g, config(Preset::BackMeanDiff, 0.0), random_tensor({1, 1, 4, 4}, rng));
  ASSERT_TRUE(r);
  ASSERT_EQ(r->truncation_region.size(), 1u);
  EXPECT_EQ(r->truncation_region.segments()[0], (Interval{r->diagnostics.z_min, r->diagnostics.z_max}));
  EXPECT_NEAR(r->p_value, r->naive_p_value, 1e-3);
}

struct GridCase {
  const char* name;
  Preset preset;
  double tau;
  const char* post;
  bool use_norm;
  bool sigmoid;
};

class GridScan : public ::testing::TestWithParam<GridCase> {};

TEST_P(GridScan, UnionMatchesBruteForce) {
  const auto& gc = GetParam();
  auto c = config(gc.preset, gc.tau);
  c.post_process = parse_post_process_list(gc.post);
  c.use_norm = gc.use_norm;
  int done = 0;
  for (std::uint64_t seed = 0; seed < 40 && done < 2; ++seed) {
    NetBuilder nb({1, 1, 6, 6}, seed + 300);
    nb.conv(2).relu().max_pool_same().conv(1);
    if (gc.sigmoid) nb.sigmoid();
    const auto g = nb.build();
    std::mt19937_64 rng(seed);
    const auto x = random_tensor({1, 1, 6, 6}, rng);
    const auto r = try_inference(g, c, x);
    if (!r) continue;
    ++done;
    const auto rep = oracle::grid_scan(g, c, x, Covariance::scalar(1.0), *r, 1e-3);
    EXPECT_TRUE(rep.ok()) << gc.name << " seed " << seed << ": misclassified " << rep.misclassified
                          << ", transitions " << rep.unmatched_transitions << ", endpoints "
                          << rep.unmatched_endpoints;
    EXPECT_LE(rep.max_endpoint_error, 1e-6);
    EXPECT_TRUE(r->truncation_region.contains(r->z_obs));
  }
  EXPECT_EQ(done, 2);
}

INSTANTIATE_TEST_SUITE_P(
    Configs, GridScan,
    ::testing::Values(GridCase{"back", Preset::BackMeanDiff, 0.3, "", false, false},
                      GridCase{"neighbor", Preset::NeighborMeanDiff, 0.3, "", false, false},
                      GridCase{"abs_gauss", Preset::BackMeanDiff, 0.4, "abs,gaussian:3", false, false},
                      GridCase{"input_diff", Preset::BackMeanDiff, 0.2, "input-diff,neg", false, false},
                      GridCase{"norm", Preset::BackMeanDiff, 0.7, "", true, false},
                      GridCase{"sigmoid", Preset::BackMeanDiff, 0.6, "", false, true}),
    [](const auto& info) { return std::string(info.param.name); });

TEST(Inference, ModesShareStatisticAndNest) {
  const auto g = test_nets::study_scorer();
  std::mt19937_64 rng(12);
  int differ = 0, checked = 0;
  for (int t = 0; t < 15; ++t) {
    const auto x = random_tensor({1, 1, 8, 8}, rng);
    const auto par = try_inference(g, config(), x);
    if (!par) continue;
    const auto oc = try_inference(g, config(), x, oc_options());
    ASSERT_TRUE(oc);
    ++checked;
    EXPECT_EQ(par->roi, oc->roi);
    EXPECT_EQ(par->z_obs, oc->z_obs);
    EXPECT_EQ(par->sigma_eta, oc->sigma_eta);
    EXPECT_EQ(par->oc_interval, oc->oc_interval);
    EXPECT_TRUE(par->truncation_region.covers(
        intersect(oc->oc_interval, Interval{par->diagnostics.z_min, par->diagnostics.z_max})));
    if (par->p_value != oc->p_value) ++differ;
  }
  EXPECT_GT(checked, 5);
  EXPECT_GT(differ, 0);
}

TEST(Inference, MemoizationIsTransparent) {
  const auto g = test_nets::study_scorer();
  std::mt19937_64 rng(13);
  int checked = 0;
  for (int t = 0; t < 10; ++t) {
    const auto x = random_tensor({1, 1, 8, 8}, rng);
    InferenceOptions off;
    off.memoize = false;
    const auto a = try_inference(g, config(), x);
    if (!a) continue;
    const auto b = try_inference(g, config(), x, off);
    ++checked;
    EXPECT_EQ(a->truncation_region, b->truncation_region);
    EXPECT_EQ(a->p_value, b->p_value);
    if (a->diagnostics.intervals_visited > 1) {
      EXPECT_LT(a->diagnostics.node_evaluations, b->diagnostics.node_evaluations);
    }
  }
  EXPECT_GT(checked, 3);
}

TEST(Inference, Deterministic) {
  const auto g = test_nets::study_scorer();
  std::mt19937_64 rng(14);
  const auto x = random_tensor({1, 1, 8, 8}, rng);
  const auto a = try_inference(g, config(), x);
  const auto b = try_inference(g, config(), x);
  ASSERT_TRUE(a && b);
  EXPECT_EQ(a->to_json().dump(), b->to_json().dump());
}

TEST(Inference, ReferenceMeanDiff) {
  const auto g = test_nets::study_scorer();
  std::mt19937_64 rng(15);
  const auto x = random_tensor({1, 1, 8, 8}, rng);
  const auto ref = random_tensor({1, 1, 8, 8}, rng);
  auto c = config(Preset::ReferenceMeanDiff);
  const auto r = inference(g, c, {x}, Covariance::scalar(4.0), {}, ref);
  double want = 0.0;
  for (auto p : r.roi.pixels) want += x.data[p] - ref.data[p];
  want /= static_cast<double>(r.roi.pixels.size());
  EXPECT_NEAR(r.z_obs, want, 1e-12);
  EXPECT_NEAR(r.sigma_eta, std::sqrt(2.0 * 4.0 / static_cast<double>(r.roi.pixels.size())), 1e-12);
  EXPECT_TRUE(r.truncation_region.contains(r.z_obs));
  EXPECT_GE(r.p_value, 0.0);
  EXPECT_LE(r.p_value, 1.0);
  EXPECT_EQ(kind_of([&] { inference(g, c, {x}, Covariance::scalar(1.0)); }), ErrorKind::InvalidConfig);
}

TEST(Inference, DegenerateAndInvalidInputs) {
  const auto g = test_nets::study_scorer();
  Tensor zeros({1, 1, 8, 8});
  EXPECT_TRUE(is_degenerate(kind_of([&] { inference(g, config(Preset::BackMeanDiff, 1e3), {zeros}, Covariance::scalar(1)); })));
  EXPECT_EQ(kind_of([&] { inference(g, config(), {Tensor({1, 1, 4, 4})}, Covariance::scalar(1)); }),
            ErrorKind::ShapeMismatch);
  const auto dense = NetBuilder({1, 1, 4, 4}, 1).dense(3).build();
  EXPECT_EQ(kind_of([&] { inference(dense, config(), {Tensor({1, 1, 4, 4})}, Covariance::scalar(1)); }),
            ErrorKind::ShapeMismatch);
  InferenceOptions bad;
  bad.z_range = -1;
  EXPECT_EQ(kind_of([&] { inference(g, config(), {zeros}, Covariance::scalar(1), bad); }), ErrorKind::InvalidConfig);
}

TEST(Inference, SigmoidRejectsPostProcess) {
  const auto g = NetBuilder({1, 1, 4, 4}, 1).conv(1).sigmoid().build();
  auto c = config();
  c.post_process = parse_post_process_list("abs");
  EXPECT_EQ(kind_of([&] { inference(g, c, {Tensor({1, 1, 4, 4})}, Covariance::scalar(1)); }),
            ErrorKind::InvalidConfig);
}

TEST(Inference, FarObservationExtendsBounds) {
  const auto g = relu_identity({1, 1, 1, 2});
  const auto r = inference(g, config(), {Tensor({1, 1, 1, 2}, {40, -1})}, Covariance::scalar(1));
  EXPECT_TRUE(r.diagnostics.bounds_extended);
  EXPECT_GE(r.diagnostics.z_max, r.z_obs + r.sigma_eta);
  EXPECT_TRUE(r.truncation_region.contains(r.z_obs));
  // x(z) = (19.5 + z/2, 19.5 - z/2): the ROI holds for z > 38.
  ASSERT_EQ(r.truncation_region.size(), 1u);
  EXPECT_NEAR(r.truncation_region.segments()[0].lo, 38.0, 1e-9);
  EXPECT_EQ(r.truncation_region.segments()[0].hi, r.diagnostics.z_max);
  EXPECT_TRUE(std::isfinite(r.log_p_value));
  EXPECT_DOUBLE_EQ(r.p_value, std::exp(r.log_p_value));
}

TEST(Inference, JsonShape) {
  const auto g = relu_identity({1, 1, 1, 2});
  const auto r = inference(g, config(), {Tensor({1, 1, 1, 2}, {2, -1})}, Covariance::scalar(1),
                           oc_options());
  const auto j = r.to_json(64 * std::numbers::ln2, true);
  EXPECT_EQ(j["mode"], "over_conditioning");
  EXPECT_EQ(j["truncation_region"][0][1], "inf");
  EXPECT_EQ(j["diagnostics"]["oc_interval"][1], "inf");
  EXPECT_TRUE(j.contains("bonferroni_p_value"));
  EXPECT_EQ(j["roi"], Json::array({0}));
  EXPECT_EQ(j["non_roi"], Json::array({1}));
  EXPECT_EQ(j["output"][0]["data"].size(), 2u);
}
