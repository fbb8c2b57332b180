// siglass command-line tool: inference, simulation studies, synthetic data,
// model introspection and a plain forward pass.

#include <cmath>
#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <map>
#include <numbers>
#include <optional>
#include <string>
#include <vector>

#include <CLI11.hpp>
#include <spdlog/sinks/stdout_color_sinks.h>
#include <spdlog/spdlog.h>

#include "siglass/inference.hpp"
#include "siglass/simulate.hpp"
#include "siglass/synthdata.hpp"

namespace fs = std::filesystem;
using namespace siglass;

namespace {

constexpr int kExitOk = 0;
constexpr int kExitError = 1;
constexpr int kExitDegenerate = 2;

void setup_logging() {
  auto logger = spdlog::stderr_color_mt("siglass");
  logger->set_pattern("[%l] %v");
  spdlog::set_default_logger(logger);
  const char* env = std::getenv("SIGLASS_LOG");
  spdlog::set_level(env ? spdlog::level::from_str(env) : spdlog::level::warn);
}

void emit(const Json& j, const std::string& out) {
  const auto text = j.dump(2) + "\n";
  if (out.empty() || out == "-") {
    std::cout << text;
  } else {
    write_text_file(out, text);
    spdlog::info("wrote {}", out);
  }
}

/// Flags shared by infer and simulate; each is unset unless given, so that
/// a --config file can supply it instead.
struct HypothesisFlags {
  std::optional<std::string> preset;
  std::optional<double> threshold;
  bool use_norm = false;
  std::optional<std::string> post_process;
  std::optional<int> neighborhood_range;
  std::optional<std::string> mask;
  std::optional<std::size_t> i_idx;
  std::optional<std::size_t> o_idx;

  std::optional<std::string> mode;
  std::optional<double> z_range;
  std::optional<double> epsilon;
  bool no_memo = false;
  std::optional<double> log_num_comparisons;

  void add(CLI::App* app) {
    app->add_option("--hypothesis", preset, "back-mean-diff | neighbor-mean-diff | reference-mean-diff");
    app->add_option("--threshold", threshold, "ROI threshold tau");
    app->add_flag("--use-norm", use_norm, "min-max normalize the score map before thresholding");
    app->add_option("--post-process", post_process, "comma list, e.g. input-diff,abs,gaussian:3:1.0");
    app->add_option("--neighborhood-range", neighborhood_range, "neighbor-mean-diff radius r");
    app->add_option("--mask", mask, "tensor JSON; nonzero pixels are excluded");
    app->add_option("--i-idx", i_idx, "input index for input-diff and the tested input");
    app->add_option("--o-idx", o_idx, "output index of the score map");
    app->add_option("--mode", mode, "parametric | over_conditioning");
    app->add_option("--z-range", z_range, "search half-width in units of sigma_eta");
    app->add_option("--epsilon", epsilon, "sweep step");
    app->add_flag("--no-memo", no_memo, "disable memoization of node intervals");
    app->add_option("--log-num-comparisons", log_num_comparisons, "log of the hypothesis count for Bonferroni");
  }
};

/// Config file values, with paths resolved against the file's directory.
struct ConfigFile {
  Json doc = Json::object();
  fs::path dir = ".";

  static ConfigFile load(const std::optional<std::string>& path) {
    ConfigFile c;
    if (!path) return c;
    c.doc = parse_json_text(read_text_file(*path), *path);
    if (!c.doc.is_object()) throw Error(ErrorKind::InvalidConfig, *path + ": config must be a JSON object");
    c.dir = fs::path(*path).parent_path();
    return c;
  }

  std::string resolve(const std::string& p) const {
    const fs::path q(p);
    return q.is_absolute() || dir.empty() ? p : (dir / q).string();
  }

  const Json* find(const Json& obj, const char* key) const {
    if (!obj.is_object() || !obj.contains(key) || obj.at(key).is_null()) return nullptr;
    return &obj.at(key);
  }
  const Json* find(const char* key) const { return find(doc, key); }
  const Json* hyp(const char* key) const {
    const Json* h = find("hypothesis");
    return h ? find(*h, key) : nullptr;
  }
};

template <class T>
T pick(const std::optional<T>& flag, const Json* cfg, T fallback) {
  if (flag) return *flag;
  if (cfg) return cfg->get<T>();
  return fallback;
}

std::vector<PostProcessSpec> post_process_from_json(const Json& j) {
  if (j.is_string()) return parse_post_process_list(j.get<std::string>());
  std::vector<PostProcessSpec> out;
  for (const auto& item : j) {
    if (item.is_string()) {
      out.push_back(parse_post_process(item.get<std::string>()));
      continue;
    }
    auto p = parse_post_process(item.at("kind").get<std::string>());
    if (item.contains("kernel_size")) p.kernel_size = item.at("kernel_size").get<int>();
    if (item.contains("sigma")) p.sigma = item.at("sigma").get<double>();
    out.push_back(p);
  }
  return out;
}

HypothesisConfig build_hypothesis(const HypothesisFlags& f, const ConfigFile& cfg) {
  HypothesisConfig h;
  h.preset = preset_from_string(pick<std::string>(f.preset, cfg.hyp("preset"), "back-mean-diff"));
  h.threshold = pick<double>(f.threshold, cfg.hyp("threshold"), 0.5);
  h.use_norm = f.use_norm || (cfg.hyp("use_norm") && cfg.hyp("use_norm")->get<bool>());
  if (f.post_process)
    h.post_process = parse_post_process_list(*f.post_process);
  else if (const Json* p = cfg.hyp("post_process"))
    h.post_process = post_process_from_json(*p);
  h.neighborhood_range = pick<int>(f.neighborhood_range, cfg.hyp("neighborhood_range"), 1);
  h.i_idx = pick<std::size_t>(f.i_idx, cfg.hyp("i_idx"), 0);
  h.o_idx = pick<std::size_t>(f.o_idx, cfg.hyp("o_idx"), 0);
  if (f.mask)
    h.mask = read_tensor_file(*f.mask);
  else if (const Json* m = cfg.hyp("mask"))
    h.mask = read_tensor_file(cfg.resolve(m->get<std::string>()));
  h.validate();
  return h;
}

InferenceOptions build_options(const HypothesisFlags& f, const ConfigFile& cfg) {
  InferenceOptions o;
  o.mode = mode_from_string(pick<std::string>(f.mode, cfg.find("mode"), "parametric"));
  o.z_range = pick<double>(f.z_range, cfg.find("z_range"), 10.0);
  if (f.epsilon)
    o.epsilon = *f.epsilon;
  else if (const Json* e = cfg.find("epsilon"))
    o.epsilon = e->get<double>();
  o.memoize = !f.no_memo && !(cfg.find("memoize") && !cfg.find("memoize")->get<bool>());
  o.validate();
  return o;
}

struct CovarianceFlags {
  std::optional<double> var;
  std::optional<std::string> diag;
  std::optional<std::string> matrix;

  void add(CLI::App* app) {
    auto* v = app->add_option("--var", var, "scalar noise variance (default 1)");
    auto* d = app->add_option("--cov-diag", diag, "tensor JSON of per-pixel variances");
    auto* m = app->add_option("--cov-matrix", matrix, "tensor JSON of an (n, n) covariance matrix");
    v->excludes(d)->excludes(m);
    d->excludes(m);
  }
};

Covariance build_covariance(const CovarianceFlags& f, const ConfigFile& cfg) {
  if (f.var) return Covariance::scalar(*f.var);
  if (f.diag) return Covariance::diagonal(read_tensor_file(*f.diag).data);
  auto matrix_from = [](const Tensor& t) {
    if (t.shape.size() != 2 || t.shape[0] != t.shape[1])
      throw Error(ErrorKind::ShapeMismatch, "covariance matrix must be square, got " + shape_string(t.shape));
    const auto n = static_cast<Eigen::Index>(t.shape[0]);
    Eigen::MatrixXd m(n, n);
    for (Eigen::Index i = 0; i < n; ++i)
      for (Eigen::Index j = 0; j < n; ++j) m(i, j) = t.data[static_cast<std::size_t>(i * n + j)];
    return Covariance::full(std::move(m));
  };
  if (f.matrix) return matrix_from(read_tensor_file(*f.matrix));
  if (const Json* c = cfg.find("covariance")) {
    const int forms = c->contains("var") + c->contains("diag") + c->contains("matrix");
    if (forms != 1) throw Error(ErrorKind::InvalidConfig, "covariance needs exactly one of var, diag, matrix");
    if (c->contains("var")) return Covariance::scalar(c->at("var").get<double>());
    if (c->contains("diag")) return Covariance::diagonal(read_tensor_file(cfg.resolve(c->at("diag").get<std::string>())).data);
    return matrix_from(read_tensor_file(cfg.resolve(c->at("matrix").get<std::string>())));
  }
  return Covariance::scalar(1.0);
}

std::string require_path(const std::optional<std::string>& flag, const ConfigFile& cfg, const char* key,
                         const char* flag_name) {
  if (flag) return *flag;
  if (const Json* v = cfg.find(key)) return cfg.resolve(v->get<std::string>());
  throw Error(ErrorKind::InvalidConfig, std::string("missing ") + flag_name);
}

// ---------------------------------------------------------------------------

struct InferArgs {
  std::optional<std::string> config;
  std::optional<std::string> model;
  std::vector<std::string> inputs;
  std::optional<std::string> reference;
  HypothesisFlags hyp;
  CovarianceFlags cov;
  bool include_tensors = false;
  std::string out;
};

int cmd_infer(const InferArgs& a) {
  const auto cfg = ConfigFile::load(a.config);
  const auto graph = load_model_file(require_path(a.model, cfg, "model", "--model"));
  std::vector<std::string> paths = a.inputs;
  if (paths.empty())
    if (const Json* in = cfg.find("inputs"))
      for (const auto& p : *in) paths.push_back(cfg.resolve(p.get<std::string>()));
  if (paths.empty()) throw Error(ErrorKind::InvalidConfig, "missing --input");
  std::vector<Tensor> inputs;
  for (const auto& p : paths) inputs.push_back(read_tensor_file(p));

  const auto h = build_hypothesis(a.hyp, cfg);
  const auto opt = build_options(a.hyp, cfg);
  const auto cov = build_covariance(a.cov, cfg);
  std::optional<Tensor> reference;
  if (a.reference)
    reference = read_tensor_file(*a.reference);
  else if (const Json* r = cfg.find("reference"))
    reference = read_tensor_file(cfg.resolve(r->get<std::string>()));

  spdlog::info("model: {} nodes; preset {}; mode {}", graph.nodes.size(), preset_name(h.preset), mode_name(opt.mode));
  const auto res = inference(graph, h, inputs, cov, opt, reference);
  const auto n = static_cast<double>(inputs.at(h.i_idx).size());
  const double log_m = a.hyp.log_num_comparisons.value_or(
      cfg.find("log_num_comparisons") ? cfg.find("log_num_comparisons")->get<double>() : n * std::numbers::ln2);
  spdlog::info("p = {:.6g} (naive {:.6g}), {} intervals visited", res.p_value, res.naive_p_value,
               res.diagnostics.intervals_visited);
  emit(res.to_json(log_m, a.include_tensors), a.out);
  return kExitOk;
}

struct SimulateArgs {
  std::optional<std::string> config;
  std::optional<std::string> model;
  HypothesisFlags hyp;
  std::optional<double> var;
  std::int64_t trials = 500;
  double signal = 0.0;
  std::uint64_t seed = 0;
  std::optional<std::int64_t> local_size;
  unsigned jobs = 1;
  bool no_trials = false;
  std::string out;
};

int cmd_simulate(const SimulateArgs& a) {
  const auto cfg = ConfigFile::load(a.config);
  const auto graph = load_model_file(require_path(a.model, cfg, "model", "--model"));
  if (graph.inputs.size() != 1) throw Error(ErrorKind::InvalidConfig, "simulate needs a single-input model");
  const auto& shape = graph.inputs[0].shape;
  if (shape.size() != 4 || shape[0] != 1)
    throw Error(ErrorKind::InvalidConfig, "simulate needs a (1, C, H, W) model input, got " + shape_string(shape));

  SimulationConfig sc;
  sc.hypothesis = build_hypothesis(a.hyp, cfg);
  sc.options = build_options(a.hyp, cfg);
  sc.data.n_samples = a.trials;
  sc.data.channels = shape[1];
  sc.data.height = shape[2];
  sc.data.width = shape[3];
  sc.data.local_signal = a.signal;
  sc.data.local_size = a.local_size;
  sc.data.seed = a.seed;
  const double var = a.var.value_or(cfg.find("covariance") && cfg.find("covariance")->contains("var")
                                        ? cfg.find("covariance")->at("var").get<double>()
                                        : 1.0);
  if (!(var > 0.0)) throw Error(ErrorKind::InvalidConfig, "--var must be positive");
  sc.data.scale = std::sqrt(var);
  sc.log_num_comparisons =
      a.hyp.log_num_comparisons.value_or(static_cast<double>(numel(shape)) * std::numbers::ln2);
  sc.jobs = a.jobs;

  spdlog::info("simulating {} trials, signal {}, seed {}", a.trials, a.signal, a.seed);
  const auto rep = run_simulation(graph, sc);
  auto j = rep.to_json();
  if (a.no_trials) j.erase("trials");
  j["config"] = {{"trials", a.trials},
                 {"signal", a.signal},
                 {"seed", a.seed},
                 {"var", var},
                 {"preset", preset_name(sc.hypothesis.preset)},
                 {"threshold", sc.hypothesis.threshold},
                 {"mode", mode_name(sc.options.mode)},
                 {"log_num_comparisons", sc.log_num_comparisons}};
  spdlog::info("selective rejection at 0.05: {:.3f}, naive {:.3f}, degenerate {}", rep.selective.rejection_rate(0.05),
               rep.naive.rejection_rate(0.05), rep.degenerate);
  emit(j, a.out);
  return kExitOk;
}

struct DatagenArgs {
  SynthSpec spec;
  std::optional<std::int64_t> local_size;
  std::string out;
};

int cmd_datagen(DatagenArgs a) {
  a.spec.local_size = a.local_size;
  const auto samples = generate(a.spec);
  fs::create_directories(a.out);
  Json index = Json::array();
  for (std::size_t i = 0; i < samples.size(); ++i) {
    char stem[32];
    std::snprintf(stem, sizeof stem, "sample_%05zu", i);
    const std::string image = std::string(stem) + ".json";
    const std::string mask = std::string(stem) + "_mask.json";
    write_tensor_file((fs::path(a.out) / image).string(), samples[i].image, true);
    write_tensor_file((fs::path(a.out) / mask).string(), samples[i].mask, true);
    index.push_back({{"image", image}, {"mask", mask}, {"label", samples[i].label}});
  }
  const auto& s = a.spec;
  Json meta{{"spec",
             {{"n_samples", s.n_samples},
              {"shape", {s.channels, s.height, s.width}},
              {"loc", s.loc},
              {"scale", s.scale},
              {"local_signal", s.local_signal},
              {"local_size", s.square_size()},
              {"seed", s.seed}}},
            {"samples", index}};
  write_text_file((fs::path(a.out) / "labels.json").string(), meta.dump(2) + "\n");
  std::cout << "wrote " << samples.size() << " samples to " << a.out << "\n";
  return kExitOk;
}

int cmd_model_info(const std::string& path, bool as_json) {
  const auto doc = parse_json_text(read_text_file(path), path);
  if (!doc.is_object() || !doc.contains("nodes") || !doc.at("nodes").is_array())
    throw Error(ErrorKind::MalformedDocument, path + ": no node list");

  std::map<std::string, int> histogram;
  for (const auto& n : doc.at("nodes")) histogram[n.value("op_type", std::string("?"))]++;

  Json info;
  info["nodes"] = doc.at("nodes").size();
  info["operators"] = histogram;
  std::vector<std::string> offending;
  std::string reason;
  try {
    const auto g = parse_model(doc);
    auto sig = [&](const std::vector<ValueInfo>& v) {
      Json a = Json::array();
      for (const auto& x : v) a.push_back({{"name", x.name}, {"shape", g.shape_of(x.name)}});
      return a;
    };
    info["inputs"] = sig(g.inputs);
    info["outputs"] = sig(g.outputs);
    info["verdict"] = "supported";
  } catch (const Error& e) {
    if (e.kind() != ErrorKind::UnsupportedOperator) throw;
    offending = e.subjects();
    reason = e.what();
    info["verdict"] = "unsupported";
    info["offending_nodes"] = offending;
    info["reason"] = reason;
  }

  if (as_json) {
    std::cout << info.dump(2) << "\n";
    return kExitOk;
  }
  std::cout << "nodes: " << info["nodes"].get<std::size_t>() << "\n";
  std::cout << "operators:\n";
  for (const auto& [op, count] : histogram) std::cout << "  " << op << ": " << count << "\n";
  if (info.contains("inputs")) {
    for (const char* key : {"inputs", "outputs"}) {
      std::cout << key << ":\n";
      for (const auto& v : info[key]) std::cout << "  " << v["name"].get<std::string>() << " " << v["shape"].dump() << "\n";
    }
  }
  std::cout << "verdict: " << info["verdict"].get<std::string>();
  if (!offending.empty()) {
    std::cout << " (";
    for (std::size_t i = 0; i < offending.size(); ++i) std::cout << (i ? ", " : "") << offending[i];
    std::cout << ")";
  }
  std::cout << "\n";
  return kExitOk;
}

struct ForwardArgs {
  std::string model;
  std::vector<std::string> inputs;
  bool strip_sigmoid = false;
  bool plain = false;
  std::string out;
};

int cmd_forward(const ForwardArgs& a) {
  const auto g = load_model_file(a.model);
  std::vector<Tensor> inputs;
  for (const auto& p : a.inputs) inputs.push_back(read_tensor_file(p));
  ForwardOptions o;
  o.strip_terminal_sigmoid = a.strip_sigmoid;
  const auto outs = forward(g, inputs, o);
  Json j = Json::array();
  for (std::size_t k = 0; k < outs.size(); ++k) {
    Json t = tensor_to_json(outs[k], !a.plain);
    t["name"] = g.outputs[k].name;
    j.push_back(t);
  }
  emit({{"outputs", j}}, a.out);
  return kExitOk;
}

}  // namespace

int main(int argc, char** argv) {
  setup_logging();
  CLI::App app{"Selective inference for thresholded saliency maps of piecewise-linear networks"};
  app.require_subcommand(1);

  InferArgs infer;
  auto* ci = app.add_subcommand("infer", "p-values for the ROI a model selects in an image");
  ci->add_option("--config", infer.config, "JSON run config; flags override it");
  ci->add_option("--model", infer.model, "IR model JSON");
  ci->add_option("--input", infer.inputs, "input tensor JSON (repeat for multi-input models)");
  ci->add_option("--reference", infer.reference, "reference image for reference-mean-diff");
  infer.hyp.add(ci);
  infer.cov.add(ci);
  ci->add_flag("--include-tensors", infer.include_tensors, "also write the score map and outputs");
  ci->add_option("--out", infer.out, "result path (default stdout)");

  SimulateArgs sim;
  auto* cs = app.add_subcommand("simulate", "null or alternative Monte-Carlo study on synthetic images");
  cs->add_option("--config", sim.config, "JSON run config; flags override it");
  cs->add_option("--model", sim.model, "IR model JSON with one (1, C, H, W) input");
  sim.hyp.add(cs);
  cs->add_option("--var", sim.var, "noise variance (default 1)");
  cs->add_option("--trials", sim.trials, "number of trials")->capture_default_str();
  cs->add_option("--signal", sim.signal, "local_signal added on the square (0 = null)")->capture_default_str();
  cs->add_option("--seed", sim.seed, "stream seed")->capture_default_str();
  cs->add_option("--local-size", sim.local_size, "square side (default min(H, W) / 3)");
  cs->add_option("--jobs", sim.jobs, "worker threads")->capture_default_str();
  cs->add_flag("--summary-only", sim.no_trials, "omit per-trial records");
  cs->add_option("--out", sim.out, "result path (default stdout)");

  DatagenArgs gen;
  auto* cd = app.add_subcommand("datagen", "write synthetic images, masks and labels");
  cd->add_option("--out", gen.out, "output directory")->required();
  cd->add_option("--trials,--n-samples", gen.spec.n_samples, "number of samples")->capture_default_str();
  cd->add_option("--channels", gen.spec.channels)->capture_default_str();
  cd->add_option("--height", gen.spec.height)->capture_default_str();
  cd->add_option("--width", gen.spec.width)->capture_default_str();
  cd->add_option("--loc", gen.spec.loc)->capture_default_str();
  cd->add_option("--scale", gen.spec.scale)->capture_default_str();
  cd->add_option("--signal", gen.spec.local_signal)->capture_default_str();
  cd->add_option("--local-size", gen.local_size, "square side (default min(H, W) / 3)");
  cd->add_option("--seed", gen.spec.seed)->capture_default_str();

  std::string info_model;
  bool info_json = false;
  auto* cm = app.add_subcommand("model-info", "node count, operator histogram, signatures, support verdict");
  cm->add_option("model,--model", info_model, "IR model JSON")->required();
  cm->add_flag("--json", info_json, "machine-readable output");

  ForwardArgs fwd;
  auto* cf = app.add_subcommand("forward", "run the model on input tensors");
  cf->add_option("--model", fwd.model, "IR model JSON")->required();
  cf->add_option("--input", fwd.inputs, "input tensor JSON (repeat per input)")->required();
  cf->add_flag("--strip-sigmoid", fwd.strip_sigmoid, "report terminal Sigmoid outputs as logits");
  cf->add_flag("--plain", fwd.plain, "write data arrays instead of data_b64");
  cf->add_option("--out", fwd.out, "result path (default stdout)");

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    return app.exit(e) == 0 ? kExitOk : kExitError;
  }

  try {
    if (*ci) return cmd_infer(infer);
    if (*cs) return cmd_simulate(sim);
    if (*cd) return cmd_datagen(gen);
    if (*cm) return cmd_model_info(info_model, info_json);
    if (*cf) return cmd_forward(fwd);
  } catch (const Error& e) {
    spdlog::error("{}", e.what());
    return is_degenerate(e.kind()) ? kExitDegenerate : kExitError;
  } catch (const Json::exception& e) {
    spdlog::error("bad JSON value: {}", e.what());
    return kExitError;
  } catch (const std::exception& e) {
    spdlog::error("{}", e.what());
    return kExitError;
  }
  return kExitError;
}
