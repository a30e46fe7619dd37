#include "ktrace/experiment.hpp"

#include <algorithm>
#include <chrono>
#include <cmath>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <numeric>
#include <set>
#include <sstream>
#include <stdexcept>

#include "json.hpp"

#include "ktrace/baselines.hpp"
#include "ktrace/common.hpp"
#include "ktrace/data.hpp"
#include "ktrace/dynamics.hpp"
#include "ktrace/inference.hpp"
#include "ktrace/parallel.hpp"
#include "ktrace/special.hpp"

namespace ktrace {

using json = nlohmann::json;
namespace fs = std::filesystem;

namespace {

// ---------------------------------------------------------------------------
// Config schema: allowed dotted key paths per command. Unknown keys reject
// with the offending path.
// ---------------------------------------------------------------------------

const std::set<std::string> kCommonKeys = {"seed", "out", "threads"};

const std::set<std::string>& allowed_keys(const std::string& command) {
  static const std::map<std::string, std::set<std::string>> table = {
      {"simulate",
       {"n_learners", "n_kcs", "n_interactions", "embedding_dim", "mean_log_gap",
        "sd_log_gap", "graph.kind", "graph.chain_edges", "graph.existence_scale",
        "graph.coupling_scale", "graph.random_scale", "traits.s_bar", "traits.r1",
        "traits.h", "traits.r", "traits.z_bar", "traits.w1", "graph_threshold"}},
      {"fit",
       {"data", "model", "min_interactions", "train_len", "test_len", "schema.learner_col",
        "schema.kc_col", "schema.time_col", "schema.outcome_col", "schema.timestamps_in_ms",
        "fit.mc_samples", "fit.learning_rate", "fit.grad_clip", "fit.max_epochs",
        "fit.batch_size", "fit.gradient_mode", "fit.learn_theta", "fit.init_logvar",
        "fit.min_interval_seconds", "fit.embedding_dim", "fit.ablation.no_graph",
        "fit.ablation.no_individual", "fit.ablation.no_dynamics", "baseline.max_iters",
        "baseline.learning_rate", "graph_threshold"}},
      {"predict",
       {"data", "model", "checkpoint", "min_interactions", "train_len", "test_len",
        "schema.learner_col", "schema.kc_col", "schema.time_col", "schema.outcome_col",
        "schema.timestamps_in_ms", "predict.mc_samples", "graph_threshold"}},
      {"continual",
       {"data", "model", "checkpoint", "min_interactions", "initial_train_len", "steps",
        "horizon", "schema.learner_col", "schema.kc_col", "schema.time_col",
        "schema.outcome_col", "schema.timestamps_in_ms", "fit.mc_samples",
        "fit.learning_rate", "fit.grad_clip", "fit.max_epochs", "fit.batch_size",
        "fit.gradient_mode", "fit.learn_theta", "fit.init_logvar",
        "fit.min_interval_seconds", "fit.embedding_dim", "fit.ablation.no_graph",
        "fit.ablation.no_individual", "fit.ablation.no_dynamics", "continual.mc_samples",
        "continual.prior_samples", "continual.max_steps", "continual.learning_rate",
        "continual.update_graph", "continual.graph_learning_rate", "predict.mc_samples",
        "baseline.max_iters", "baseline.learning_rate", "baseline.refit_iters"}},
      {"eval-graph",
       {"checkpoint", "annotations", "data", "edge_threshold", "rating_threshold",
        "sigma_floor", "causal.mc_samples", "schema.learner_col", "schema.kc_col",
        "schema.time_col", "schema.outcome_col", "schema.timestamps_in_ms",
        "graph_threshold"}},
      {"eval-traits",
       {"checkpoint", "data", "min_interactions", "train_len", "test_len",
        "schema.learner_col", "schema.kc_col", "schema.time_col", "schema.outcome_col",
        "schema.timestamps_in_ms", "subsets.count", "subsets.length", "ridge",
        "refit.max_epochs", "refit.mc_samples", "predict.mc_samples"}},
      {"report", {"inputs"}},
  };
  auto it = table.find(command);
  if (it == table.end())
    throw std::invalid_argument("unknown command '" + command + "'");
  return it->second;
}

void flatten(const json& node, const std::string& prefix,
             std::map<std::string, std::string>* scalars,
             std::map<std::string, std::vector<std::string>>* arrays) {
  if (node.is_object()) {
    for (const auto& [key, value] : node.items()) {
      const std::string path = prefix.empty() ? key : prefix + "." + key;
      flatten(value, path, scalars, arrays);
    }
  } else if (node.is_array()) {
    std::vector<std::string> items;
    for (const auto& v : node) {
      if (v.is_object() || v.is_array())
        throw std::invalid_argument("config field '" + prefix +
                                    "': nested arrays/objects are not supported");
      items.push_back(v.dump());
    }
    (*arrays)[prefix] = std::move(items);
  } else {
    (*scalars)[prefix] = node.dump();
  }
}

json unflatten(const std::map<std::string, std::string>& scalars,
               const std::map<std::string, std::vector<std::string>>& arrays) {
  json root = json::object();
  auto insert = [&root](const std::string& path, const json& value) {
    json* node = &root;
    std::size_t start = 0;
    while (true) {
      const std::size_t dot = path.find('.', start);
      const std::string key = path.substr(start, dot - start);
      if (dot == std::string::npos) {
        (*node)[key] = value;
        break;
      }
      node = &(*node)[key];
      start = dot + 1;
    }
  };
  for (const auto& [path, text] : scalars) insert(path, json::parse(text));
  for (const auto& [path, items] : arrays) {
    json arr = json::array();
    for (const auto& item : items) arr.push_back(json::parse(item));
    insert(path, arr);
  }
  return root;
}

double parse_number(const std::string& text, const std::string& path) {
  const json v = json::parse(text);
  if (!v.is_number())
    throw std::invalid_argument("config field '" + path + "': expected a number");
  return v.get<double>();
}

}  // namespace

ExperimentConfig ExperimentConfig::from_json_text(const std::string& command,
                                                  const std::string& json_text,
                                                  const std::vector<std::string>& overrides) {
  json root;
  try {
    root = json::parse(json_text);
  } catch (const std::exception& e) {
    throw std::invalid_argument(std::string("config parse error: ") + e.what());
  }
  if (!root.is_object()) throw std::invalid_argument("config root must be an object");

  ExperimentConfig cfg;
  cfg.command_ = command;
  flatten(root, "", &cfg.scalars_, &cfg.arrays_);

  for (const auto& ov : overrides) {
    const std::size_t eq = ov.find('=');
    if (eq == std::string::npos)
      throw std::invalid_argument("override '" + ov + "' is not of the form key=value");
    const std::string key = ov.substr(0, eq);
    const std::string value = ov.substr(eq + 1);
    json parsed;
    try {
      parsed = json::parse(value);
    } catch (const std::exception&) {
      parsed = value;  // bare strings are allowed
    }
    if (parsed.is_array()) {
      std::vector<std::string> items;
      for (const auto& v : parsed) items.push_back(v.dump());
      cfg.arrays_[key] = std::move(items);
      cfg.scalars_.erase(key);
    } else {
      cfg.scalars_[key] = parsed.dump();
      cfg.arrays_.erase(key);
    }
  }

  const auto& allowed = allowed_keys(command);
  for (const auto& [path, _] : cfg.scalars_)
    if (!allowed.count(path) && !kCommonKeys.count(path))
      throw std::invalid_argument("unknown config key '" + path + "' for command '" +
                                  command + "'");
  for (const auto& [path, _] : cfg.arrays_)
    if (!allowed.count(path) && !kCommonKeys.count(path))
      throw std::invalid_argument("unknown config key '" + path + "' for command '" +
                                  command + "'");

  cfg.canonical_ = unflatten(cfg.scalars_, cfg.arrays_).dump();
  return cfg;
}

ExperimentConfig ExperimentConfig::load(const std::string& command,
                                        const std::string& config_path,
                                        const std::vector<std::string>& overrides) {
  std::ifstream in(config_path);
  if (!in) throw std::invalid_argument("cannot open config file: " + config_path);
  std::stringstream buf;
  buf << in.rdbuf();
  return from_json_text(command, buf.str(), overrides);
}

bool ExperimentConfig::has(const std::string& dotted) const {
  return scalars_.count(dotted) > 0 || arrays_.count(dotted) > 0;
}

double ExperimentConfig::number(const std::string& dotted, double fallback) const {
  auto it = scalars_.find(dotted);
  if (it == scalars_.end()) return fallback;
  return parse_number(it->second, dotted);
}

double ExperimentConfig::require_number(const std::string& dotted) const {
  auto it = scalars_.find(dotted);
  if (it == scalars_.end())
    throw std::invalid_argument("missing required config field '" + dotted + "'");
  return parse_number(it->second, dotted);
}

std::int64_t ExperimentConfig::integer(const std::string& dotted, std::int64_t fallback) const {
  const double v = number(dotted, static_cast<double>(fallback));
  return static_cast<std::int64_t>(std::llround(v));
}

bool ExperimentConfig::boolean(const std::string& dotted, bool fallback) const {
  auto it = scalars_.find(dotted);
  if (it == scalars_.end()) return fallback;
  const json v = json::parse(it->second);
  if (!v.is_boolean())
    throw std::invalid_argument("config field '" + dotted + "': expected a boolean");
  return v.get<bool>();
}

std::string ExperimentConfig::text(const std::string& dotted,
                                   const std::string& fallback) const {
  auto it = scalars_.find(dotted);
  if (it == scalars_.end()) return fallback;
  const json v = json::parse(it->second);
  if (!v.is_string())
    throw std::invalid_argument("config field '" + dotted + "': expected a string");
  return v.get<std::string>();
}

std::string ExperimentConfig::require_text(const std::string& dotted) const {
  if (!scalars_.count(dotted))
    throw std::invalid_argument("missing required config field '" + dotted + "'");
  return text(dotted, "");
}

std::vector<double> ExperimentConfig::numbers(const std::string& dotted) const {
  auto it = arrays_.find(dotted);
  if (it == arrays_.end())
    throw std::invalid_argument("missing required config array '" + dotted + "'");
  std::vector<double> out;
  for (const auto& item : it->second) out.push_back(parse_number(item, dotted));
  return out;
}

std::vector<std::string> ExperimentConfig::texts(const std::string& dotted) const {
  auto it = arrays_.find(dotted);
  if (it == arrays_.end())
    throw std::invalid_argument("missing required config array '" + dotted + "'");
  std::vector<std::string> out;
  for (const auto& item : it->second) {
    const json v = json::parse(item);
    if (!v.is_string())
      throw std::invalid_argument("config field '" + dotted + "': expected strings");
    out.push_back(v.get<std::string>());
  }
  return out;
}

std::string ExperimentConfig::hash() const {
  char buf[24];
  std::snprintf(buf, sizeof(buf), "%016llx",
                static_cast<unsigned long long>(hash_name(command_ + ":" + canonical_)));
  return buf;
}

std::string ExperimentConfig::dump() const { return canonical_; }

std::string RunReport::to_json() const {
  json j;
  j["schema"] = "ktrace-report-v1";
  j["command"] = command;
  j["config_hash"] = config_hash;
  j["config"] = json::parse(resolved_config_json);
  j["versions"] = {{"ktrace", "0.1.0"}};
  j["metrics"] = metrics.values;
  j["metric_info"] = metrics.info;
  j["artifacts"] = artifacts;
  return j.dump(2);
}

std::string RunReport::timings_json() const {
  json j;
  j["schema"] = "ktrace-timings-v1";
  j["command"] = command;
  j["config_hash"] = config_hash;
  json phases = json::object();
  for (const auto& [name, secs] : timings.seconds) phases[name] = secs;
  j["phase_seconds"] = phases;
  if (!timings.cumulative_update_seconds.empty())
    j["cumulative_update_seconds"] = timings.cumulative_update_seconds;
  return j.dump(2);
}

// ---------------------------------------------------------------------------
// Shared helpers for the runners.
// ---------------------------------------------------------------------------

namespace {

class Stopwatch {
 public:
  Stopwatch() : start_(std::chrono::steady_clock::now()) {}
  double seconds() const {
    return std::chrono::duration<double>(std::chrono::steady_clock::now() - start_).count();
  }

 private:
  std::chrono::steady_clock::time_point start_;
};

CsvSchema schema_from(const ExperimentConfig& cfg) {
  CsvSchema schema;
  schema.learner_col = cfg.text("schema.learner_col", schema.learner_col);
  schema.kc_col = cfg.text("schema.kc_col", schema.kc_col);
  schema.time_col = cfg.text("schema.time_col", schema.time_col);
  schema.outcome_col = cfg.text("schema.outcome_col", schema.outcome_col);
  schema.timestamps_in_ms = cfg.boolean("schema.timestamps_in_ms", false);
  return schema;
}

FitConfig fit_config_from(const ExperimentConfig& cfg, std::uint64_t top_seed, int threads) {
  FitConfig fc;
  fc.mc_samples = static_cast<int>(cfg.integer("fit.mc_samples", fc.mc_samples));
  fc.learning_rate = cfg.number("fit.learning_rate", fc.learning_rate);
  fc.grad_clip = cfg.number("fit.grad_clip", fc.grad_clip);
  fc.max_epochs = static_cast<int>(cfg.integer("fit.max_epochs", fc.max_epochs));
  fc.batch_size = static_cast<int>(cfg.integer("fit.batch_size", fc.batch_size));
  fc.seed = substream(top_seed, "fit");
  fc.ablation.no_graph = cfg.boolean("fit.ablation.no_graph", false);
  fc.ablation.no_individual = cfg.boolean("fit.ablation.no_individual", false);
  fc.ablation.no_dynamics = cfg.boolean("fit.ablation.no_dynamics", false);
  const std::string mode = cfg.text("fit.gradient_mode", "analytic");
  if (mode == "analytic")
    fc.gradient_mode = GradientMode::kAnalytic;
  else if (mode == "finite_difference")
    fc.gradient_mode = GradientMode::kFiniteDifference;
  else
    throw std::invalid_argument("config field 'fit.gradient_mode': expected "
                                "'analytic' or 'finite_difference'");
  fc.learn_theta = cfg.boolean("fit.learn_theta", true);
  fc.init_logvar = cfg.number("fit.init_logvar", fc.init_logvar);
  fc.min_interval_seconds = cfg.number("fit.min_interval_seconds", fc.min_interval_seconds);
  fc.threads = threads;
  return fc;
}

void write_text(const std::string& path, const std::string& text) {
  std::ofstream out(path);
  if (!out) throw std::runtime_error("cannot write " + path);
  out << text;
}

std::string read_text(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw std::invalid_argument("cannot open file: " + path);
  std::stringstream buf;
  buf << in.rdbuf();
  return buf.str();
}

void write_predictions_csv(const std::string& path,
                           const std::vector<std::tuple<std::string, int, std::string,
                                                        double, int>>& rows) {
  std::ofstream out(path);
  if (!out) throw std::runtime_error("cannot write " + path);
  out << "learner_id,step,kc_id,p,y\n";
  char buf[48];
  for (const auto& [learner, step, kc, p, y] : rows) {
    std::snprintf(buf, sizeof(buf), "%.9g", p);
    out << learner << ',' << step << ',' << kc << ',' << buf << ',' << y << '\n';
  }
}

void write_trace_csv(const std::string& path, const char* value_name,
                     const std::vector<double>& trace) {
  std::ofstream out(path);
  if (!out) throw std::runtime_error("cannot write " + path);
  out << "epoch," << value_name << '\n';
  char buf[48];
  for (std::size_t i = 0; i < trace.size(); ++i) {
    std::snprintf(buf, sizeof(buf), "%.12g", trace[i]);
    out << i << ',' << buf << '\n';
  }
}

/// Simple OLS of y on x with intercept; two-sided t test on the slope.
struct SimpleOls {
  double slope = 0.0;
  double intercept = 0.0;
  double p_value = 1.0;
};

SimpleOls simple_ols(const std::vector<double>& x, const std::vector<double>& y) {
  const std::size_t n = x.size();
  if (n != y.size() || n < 3) throw std::invalid_argument("simple_ols: need >= 3 points");
  double mx = 0.0, my = 0.0;
  for (std::size_t i = 0; i < n; ++i) {
    mx += x[i];
    my += y[i];
  }
  mx /= n;
  my /= n;
  double sxx = 0.0, sxy = 0.0;
  for (std::size_t i = 0; i < n; ++i) {
    sxx += (x[i] - mx) * (x[i] - mx);
    sxy += (x[i] - mx) * (y[i] - my);
  }
  if (!(sxx > 0.0)) throw std::invalid_argument("simple_ols: constant x");
  SimpleOls res;
  res.slope = sxy / sxx;
  res.intercept = my - res.slope * mx;
  double rss = 0.0;
  for (std::size_t i = 0; i < n; ++i) {
    const double r = y[i] - res.intercept - res.slope * x[i];
    rss += r * r;
  }
  const double dof = static_cast<double>(n) - 2.0;
  const double se = std::sqrt(rss / dof / sxx);
  res.p_value = se == 0.0 ? (res.slope == 0.0 ? 1.0 : 0.0)
                          : student_t_pvalue_two_sided(res.slope / se, dof);
  return res;
}

GenerativeParams simulate_params_from(const ExperimentConfig& cfg, int n_kcs) {
  const std::string kind = cfg.text("graph.kind", "chain");
  int embedding_dim = static_cast<int>(cfg.integer("embedding_dim", 16));
  if (kind == "chain") embedding_dim = n_kcs;
  GenerativeParams params = GenerativeParams::defaults(n_kcs, embedding_dim);

  if (cfg.has("traits.s_bar")) {
    const auto v = cfg.numbers("traits.s_bar");
    if (v.size() != 4) throw std::invalid_argument("traits.s_bar must have 4 entries");
    for (int i = 0; i < 4; ++i) params.s_bar(i) = v[i];
  }
  if (cfg.has("traits.r1")) {
    const auto v = cfg.numbers("traits.r1");
    if (v.size() != 4) throw std::invalid_argument("traits.r1 must have 4 entries");
    for (int i = 0; i < 4; ++i) params.r1(i) = v[i];
  }
  if (cfg.has("traits.h")) {
    const auto v = cfg.numbers("traits.h");
    if (v.size() != 4) throw std::invalid_argument("traits.h must have 4 entries");
    for (int i = 0; i < 4; ++i) params.h(i) = v[i];
  }
  if (cfg.has("traits.r")) {
    const auto v = cfg.numbers("traits.r");
    if (v.size() != 4) throw std::invalid_argument("traits.r must have 4 entries");
    for (int i = 0; i < 4; ++i) params.r(i) = v[i];
  }
  params.z_bar = cfg.number("traits.z_bar", params.z_bar);
  params.w1 = cfg.number("traits.w1", params.w1);

  if (kind == "zero") {
    // embeddings stay zero: every off-diagonal edge sits at 0.25
  } else if (kind == "chain") {
    // A prerequisite chain 0 -> 1 -> ... -> n_edges with strong directed
    // edges: u_k = s e_k + c e_{k-1}, M on the superdiagonal.
    const int n_edges = static_cast<int>(cfg.integer("graph.chain_edges", n_kcs - 1));
    if (n_edges < 0 || n_edges >= n_kcs)
      throw std::invalid_argument("graph.chain_edges must be in [0, n_kcs)");
    const double s = cfg.number("graph.existence_scale", 2.5);
    const double c = cfg.number("graph.coupling_scale", 1.6);
    const double v = 4.0 / (s * s + c * c);
    for (int k = 0; k < n_kcs; ++k) {
      params.graph.U(k, k) = s;
      if (k >= 1 && k <= n_edges) params.graph.U(k, k - 1) = c;
    }
    for (int d = 0; d + 1 < embedding_dim; ++d) params.graph.M(d, d + 1) = v;
  } else if (kind == "random") {
    const double scale = cfg.number("graph.random_scale", 1.0);
    Rng rng(substream(static_cast<std::uint64_t>(cfg.integer("seed", 0)), "simulate-graph"));
    for (int i = 0; i < n_kcs; ++i)
      for (int d = 0; d < embedding_dim; ++d) params.graph.U(i, d) = scale * rng.normal();
    for (int i = 0; i < embedding_dim; ++i)
      for (int d = 0; d < embedding_dim; ++d) params.graph.M(i, d) = scale * rng.normal();
  } else {
    throw std::invalid_argument("config field 'graph.kind': expected zero|chain|random");
  }
  return params;
}

// --- runners ---------------------------------------------------------------

void run_simulate(const ExperimentConfig& cfg, const std::string& out_dir,
                  std::uint64_t seed, int threads, RunReport* report, std::ostream& log) {
  const int n_learners = static_cast<int>(cfg.integer("n_learners", 100));
  const int n_kcs = static_cast<int>(cfg.integer("n_kcs", 10));
  const int n_interactions = static_cast<int>(cfg.integer("n_interactions", 60));
  const double mean_log_gap = cfg.number("mean_log_gap", 9.2);  // ~ 3 hours
  const double sd_log_gap = cfg.number("sd_log_gap", 1.0);

  const GenerativeParams params = simulate_params_from(cfg, n_kcs);
  Stopwatch timer;
  const SimulatedCohort sim =
      simulate_cohort(params, n_learners,
                      uniform_schedule(n_kcs, n_interactions, mean_log_gap, sd_log_gap),
                      substream(seed, "simulate"), {}, threads);
  report->timings.seconds.emplace_back("simulate", timer.seconds());

  const std::string interactions_path = out_dir + "/interactions.csv";
  write_interactions(sim.cohort, interactions_path);
  const std::string latents_path = out_dir + "/latents.json";
  write_text(latents_path, latents_to_json(sim));
  const std::string graph_json_path = out_dir + "/graph_true.json";
  write_text(graph_json_path, graph_to_json(params.graph, sim.cohort.kc_ids));
  const std::string graph_csv_path = out_dir + "/graph.csv";
  write_graph_csv(adjacency_matrix(params.graph), sim.cohort.kc_ids,
                  cfg.number("graph_threshold", 0.5), graph_csv_path);

  double mean_outcome = 0.0;
  std::size_t n_total = 0;
  for (const auto& h : sim.cohort.histories)
    for (const auto& r : h.records) {
      mean_outcome += r.outcome;
      ++n_total;
    }
  report->metrics.set("n_learners", n_learners);
  report->metrics.set("n_interactions", static_cast<double>(n_total));
  report->metrics.set("mean_outcome", mean_outcome / static_cast<double>(n_total));
  report->artifacts = {interactions_path, latents_path, graph_json_path, graph_csv_path};
  log << "simulated " << n_learners << " learners, " << n_total << " interactions\n";
}

void run_fit(const ExperimentConfig& cfg, const std::string& out_dir, std::uint64_t seed,
             int threads, RunReport* report, std::ostream& log) {
  const Cohort cohort = parse_interactions(cfg.require_text("data"), schema_from(cfg));
  const std::size_t train_len = cfg.integer("train_len", 10);
  const std::size_t test_len = cfg.integer("test_len", 10);
  const SplitCohort split = filter_and_split(
      cohort, cfg.integer("min_interactions", 0), train_len, test_len);
  log << "fit: " << split.train.size() << " learners kept, " << split.dropped_learners
      << " dropped\n";
  report->metrics.set("n_learners", static_cast<double>(split.train.size()));
  report->metrics.set("n_dropped", static_cast<double>(split.dropped_learners));

  const std::string model = cfg.text("model", "psi");
  Stopwatch timer;
  if (model == "psi") {
    FitConfig fc = fit_config_from(cfg, seed, threads);
    FitResult fit = fit_variational_em(split, fc);
    report->timings.seconds.emplace_back("fit", timer.seconds());
    const std::string ckpt = out_dir + "/checkpoint.json";
    write_text(ckpt, checkpoint_to_json(fit, split.kc_ids));
    const std::string trace = out_dir + "/elbo_trace.csv";
    write_trace_csv(trace, "elbo", fit.elbo_trace);
    const std::string graph_csv = out_dir + "/graph.csv";
    write_graph_csv(adjacency_matrix(fit.params.graph), split.kc_ids,
                    cfg.number("graph_threshold", 0.5), graph_csv);
    report->metrics.set("final_elbo", fit.elbo_trace.empty() ? 0.0 : fit.elbo_trace.back());
    report->metrics.set("epochs", static_cast<double>(fit.elbo_trace.size()));
    report->artifacts = {ckpt, trace, graph_csv};
  } else if (model == "hlr" || model == "ppe") {
    BaselineFitConfig bc;
    bc.max_iters = static_cast<int>(cfg.integer("baseline.max_iters", bc.max_iters));
    bc.learning_rate = cfg.number("baseline.learning_rate", bc.learning_rate);
    bc.seed = substream(seed, "fit");
    const BaselineFitResult fit = fit_baseline(
        model == "hlr" ? BaselineKind::kHlr : BaselineKind::kPpe, split, bc);
    report->timings.seconds.emplace_back("fit", timer.seconds());
    const std::string ckpt = out_dir + "/baseline.json";
    write_text(ckpt, baseline_to_json(fit));
    const std::string trace = out_dir + "/loss_trace.csv";
    write_trace_csv(trace, "log_loss", fit.loss_trace);
    report->metrics.set("final_log_loss", fit.loss_trace.back());
    report->artifacts = {ckpt, trace};
  } else {
    throw std::invalid_argument("config field 'model': expected psi|hlr|ppe");
  }
}

void run_predict(const ExperimentConfig& cfg, const std::string& out_dir,
                 std::uint64_t seed, int threads, RunReport* report, std::ostream& log) {
  const Cohort cohort = parse_interactions(cfg.require_text("data"), schema_from(cfg));
  const std::size_t train_len = cfg.integer("train_len", 10);
  const std::size_t test_len = cfg.integer("test_len", 10);
  const SplitCohort split = filter_and_split(
      cohort, cfg.integer("min_interactions", 0), train_len, test_len);
  const std::string model = cfg.text("model", "psi");

  std::vector<std::tuple<std::string, int, std::string, double, int>> rows;
  std::vector<std::pair<double, int>> scored;

  Stopwatch timer;
  if (model == "psi") {
    std::vector<std::string> ckpt_kcs;
    const FitResult fit = checkpoint_from_json(read_text(cfg.require_text("checkpoint")),
                                               &ckpt_kcs);
    if (ckpt_kcs != split.kc_ids)
      throw std::invalid_argument("predict: checkpoint KC vocabulary does not match data");
    std::map<std::string, std::size_t> fit_index;
    for (std::size_t l = 0; l < fit.learner_ids.size(); ++l)
      fit_index[fit.learner_ids[l]] = l;
    const AdjacencyMatrix adjacency = adjacency_matrix(fit.params.graph);
    const int mc = static_cast<int>(cfg.integer("predict.mc_samples", 2000));

    std::vector<std::vector<double>> probs(split.test.size());
    parallel_for(split.test.size(), threads, [&](std::size_t i) {
      const auto& test = split.test[i];
      auto it = fit_index.find(test.learner_id);
      if (it == fit_index.end()) return;
      const std::size_t l = it->second;
      Schedule schedule;
      for (const auto& rec : test.records) schedule.emplace_back(rec.kc_index, rec.timestamp);
      probs[i] = predict_horizon(last_slice(fit.phi[l]), fit.train_data[l].last_time,
                                 fit.params, adjacency, schedule, mc,
                                 substream(seed, "mc", l), fit.ablation);
    });
    for (std::size_t i = 0; i < split.test.size(); ++i) {
      if (probs[i].empty()) continue;
      const auto& test = split.test[i];
      for (std::size_t n = 0; n < test.records.size(); ++n) {
        rows.emplace_back(test.learner_id, static_cast<int>(n + 1),
                          test.records[n].kc_id, probs[i][n], test.records[n].outcome);
        scored.emplace_back(probs[i][n], test.records[n].outcome);
      }
    }
    const std::string graph_csv = out_dir + "/graph.csv";
    write_graph_csv(adjacency, split.kc_ids, cfg.number("graph_threshold", 0.5), graph_csv);
    report->artifacts.push_back(graph_csv);
  } else if (model == "hlr" || model == "ppe") {
    const BaselineFitResult fit =
        baseline_from_json(read_text(cfg.require_text("checkpoint")));
    for (std::size_t i = 0; i < split.test.size(); ++i) {
      const auto probs =
          baseline_predict_sequence(fit, split.train[i], split.test[i], false);
      for (std::size_t n = 0; n < probs.size(); ++n) {
        rows.emplace_back(split.test[i].learner_id, static_cast<int>(n + 1),
                          split.test[i].records[n].kc_id, probs[n],
                          split.test[i].records[n].outcome);
        scored.emplace_back(probs[n], split.test[i].records[n].outcome);
      }
    }
  } else {
    throw std::invalid_argument("config field 'model': expected psi|hlr|ppe");
  }
  report->timings.seconds.emplace_back("predict", timer.seconds());

  if (scored.empty()) throw std::runtime_error("predict: no learners matched the checkpoint");
  const ClassificationMetrics cm = classification_metrics(scored);
  report->metrics.set("accuracy", cm.accuracy);
  report->metrics.set("f1", cm.f1);
  report->metrics.set("brier", cm.brier);
  report->metrics.set("n_predictions", static_cast<double>(scored.size()));

  const std::string pred_csv = out_dir + "/predictions.csv";
  write_predictions_csv(pred_csv, rows);
  const std::string metrics_path = out_dir + "/metrics.json";
  report->metrics.info["command"] = "predict";
  report->metrics.info["config_hash"] = report->config_hash;
  write_text(metrics_path, report->metrics.to_json());
  report->artifacts.push_back(pred_csv);
  report->artifacts.push_back(metrics_path);
  log << "predict: " << scored.size() << " predictions, accuracy " << cm.accuracy << "\n";
}

void run_continual(const ExperimentConfig& cfg, const std::string& out_dir,
                   std::uint64_t seed, int threads, RunReport* report, std::ostream& log) {
  const Cohort cohort = parse_interactions(cfg.require_text("data"), schema_from(cfg));
  const std::size_t initial = cfg.integer("initial_train_len", 10);
  const std::size_t steps = cfg.integer("steps", 90);
  const std::size_t horizon = cfg.integer("horizon", 10);
  const std::size_t need =
      std::max<std::size_t>(cfg.integer("min_interactions", 0), initial + steps + horizon);

  std::vector<const InteractionHistory*> learners;
  for (const auto& h : cohort.histories)
    if (h.records.size() >= need) learners.push_back(&h);
  if (learners.empty())
    throw std::invalid_argument("continual: no learners with enough interactions");
  log << "continual: " << learners.size() << " learners, " << steps << " steps\n";

  const std::string model = cfg.text("model", "psi");
  std::vector<double> step_accuracy, step_f1, step_brier, cumulative_seconds;
  double cumulative = 0.0;

  if (model == "psi") {
    SplitCohort split;
    split.kc_ids = cohort.kc_ids;
    split.kc_index_of = cohort.kc_index_of;
    for (const auto* h : learners) {
      InteractionHistory train{h->learner_id, {}}, test{h->learner_id, {}};
      train.records.assign(h->records.begin(), h->records.begin() + initial);
      test.records.assign(h->records.begin() + initial,
                          h->records.begin() + initial + horizon);
      split.train.push_back(std::move(train));
      split.test.push_back(std::move(test));
    }
    FitConfig fc = fit_config_from(cfg, seed, threads);
    Stopwatch fit_timer;
    FitResult fit = fit_variational_em(split, fc);
    report->timings.seconds.emplace_back("initial_fit", fit_timer.seconds());

    ContinualConfig cc;
    cc.mc_samples = static_cast<int>(cfg.integer("continual.mc_samples", cc.mc_samples));
    cc.prior_samples =
        static_cast<int>(cfg.integer("continual.prior_samples", cc.prior_samples));
    cc.max_steps = static_cast<int>(cfg.integer("continual.max_steps", cc.max_steps));
    cc.learning_rate = cfg.number("continual.learning_rate", cc.learning_rate);
    cc.update_graph = cfg.boolean("continual.update_graph", true);
    cc.graph_learning_rate =
        cfg.number("continual.graph_learning_rate", cc.graph_learning_rate);
    cc.seed = substream(seed, "continual");
    cc.ablation = fc.ablation;
    cc.min_interval_seconds = fc.min_interval_seconds;

    std::vector<ContinualState> states(learners.size());
    for (std::size_t l = 0; l < learners.size(); ++l) {
      states[l].q = last_slice(fit.phi[l]);
      states[l].step = initial;
      states[l].last_time = fit.train_data[l].last_time;
      states[l].learner_id = fit.learner_ids[l];
    }
    GenerativeParams params = fit.params;
    AdjacencyMatrix adjacency = adjacency_matrix(params.graph);
    const int predict_mc = static_cast<int>(cfg.integer("predict.mc_samples", 1000));
    const int D = params.graph.embedding_dim();
    const int K = params.num_kcs();

    for (std::size_t m = 0; m < steps; ++m) {
      const std::size_t obs_index = initial + m;
      Stopwatch update_timer;
      GraphGradAccumulator accum = GraphGradAccumulator::zero(K, D);
      std::vector<ContinualState> next(states.size());
      std::vector<GraphGradAccumulator> accums(
          learners.size(), GraphGradAccumulator::zero(K, D));
      parallel_for(learners.size(), threads, [&](std::size_t l) {
        next[l] = continual_update(states[l], params, adjacency,
                                   learners[l]->records[obs_index], cc, &accums[l]);
      });
      states = std::move(next);
      if (cc.update_graph) {
        for (const auto& a : accums) {
          accum.dU += a.dU;
          accum.dM += a.dM;
        }
        const double scale = cc.graph_learning_rate / static_cast<double>(learners.size());
        params.graph.U += scale * accum.dU;
        params.graph.M += scale * accum.dM;
        adjacency = adjacency_matrix(params.graph);
      }
      cumulative += update_timer.seconds();
      cumulative_seconds.push_back(cumulative);

      std::vector<std::pair<double, int>> scored;
      std::vector<std::vector<double>> probs(learners.size());
      parallel_for(learners.size(), threads, [&](std::size_t l) {
        Schedule schedule;
        const auto& rec = learners[l]->records;
        for (std::size_t j = obs_index + 1;
             j < std::min(rec.size(), obs_index + 1 + horizon); ++j)
          schedule.emplace_back(rec[j].kc_index, rec[j].timestamp);
        probs[l] = predict_horizon(states[l].q, states[l].last_time, params, adjacency,
                                   schedule, predict_mc, substream(cc.seed, "predict", l),
                                   cc.ablation);
      });
      for (std::size_t l = 0; l < learners.size(); ++l)
        for (std::size_t j = 0; j < probs[l].size(); ++j)
          scored.emplace_back(probs[l][j],
                              learners[l]->records[obs_index + 1 + j].outcome);
      const ClassificationMetrics cm = classification_metrics(scored);
      step_accuracy.push_back(cm.accuracy);
      step_f1.push_back(cm.f1);
      step_brier.push_back(cm.brier);
    }
  } else if (model == "hlr" || model == "ppe") {
    const BaselineKind kind = model == "hlr" ? BaselineKind::kHlr : BaselineKind::kPpe;
    BaselineFitConfig bc;
    bc.max_iters = static_cast<int>(cfg.integer("baseline.max_iters", bc.max_iters));
    bc.learning_rate = cfg.number("baseline.learning_rate", bc.learning_rate);
    const int refit_iters = static_cast<int>(cfg.integer("baseline.refit_iters", 10));

    SplitCohort split;
    split.kc_ids = cohort.kc_ids;
    split.kc_index_of = cohort.kc_index_of;
    for (const auto* h : learners) {
      InteractionHistory train{h->learner_id, {}}, test{h->learner_id, {}};
      train.records.assign(h->records.begin(), h->records.begin() + initial);
      test.records.assign(h->records.begin() + initial,
                          h->records.begin() + initial + horizon);
      split.train.push_back(std::move(train));
      split.test.push_back(std::move(test));
    }
    Stopwatch fit_timer;
    BaselineFitResult fit = fit_baseline(kind, split, bc);
    report->timings.seconds.emplace_back("initial_fit", fit_timer.seconds());

    for (std::size_t m = 0; m < steps; ++m) {
      const std::size_t seen = initial + m + 1;
      Stopwatch update_timer;
      SplitCohort grown;
      grown.kc_ids = cohort.kc_ids;
      grown.kc_index_of = cohort.kc_index_of;
      for (const auto* h : learners) {
        InteractionHistory train{h->learner_id, {}};
        train.records.assign(h->records.begin(), h->records.begin() + seen);
        grown.train.push_back(std::move(train));
        grown.test.push_back(InteractionHistory{h->learner_id, {}});
      }
      BaselineFitConfig rc = bc;
      rc.max_iters = refit_iters;
      {
        const BaselineFitResult refit = fit_baseline(kind, grown, rc);
        // Keep whichever parameters score better on the grown training set.
        if (baseline_log_loss(refit, grown.train) <= baseline_log_loss(fit, grown.train))
          fit = refit;
      }
      cumulative += update_timer.seconds();
      cumulative_seconds.push_back(cumulative);

      std::vector<std::pair<double, int>> scored;
      for (const auto* h : learners) {
        InteractionHistory warmup{h->learner_id, {}}, targets{h->learner_id, {}};
        warmup.records.assign(h->records.begin(), h->records.begin() + seen);
        targets.records.assign(h->records.begin() + seen,
                               h->records.begin() +
                                   std::min(h->records.size(), seen + horizon));
        const auto probs = baseline_predict_sequence(fit, warmup, targets, false);
        for (std::size_t j = 0; j < probs.size(); ++j)
          scored.emplace_back(probs[j], targets.records[j].outcome);
      }
      const ClassificationMetrics cm = classification_metrics(scored);
      step_accuracy.push_back(cm.accuracy);
      step_f1.push_back(cm.f1);
      step_brier.push_back(cm.brier);
    }
  } else {
    throw std::invalid_argument("config field 'model': expected psi|hlr|ppe");
  }

  // Deterministic per-step metrics; wall-clock series goes to the timings
  // sidecar only.
  const std::string csv = out_dir + "/continual_metrics.csv";
  {
    std::ofstream out(csv);
    if (!out) throw std::runtime_error("cannot write " + csv);
    out << "interactions_seen,accuracy,f1,brier\n";
    char buf[96];
    for (std::size_t m = 0; m < step_accuracy.size(); ++m) {
      std::snprintf(buf, sizeof(buf), "%zu,%.9g,%.9g,%.9g", initial + m + 1,
                    step_accuracy[m], step_f1[m], step_brier[m]);
      out << buf << '\n';
    }
  }
  report->timings.cumulative_update_seconds = cumulative_seconds;
  report->metrics.set("final_accuracy", step_accuracy.back());
  report->metrics.set("mean_accuracy",
                      std::accumulate(step_accuracy.begin(), step_accuracy.end(), 0.0) /
                          static_cast<double>(step_accuracy.size()));
  report->metrics.set("n_steps", static_cast<double>(step_accuracy.size()));
  report->artifacts.push_back(csv);

  const std::string metrics_path = out_dir + "/metrics.json";
  report->metrics.info["command"] = "continual";
  report->metrics.info["config_hash"] = report->config_hash;
  write_text(metrics_path, report->metrics.to_json());
  report->artifacts.push_back(metrics_path);
}

void run_eval_graph(const ExperimentConfig& cfg, const std::string& out_dir,
                    std::uint64_t seed, int /*threads*/, RunReport* report,
                    std::ostream& log) {
  std::vector<std::string> kc_ids;
  const FitResult fit =
      checkpoint_from_json(read_text(cfg.require_text("checkpoint")), &kc_ids);
  const AdjacencyMatrix adjacency = adjacency_matrix(fit.params.graph);
  std::map<std::string, int> kc_index;
  for (std::size_t k = 0; k < kc_ids.size(); ++k) kc_index[kc_ids[k]] = static_cast<int>(k);

  const double edge_threshold = cfg.number("edge_threshold", 0.5);
  const double rating_threshold = cfg.number("rating_threshold", 5.0);

  const std::string graph_csv = out_dir + "/graph.csv";
  write_graph_csv(adjacency, kc_ids, cfg.number("graph_threshold", edge_threshold),
                  graph_csv);
  report->artifacts.push_back(graph_csv);

  if (cfg.has("annotations")) {
    const auto annotations = parse_annotations(cfg.require_text("annotations"));
    std::vector<std::pair<int, int>> expert_edges;
    std::vector<std::pair<int, int>> crowd_edges;
    std::vector<RatedPair> rated;
    std::size_t unknown = 0;
    for (const auto& a : annotations) {
      if (a.relation != GraphAnnotation::Relation::kPrerequisite) continue;
      auto si = kc_index.find(a.source_kc);
      auto ti = kc_index.find(a.target_kc);
      if (si == kc_index.end() || ti == kc_index.end()) {
        ++unknown;
        continue;
      }
      if (a.expert) expert_edges.emplace_back(si->second, ti->second);
      if (!a.ratings.empty()) {
        rated.push_back({si->second, ti->second, a.ratings});
        double mean = 0.0;
        for (double r : a.ratings) mean += r;
        mean /= static_cast<double>(a.ratings.size());
        if (mean > rating_threshold) crowd_edges.emplace_back(si->second, ti->second);
      }
    }
    report->metrics.set("n_annotations_skipped", static_cast<double>(unknown));

    std::vector<std::pair<int, int>> inferred_edges;
    for (int i = 0; i < adjacency.num_kcs(); ++i)
      for (int k = 0; k < adjacency.num_kcs(); ++k)
        if (i != k && adjacency.a(i, k) > edge_threshold) inferred_edges.emplace_back(i, k);

    if (!expert_edges.empty()) {
      report->metrics.set("mrr_expert", mrr_expert(adjacency, expert_edges));
      report->metrics.set("jaccard_expert", jaccard_edges(inferred_edges, expert_edges));
    }
    if (!crowd_edges.empty())
      report->metrics.set("jaccard_crowd", jaccard_edges(inferred_edges, crowd_edges));
    if (!rated.empty())
      report->metrics.set("rating_nll",
                          rating_nll(adjacency, rated, cfg.number("sigma_floor", 0.05)));
  }

  if (cfg.has("data")) {
    const Cohort cohort = parse_interactions(cfg.require_text("data"), schema_from(cfg));
    if (cohort.kc_ids != kc_ids)
      throw std::invalid_argument("eval-graph: data KC vocabulary does not match checkpoint");
    const int mc = static_cast<int>(cfg.integer("causal.mc_samples", 20000));
    const auto table = causal_support_table(cohort, mc, substream(seed, "mc"));
    if (table.size() >= 3) {
      std::vector<double> xs, ys;
      for (const auto& [pair, support] : table) {
        xs.push_back(adjacency.a(pair.first, pair.second));
        ys.push_back(support);
      }
      const SimpleOls ols = simple_ols(xs, ys);
      report->metrics.set("causal_support_coefficient", ols.slope);
      report->metrics.set("causal_support_p_value", ols.p_value);
      report->metrics.set("n_causal_pairs", static_cast<double>(table.size()));
    }
    const std::string support_csv = out_dir + "/causal_support.csv";
    std::ofstream out(support_csv);
    if (!out) throw std::runtime_error("cannot write " + support_csv);
    out << "source_kc,target_kc,edge_probability,support\n";
    char buf[64];
    for (const auto& [pair, support] : table) {
      std::snprintf(buf, sizeof(buf), "%.9g,%.9g",
                    adjacency.a(pair.first, pair.second), support);
      out << kc_ids[pair.first] << ',' << kc_ids[pair.second] << ',' << buf << '\n';
    }
    report->artifacts.push_back(support_csv);
  }

  const std::string metrics_path = out_dir + "/metrics.json";
  report->metrics.info["command"] = "eval-graph";
  report->metrics.info["config_hash"] = report->config_hash;
  write_text(metrics_path, report->metrics.to_json());
  report->artifacts.push_back(metrics_path);
  log << "eval-graph: " << report->metrics.values.size() << " metrics\n";
}

/// Deterministic mean path of the posterior pushed through the kernels;
/// yields per-step (alpha, mu_tilde for the scheduled KC).
struct MeanPathPoint {
  double alpha = 0.0;
  double mu_tilde = 0.0;
};

std::vector<MeanPathPoint> mean_path(const PosteriorSlice& slice, double current_time,
                                     const GenerativeParams& params,
                                     const AdjacencyMatrix& adjacency,
                                     const Schedule& schedule,
                                     const AblationFlags& ablation) {
  std::vector<MeanPathPoint> out;
  Eigen::Vector4d s = slice.s_mean;
  Eigen::VectorXd z = slice.z_mean;
  double t_prev = current_time;
  const IntervalPolicy policy{};
  for (const auto& [kc, t] : schedule) {
    const double tau = policy.apply(t - t_prev);
    if (!ablation.no_dynamics) s = params.h.cwiseProduct(s);
    TraitVector traits = TraitVector::from_raw(s);
    if (ablation.no_graph) traits.raw(3) = 0.0;
    const TransitionMoments tm =
        ou_transition_moments(KnowledgeState{z}, traits, adjacency, tau);
    const Eigen::VectorXd mu_tilde =
        structural_means(z, adjacency, traits.mu(), traits.gamma());
    out.push_back({traits.alpha(), mu_tilde(kc)});
    z = tm.m;
    t_prev = t;
  }
  return out;
}

void run_eval_traits(const ExperimentConfig& cfg, const std::string& out_dir,
                     std::uint64_t seed, int threads, RunReport* report,
                     std::ostream& log) {
  std::vector<std::string> kc_ids;
  const FitResult fit =
      checkpoint_from_json(read_text(cfg.require_text("checkpoint")), &kc_ids);
  const Cohort cohort = parse_interactions(cfg.require_text("data"), schema_from(cfg));
  if (cohort.kc_ids != kc_ids)
    throw std::invalid_argument("eval-traits: data KC vocabulary does not match checkpoint");
  const double ridge = cfg.number("ridge", 1e-6);
  const AdjacencyMatrix adjacency = adjacency_matrix(fit.params.graph);

  std::map<std::string, std::size_t> fit_index;
  for (std::size_t l = 0; l < fit.learner_ids.size(); ++l)
    fit_index[fit.learner_ids[l]] = l;

  // Specificity and disentanglement over per-step trait posterior means.
  LearnerRows rows_by_learner;
  for (std::size_t l = 0; l < fit.phi.size(); ++l) {
    std::vector<Eigen::VectorXd> rows;
    for (const auto& s : fit.phi[l].s_mean) rows.push_back(s);
    if (rows.size() >= 5) rows_by_learner.push_back(std::move(rows));
  }
  if (rows_by_learner.size() >= 2) {
    report->metrics.set("specificity_mi", specificity_mi(rows_by_learner, ridge));
    report->metrics.set("disentanglement_kl", disentanglement_kl(rows_by_learner, ridge));
  }

  // Consistency: refit the trait posterior on time-balanced subsets with the
  // generative parameters frozen.
  const std::size_t n_subsets = cfg.integer("subsets.count", 5);
  const std::size_t subset_len = cfg.integer("subsets.length", 30);
  LearnerSubsetRows subset_rows;
  {
    FitConfig rc;
    rc.max_epochs = static_cast<int>(cfg.integer("refit.max_epochs", 60));
    rc.mc_samples = static_cast<int>(cfg.integer("refit.mc_samples", 4));
    rc.learn_theta = false;
    rc.ablation = fit.ablation;
    rc.seed = substream(seed, "fit");
    rc.threads = 1;

    std::vector<const InteractionHistory*> eligible;
    for (const auto& h : cohort.histories)
      if (h.records.size() >= n_subsets * subset_len &&
          fit_index.count(h.learner_id))
        eligible.push_back(&h);
    std::vector<std::vector<std::vector<Eigen::VectorXd>>> collected(eligible.size());
    parallel_for(eligible.size(), threads, [&](std::size_t e) {
      const auto subsets =
          build_time_balanced_subsets(*eligible[e], n_subsets, subset_len, rc.seed);
      std::vector<std::vector<Eigen::VectorXd>> per_subset;
      for (const auto& sub : subsets) {
        SplitCohort one;
        one.kc_ids = cohort.kc_ids;
        one.kc_index_of = cohort.kc_index_of;
        one.train.push_back(sub);
        one.test.push_back(sub);
        const FitResult sub_fit = fit_variational_em(one, rc, &fit.params);
        std::vector<Eigen::VectorXd> rows;
        for (const auto& s : sub_fit.phi[0].s_mean) rows.push_back(s);
        per_subset.push_back(std::move(rows));
      }
      collected[e] = std::move(per_subset);
    });
    for (auto& c : collected)
      if (!c.empty()) subset_rows.push_back(std::move(c));
  }
  if (!subset_rows.empty())
    report->metrics.set("consistency_mi", consistency_mi(subset_rows, ridge));

  // Behavioral regressions on held-out interactions.
  const std::size_t train_len = cfg.integer("train_len", 10);
  const std::size_t test_len = cfg.integer("test_len", 10);
  const SplitCohort split = filter_and_split(
      cohort, cfg.integer("min_interactions", 0), train_len, test_len);

  std::vector<RegressionRow> decay_rows, raw_tau_rows, initial_rows;
  int learner_counter = 0;
  for (std::size_t i = 0; i < split.test.size(); ++i) {
    auto it = fit_index.find(split.test[i].learner_id);
    if (it == fit_index.end()) continue;
    const std::size_t l = it->second;
    Schedule schedule;
    for (const auto& rec : split.test[i].records)
      schedule.emplace_back(rec.kc_index, rec.timestamp);
    const auto path = mean_path(last_slice(fit.phi[l]), fit.train_data[l].last_time,
                                fit.params, adjacency, schedule, fit.ablation);
    std::set<int> train_kcs;
    for (const auto& rec : split.train[i].records) train_kcs.insert(rec.kc_index);
    const int learner = learner_counter++;
    for (std::size_t n = 1; n < split.test[i].records.size(); ++n) {
      const double tau = split.test[i].records[n].timestamp -
                         split.test[i].records[n - 1].timestamp;
      const double dy = static_cast<double>(split.test[i].records[n].outcome) -
                        static_cast<double>(split.test[i].records[n - 1].outcome);
      decay_rows.push_back({learner, std::exp(-path[n].alpha * tau), dy});
      raw_tau_rows.push_back({learner, tau, dy});
    }
    std::set<int> seen = train_kcs;
    for (std::size_t n = 0; n < split.test[i].records.size(); ++n) {
      const int kc = split.test[i].records[n].kc_index;
      if (!seen.count(kc))
        initial_rows.push_back(
            {learner, path[n].mu_tilde,
             static_cast<double>(split.test[i].records[n].outcome)});
      seen.insert(kc);
    }
  }

  if (decay_rows.size() >= 6) {
    const RegressionResult decay = regress_with_learner_intercepts(decay_rows, true);
    report->metrics.set("decay_slope", decay.slope);
    report->metrics.set("decay_p_value", decay.p_value);
    const RegressionResult raw = regress_with_learner_intercepts(raw_tau_rows, false);
    report->metrics.set("raw_tau_slope", raw.slope);
    report->metrics.set("raw_tau_p_value", raw.p_value);

    const std::string bins_csv = out_dir + "/decay_bins.csv";
    std::ofstream out(bins_csv);
    if (!out) throw std::runtime_error("cannot write " + bins_csv);
    out << "bin_center,mean,sem,count\n";
    char buf[96];
    for (const auto& bin : decay.bins) {
      std::snprintf(buf, sizeof(buf), "%.9g,%.9g,%.9g,%zu", bin.center, bin.mean, bin.sem,
                    bin.count);
      out << buf << '\n';
    }
    report->artifacts.push_back(bins_csv);
  }
  // Initial performance on novel KCs may be sparse; only report when the
  // within estimator is defined.
  try {
    if (initial_rows.size() >= 6) {
      const RegressionResult initial = regress_with_learner_intercepts(initial_rows, false);
      report->metrics.set("initial_performance_slope", initial.slope);
      report->metrics.set("initial_performance_p_value", initial.p_value);
    }
  } catch (const std::invalid_argument&) {
    // not enough structure in the novel-KC rows; skip silently
  }

  const std::string metrics_path = out_dir + "/metrics.json";
  report->metrics.info["command"] = "eval-traits";
  report->metrics.info["config_hash"] = report->config_hash;
  write_text(metrics_path, report->metrics.to_json());
  report->artifacts.push_back(metrics_path);
  log << "eval-traits: " << report->metrics.values.size() << " metrics\n";
}

void run_report(const ExperimentConfig& cfg, const std::string& out_dir,
                RunReport* report, std::ostream& log) {
  const auto inputs = cfg.texts("inputs");
  if (inputs.empty()) throw std::invalid_argument("report: no inputs");
  json merged = json::array();
  std::set<std::string> metric_keys;
  for (const auto& path : inputs) {
    const json j = json::parse(read_text(path));
    merged.push_back(j);
    for (const auto& [key, _] : j.at("metrics").items()) metric_keys.insert(key);
  }

  const std::string table_csv = out_dir + "/table.csv";
  {
    std::ofstream out(table_csv);
    if (!out) throw std::runtime_error("cannot write " + table_csv);
    out << "command,config_hash";
    for (const auto& key : metric_keys) out << ',' << key;
    out << '\n';
    for (const auto& j : merged) {
      out << j.at("command").get<std::string>() << ','
          << j.at("config_hash").get<std::string>();
      for (const auto& key : metric_keys) {
        out << ',';
        if (j.at("metrics").contains(key)) {
          char buf[48];
          std::snprintf(buf, sizeof(buf), "%.9g", j.at("metrics").at(key).get<double>());
          out << buf;
        }
      }
      out << '\n';
    }
  }
  const std::string merged_path = out_dir + "/comparison.json";
  write_text(merged_path, merged.dump(2));
  report->artifacts = {table_csv, merged_path};
  report->metrics.set("n_reports", static_cast<double>(inputs.size()));
  log << "report: merged " << inputs.size() << " runs over " << metric_keys.size()
      << " metrics\n";
}

}  // namespace

RunReport run_experiment(const ExperimentConfig& config, std::ostream& log) {
  RunReport report;
  report.command = config.command();
  report.config_hash = config.hash();
  report.resolved_config_json = config.dump();
  report.metrics.info["seed"] = std::to_string(config.integer("seed", 0));
  report.metrics.info["config_hash"] = report.config_hash;
  if (config.has("data")) report.metrics.info["dataset"] = config.text("data", "");

  const std::string out_dir = config.text("out", "out");
  fs::create_directories(out_dir);
  const std::uint64_t seed = static_cast<std::uint64_t>(config.integer("seed", 0));
  const int threads = static_cast<int>(config.integer("threads", 1));

  Stopwatch total;
  const std::string& cmd = config.command();
  if (cmd == "simulate")
    run_simulate(config, out_dir, seed, threads, &report, log);
  else if (cmd == "fit")
    run_fit(config, out_dir, seed, threads, &report, log);
  else if (cmd == "predict")
    run_predict(config, out_dir, seed, threads, &report, log);
  else if (cmd == "continual")
    run_continual(config, out_dir, seed, threads, &report, log);
  else if (cmd == "eval-graph")
    run_eval_graph(config, out_dir, seed, threads, &report, log);
  else if (cmd == "eval-traits")
    run_eval_traits(config, out_dir, seed, threads, &report, log);
  else if (cmd == "report")
    run_report(config, out_dir, &report, log);
  else
    throw std::invalid_argument("unknown command '" + cmd + "'");
  report.timings.seconds.emplace_back("total", total.seconds());

  for (const auto& [key, value] : report.metrics.values)
    if (!std::isfinite(value))
      throw std::runtime_error("non-finite metric '" + key + "'");

  write_text(out_dir + "/report.json", report.to_json());
  write_text(out_dir + "/timings.json", report.timings_json());
  report.artifacts.push_back(out_dir + "/report.json");
  return report;
}

int run_cli_command(const std::string& command, const std::string& config_path,
                    const std::vector<std::string>& overrides, std::ostream& out,
                    std::ostream& err) {
  try {
    const ExperimentConfig config = ExperimentConfig::load(command, config_path, overrides);
    run_experiment(config, out);
    return 0;
  } catch (const std::invalid_argument& e) {
    err << "error: " << e.what() << "\n";
    return 1;
  } catch (const std::exception& e) {
    err << "error: " << e.what() << "\n";
    return 2;
  }
}

}  // namespace ktrace
