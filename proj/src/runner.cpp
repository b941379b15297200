#include "fipa/runner.hpp"

#include <unistd.h>

#include <algorithm>
#include <cctype>
#include <cstdio>
#include <cstdlib>
#include <fstream>
#include <stdexcept>

#ifndef FIPA_BUILD_ID
#define FIPA_BUILD_ID "unknown"
#endif

namespace fipa {

using nlohmann::json;

namespace {

std::string real(double x) {
  char buf[40];
  std::snprintf(buf, sizeof buf, "%.17g", x);
  return buf;
}

std::string optional_real(const std::optional<double>& x) { return x ? real(*x) : std::string(); }

const char* metric_name(const Problem& problem) {
  switch (problem.kind()) {
    case ProblemKind::regression:
      return "test_mse";
    case ProblemKind::pde:
      return "relative_l2";
    case ProblemKind::classification:
      return "accuracy";
  }
  return "metric";
}

}  // namespace

std::unique_ptr<Problem> make_problem(const ExperimentConfig& cfg) {
  const ProblemConfig& p = cfg.problem;
  if (p.kind == "sine") return sine_target(p.frequency);
  if (p.kind == "gaussian_mixture") {
    return gaussian_mixture_target(random_gaussian_mixture(p.mixture_seed, p.mixture_components));
  }
  if (p.kind == "poisson") return poisson_problem(p.dim, p.beta_bc);
  if (p.kind == "elliptic") {
    return nonlinear_elliptic_problem(parse_elliptic_kind(p.elliptic), EllipticParams{p.coefficient}, p.beta_bc);
  }
  if (p.kind == "blobs") {
    return blob_classification(p.classes, p.train_per_class, p.test_per_class, p.features, p.spread, cfg.seed);
  }
  throw std::invalid_argument("unknown problem kind '" + p.kind + "'");
}

MlpSpec make_model(const ExperimentConfig& cfg, const Problem& problem) {
  std::vector<int> widths{problem.input_dim()};
  widths.insert(widths.end(), cfg.model.hidden.begin(), cfg.model.hidden.end());
  widths.push_back(problem.output_dim());
  return MlpSpec::uniform(widths, parse_activation(cfg.model.activation));
}

std::vector<ClientData> make_clients(const ExperimentConfig& cfg, const Problem& problem) {
  const PartitionConfig& part = cfg.federation.partition;
  if (part.kind == "interval") {
    return partition_interval(problem, cfg.federation.clients, part.proportions, part.samples_per_client,
                              part.boundary_per_client, cfg.seed);
  }
  if (part.kind == "grid") {
    return partition_grid(problem, part.rows, part.cols, part.samples_per_client, part.boundary_per_client,
                          cfg.seed);
  }
  const auto* cls = dynamic_cast<const ClassificationProblem*>(&problem);
  if (cls == nullptr) throw std::invalid_argument("dirichlet partition needs a classification problem");
  return partition_dirichlet_labels(cls->train_pool(), cfg.federation.clients, part.alpha, cfg.seed);
}

RoundConfig make_round_config(const ExperimentConfig& cfg) {
  const FederationConfig& f = cfg.federation;
  RoundConfig rc;
  rc.local_epochs = f.local_epochs;
  rc.optimizer = parse_local_optimizer(f.optimizer);
  rc.lr = f.lr;
  rc.batch_size = f.batch_size;
  rc.prox_mu = f.prox_mu;
  rc.participation_fraction = f.participation_fraction;
  rc.sketch.rank = f.sketch.rank;
  rc.sketch.oversampling = f.sketch.oversampling;
  rc.sketch.passes = f.sketch.passes;
  rc.sketch.energy_threshold = f.sketch.energy_threshold;
  rc.exact_curvature = f.exact_curvature;
  rc.full_curvature = f.full_curvature;
  rc.seed = cfg.seed;
  rc.workers = f.workers;
  return rc;
}

Schedule make_schedule(const ExperimentConfig& cfg) {
  Schedule s;
  s.total_rounds = cfg.federation.rounds;
  s.warmup_rounds = cfg.federation.warmup_rounds;
  s.main.rule = parse_aggregation_rule(cfg.federation.rule);
  s.main.beta_reg = cfg.federation.beta_reg;
  s.main.gamma = cfg.federation.gamma;
  return s;
}

std::string resolve_output_dir(const ExperimentConfig& cfg, const std::optional<std::string>& cli_out) {
  if (cli_out && !cli_out->empty()) return *cli_out;
  if (const char* env = std::getenv(kOutputDirEnv); env != nullptr && *env != '\0') return env;
  return cfg.output.dir;
}

std::string rounds_csv(std::span<const RoundRecord> records, bool with_wall_time) {
  std::string out = "k,rule,train_loss_mean,test_metric,bytes_up,bytes_down,r_tot,rho_hat,e_k,delta_k,wall_ms\n";
  for (const RoundRecord& r : records) {
    out += std::to_string(r.round);
    out += ',';
    out += to_string(r.rule);
    out += ',' + real(r.train_loss_mean);
    out += ',' + real(r.test_metric);
    out += ',' + std::to_string(r.bytes_up);
    out += ',' + std::to_string(r.bytes_down);
    out += ',' + std::to_string(r.solve.r_tot);
    out += ',' + optional_real(r.rho_hat);
    out += ',' + optional_real(r.e_k);
    out += ',' + optional_real(r.delta_k);
    out += ',';
    if (with_wall_time) out += real(r.wall_ms);
    out += '\n';
  }
  return out;
}

json run_summary(const ExperimentConfig& cfg, const Problem& problem, std::span<const RoundRecord> records) {
  if (records.empty()) throw std::invalid_argument("summary of an empty run");
  const bool higher = problem.higher_is_better();
  const RoundRecord* best = &records.front();
  std::uint64_t up = 0, down = 0;
  for (const RoundRecord& r : records) {
    up += r.bytes_up;
    down += r.bytes_down;
    if (higher ? r.test_metric > best->test_metric : r.test_metric < best->test_metric) best = &r;
  }
  const RoundRecord& last = records.back();
  json s;
  s["problem"] = problem.name();
  s["metric"] = metric_name(problem);
  s["higher_is_better"] = higher;
  s["rounds"] = records.size();
  s["final"] = {{"round", last.round}, {"test_metric", last.test_metric}, {"train_loss_mean", last.train_loss_mean}};
  s["best"] = {{"round", best->round}, {"test_metric", best->test_metric}};
  s["totals"] = {{"bytes_up", up}, {"bytes_down", down}};
  s["seed"] = cfg.seed;
  s["build_id"] = FIPA_BUILD_ID;
  s["config"] = config_to_json(cfg);
  return s;
}

void write_file_atomic(const std::filesystem::path& path, const std::string& content) {
  std::filesystem::path tmp = path;
  tmp += ".tmp." + std::to_string(::getpid());
  {
    std::ofstream out(tmp, std::ios::binary | std::ios::trunc);
    if (!out) throw std::runtime_error("cannot open " + tmp.string() + " for writing");
    out << content;
    out.flush();
    if (!out) throw std::runtime_error("write to " + tmp.string() + " failed");
  }
  std::error_code ec;
  std::filesystem::rename(tmp, path, ec);
  if (ec) {
    std::filesystem::remove(tmp);
    throw std::runtime_error("cannot move " + tmp.string() + " to " + path.string() + ": " + ec.message());
  }
}

RunOutput run_config(const ExperimentConfig& cfg, const std::filesystem::path& out_dir) {
  if (auto issues = validate_config(cfg); !issues.empty()) throw ConfigError(std::move(issues));

  const std::unique_ptr<Problem> problem = make_problem(cfg);
  const MlpSpec spec = make_model(cfg, *problem);
  const std::vector<ClientData> clients = make_clients(cfg, *problem);
  ParamVector theta0 = init_params(spec, cfg.seed);
  if (!cfg.model.trainable_layers.empty()) {
    theta0 = ParamVector(theta0.values(), layer_mask(spec, cfg.model.trainable_layers));
  }
  const GnDiagnosticsConfig gn{cfg.diagnostics.gn_reference, cfg.diagnostics.gn_gamma};

  ExperimentResult result =
      run_experiment(spec, *problem, clients, theta0, make_round_config(cfg), make_schedule(cfg), gn);

  RunOutput out;
  out.dir = out_dir;
  out.summary = run_summary(cfg, *problem, result.records);
  std::filesystem::create_directories(out_dir);
  const auto& formats = cfg.output.formats;
  if (std::find(formats.begin(), formats.end(), "csv") != formats.end()) {
    write_file_atomic(out_dir / "rounds.csv", rounds_csv(result.records, cfg.output.record_wall_time));
  }
  if (std::find(formats.begin(), formats.end(), "json") != formats.end()) {
    write_file_atomic(out_dir / "summary.json", out.summary.dump(2) + "\n");
  }
  out.records = std::move(result.records);
  return out;
}

std::vector<std::string> split_values(const std::string& list) {
  std::vector<std::string> out;
  std::string cur;
  int depth = 0;
  bool quoted = false;
  for (char c : list) {
    if (c == '"') quoted = !quoted;
    if (!quoted) {
      if (c == '[' || c == '{') ++depth;
      if (c == ']' || c == '}') --depth;
      if (c == ',' && depth == 0) {
        out.push_back(cur);
        cur.clear();
        continue;
      }
    }
    cur += c;
  }
  out.push_back(cur);
  for (auto& v : out) {
    const auto b = v.find_first_not_of(" \t");
    const auto e = v.find_last_not_of(" \t");
    v = b == std::string::npos ? std::string() : v.substr(b, e - b + 1);
  }
  return out;
}

std::string sweep_dir(const std::string& base, const std::string& param, const std::string& value) {
  const auto dot = param.rfind('.');
  std::string leaf = dot == std::string::npos ? param : param.substr(dot + 1);
  std::string tag = leaf + "-" + value;
  for (char& c : tag) {
    const auto u = static_cast<unsigned char>(c);
    if (!std::isalnum(u) && c != '.' && c != '-' && c != '_') c = '_';
  }
  std::string trimmed = base;
  while (trimmed.size() > 1 && trimmed.back() == '/') trimmed.pop_back();
  return trimmed + "_" + tag;
}

}  // namespace fipa
