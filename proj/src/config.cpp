#include "fipa/config.hpp"

#include <cmath>
#include <set>
#include <sstream>

#include "fipa/aggregation.hpp"
#include "fipa/federation.hpp"
#include "fipa/mlp.hpp"
#include "fipa/problems.hpp"

namespace fipa {

using nlohmann::json;

namespace {

std::string join_issues(const std::vector<ConfigIssue>& issues) {
  std::ostringstream out;
  out << "invalid config";
  for (const auto& i : issues) out << "; " << i.path << ": " << i.message;
  return out.str();
}

const char* type_name(const json& v) {
  switch (v.type()) {
    case json::value_t::null:
      return "null";
    case json::value_t::boolean:
      return "boolean";
    case json::value_t::number_integer:
    case json::value_t::number_unsigned:
      return "integer";
    case json::value_t::number_float:
      return "number";
    case json::value_t::string:
      return "string";
    case json::value_t::array:
      return "list";
    case json::value_t::object:
      return "section";
    default:
      return "value";
  }
}

// Typed scalar extraction; false on type mismatch.
bool extract(const json& v, int& out) {
  if (!v.is_number_integer()) return false;
  const auto x = v.get<std::int64_t>();
  if (x < INT32_MIN || x > INT32_MAX) return false;
  out = static_cast<int>(x);
  return true;
}
bool extract(const json& v, std::uint64_t& out) {
  if (v.is_number_unsigned()) {
    out = v.get<std::uint64_t>();
    return true;
  }
  if (v.is_number_integer() && v.get<std::int64_t>() >= 0) {
    out = static_cast<std::uint64_t>(v.get<std::int64_t>());
    return true;
  }
  return false;
}
bool extract(const json& v, double& out) {
  if (!v.is_number()) return false;
  out = v.get<double>();
  return true;
}
bool extract(const json& v, bool& out) {
  if (!v.is_boolean()) return false;
  out = v.get<bool>();
  return true;
}
bool extract(const json& v, std::string& out) {
  if (!v.is_string()) return false;
  out = v.get<std::string>();
  return true;
}
template <class T>
bool extract(const json& v, std::vector<T>& out) {
  if (!v.is_array()) return false;
  std::vector<T> items(v.size());
  for (std::size_t i = 0; i < v.size(); ++i)
    if (!extract(v[i], items[i])) return false;
  out = std::move(items);
  return true;
}

template <class T>
const char* expected_name() {
  if constexpr (std::is_same_v<T, int> || std::is_same_v<T, std::uint64_t>) return "integer";
  if constexpr (std::is_same_v<T, double>) return "number";
  if constexpr (std::is_same_v<T, bool>) return "boolean";
  if constexpr (std::is_same_v<T, std::string>) return "string";
  if constexpr (std::is_same_v<T, std::vector<int>>) return "list of integers";
  if constexpr (std::is_same_v<T, std::vector<double>>) return "list of numbers";
  if constexpr (std::is_same_v<T, std::vector<std::string>>) return "list of strings";
  return "value";
}

class Section {
 public:
  Section(const json* obj, std::string path, std::vector<ConfigIssue>& issues)
      : obj_(obj), path_(std::move(path)), issues_(issues) {}

  ~Section() {
    if (obj_ == nullptr) return;
    for (const auto& [key, value] : obj_->items()) {
      if (!seen_.count(key)) issues_.push_back({at(key), "unknown key"});
    }
  }

  template <class T>
  void read(const std::string& key, T& out) {
    seen_.insert(key);
    if (obj_ == nullptr || !obj_->contains(key)) return;
    const json& v = obj_->at(key);
    if (!extract(v, out)) {
      issues_.push_back({at(key), std::string("expected ") + expected_name<T>() + ", got " + type_name(v)});
    }
  }

  Section child(const std::string& key) {
    seen_.insert(key);
    if (obj_ == nullptr || !obj_->contains(key)) return Section(nullptr, at(key), issues_);
    const json& v = obj_->at(key);
    if (!v.is_object()) {
      issues_.push_back({at(key), std::string("expected section, got ") + type_name(v)});
      return Section(nullptr, at(key), issues_);
    }
    return Section(&v, at(key), issues_);
  }

 private:
  std::string at(const std::string& key) const { return path_.empty() ? key : path_ + "." + key; }

  const json* obj_;
  std::string path_;
  std::vector<ConfigIssue>& issues_;
  std::set<std::string> seen_;
};

int problem_input_dim(const ProblemConfig& p) {
  if (p.kind == "gaussian_mixture") return 2;
  if (p.kind == "poisson") return p.dim;
  if (p.kind == "blobs") return p.features;
  return 1;
}

bool is_pde(const ProblemConfig& p) { return p.kind == "poisson" || p.kind == "elliptic"; }

}  // namespace

ConfigError::ConfigError(std::vector<ConfigIssue> issues)
    : std::runtime_error(join_issues(issues)), issues_(std::move(issues)) {}

std::vector<ConfigIssue> validate_config(const ExperimentConfig& cfg) {
  std::vector<ConfigIssue> out;
  auto need = [&](bool ok, const char* path, std::string msg) {
    if (!ok) out.push_back({path, std::move(msg)});
  };

  const ProblemConfig& p = cfg.problem;
  const std::set<std::string> kinds{"sine", "gaussian_mixture", "poisson", "elliptic", "blobs"};
  need(kinds.count(p.kind) > 0, "problem.kind", "unknown problem kind '" + p.kind + "'");
  need(p.frequency >= 1, "problem.frequency", "must be >= 1");
  need(p.dim >= 1, "problem.dim", "must be >= 1");
  need(p.beta_bc > 0.0, "problem.beta_bc", "must be > 0");
  try {
    parse_elliptic_kind(p.elliptic);
  } catch (const std::exception& e) {
    out.push_back({"problem.elliptic", e.what()});
  }
  need(p.mixture_components >= 1, "problem.mixture_components", "must be >= 1");
  need(p.classes >= 2, "problem.classes", "must be >= 2");
  need(p.features >= 1, "problem.features", "must be >= 1");
  need(p.train_per_class >= 1, "problem.train_per_class", "must be >= 1");
  need(p.test_per_class >= 1, "problem.test_per_class", "must be >= 1");
  need(p.spread > 0.0, "problem.spread", "must be > 0");

  const ModelConfig& m = cfg.model;
  for (int w : m.hidden) need(w >= 1, "model.hidden", "layer widths must be >= 1");
  try {
    parse_activation(m.activation);
  } catch (const std::exception& e) {
    out.push_back({"model.activation", e.what()});
  }
  const int layers = static_cast<int>(m.hidden.size()) + 1;
  std::set<int> distinct;
  for (int l : m.trainable_layers) {
    need(l >= 0 && l < layers, "model.trainable_layers",
         "layer " + std::to_string(l) + " out of range [0, " + std::to_string(layers) + ")");
    need(distinct.insert(l).second, "model.trainable_layers", "duplicate layer " + std::to_string(l));
  }

  const FederationConfig& f = cfg.federation;
  const PartitionConfig& part = f.partition;
  need(f.clients >= 1, "federation.clients", "must be >= 1");
  const std::set<std::string> parts{"interval", "grid", "dirichlet"};
  need(parts.count(part.kind) > 0, "federation.partition.kind", "unknown partition '" + part.kind + "'");
  if (part.kind == "interval") {
    need(part.proportions.empty() || static_cast<int>(part.proportions.size()) == f.clients,
         "federation.partition.proportions", "needs one entry per client");
    double total = 0.0;
    for (double w : part.proportions) {
      need(w > 0.0, "federation.partition.proportions", "entries must be > 0");
      total += w;
    }
    need(part.proportions.empty() || std::abs(total - 1.0) <= 1e-9, "federation.partition.proportions",
         "entries must sum to 1");
    need(p.kind != "blobs", "federation.partition.kind", "blobs data needs the dirichlet partition");
  } else if (part.kind == "grid") {
    need(part.rows >= 1 && part.cols >= 1, "federation.partition.rows", "rows and cols must be >= 1");
    need(part.rows * part.cols == f.clients, "federation.partition.rows", "rows * cols must equal clients");
    need(problem_input_dim(p) == 2 && p.kind != "blobs", "federation.partition.kind",
         "grid partition needs a 2D domain");
  } else if (part.kind == "dirichlet") {
    need(p.kind == "blobs", "federation.partition.kind", "dirichlet partition needs labelled data (blobs)");
    need(part.alpha > 0.0, "federation.partition.alpha", "must be > 0");
  }
  need(part.samples_per_client >= 1, "federation.partition.samples_per_client", "must be >= 1");
  need(part.boundary_per_client >= (is_pde(p) ? 1 : 0), "federation.partition.boundary_per_client",
       is_pde(p) ? "PDE clients need >= 1 boundary point" : "must be >= 0");

  need(f.rounds >= 1, "federation.rounds", "must be >= 1");
  need(f.warmup_rounds >= 0 && f.warmup_rounds <= f.rounds, "federation.warmup_rounds",
       "must lie in [0, rounds]");
  AggregationRule rule = AggregationRule::fedavg;
  try {
    rule = parse_aggregation_rule(f.rule);
  } catch (const std::exception& e) {
    out.push_back({"federation.rule", e.what()});
  }
  need(f.beta_reg >= 0.0, "federation.beta_reg", "must be >= 0");
  need(rule != AggregationRule::fipa_qr || f.beta_reg > 0.0, "federation.beta_reg",
       "the QR path needs beta_reg > 0");
  need(f.gamma > 0.0, "federation.gamma", "must be > 0");
  need(f.local_epochs >= 0, "federation.local_epochs", "must be >= 0");
  try {
    parse_local_optimizer(f.optimizer);
  } catch (const std::exception& e) {
    out.push_back({"federation.optimizer", e.what()});
  }
  need(f.lr > 0.0, "federation.lr", "must be > 0");
  need(f.batch_size >= 0, "federation.batch_size", "must be >= 0 (0: full batch)");
  need(f.prox_mu >= 0.0, "federation.prox_mu", "must be >= 0");
  need(f.participation_fraction > 0.0 && f.participation_fraction <= 1.0, "federation.participation_fraction",
       "must lie in (0, 1]");
  need(f.workers >= 1, "federation.workers", "must be >= 1");
  need(f.sketch.rank >= 1, "federation.sketch.rank", "must be >= 1");
  need(f.sketch.oversampling >= 0, "federation.sketch.oversampling", "must be >= 0");
  need(f.sketch.passes >= 1, "federation.sketch.passes", "must be >= 1");
  need(f.sketch.energy_threshold > 0.0, "federation.sketch.energy_threshold", "must be > 0");

  need(cfg.diagnostics.gn_gamma > 0.0, "diagnostics.gn_gamma", "must be > 0");
  need(!cfg.diagnostics.gn_reference || p.kind != "blobs", "diagnostics.gn_reference",
       "needs a least-squares problem");

  need(!cfg.output.dir.empty(), "output.dir", "must not be empty");
  need(!cfg.output.formats.empty(), "output.formats", "must list at least one format");
  std::set<std::string> fmts;
  for (const auto& fmt : cfg.output.formats) {
    need(fmt == "csv" || fmt == "json", "output.formats", "unknown format '" + fmt + "'");
    need(fmts.insert(fmt).second, "output.formats", "duplicate format '" + fmt + "'");
  }
  return out;
}

ExperimentConfig config_from_json(const json& doc) {
  std::vector<ConfigIssue> issues;
  ExperimentConfig cfg;
  if (!doc.is_object()) throw ConfigError({{"", std::string("expected section, got ") + type_name(doc)}});
  {
    Section root(&doc, "", issues);
    root.read("seed", cfg.seed);
    {
      Section s = root.child("problem");
      ProblemConfig& p = cfg.problem;
      s.read("kind", p.kind);
      s.read("frequency", p.frequency);
      s.read("dim", p.dim);
      s.read("beta_bc", p.beta_bc);
      s.read("elliptic", p.elliptic);
      s.read("coefficient", p.coefficient);
      s.read("mixture_seed", p.mixture_seed);
      s.read("mixture_components", p.mixture_components);
      s.read("classes", p.classes);
      s.read("features", p.features);
      s.read("train_per_class", p.train_per_class);
      s.read("test_per_class", p.test_per_class);
      s.read("spread", p.spread);
    }
    {
      Section s = root.child("model");
      s.read("hidden", cfg.model.hidden);
      s.read("activation", cfg.model.activation);
      s.read("trainable_layers", cfg.model.trainable_layers);
    }
    {
      Section s = root.child("federation");
      FederationConfig& f = cfg.federation;
      s.read("clients", f.clients);
      {
        Section ps = s.child("partition");
        ps.read("kind", f.partition.kind);
        ps.read("proportions", f.partition.proportions);
        ps.read("rows", f.partition.rows);
        ps.read("cols", f.partition.cols);
        ps.read("alpha", f.partition.alpha);
        ps.read("samples_per_client", f.partition.samples_per_client);
        ps.read("boundary_per_client", f.partition.boundary_per_client);
      }
      s.read("rounds", f.rounds);
      s.read("warmup_rounds", f.warmup_rounds);
      s.read("rule", f.rule);
      s.read("beta_reg", f.beta_reg);
      s.read("gamma", f.gamma);
      s.read("local_epochs", f.local_epochs);
      s.read("optimizer", f.optimizer);
      s.read("lr", f.lr);
      s.read("batch_size", f.batch_size);
      s.read("prox_mu", f.prox_mu);
      s.read("participation_fraction", f.participation_fraction);
      s.read("workers", f.workers);
      s.read("exact_curvature", f.exact_curvature);
      s.read("full_curvature", f.full_curvature);
      {
        Section ss = s.child("sketch");
        ss.read("rank", f.sketch.rank);
        ss.read("oversampling", f.sketch.oversampling);
        ss.read("passes", f.sketch.passes);
        ss.read("energy_threshold", f.sketch.energy_threshold);
      }
    }
    {
      Section s = root.child("diagnostics");
      s.read("gn_reference", cfg.diagnostics.gn_reference);
      s.read("gn_gamma", cfg.diagnostics.gn_gamma);
    }
    {
      Section s = root.child("output");
      s.read("dir", cfg.output.dir);
      s.read("formats", cfg.output.formats);
      s.read("record_wall_time", cfg.output.record_wall_time);
    }
  }
  // Constraint checks on values that parsed; type errors already reported.
  std::set<std::string> type_errors;
  for (const auto& i : issues) type_errors.insert(i.path);
  for (auto& issue : validate_config(cfg)) {
    if (!type_errors.count(issue.path)) issues.push_back(std::move(issue));
  }
  if (!issues.empty()) throw ConfigError(std::move(issues));
  return cfg;
}

ExperimentConfig parse_config(const std::string& text) {
  json doc;
  try {
    doc = json::parse(text);
  } catch (const json::parse_error& e) {
    throw ConfigError({{"", std::string("malformed document: ") + e.what()}});
  }
  return config_from_json(doc);
}

json config_to_json(const ExperimentConfig& cfg) {
  const ProblemConfig& p = cfg.problem;
  const FederationConfig& f = cfg.federation;
  json doc;
  doc["seed"] = cfg.seed;
  doc["problem"] = {{"kind", p.kind},
                    {"frequency", p.frequency},
                    {"dim", p.dim},
                    {"beta_bc", p.beta_bc},
                    {"elliptic", p.elliptic},
                    {"coefficient", p.coefficient},
                    {"mixture_seed", p.mixture_seed},
                    {"mixture_components", p.mixture_components},
                    {"classes", p.classes},
                    {"features", p.features},
                    {"train_per_class", p.train_per_class},
                    {"test_per_class", p.test_per_class},
                    {"spread", p.spread}};
  doc["model"] = {{"hidden", cfg.model.hidden},
                  {"activation", cfg.model.activation},
                  {"trainable_layers", cfg.model.trainable_layers}};
  doc["federation"] = {{"clients", f.clients},
                       {"partition",
                        {{"kind", f.partition.kind},
                         {"proportions", f.partition.proportions},
                         {"rows", f.partition.rows},
                         {"cols", f.partition.cols},
                         {"alpha", f.partition.alpha},
                         {"samples_per_client", f.partition.samples_per_client},
                         {"boundary_per_client", f.partition.boundary_per_client}}},
                       {"rounds", f.rounds},
                       {"warmup_rounds", f.warmup_rounds},
                       {"rule", f.rule},
                       {"beta_reg", f.beta_reg},
                       {"gamma", f.gamma},
                       {"local_epochs", f.local_epochs},
                       {"optimizer", f.optimizer},
                       {"lr", f.lr},
                       {"batch_size", f.batch_size},
                       {"prox_mu", f.prox_mu},
                       {"participation_fraction", f.participation_fraction},
                       {"workers", f.workers},
                       {"exact_curvature", f.exact_curvature},
                       {"full_curvature", f.full_curvature},
                       {"sketch",
                        {{"rank", f.sketch.rank},
                         {"oversampling", f.sketch.oversampling},
                         {"passes", f.sketch.passes},
                         {"energy_threshold", f.sketch.energy_threshold}}}};
  doc["diagnostics"] = {{"gn_reference", cfg.diagnostics.gn_reference}, {"gn_gamma", cfg.diagnostics.gn_gamma}};
  doc["output"] = {{"dir", cfg.output.dir},
                   {"formats", cfg.output.formats},
                   {"record_wall_time", cfg.output.record_wall_time}};
  return doc;
}

std::string serialize_config(const ExperimentConfig& cfg) { return config_to_json(cfg).dump(2) + "\n"; }

void set_config_path(json& doc, const std::string& dotted, const json& value) {
  if (dotted.empty()) throw std::invalid_argument("empty parameter path");
  json* node = &doc;
  std::size_t start = 0;
  while (true) {
    const std::size_t dot = dotted.find('.', start);
    const std::string key = dotted.substr(start, dot == std::string::npos ? std::string::npos : dot - start);
    if (key.empty()) throw std::invalid_argument("malformed parameter path '" + dotted + "'");
    if (!node->is_object()) throw std::invalid_argument("parameter path '" + dotted + "' crosses a non-section");
    if (dot == std::string::npos) {
      (*node)[key] = value;
      return;
    }
    node = &(*node)[key];
    if (node->is_null()) *node = json::object();
    start = dot + 1;
  }
}

}  // namespace fipa
