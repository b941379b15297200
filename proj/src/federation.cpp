#include "fipa/federation.hpp"

#include <algorithm>
#include <atomic>
#include <chrono>
#include <cmath>
#include <exception>
#include <numeric>
#include <stdexcept>
#include <thread>

#include "fipa/gn_reference.hpp"

namespace fipa {

namespace {

constexpr int kStreamParticipation = 0;
constexpr int kStreamTraining = 1;
constexpr int kStreamSketch = 2;
constexpr int kStreamData = 3;

Box slab(const Box& domain, double lo, double hi) {
  Box b = domain;
  const double a = domain.lo(0);
  const double w = domain.hi(0) - domain.lo(0);
  b.lo(0) = a + lo * w;
  b.hi(0) = hi >= 1.0 ? domain.hi(0) : a + hi * w;
  return b;
}

// Runs fn(i) for i in [0, n) on up to `workers` threads; the first failure
// in index order is rethrown.
template <typename Fn>
void parallel_for(std::size_t n, int workers, Fn fn) {
  const auto threads = static_cast<std::size_t>(std::max(1, std::min<int>(workers, static_cast<int>(n))));
  std::vector<std::exception_ptr> errors(n);
  if (threads <= 1) {
    for (std::size_t i = 0; i < n; ++i) {
      try {
        fn(i);
      } catch (...) {
        errors[i] = std::current_exception();
      }
    }
  } else {
    std::atomic<std::size_t> next{0};
    std::vector<std::thread> pool;
    for (std::size_t t = 0; t < threads; ++t) {
      pool.emplace_back([&] {
        for (std::size_t i = next++; i < n; i = next++) {
          try {
            fn(i);
          } catch (...) {
            errors[i] = std::current_exception();
          }
        }
      });
    }
    for (auto& th : pool) th.join();
  }
  for (auto& e : errors) {
    if (e) std::rethrow_exception(e);
  }
}

bool is_fipa(AggregationRule rule) { return rule != AggregationRule::fedavg; }

}  // namespace

// ---------------------------------------------------------------- partitions

std::vector<ClientData> partition_interval(const Problem& problem, int clients, std::span<const double> proportions,
                                           Eigen::Index n_per_client, Eigen::Index n_boundary, std::uint64_t seed) {
  if (clients < 1) throw std::invalid_argument("partition_interval: need at least one client");
  if (n_per_client < 1) throw std::invalid_argument("partition_interval: need at least one sample per client");
  std::vector<double> props(proportions.begin(), proportions.end());
  if (props.empty()) props.assign(static_cast<std::size_t>(clients), 1.0 / clients);
  if (props.size() != static_cast<std::size_t>(clients)) {
    throw std::invalid_argument("partition_interval: expected " + std::to_string(clients) + " proportions");
  }
  double total = 0.0;
  for (double p : props) {
    if (!(p > 0.0)) throw std::invalid_argument("partition_interval: proportions must be positive");
    total += p;
  }
  if (std::abs(total - 1.0) > 1e-9) throw std::invalid_argument("partition_interval: proportions must sum to 1");

  const Box domain = problem.domain();
  std::vector<ClientData> out;
  double lo = 0.0;
  for (int m = 0; m < clients; ++m) {
    const double hi = m + 1 == clients ? 1.0 : lo + props[static_cast<std::size_t>(m)];
    std::mt19937_64 rng = stream_rng(seed, -1, m, kStreamData);
    out.push_back(problem.make_client(m, slab(domain, lo, hi), n_per_client, n_boundary, rng));
    lo = hi;
  }
  return out;
}

std::vector<ClientData> partition_grid(const Problem& problem, int rows, int cols, Eigen::Index n_per_client,
                                       Eigen::Index n_boundary, std::uint64_t seed) {
  if (rows < 1 || cols < 1) throw std::invalid_argument("partition_grid: rows and cols must be >= 1");
  if (problem.input_dim() != 2) throw std::invalid_argument("partition_grid: needs a two-dimensional domain");
  std::vector<ClientData> out;
  for (int i = 0; i < rows; ++i) {
    for (int j = 0; j < cols; ++j) {
      Box cell = Box::unit(2);
      cell.lo << static_cast<double>(j) / cols, static_cast<double>(i) / rows;
      cell.hi << (j + 1 == cols ? 1.0 : static_cast<double>(j + 1) / cols),
          (i + 1 == rows ? 1.0 : static_cast<double>(i + 1) / rows);
      const int id = i * cols + j;
      std::mt19937_64 rng = stream_rng(seed, -1, id, kStreamData);
      out.push_back(problem.make_client(id, cell, n_per_client, n_boundary, rng));
    }
  }
  return out;
}

std::vector<ClientData> partition_dirichlet_labels(const Dataset& pool, int clients, double alpha,
                                                   std::uint64_t seed) {
  if (clients < 1) throw std::invalid_argument("partition_dirichlet_labels: need at least one client");
  if (!(alpha > 0.0)) throw std::invalid_argument("partition_dirichlet_labels: alpha must be > 0");
  if (!pool.has_labels()) throw std::invalid_argument("partition_dirichlet_labels: dataset has no labels");
  if (pool.size() < clients) {
    throw std::invalid_argument("partition_dirichlet_labels: " + std::to_string(pool.size()) +
                                " samples cannot cover " + std::to_string(clients) + " clients");
  }
  const auto m_count = static_cast<std::size_t>(clients);
  std::mt19937_64 rng(seed);
  std::gamma_distribution<double> gamma(alpha, 1.0);

  const int classes = *std::max_element(pool.labels.begin(), pool.labels.end()) + 1;
  std::vector<std::vector<Eigen::Index>> by_label(static_cast<std::size_t>(classes));
  for (Eigen::Index i = 0; i < pool.size(); ++i) by_label[static_cast<std::size_t>(pool.labels[i])].push_back(i);

  std::vector<std::vector<Eigen::Index>> assigned(m_count);
  for (auto& members : by_label) {
    if (members.empty()) continue;
    std::shuffle(members.begin(), members.end(), rng);
    std::vector<double> share(m_count);
    double total = 0.0;
    for (double& s : share) {
      s = gamma(rng);
      total += s;
    }
    if (!(total > 0.0)) {
      // All draws underflowed (tiny alpha): put the label on one client.
      std::fill(share.begin(), share.end(), 0.0);
      share[rng() % m_count] = 1.0;
      total = 1.0;
    }
    // Largest-remainder rounding of n * share.
    const auto n = static_cast<double>(members.size());
    std::vector<std::size_t> counts(m_count);
    std::vector<std::pair<double, std::size_t>> remainders;
    std::size_t used = 0;
    for (std::size_t m = 0; m < m_count; ++m) {
      const double exact = n * share[m] / total;
      counts[m] = static_cast<std::size_t>(std::floor(exact));
      used += counts[m];
      remainders.emplace_back(exact - std::floor(exact), m);
    }
    std::stable_sort(remainders.begin(), remainders.end(),
                     [](const auto& a, const auto& b) { return a.first > b.first; });
    for (std::size_t t = 0; used < members.size(); ++t, ++used) ++counts[remainders[t % m_count].second];
    std::size_t at = 0;
    for (std::size_t m = 0; m < m_count; ++m) {
      for (std::size_t c = 0; c < counts[m]; ++c) assigned[m].push_back(members[at++]);
    }
  }

  for (std::size_t m = 0; m < m_count; ++m) {
    if (!assigned[m].empty()) continue;
    const auto largest = std::max_element(assigned.begin(), assigned.end(),
                                          [](const auto& a, const auto& b) { return a.size() < b.size(); });
    assigned[m].push_back(largest->back());
    largest->pop_back();
  }

  std::vector<ClientData> out;
  for (std::size_t m = 0; m < m_count; ++m) {
    std::sort(assigned[m].begin(), assigned[m].end());
    ClientData c;
    c.id = static_cast<int>(m);
    c.samples = pool.subset(assigned[m]);
    out.push_back(std::move(c));
  }
  return out;
}

// ---------------------------------------------------------------- training

const char* to_string(LocalOptimizer opt) { return opt == LocalOptimizer::sgd ? "sgd" : "adam"; }

LocalOptimizer parse_local_optimizer(const std::string& name) {
  if (name == "sgd") return LocalOptimizer::sgd;
  if (name == "adam") return LocalOptimizer::adam;
  throw std::invalid_argument("unknown local optimizer '" + name + "'");
}

void RoundConfig::validate() const {
  if (local_epochs < 0) throw std::invalid_argument("local_epochs must be >= 0");
  if (!(lr > 0.0)) throw std::invalid_argument("lr must be > 0");
  if (batch_size < 0) throw std::invalid_argument("batch_size must be >= 0");
  if (!(prox_mu >= 0.0)) throw std::invalid_argument("prox_mu must be >= 0");
  if (!(participation_fraction > 0.0 && participation_fraction <= 1.0)) {
    throw std::invalid_argument("participation_fraction must lie in (0, 1]");
  }
  if (sketch.rank < 1) throw std::invalid_argument("sketch rank must be >= 1");
  if (sketch.oversampling < 0) throw std::invalid_argument("sketch oversampling must be >= 0");
  if (sketch.passes < 1) throw std::invalid_argument("sketch passes must be >= 1");
  if (!(sketch.energy_threshold > 0.0)) throw std::invalid_argument("sketch energy_threshold must be > 0");
  if (workers < 1) throw std::invalid_argument("workers must be >= 1");
}

std::mt19937_64 stream_rng(std::uint64_t seed, int round, int client, int purpose) {
  std::seed_seq seq{static_cast<std::uint32_t>(seed), static_cast<std::uint32_t>(seed >> 32),
                    static_cast<std::uint32_t>(round + 1), static_cast<std::uint32_t>(client + 1),
                    static_cast<std::uint32_t>(purpose)};
  return std::mt19937_64(seq);
}

LocalResult local_train(const MlpSpec& spec, const Problem& problem, const ParamVector& theta,
                        const ClientData& client, const RoundConfig& cfg, std::mt19937_64& rng) {
  const Vector start = theta.trainable_values();
  Vector x = start;
  ParamVector work = theta;
  const Eigen::Index n = client.sample_count();
  const Eigen::Index bs = cfg.batch_size <= 0 || cfg.batch_size >= n ? n : cfg.batch_size;

  std::vector<Eigen::Index> order(static_cast<std::size_t>(n));
  std::iota(order.begin(), order.end(), Eigen::Index{0});
  Vector m1 = Vector::Zero(x.size());
  Vector m2 = Vector::Zero(x.size());
  constexpr double b1 = 0.9, b2 = 0.999, eps = 1e-8;
  int t = 0;

  for (int epoch = 0; epoch < cfg.local_epochs; ++epoch) {
    if (bs < n) std::shuffle(order.begin(), order.end(), rng);
    for (Eigen::Index at = 0; at < n; at += bs) {
      std::span<const Eigen::Index> batch;
      if (bs < n) batch = std::span<const Eigen::Index>(order).subspan(at, std::min(bs, n - at));
      work.set_trainable(x);
      Vector g = work.gather(problem.local_loss_and_gradient(spec, work.values(), client, batch).grad);
      if (cfg.optimizer == LocalOptimizer::sgd) {
        x -= cfg.lr * g;
      } else {
        ++t;
        m1 = b1 * m1 + (1.0 - b1) * g;
        m2 = b2 * m2 + (1.0 - b2) * g.cwiseProduct(g);
        const double c1 = 1.0 - std::pow(b1, t);
        const double c2 = 1.0 - std::pow(b2, t);
        x.array() -= cfg.lr * (m1.array() / c1) / ((m2.array() / c2).sqrt() + eps);
      }
      // Proximal term handled by its exact prox map, stable for any lr * mu.
      if (cfg.prox_mu > 0.0) x = start + (x - start) / (1.0 + cfg.lr * cfg.prox_mu);
    }
  }
  work.set_trainable(x);
  LocalResult out;
  out.delta = theta.scatter(x - start);
  out.final_loss = problem.local_loss(spec, work.values(), client);
  return out;
}

FisherSketch client_sketch(const MlpSpec& spec, const Problem& problem, const ParamVector& theta,
                           const ClientData& client, const RoundConfig& cfg, int round) {
  const auto op = problem.fisher(spec, theta, client);
  const Eigen::Index p_eff = op->dim();
  const int rank = static_cast<int>(std::min<Eigen::Index>(cfg.sketch.rank, p_eff));
  if (cfg.full_curvature) return full_fisher(*op);
  if (cfg.exact_curvature) return exact_sketch(*op, rank, cfg.sketch.energy_threshold);
  SketchConfig sc = cfg.sketch;
  sc.rank = rank;
  sc.oversampling = static_cast<int>(std::min<Eigen::Index>(sc.oversampling, p_eff - rank));
  sc.seed = stream_rng(cfg.seed, round, client.id, kStreamSketch)();
  return sketch_fim(*op, sc);
}

// ---------------------------------------------------------------- rounds

RoundRecord run_round(const MlpSpec& spec, const Problem& problem, std::span<const ClientData> clients,
                      ParamVector& theta, const RoundConfig& cfg, const ServerConfig& server, int round) {
  if (clients.empty()) throw std::invalid_argument("run_round: no clients");
  const auto started = std::chrono::steady_clock::now();

  std::vector<std::size_t> order(clients.size());
  std::iota(order.begin(), order.end(), std::size_t{0});
  std::stable_sort(order.begin(), order.end(),
                   [&](std::size_t a, std::size_t b) { return clients[a].id < clients[b].id; });
  const auto m_count = clients.size();
  auto take = static_cast<std::size_t>(std::llround(cfg.participation_fraction * static_cast<double>(m_count)));
  take = std::clamp<std::size_t>(take, 1, m_count);
  std::vector<std::size_t> chosen;
  if (take == m_count) {
    chosen = order;
  } else {
    std::mt19937_64 rng = stream_rng(cfg.seed, round, -1, kStreamParticipation);
    std::sample(order.begin(), order.end(), std::back_inserter(chosen), take, rng);
  }

  const bool sketching = is_fipa(server.rule);
  std::vector<ClientUpdate> updates(chosen.size());
  std::vector<double> losses(chosen.size());
  parallel_for(chosen.size(), cfg.workers, [&](std::size_t i) {
    const ClientData& c = clients[chosen[i]];
    std::mt19937_64 rng = stream_rng(cfg.seed, round, c.id, kStreamTraining);
    LocalResult lr = local_train(spec, problem, theta, c, cfg, rng);
    ClientUpdate& u = updates[i];
    u.client_id = c.id;
    u.n_samples = c.sample_count();
    u.delta = std::move(lr.delta);
    if (sketching) u.sketch = client_sketch(spec, problem, theta, c, cfg, round);
    u.bytes_up = payload_bytes_up(theta.trainable_count(), sketching ? u.sketch->rank() : 0, sketching);
    losses[i] = lr.final_loss;
  });

  RoundRecord rec;
  rec.round = round;
  double total = 0.0, weighted = 0.0;
  for (std::size_t i = 0; i < updates.size(); ++i) {
    rec.participants.push_back(updates[i].client_id);
    rec.train_losses.push_back(losses[i]);
    rec.bytes_up += updates[i].bytes_up;
    rec.bytes_down += payload_bytes_down(theta.size());
    if (sketching) rec.ranks.push_back(updates[i].sketch->rank());
    total += static_cast<double>(updates[i].n_samples);
    weighted += static_cast<double>(updates[i].n_samples) * losses[i];
  }
  rec.train_loss_mean = weighted / total;

  AggregationResult agg = aggregate(theta, updates, server);
  theta = std::move(agg.theta);
  rec.rule = agg.applied;
  rec.solve = agg.diagnostics;
  rec.test_metric = problem.eval_metric(spec, theta.values());
  rec.wall_ms =
      std::chrono::duration<double, std::milli>(std::chrono::steady_clock::now() - started).count();
  return rec;
}

void Schedule::validate() const {
  if (total_rounds < 1) throw std::invalid_argument("rounds must be >= 1");
  if (warmup_rounds < 0 || warmup_rounds > total_rounds) {
    throw std::invalid_argument("warmup_rounds must lie in [0, rounds]");
  }
  main.validate();
}

ExperimentResult continue_experiment(const MlpSpec& spec, const Problem& problem,
                                     std::span<const ClientData> clients, const ParamVector& theta,
                                     const RoundConfig& cfg, const ServerConfig& server, int first_round, int rounds,
                                     const GnDiagnosticsConfig& gn, const RoundObserver& observer) {
  cfg.validate();
  server.validate();
  if (gn.enabled && problem.kind() == ProblemKind::classification) {
    throw std::invalid_argument("Gauss-Newton diagnostics need a least-squares problem");
  }
  ExperimentResult res;
  res.final_theta = theta;
  res.switch_theta = theta;
  res.initial_metric = problem.eval_metric(spec, theta.values());

  ResidualFn residuals;
  ParamVector gn_theta = theta;
  ParamVector t_prev;  // T_GN at the previous federated iterate
  std::vector<double> gn_steps;
  if (gn.enabled) {
    residuals = centralized_residuals(spec, problem, clients);
    t_prev = gn_step(residuals, theta, gn.gamma).theta;
  }

  for (int k = 0; k < rounds; ++k) {
    RoundRecord rec = run_round(spec, problem, clients, res.final_theta, cfg, server, first_round + k);
    if (gn.enabled) {
      // With a shared start, the first reference step is T_GN(theta_0).
      const ParamVector gn_next = k == 0 ? t_prev : gn_step(residuals, gn_theta, gn.gamma).theta;
      gn_steps.push_back((gn_next.values() - gn_theta.values()).norm());
      gn_theta = gn_next;
      rec.delta_k = (res.final_theta.values() - t_prev.values()).norm();
      rec.e_k = (res.final_theta.values() - gn_theta.values()).norm();
      if (gn_steps.size() >= 3 && *std::min_element(gn_steps.begin(), gn_steps.end()) > 0.0) {
        rec.rho_hat = contraction_estimate(gn_steps);
      }
      if (k + 1 < rounds) t_prev = gn_step(residuals, res.final_theta, gn.gamma).theta;
    }
    if (observer) observer(rec, res.final_theta);
    res.records.push_back(std::move(rec));
  }
  return res;
}

ExperimentResult run_experiment(const MlpSpec& spec, const Problem& problem, std::span<const ClientData> clients,
                                const ParamVector& theta0, const RoundConfig& cfg, const Schedule& schedule,
                                const GnDiagnosticsConfig& gn, const RoundObserver& observer) {
  schedule.validate();
  cfg.validate();
  ExperimentResult res;
  res.initial_metric = problem.eval_metric(spec, theta0.values());
  ParamVector theta = theta0;
  if (schedule.warmup_rounds > 0) {
    ExperimentResult warm = continue_experiment(spec, problem, clients, theta, cfg, ServerConfig{}, 1,
                                                schedule.warmup_rounds, {}, observer);
    res.records = std::move(warm.records);
    theta = warm.final_theta;
  }
  res.switch_theta = theta;
  const int main_rounds = schedule.total_rounds - schedule.warmup_rounds;
  if (main_rounds > 0) {
    ExperimentResult main = continue_experiment(spec, problem, clients, theta, cfg, schedule.main,
                                                schedule.warmup_rounds + 1, main_rounds, gn, observer);
    for (auto& r : main.records) res.records.push_back(std::move(r));
    theta = main.final_theta;
  }
  res.final_theta = theta;
  return res;
}

std::vector<GapRecord> gap_history(std::span<const RoundRecord> records) {
  std::vector<GapRecord> out;
  for (const RoundRecord& r : records) {
    if (!r.e_k || !r.delta_k) continue;
    if (out.empty()) out.push_back(GapRecord{});
    out.back().delta = *r.delta_k;
    GapRecord next;
    next.k = static_cast<int>(out.size());
    next.e = *r.e_k;
    out.push_back(next);
  }
  return out;
}

}  // namespace fipa
