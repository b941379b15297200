#include <doctest.h>

#include <algorithm>
#include <cmath>
#include <set>

#include "fipa/federation.hpp"
#include "test_util.hpp"

using namespace fipa;

namespace {

std::vector<ClientData> sine_pair(const Problem& problem, Eigen::Index n, std::uint64_t seed) {
  return partition_interval(problem, 2, {}, n, 0, seed);
}

bool same_record(const RoundRecord& a, const RoundRecord& b) {
  return a.round == b.round && a.rule == b.rule && a.participants == b.participants &&
         a.train_losses == b.train_losses && a.train_loss_mean == b.train_loss_mean &&
         a.test_metric == b.test_metric && a.bytes_up == b.bytes_up && a.bytes_down == b.bytes_down &&
         a.ranks == b.ranks && a.solve.r_tot == b.solve.r_tot && a.rho_hat == b.rho_hat && a.e_k == b.e_k &&
         a.delta_k == b.delta_k;
}

std::vector<int> label_histogram(const ClientData& c, int classes) {
  std::vector<int> h(static_cast<std::size_t>(classes), 0);
  for (int l : c.samples.labels) ++h[static_cast<std::size_t>(l)];
  return h;
}

// 1-w-1 tanh net whose hidden units are fixed, well-separated ramps; only
// the output layer trains, so the model is linear in its trainable part.
ParamVector tiled_features(const MlpSpec& spec, std::uint64_t seed, double slope) {
  const int width = spec.widths[1];
  Vector v = init_params(spec, seed).values();
  for (int j = 0; j < width; ++j) {
    const double centre = (j + 0.5) / width;
    v(j) = slope;
    v(width + j) = -slope * centre;
  }
  return ParamVector(v, layer_mask(spec, {1}));
}

}  // namespace

TEST_CASE("interval partition tiles the domain") {
  const auto problem = sine_target(2);
  const std::vector<double> props{0.25, 0.75};
  const auto clients = partition_interval(*problem, 2, props, 50, 0, 3);
  REQUIRE(clients.size() == 2);
  CHECK(clients[0].id == 0);
  CHECK(clients[1].id == 1);
  CHECK(clients[0].region.hi(0) == 0.25);
  CHECK(clients[1].region.lo(0) == 0.25);
  CHECK(clients[1].region.hi(0) == 1.0);
  for (const ClientData& c : clients) {
    CHECK(c.sample_count() == 50);
    for (Eigen::Index i = 0; i < c.sample_count(); ++i) CHECK(c.region.contains(c.samples.inputs.col(i)));
  }
  const auto again = partition_interval(*problem, 2, props, 50, 0, 3);
  CHECK(again[1].samples.inputs == clients[1].samples.inputs);

  const std::vector<double> bad{0.5, 0.6};
  CHECK_THROWS_AS(partition_interval(*problem, 2, bad, 50, 0, 3), std::invalid_argument);
  const std::vector<double> three{0.2, 0.3, 0.5};
  CHECK_THROWS_AS(partition_interval(*problem, 2, three, 50, 0, 3), std::invalid_argument);
  CHECK_THROWS_AS(partition_interval(*problem, 0, {}, 50, 0, 3), std::invalid_argument);
}

TEST_CASE("grid partition of the unit square") {
  const auto problem = poisson_problem(2);
  const auto clients = partition_grid(*problem, 2, 3, 40, 8, 5);
  REQUIRE(clients.size() == 6);
  for (const ClientData& c : clients) {
    const int i = c.id / 3, j = c.id % 3;
    CHECK(c.region.lo(0) == doctest::Approx(j / 3.0));
    CHECK(c.region.lo(1) == doctest::Approx(i / 2.0));
    CHECK(c.sample_count() == 40);
    CHECK(c.boundary.cols() == 8);
    for (Eigen::Index k = 0; k < c.sample_count(); ++k) CHECK(c.region.contains(c.samples.inputs.col(k)));
  }
  CHECK_THROWS_AS(partition_grid(*sine_target(1), 2, 2, 10, 0, 1), std::invalid_argument);
}

TEST_CASE("Dirichlet label partition") {
  SUBCASE("conservation") {
    const BlobData blobs = synthetic_classification(5, 40, 2, 3.0, 9);
    const auto clients = partition_dirichlet_labels(blobs.data, 7, 0.3, 4);
    std::vector<double> seen;
    Eigen::Index total = 0;
    for (const ClientData& c : clients) {
      CHECK(c.sample_count() >= 1);
      total += c.sample_count();
      for (Eigen::Index i = 0; i < c.sample_count(); ++i) seen.push_back(c.samples.inputs(0, i));
    }
    CHECK(total == blobs.data.size());
    std::vector<double> all(blobs.data.inputs.row(0).begin(), blobs.data.inputs.row(0).end());
    std::sort(seen.begin(), seen.end());
    std::sort(all.begin(), all.end());
    CHECK(seen == all);
  }

  SUBCASE("large alpha approaches the global histogram") {
    double worst = 0.0;
    for (int s = 0; s < 20; ++s) {
      const BlobData blobs = synthetic_classification(10, 100, 2, 3.0, 2000 + s);
      for (const ClientData& c : partition_dirichlet_labels(blobs.data, 10, 1e6, s)) {
        const std::vector<int> h = label_histogram(c, 10);
        for (int count : h) {
          const double share = static_cast<double>(count) / static_cast<double>(c.sample_count());
          worst = std::max(worst, std::abs(share - 0.1) / 0.1);
        }
      }
    }
    CHECK(worst <= 0.1);
  }

  SUBCASE("small alpha concentrates labels") {
    double mean_share = 0.0;
    for (int s = 0; s < 50; ++s) {
      const BlobData blobs = synthetic_classification(10, 100, 2, 3.0, 1000 + s);
      double run = 0.0;
      for (const ClientData& c : partition_dirichlet_labels(blobs.data, 10, 0.01, s)) {
        const std::vector<int> h = label_histogram(c, 10);
        run += static_cast<double>(*std::max_element(h.begin(), h.end())) / static_cast<double>(c.sample_count());
      }
      mean_share += run / 10.0;
    }
    CHECK(mean_share / 50.0 >= 0.8);
  }

  SUBCASE("errors") {
    const BlobData blobs = synthetic_classification(2, 2, 2, 3.0, 1);
    CHECK_THROWS_AS(partition_dirichlet_labels(blobs.data, 5, 1.0, 1), std::invalid_argument);
    CHECK_THROWS_AS(partition_dirichlet_labels(blobs.data, 2, 0.0, 1), std::invalid_argument);
  }
}

TEST_CASE("local training") {
  const auto problem = sine_target(2);
  const auto clients = sine_pair(*problem, 64, 2);
  const MlpSpec spec = MlpSpec::uniform({1, 8, 1}, Activation::tanh);
  const ParamVector theta = init_params(spec, 11);
  RoundConfig cfg;
  cfg.optimizer = LocalOptimizer::sgd;
  cfg.lr = 0.05;
  std::mt19937_64 rng(1);

  SUBCASE("zero epochs") {
    cfg.local_epochs = 0;
    const LocalResult r = local_train(spec, *problem, theta, clients[0], cfg, rng);
    CHECK(r.delta.isZero(0.0));
    CHECK(r.final_loss == problem->local_loss(spec, theta.values(), clients[0]));
  }

  SUBCASE("one full-batch SGD step is -lr grad") {
    cfg.local_epochs = 1;
    const LocalResult r = local_train(spec, *problem, theta, clients[0], cfg, rng);
    const Vector grad = problem->local_loss_and_gradient(spec, theta.values(), clients[0]).grad;
    CHECK((r.delta + cfg.lr * grad).norm() <= 1e-15 * grad.norm());
  }

  SUBCASE("masked coordinates stay put") {
    const ParamVector head(theta.values(), layer_mask(spec, {1}));
    cfg.local_epochs = 3;
    const LocalResult r = local_train(spec, *problem, head, clients[0], cfg, rng);
    CHECK(r.delta.head(spec.layer_offset(1)).isZero(0.0));
    CHECK(r.delta.tail(9).norm() > 0.0);
  }

  SUBCASE("proximal pinning") {
    for (LocalOptimizer opt : {LocalOptimizer::sgd, LocalOptimizer::adam}) {
      cfg.optimizer = opt;
      cfg.lr = 1e-2;
      cfg.local_epochs = 1;
      const double one_step = local_train(spec, *problem, theta, clients[0], cfg, rng).delta.norm();
      cfg.local_epochs = 5;
      cfg.prox_mu = 1e6;
      const double pinned = local_train(spec, *problem, theta, clients[0], cfg, rng).delta.norm();
      cfg.prox_mu = 0.0;
      CHECK(pinned <= 1e-3 * one_step);
    }
  }

  SUBCASE("Adam is deterministic given the stream") {
    cfg.optimizer = LocalOptimizer::adam;
    cfg.local_epochs = 2;
    cfg.batch_size = 16;
    std::mt19937_64 a = stream_rng(4, 1, 0, 1), b = stream_rng(4, 1, 0, 1);
    CHECK(local_train(spec, *problem, theta, clients[0], cfg, a).delta ==
          local_train(spec, *problem, theta, clients[0], cfg, b).delta);
  }
}

TEST_CASE("stream RNG separates its arguments") {
  std::set<std::uint64_t> draws;
  for (int round : {0, 1})
    for (int client : {-1, 0, 1})
      for (int purpose : {0, 1, 2}) draws.insert(stream_rng(7, round, client, purpose)());
  CHECK(draws.size() == 18);
  CHECK(stream_rng(7, 1, 1, 1)() == stream_rng(7, 1, 1, 1)());
  CHECK(stream_rng(7, 1, 1, 1)() != stream_rng(8, 1, 1, 1)());
}

TEST_CASE("FedAvg round is the sample-weighted mean of local updates") {
  const auto problem = sine_target(2);
  const std::vector<double> props{0.3, 0.7};
  const auto clients = partition_interval(*problem, 2, props, 30, 0, 1);
  // Unequal sizes.
  std::vector<ClientData> uneven = clients;
  const std::vector<Eigen::Index> keep{0, 1, 2, 3, 4, 5, 6, 7, 8, 9};
  uneven[0].samples = uneven[0].samples.subset(keep);

  const MlpSpec spec = MlpSpec::uniform({1, 6, 1}, Activation::tanh);
  const ParamVector theta0 = init_params(spec, 2);
  RoundConfig cfg;
  cfg.local_epochs = 2;
  cfg.seed = 5;

  Vector expected = theta0.values();
  double loss_mean = 0.0;
  for (const ClientData& c : uneven) {
    std::mt19937_64 rng = stream_rng(cfg.seed, 3, c.id, 1);
    const LocalResult r = local_train(spec, *problem, theta0, c, cfg, rng);
    const double w = static_cast<double>(c.sample_count()) / 40.0;
    expected += w * r.delta;
    loss_mean += w * r.final_loss;
  }
  ParamVector theta = theta0;
  const RoundRecord rec = run_round(spec, *problem, uneven, theta, cfg, ServerConfig{}, 3);
  CHECK(fipa::testing::rel_diff(theta.values(), expected) <= 1e-14);
  CHECK(rec.train_loss_mean == doctest::Approx(loss_mean).epsilon(1e-14));
  CHECK(rec.participants == std::vector<int>{0, 1});
  CHECK(rec.rule == AggregationRule::fedavg);
  CHECK(rec.ranks.empty());
  CHECK(rec.test_metric == problem->eval_metric(spec, theta.values()));
}

TEST_CASE("single IID client FedAvg round equals local training") {
  const auto problem = sine_target(1);
  const auto clients = partition_interval(*problem, 1, {}, 40, 0, 8);
  const MlpSpec spec = MlpSpec::uniform({1, 5, 1}, Activation::tanh);
  const ParamVector theta0 = init_params(spec, 3);
  RoundConfig cfg;
  cfg.local_epochs = 4;
  cfg.batch_size = 8;
  cfg.seed = 2;
  std::mt19937_64 rng = stream_rng(cfg.seed, 1, 0, 1);
  const Vector centralized = theta0.values() + local_train(spec, *problem, theta0, clients[0], cfg, rng).delta;
  ParamVector theta = theta0;
  run_round(spec, *problem, clients, theta, cfg, ServerConfig{}, 1);
  CHECK(theta.values() == centralized);
}

TEST_CASE("rounds are deterministic and independent of the worker count") {
  const auto problem = sine_target(2);
  const auto clients = partition_interval(*problem, 4, {}, 40, 0, 3);
  const MlpSpec spec = MlpSpec::uniform({1, 8, 1}, Activation::tanh);
  RoundConfig cfg;
  cfg.local_epochs = 2;
  cfg.batch_size = 10;
  cfg.seed = 17;
  cfg.sketch.rank = 4;
  ServerConfig server{AggregationRule::fipa_qr, 1e-3, 1.0};

  auto run = [&](int workers) {
    RoundConfig c = cfg;
    c.workers = workers;
    ParamVector theta = init_params(spec, 1);
    std::vector<RoundRecord> recs;
    for (int k = 1; k <= 3; ++k) recs.push_back(run_round(spec, *problem, clients, theta, c, server, k));
    return std::make_pair(theta, recs);
  };
  const auto a = run(1);
  const auto b = run(1);
  const auto c = run(4);
  CHECK(a.first.values() == b.first.values());
  CHECK(a.first.values() == c.first.values());
  for (std::size_t k = 0; k < a.second.size(); ++k) {
    CHECK(same_record(a.second[k], b.second[k]));
    CHECK(same_record(a.second[k], c.second[k]));
  }
}

TEST_CASE("byte accounting") {
  const auto problem = sine_target(2);
  const auto clients = partition_interval(*problem, 3, {}, 30, 0, 1);
  const MlpSpec spec = MlpSpec::uniform({1, 6, 1}, Activation::tanh);
  RoundConfig cfg;
  cfg.local_epochs = 1;
  cfg.sketch.rank = 3;

  SUBCASE("FIPA") {
    ParamVector theta = init_params(spec, 4);
    const auto p = static_cast<std::uint64_t>(theta.trainable_count());
    const RoundRecord rec =
        run_round(spec, *problem, clients, theta, cfg, ServerConfig{AggregationRule::fipa_qr, 1e-3, 1.0}, 1);
    std::uint64_t up = 0;
    REQUIRE(rec.ranks.size() == 3);
    for (int r : rec.ranks) {
      CHECK(r >= 1);
      up += 8 * (p + p * static_cast<std::uint64_t>(r) + static_cast<std::uint64_t>(r));
    }
    CHECK(rec.bytes_up == up);
    CHECK(rec.bytes_down == 3 * 8 * p);
  }

  SUBCASE("FedAvg on a masked model counts trainable coordinates") {
    ParamVector theta(init_params(spec, 4).values(), layer_mask(spec, {1}));
    const RoundRecord rec = run_round(spec, *problem, clients, theta, cfg, ServerConfig{}, 1);
    CHECK(rec.bytes_up == 3 * 8 * 7);
    CHECK(rec.bytes_down == 3 * 8 * static_cast<std::uint64_t>(spec.param_count()));
  }
}

TEST_CASE("partial participation") {
  const auto problem = sine_target(1);
  const auto clients = partition_interval(*problem, 10, {}, 10, 0, 1);
  const MlpSpec spec = MlpSpec::uniform({1, 3, 1}, Activation::tanh);
  RoundConfig cfg;
  cfg.local_epochs = 1;
  cfg.participation_fraction = 0.5;
  cfg.seed = 9;
  ParamVector theta = init_params(spec, 1);
  std::set<std::vector<int>> subsets;
  for (int k = 1; k <= 6; ++k) {
    const RoundRecord rec = run_round(spec, *problem, clients, theta, cfg, ServerConfig{}, k);
    CHECK(rec.participants.size() == 5);
    CHECK(std::is_sorted(rec.participants.begin(), rec.participants.end()));
    CHECK(std::set<int>(rec.participants.begin(), rec.participants.end()).size() == 5);
    CHECK(rec.bytes_up == 5 * 8 * 10);
    subsets.insert(rec.participants);
  }
  CHECK(subsets.size() > 1);

  cfg.participation_fraction = 0.01;
  const RoundRecord one = run_round(spec, *problem, clients, theta, cfg, ServerConfig{}, 7);
  CHECK(one.participants.size() == 1);

  cfg.participation_fraction = 0.0;
  CHECK_THROWS_AS(cfg.validate(), std::invalid_argument);
}

TEST_CASE("two-stage schedule") {
  const auto problem = sine_target(2);
  const auto clients = sine_pair(*problem, 30, 6);
  const MlpSpec spec = MlpSpec::uniform({1, 6, 1}, Activation::tanh);
  const ParamVector theta0 = init_params(spec, 6);
  RoundConfig cfg;
  cfg.local_epochs = 2;
  cfg.seed = 6;
  cfg.sketch.rank = 3;

  Schedule all_warm;
  all_warm.total_rounds = 4;
  all_warm.warmup_rounds = 4;
  all_warm.main = ServerConfig{AggregationRule::fipa_qr, 1e-3, 1.0};
  Schedule pure;
  pure.total_rounds = 4;
  const ExperimentResult a = run_experiment(spec, *problem, clients, theta0, cfg, all_warm);
  const ExperimentResult b = run_experiment(spec, *problem, clients, theta0, cfg, pure);
  REQUIRE(a.records.size() == 4);
  CHECK(a.final_theta.values() == b.final_theta.values());
  for (std::size_t k = 0; k < 4; ++k) CHECK(same_record(a.records[k], b.records[k]));

  Schedule split;
  split.total_rounds = 5;
  split.warmup_rounds = 2;
  split.main = ServerConfig{AggregationRule::fipa_qr, 1e-3, 1.0};
  int observed = 0;
  const ExperimentResult c = run_experiment(spec, *problem, clients, theta0, cfg, split, {},
                                            [&](const RoundRecord&, const ParamVector&) { ++observed; });
  CHECK(observed == 5);
  CHECK(c.records[1].rule == AggregationRule::fedavg);
  CHECK(c.records[2].rule == AggregationRule::fipa_qr);
  CHECK(c.records[2].round == 3);
  CHECK(c.records[0].round == 1);
  // The refinement stage restarts from the switch point.
  const ExperimentResult d = continue_experiment(spec, *problem, clients, c.switch_theta, cfg, split.main, 3, 3);
  CHECK(d.final_theta.values() == c.final_theta.values());

  Schedule bad = split;
  bad.warmup_rounds = 6;
  CHECK_THROWS_AS(bad.validate(), std::invalid_argument);
}

TEST_CASE("Gauss-Newton diagnostics on a head-only model") {
  const auto problem = sine_target(2);
  const auto clients = sine_pair(*problem, 200, 1);
  const MlpSpec spec = MlpSpec::uniform({1, 6, 1}, Activation::tanh);
  const ParamVector theta0 = tiled_features(spec, 1, 10.0);
  RoundConfig cfg;
  cfg.local_epochs = 3;
  cfg.lr = 1e-2;
  cfg.batch_size = 50;
  cfg.sketch.rank = 3;
  cfg.sketch.oversampling = 1;
  const ServerConfig server{AggregationRule::fipa_qr, 1e-6, 0.5};
  const ExperimentResult res =
      continue_experiment(spec, *problem, clients, theta0, cfg, server, 1, 12, GnDiagnosticsConfig{true, 0.5});

  for (std::size_t k = 0; k < res.records.size(); ++k) {
    REQUIRE(res.records[k].e_k.has_value());
    REQUIRE(res.records[k].delta_k.has_value());
    CHECK(res.records[k].rho_hat.has_value() == (k >= 2));
  }
  // The model is linear in its trainable part: GN contracts at exactly 1 - gamma.
  CHECK(*res.records.back().rho_hat == doctest::Approx(0.5).epsilon(1e-6));

  const std::vector<GapRecord> gaps = gap_history(res.records);
  REQUIRE(gaps.size() == 13);
  CHECK(gaps[0].e == 0.0);
  CHECK(gaps[0].delta == *res.records[0].delta_k);
  CHECK(gaps[1].e == *res.records[0].e_k);
  // First round: the reference is T_GN(theta_0), so e_1 and delta_0 coincide.
  CHECK(gaps[1].e == gaps[0].delta);
  CHECK(recursion_satisfaction(gaps, *res.records.back().rho_hat) == 1.0);

  const ExperimentResult off = continue_experiment(spec, *problem, clients, theta0, cfg, server, 1, 2);
  CHECK_FALSE(off.records[0].e_k.has_value());
  CHECK(gap_history(off.records).empty());

  const auto blobs = blob_classification(3, 10, 10, 2, 3.0, 1);
  const auto cls_clients = partition_dirichlet_labels(blobs->train_pool(), 2, 1.0, 1);
  const MlpSpec cspec = MlpSpec::uniform({2, 4, 3}, Activation::tanh);
  CHECK_THROWS_AS(continue_experiment(cspec, *blobs, cls_clients, init_params(cspec, 1), cfg, ServerConfig{}, 1, 1,
                                      GnDiagnosticsConfig{true, 0.5}),
                  std::invalid_argument);
}

TEST_CASE("FIPA refinement beats continued FedAvg on the sine benchmark") {
  const auto problem = sine_target(2);
  const MlpSpec spec = MlpSpec::uniform({1, 32, 32, 1}, Activation::tanh);
  for (std::uint64_t seed : {1, 2, 3}) {
    CAPTURE(seed);
    const auto clients = sine_pair(*problem, 1000, seed);
    RoundConfig cfg;
    cfg.lr = 1e-3;
    cfg.batch_size = 100;
    cfg.seed = seed;
    cfg.workers = 2;
    cfg.sketch.rank = 16;
    cfg.sketch.energy_threshold = 1.0;
    Schedule warm;
    warm.total_rounds = 200;
    warm.warmup_rounds = 200;
    const ExperimentResult w = run_experiment(spec, *problem, clients, init_params(spec, seed), cfg, warm);
    const ExperimentResult avg = continue_experiment(spec, *problem, clients, w.final_theta, cfg, ServerConfig{}, 201, 20);
    const ExperimentResult fipa = continue_experiment(spec, *problem, clients, w.final_theta, cfg,
                                                      ServerConfig{AggregationRule::fipa_qr, 1e-3, 0.5}, 201, 20);
    for (std::size_t k = 10; k < 20; ++k) CHECK(fipa.records[k].test_metric < avg.records[k].test_metric);
  }
}
