// Micro-benchmarks for the hot paths: weighted logistic fits, ensemble
// regression, per-unit endpoint estimation, and dataset generation.
#include <benchmark/benchmark.h>

#include "crtmle/learners.hpp"
#include "crtmle/simulator.hpp"
#include "crtmle/stage1.hpp"
#include "crtmle/super_learner.hpp"

namespace {

using namespace crtmle;

NamedMatrix bench_matrix(int n, std::uint64_t seed) {
    Rng rng(seed);
    NamedMatrix X;
    X.names = {"l0_h", "l0_x"};
    X.values.resize(n, 2);
    for (int i = 0; i < n; ++i) {
        X.values(i, 0) = rng.bernoulli(0.4) ? 1.0 : 0.0;
        X.values(i, 1) = rng.bernoulli(0.3) ? 1.0 : 0.0;
    }
    return X;
}

Eigen::VectorXd bench_outcome(const NamedMatrix& X, std::uint64_t seed) {
    Rng rng(seed);
    Eigen::VectorXd y(X.rows());
    for (Eigen::Index i = 0; i < X.rows(); ++i) {
        y[i] = rng.bernoulli(expit(-1.5 + 1.2 * X.values(i, 0) + 0.6 * X.values(i, 1))) ? 1.0 : 0.0;
    }
    return y;
}

void bm_fit_logistic(benchmark::State& state) {
    const auto n = static_cast<int>(state.range(0));
    const NamedMatrix X = bench_matrix(n, 11);
    const Eigen::VectorXd y = bench_outcome(X, 12);
    const Eigen::VectorXd w = Eigen::VectorXd::Ones(n);
    const LearnerSpec spec{LearnerKind::main_terms_logistic, {"l0_h", "l0_x"}};
    for (auto _ : state) {
        benchmark::DoNotOptimize(fit_logistic(spec, X, y, w));
    }
}
BENCHMARK(bm_fit_logistic)->Arg(400)->Arg(4000);

void bm_sl_fit(benchmark::State& state) {
    const auto n = static_cast<int>(state.range(0));
    const NamedMatrix X = bench_matrix(n, 21);
    const Eigen::VectorXd y = bench_outcome(X, 22);
    const Eigen::VectorXd w = Eigen::VectorXd::Ones(n);
    const std::vector<LearnerSpec> candidates = {
        {LearnerKind::intercept_only_mean, {}},
        {LearnerKind::main_terms_logistic, {"l0_h", "l0_x"}},
        {LearnerKind::saturated_logistic, {"l0_h", "l0_x"}},
    };
    for (auto _ : state) {
        benchmark::DoNotOptimize(sl_fit(X, y, w, candidates, 10, SlLoss::log_loss, 7));
    }
}
BENCHMARK(bm_sl_fit)->Arg(400);

void bm_estimate_endpoint(benchmark::State& state) {
    DgpConfig dgp = example_dgp();
    dgp.n_clusters = 2;
    const Dataset data = generate(dgp);
    const auto units = group_units(data, UnitLevel::partition);
    AnalysisConfig config;
    config.stage1_adjustment = {"l0_h", "l0_x"};
    config.stage1_adjustment_post = {"l1_z"};
    for (auto _ : state) {
        benchmark::DoNotOptimize(estimate_endpoint(units.front(), config));
    }
}
BENCHMARK(bm_estimate_endpoint);

void bm_generate(benchmark::State& state) {
    const DgpConfig dgp = example_dgp();
    for (auto _ : state) {
        benchmark::DoNotOptimize(generate(dgp));
    }
}
BENCHMARK(bm_generate);

}  // namespace

BENCHMARK_MAIN();
