#include "crtmle/super_learner.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <numeric>

#include "crtmle/rng.hpp"

namespace crtmle {

namespace {

constexpr double kMetaTol = 1e-8;
constexpr int kMetaMaxIterations = 500;
constexpr int kRandomRestarts = 2;
constexpr int kFoldRedraws = 20;

bool is_binary(const Eigen::VectorXd& y) {
    for (Eigen::Index i = 0; i < y.size(); ++i) {
        if (y[i] != 0.0 && y[i] != 1.0) return false;
    }
    return true;
}

std::vector<int> deal_round_robin(const std::vector<std::vector<Eigen::Index>>& groups,
                                  Eigen::Index n, int folds) {
    std::vector<int> fold_of(static_cast<std::size_t>(n), 0);
    int next = 0;
    for (const auto& group : groups) {
        for (Eigen::Index idx : group) {
            fold_of[static_cast<std::size_t>(idx)] = next;
            next = (next + 1) % folds;
        }
    }
    return fold_of;
}

double held_out_risk(const Eigen::VectorXd& y, const Eigen::VectorXd& weights,
                     const Eigen::VectorXd& pred, SlLoss loss) {
    const double total = weights.sum();
    double risk = 0.0;
    for (Eigen::Index i = 0; i < y.size(); ++i) {
        if (weights[i] == 0.0) continue;
        const double p = clip_prob(pred[i]);
        if (loss == SlLoss::log_loss) {
            risk -= weights[i] * (y[i] * std::log(p) + (1.0 - y[i]) * std::log(1.0 - p));
        } else {
            const double d = y[i] - pred[i];
            risk += weights[i] * d * d;
        }
    }
    return risk / total;
}

Eigen::VectorXd project_to_simplex(Eigen::VectorXd v) {
    const Eigen::Index m = v.size();
    std::vector<double> u(v.data(), v.data() + m);
    std::sort(u.begin(), u.end(), std::greater<double>());
    double cumulative = 0.0;
    double tau = 0.0;
    int rho = 0;
    for (Eigen::Index j = 0; j < m; ++j) {
        cumulative += u[static_cast<std::size_t>(j)];
        const double t = (cumulative - 1.0) / static_cast<double>(j + 1);
        if (u[static_cast<std::size_t>(j)] - t > 0.0) {
            rho = static_cast<int>(j + 1);
            tau = t;
        }
    }
    (void)rho;
    for (Eigen::Index j = 0; j < m; ++j) v[j] = std::max(0.0, v[j] - tau);
    return v;
}

struct MetaProblem {
    const Eigen::MatrixXd& z;  // n x m held-out predictions
    const Eigen::VectorXd& y;
    const Eigen::VectorXd& weights;
    SlLoss loss;
    double weight_total;

    double risk(const Eigen::VectorXd& w) const {
        return held_out_risk(y, weights, z * w, loss);
    }

    Eigen::VectorXd gradient(const Eigen::VectorXd& w) const {
        Eigen::VectorXd pred = z * w;
        Eigen::VectorXd dldp(y.size());
        for (Eigen::Index i = 0; i < y.size(); ++i) {
            if (weights[i] == 0.0) {
                dldp[i] = 0.0;
                continue;
            }
            if (loss == SlLoss::log_loss) {
                const double p = clip_prob(pred[i]);
                dldp[i] = weights[i] * (-y[i] / p + (1.0 - y[i]) / (1.0 - p));
            } else {
                dldp[i] = weights[i] * 2.0 * (pred[i] - y[i]);
            }
        }
        return (z.transpose() * dldp) / weight_total;
    }
};

// Projected gradient descent with Armijo backtracking. The risk is convex in
// the weights, so a single descent run finds the optimum; the step size is
// carried between iterations to avoid re-probing from scratch.
Eigen::VectorXd minimize_from(const MetaProblem& problem, Eigen::VectorXd w, double& best_risk) {
    double risk = problem.risk(w);
    double step = 1.0;
    for (int iter = 0; iter < kMetaMaxIterations; ++iter) {
        const Eigen::VectorXd grad = problem.gradient(w);
        step = std::min(step * 2.0, 1e6);
        bool improved = false;
        Eigen::VectorXd w_new;
        double risk_new = risk;
        while (step > 1e-12) {
            w_new = project_to_simplex(w - step * grad);
            risk_new = problem.risk(w_new);
            const double decrease = grad.dot(w - w_new);
            if (risk_new <= risk - 1e-4 * decrease) {
                improved = true;
                break;
            }
            step *= 0.5;
        }
        if (!improved) break;
        const double change = risk - risk_new;
        w = w_new;
        risk = risk_new;
        if (change < kMetaTol * (std::abs(risk) + 1.0)) break;
    }
    best_risk = risk;
    return w;
}

}  // namespace

std::vector<int> assign_folds(const Eigen::VectorXd& y, int folds, std::uint64_t seed) {
    const Eigen::Index n = y.size();
    Rng rng(seed);
    std::vector<std::vector<Eigen::Index>> groups;
    if (is_binary(y)) {
        std::vector<Eigen::Index> zeros, ones;
        for (Eigen::Index i = 0; i < n; ++i) (y[i] == 1.0 ? ones : zeros).push_back(i);
        rng.shuffle(zeros);
        rng.shuffle(ones);
        groups = {std::move(ones), std::move(zeros)};
    } else {
        std::vector<Eigen::Index> all(static_cast<std::size_t>(n));
        std::iota(all.begin(), all.end(), 0);
        rng.shuffle(all);
        groups = {std::move(all)};
    }
    return deal_round_robin(groups, n, folds);
}

EnsembleFit sl_fit(const NamedMatrix& X, const Eigen::VectorXd& y,
                   const Eigen::VectorXd& weights, const std::vector<LearnerSpec>& candidates,
                   int folds, SlLoss loss, std::uint64_t seed) {
    const Eigen::Index n = X.rows();
    if (candidates.empty()) throw ValidationError("super learner needs at least one candidate");
    if (n < 2) throw EstimationError("too few observations to cross-validate");
    if (folds < 2) throw ValidationError("cv_folds must be at least 2");
    if (y.size() != n || weights.size() != n) {
        throw ValidationError("super learner: input length mismatch");
    }

    EnsembleFit out;
    int v = folds;
    if (n < 2 * static_cast<Eigen::Index>(folds)) {
        v = std::max<int>(2, static_cast<int>(n / 2));
    }
    out.folds_used = v;

    const bool binary = is_binary(y);
    const bool both_classes = binary && y.minCoeff() == 0.0 && y.maxCoeff() == 1.0;
    std::vector<int> fold_of;
    bool folds_ok = false;
    for (int attempt = 0; attempt < kFoldRedraws; ++attempt) {
        fold_of = assign_folds(y, v, mix_seed(seed, static_cast<std::uint64_t>(attempt)));
        if (!both_classes) {
            folds_ok = binary ? false : true;
            break;
        }
        std::vector<int> has_one(static_cast<std::size_t>(v), 0), has_zero(static_cast<std::size_t>(v), 0);
        for (Eigen::Index i = 0; i < n; ++i) {
            (y[i] == 1.0 ? has_one : has_zero)[static_cast<std::size_t>(fold_of[static_cast<std::size_t>(i)])] = 1;
        }
        folds_ok = true;
        for (int f = 0; f < v; ++f) {
            if (!has_one[static_cast<std::size_t>(f)] || !has_zero[static_cast<std::size_t>(f)]) {
                folds_ok = false;
                break;
            }
        }
        if (folds_ok) break;
    }

    const std::size_t m = candidates.size();
    Eigen::MatrixXd z(n, static_cast<Eigen::Index>(m));
    out.candidates.resize(m);
    out.fits.resize(m);
    std::size_t n_usable = 0;
    for (std::size_t j = 0; j < m; ++j) {
        auto& summary = out.candidates[j];
        summary.spec = candidates[j];
        summary.cv_risk = std::numeric_limits<double>::infinity();
        try {
            for (int f = 0; f < v; ++f) {
                std::vector<Eigen::Index> train, test;
                for (Eigen::Index i = 0; i < n; ++i) {
                    (fold_of[static_cast<std::size_t>(i)] == f ? test : train).push_back(i);
                }
                if (train.empty() || test.empty()) throw EstimationError("empty cross-validation fold");
                NamedMatrix x_train{X.values(train, Eigen::all), X.names};
                NamedMatrix x_test{X.values(test, Eigen::all), X.names};
                FittedLearner fit = fit_learner(candidates[j], x_train, y(train), weights(train));
                Eigen::VectorXd pred = predict(fit, x_test);
                for (std::size_t t = 0; t < test.size(); ++t) z(test[t], static_cast<Eigen::Index>(j)) = pred[static_cast<Eigen::Index>(t)];
            }
            out.fits[j] = fit_learner(candidates[j], X, y, weights);
            summary.cv_risk = held_out_risk(y, weights, z.col(static_cast<Eigen::Index>(j)), loss);
            summary.usable = std::isfinite(summary.cv_risk);
        } catch (const std::exception&) {
            summary.usable = false;
        }
        if (summary.usable) {
            ++n_usable;
        } else {
            z.col(static_cast<Eigen::Index>(j)).setConstant(0.5);
        }
    }
    if (n_usable == 0) throw EstimationError("no usable super learner candidate");

    auto pick_discrete = [&]() {
        std::size_t best = m;
        for (std::size_t j = 0; j < m; ++j) {
            if (!out.candidates[j].usable) continue;
            if (best == m || out.candidates[j].cv_risk < out.candidates[best].cv_risk) best = j;
        }
        out.discrete = true;
        out.candidates[best].weight = 1.0;
        out.cv_risk = out.candidates[best].cv_risk;
    };

    if (!folds_ok && binary) {
        pick_discrete();
        return out;
    }
    if (n_usable == 1) {
        pick_discrete();
        out.discrete = false;  // single candidate, weight one by construction
        return out;
    }

    // dense meta problem over usable candidates only
    std::vector<Eigen::Index> usable_cols;
    for (std::size_t j = 0; j < m; ++j) {
        if (out.candidates[j].usable) usable_cols.push_back(static_cast<Eigen::Index>(j));
    }
    Eigen::MatrixXd zu = z(Eigen::all, usable_cols);
    MetaProblem problem{zu, y, weights, loss, weights.sum()};
    const Eigen::Index mu = static_cast<Eigen::Index>(usable_cols.size());

    // the incumbent is the best single candidate, so the final ensemble can
    // never do worse than discrete selection
    Eigen::Index best_vertex = 0;
    for (Eigen::Index j = 1; j < mu; ++j) {
        if (out.candidates[static_cast<std::size_t>(usable_cols[j])].cv_risk <
            out.candidates[static_cast<std::size_t>(usable_cols[best_vertex])].cv_risk) {
            best_vertex = j;
        }
    }
    double best_risk = out.candidates[static_cast<std::size_t>(usable_cols[best_vertex])].cv_risk;
    Eigen::VectorXd best_w = Eigen::VectorXd::Unit(mu, best_vertex);

    std::vector<Eigen::VectorXd> starts;
    starts.push_back(Eigen::VectorXd::Constant(mu, 1.0 / static_cast<double>(mu)));
    starts.push_back(best_w);
    Rng rng(mix_seed(seed, std::uint64_t{0x6d657461}));
    for (int r = 0; r < kRandomRestarts; ++r) {
        Eigen::VectorXd w(mu);
        for (Eigen::Index j = 0; j < mu; ++j) w[j] = -std::log(std::max(rng.uniform(), 1e-300));
        starts.push_back(w / w.sum());
    }
    for (const auto& start : starts) {
        double risk = 0.0;
        Eigen::VectorXd w = minimize_from(problem, start, risk);
        if (risk < best_risk) {
            best_risk = risk;
            best_w = w;
        }
    }
    out.cv_risk = best_risk;
    for (Eigen::Index j = 0; j < mu; ++j) {
        out.candidates[static_cast<std::size_t>(usable_cols[j])].weight = best_w[j];
    }
    return out;
}

Eigen::VectorXd sl_predict(const EnsembleFit& fit, const NamedMatrix& X) {
    Eigen::VectorXd pred = Eigen::VectorXd::Zero(X.rows());
    for (std::size_t j = 0; j < fit.candidates.size(); ++j) {
        const double w = fit.candidates[j].weight;
        if (w > 0.0) pred += w * predict(fit.fits[j], X);
    }
    for (Eigen::Index i = 0; i < pred.size(); ++i) pred[i] = clip_prob(pred[i]);
    return pred;
}

}  // namespace crtmle
