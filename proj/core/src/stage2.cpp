#include "crtmle/stage2.hpp"

#include <algorithm>
#include <boost/math/distributions/normal.hpp>
#include <boost/math/distributions/students_t.hpp>
#include <cmath>
#include <limits>
#include <numeric>

#include "crtmle/parallel.hpp"
#include "crtmle/rng.hpp"

namespace crtmle {

double ci_multiplier_975(int n_units) {
    if (n_units < 40) {
        boost::math::students_t_distribution<double> dist(n_units - 2);
        return boost::math::quantile(dist, 0.975);
    }
    boost::math::normal_distribution<double> dist;
    return boost::math::quantile(dist, 0.975);
}

namespace {

constexpr double kInf = std::numeric_limits<double>::infinity();

struct PreparedRows {
    std::vector<UnitRow> rows;  // sorted by unit_id
    Eigen::VectorXd y;
    Eigen::VectorXd arm;
    NamedMatrix x;  // column "a" followed by the adjusters
    NamedMatrix w;  // adjusters only
    int n1 = 0;
    int n0 = 0;
};

PreparedRows prepare_rows(const std::vector<UnitRow>& input) {
    if (input.size() < 4) {
        throw EstimationError("effect estimation requires at least 4 units");
    }
    PreparedRows pr;
    pr.rows = input;
    std::sort(pr.rows.begin(), pr.rows.end(),
              [](const UnitRow& a, const UnitRow& b) { return a.unit_id < b.unit_id; });
    const auto k = static_cast<Eigen::Index>(pr.rows.size());
    const auto& names = pr.rows.front().adjuster_names;
    pr.y.resize(k);
    pr.arm.resize(k);
    pr.w.names = names;
    pr.w.values.resize(k, static_cast<Eigen::Index>(names.size()));
    pr.x.names.push_back("a");
    pr.x.names.insert(pr.x.names.end(), names.begin(), names.end());
    pr.x.values.resize(k, 1 + static_cast<Eigen::Index>(names.size()));
    for (Eigen::Index i = 0; i < k; ++i) {
        const auto& row = pr.rows[static_cast<std::size_t>(i)];
        if (row.adjuster_names != names) {
            throw ValidationError("unit rows disagree on adjuster columns");
        }
        if (row.endpoint < 0.0 || row.endpoint > 1.0) {
            throw ValidationError("unit " + row.unit_id + ": endpoint outside [0, 1]");
        }
        if (row.arm != 0 && row.arm != 1) {
            throw ValidationError("unit " + row.unit_id + ": arm must be 0 or 1");
        }
        pr.y[i] = row.endpoint;
        pr.arm[i] = row.arm;
        pr.x.values(i, 0) = row.arm;
        for (std::size_t j = 0; j < names.size(); ++j) {
            pr.w.values(i, static_cast<Eigen::Index>(j)) = row.adjusters[j];
            pr.x.values(i, 1 + static_cast<Eigen::Index>(j)) = row.adjusters[j];
        }
        (row.arm == 1 ? pr.n1 : pr.n0) += 1;
    }
    if (pr.n1 == 0 || pr.n0 == 0) {
        throw EstimationError("effect estimation requires units in both arms");
    }
    return pr;
}

double bound_two_sided(double g, double g_bound) {
    return std::min(1.0 - g_bound, std::max(g_bound, g));
}

// Initial nuisance estimates on some row subset, able to predict for
// arbitrary rows.
struct Nuisance {
    std::function<Eigen::VectorXd(const NamedMatrix&, int)> predict_q;  // arm forced to 0/1
    std::function<Eigen::VectorXd(const NamedMatrix&)> predict_g;       // P(arm=1 | adjusters)
    std::string description;
};

NamedMatrix with_arm(const NamedMatrix& x, int arm_value) {
    NamedMatrix out = x;
    out.values.col(0).setConstant(static_cast<double>(arm_value));
    return out;
}

struct TargetedFit {
    double phi1 = 0.0;
    double phi0 = 0.0;
    double eps0 = 0.0;
    double eps1 = 0.0;
    Eigen::VectorXd q1_star, q0_star, g;
    double score = 0.0;
    bool converged = true;
};

// Two-dimensional clever-covariate fluctuation: one inverse-probability
// column per arm, joint quasi-binomial fit with the initial predictions as
// offset, then counterfactual updates for both arms on every row.
TargetedFit target(const Eigen::VectorXd& y, const Eigen::VectorXd& arm,
                   const Eigen::VectorXd& q_obs, const Eigen::VectorXd& q1,
                   const Eigen::VectorXd& q0, const Eigen::VectorXd& g) {
    const Eigen::Index k = y.size();
    Eigen::MatrixXd clever(k, 2);
    Eigen::VectorXd offset(k);
    for (Eigen::Index i = 0; i < k; ++i) {
        clever(i, 0) = (1.0 - arm[i]) / (1.0 - g[i]);
        clever(i, 1) = arm[i] / g[i];
        offset[i] = logit(clip_prob(q_obs[i]));
    }
    GlmFit fit = fit_logistic_design(clever, y, Eigen::VectorXd::Ones(k), offset);
    TargetedFit out;
    out.converged = fit.converged;
    out.eps0 = fit.beta[0];
    out.eps1 = fit.beta[1];
    out.score = score_residual(clever, y, Eigen::VectorXd::Ones(k), offset, fit.beta);
    out.g = g;
    out.q1_star.resize(k);
    out.q0_star.resize(k);
    for (Eigen::Index i = 0; i < k; ++i) {
        out.q1_star[i] = expit(logit(clip_prob(q1[i])) + fit.beta[1] / g[i]);
        out.q0_star[i] = expit(logit(clip_prob(q0[i])) + fit.beta[0] / (1.0 - g[i]));
    }
    out.phi1 = out.q1_star.mean();
    out.phi0 = out.q0_star.mean();
    return out;
}

// Influence contributions per arm.
void ic_components(const Eigen::VectorXd& y, const Eigen::VectorXd& arm, const TargetedFit& tf,
                   Eigen::VectorXd& d1, Eigen::VectorXd& d0) {
    const Eigen::Index k = y.size();
    d1.resize(k);
    d0.resize(k);
    for (Eigen::Index i = 0; i < k; ++i) {
        d1[i] = arm[i] / tf.g[i] * (y[i] - tf.q1_star[i]) + tf.q1_star[i] - tf.phi1;
        d0[i] = (1.0 - arm[i]) / (1.0 - tf.g[i]) * (y[i] - tf.q0_star[i]) + tf.q0_star[i] - tf.phi0;
    }
}

Eigen::VectorXd scale_ic(const Eigen::VectorXd& d1, const Eigen::VectorXd& d0,
                         double phi1, double phi0, EffectScale scale) {
    if (scale == EffectScale::risk_difference) return d1 - d0;
    if (phi0 < 1e-12 || phi1 < 1e-12) {
        throw EstimationError("ratio-scale effect undefined: an arm mean is zero");
    }
    return d1 / phi1 - d0 / phi0;
}

double sample_variance(const Eigen::VectorXd& v) {
    if (v.size() < 2) return 0.0;
    const double mean = v.mean();
    double ss = 0.0;
    for (Eigen::Index i = 0; i < v.size(); ++i) ss += (v[i] - mean) * (v[i] - mean);
    return ss / static_cast<double>(v.size() - 1);
}

std::vector<WorkingPair> default_working_pairs(const std::vector<std::string>& adjusters) {
    std::vector<LearnerSpec> q_specs, g_specs;
    q_specs.push_back({LearnerKind::main_terms_logistic, {"a"}});
    g_specs.push_back({LearnerKind::intercept_only_mean, {}});
    for (const auto& name : adjusters) {
        q_specs.push_back({LearnerKind::main_terms_logistic, {"a", name}});
        g_specs.push_back({LearnerKind::main_terms_logistic, {name}});
    }
    std::vector<WorkingPair> pairs;
    for (const auto& q : q_specs) {
        for (const auto& g : g_specs) pairs.push_back({q, g});
    }
    return pairs;
}

Nuisance working_nuisance(const PreparedRows& pr, const std::vector<Eigen::Index>& train,
                          const WorkingPair& pair, double g_bound) {
    NamedMatrix x_train{pr.x.values(train, Eigen::all), pr.x.names};
    NamedMatrix w_train{pr.w.values(train, Eigen::all), pr.w.names};
    FittedLearner q_fit = fit_learner(pair.q_spec, x_train, pr.y(train),
                                      Eigen::VectorXd::Ones(static_cast<Eigen::Index>(train.size())));
    FittedLearner g_fit = fit_learner(pair.g_spec, w_train, pr.arm(train),
                                      Eigen::VectorXd::Ones(static_cast<Eigen::Index>(train.size())));
    Nuisance nu;
    nu.predict_q = [q_fit](const NamedMatrix& x, int arm_value) {
        return predict(q_fit, with_arm(x, arm_value));
    };
    nu.predict_g = [g_fit, g_bound](const NamedMatrix& w) {
        Eigen::VectorXd g = predict(g_fit, w);
        for (Eigen::Index i = 0; i < g.size(); ++i) g[i] = bound_two_sided(g[i], g_bound);
        return g;
    };
    nu.description = "qbar=" + pair.q_spec.label() + ", g=" + pair.g_spec.label();
    return nu;
}

Eigen::VectorXd observed_q(const Eigen::VectorXd& arm, const Eigen::VectorXd& q1,
                           const Eigen::VectorXd& q0) {
    Eigen::VectorXd out(arm.size());
    for (Eigen::Index i = 0; i < arm.size(); ++i) out[i] = arm[i] == 1.0 ? q1[i] : q0[i];
    return out;
}

std::vector<std::vector<Eigen::Index>> aps_folds(const PreparedRows& pr,
                                                 const AnalysisConfig& config, int& folds_used) {
    const auto k = static_cast<Eigen::Index>(pr.rows.size());
    std::vector<std::vector<Eigen::Index>> folds;
    if (k < 40) {
        folds_used = static_cast<int>(k);
        for (Eigen::Index i = 0; i < k; ++i) folds.push_back({i});
        return folds;
    }
    int v = config.cv_folds;
    auto labels = assign_folds(pr.arm, v, mix_seed(config.seed, std::string("stage2/aps")));
    folds.resize(static_cast<std::size_t>(v));
    for (Eigen::Index i = 0; i < k; ++i) folds[static_cast<std::size_t>(labels[static_cast<std::size_t>(i)])].push_back(i);
    folds_used = v;
    return folds;
}

}  // namespace

ApsResult adaptive_prespecification(const std::vector<UnitRow>& rows,
                                    const std::vector<WorkingPair>& pairs,
                                    const AnalysisConfig& config) {
    if (pairs.empty()) throw ValidationError("adaptive pre-specification needs candidate pairs");
    const PreparedRows pr = prepare_rows(rows);
    const auto k = static_cast<Eigen::Index>(pr.rows.size());

    ApsResult result;
    auto folds = aps_folds(pr, config, result.folds_used);

    result.cv_ic_variance.assign(pairs.size(), kInf);
    for (std::size_t p = 0; p < pairs.size(); ++p) {
        double sum_sq = 0.0;
        bool ok = true;
        for (const auto& val : folds) {
            std::vector<Eigen::Index> train;
            std::vector<char> in_val(static_cast<std::size_t>(k), 0);
            for (Eigen::Index i : val) in_val[static_cast<std::size_t>(i)] = 1;
            for (Eigen::Index i = 0; i < k; ++i) {
                if (!in_val[static_cast<std::size_t>(i)]) train.push_back(i);
            }
            double arm_sum = 0.0;
            for (Eigen::Index i : train) arm_sum += pr.arm[i];
            if (arm_sum == 0.0 || arm_sum == static_cast<double>(train.size())) {
                ok = false;
                break;
            }
            try {
                Nuisance nu = working_nuisance(pr, train, pairs[p], config.g_bound);
                NamedMatrix x_train{pr.x.values(train, Eigen::all), pr.x.names};
                NamedMatrix w_train{pr.w.values(train, Eigen::all), pr.w.names};
                Eigen::VectorXd q1_t = nu.predict_q(x_train, 1);
                Eigen::VectorXd q0_t = nu.predict_q(x_train, 0);
                Eigen::VectorXd g_t = nu.predict_g(w_train);
                TargetedFit tf = target(pr.y(train), pr.arm(train),
                                        observed_q(pr.arm(train), q1_t, q0_t), q1_t, q0_t, g_t);

                NamedMatrix x_val{pr.x.values(val, Eigen::all), pr.x.names};
                NamedMatrix w_val{pr.w.values(val, Eigen::all), pr.w.names};
                Eigen::VectorXd q1_v = nu.predict_q(x_val, 1);
                Eigen::VectorXd q0_v = nu.predict_q(x_val, 0);
                Eigen::VectorXd g_v = nu.predict_g(w_val);
                // evaluate held-out influence contributions around the
                // training-set fit
                for (std::size_t t = 0; t < val.size(); ++t) {
                    const Eigen::Index i = val[t];
                    const Eigen::Index ti = static_cast<Eigen::Index>(t);
                    const double q1s = expit(logit(clip_prob(q1_v[ti])) + tf.eps1 / g_v[ti]);
                    const double q0s = expit(logit(clip_prob(q0_v[ti])) + tf.eps0 / (1.0 - g_v[ti]));
                    const double d1 = pr.arm[i] / g_v[ti] * (pr.y[i] - q1s) + q1s - tf.phi1;
                    const double d0 = (1.0 - pr.arm[i]) / (1.0 - g_v[ti]) * (pr.y[i] - q0s) + q0s - tf.phi0;
                    double d;
                    if (config.effect_scale == EffectScale::risk_difference) {
                        d = d1 - d0;
                    } else {
                        if (tf.phi0 < 1e-12 || tf.phi1 < 1e-12) throw EstimationError("zero arm mean");
                        d = d1 / tf.phi1 - d0 / tf.phi0;
                    }
                    sum_sq += d * d;
                }
            } catch (const std::exception&) {
                ok = false;
                break;
            }
        }
        if (ok) result.cv_ic_variance[p] = sum_sq / static_cast<double>(k);
    }

    std::size_t best = pairs.size();
    for (std::size_t p = 0; p < pairs.size(); ++p) {
        if (best == pairs.size() || result.cv_ic_variance[p] < result.cv_ic_variance[best]) {
            best = p;
        }
    }
    if (!std::isfinite(result.cv_ic_variance[best])) {
        throw EstimationError("no evaluable working-model pair");
    }
    result.selected = best;
    return result;
}

EffectEstimate tmle_effect(const std::vector<UnitRow>& rows, const AnalysisConfig& config) {
    validate_config(config);
    const PreparedRows pr = prepare_rows(rows);
    const auto k = static_cast<Eigen::Index>(pr.rows.size());
    std::vector<Eigen::Index> all(static_cast<std::size_t>(k));
    std::iota(all.begin(), all.end(), 0);

    Eigen::VectorXd q1, q0, g;
    std::string selection;

    switch (config.stage2_mode) {
        case Stage2Mode::unadjusted: {
            double s1 = 0.0, s0 = 0.0;
            for (Eigen::Index i = 0; i < k; ++i) (pr.arm[i] == 1.0 ? s1 : s0) += pr.y[i];
            q1 = Eigen::VectorXd::Constant(k, s1 / pr.n1);
            q0 = Eigen::VectorXd::Constant(k, s0 / pr.n0);
            g = Eigen::VectorXd::Constant(k, bound_two_sided(
                                                 static_cast<double>(pr.n1) / static_cast<double>(k),
                                                 config.g_bound));
            selection = "arm means, marginal treatment share";
            break;
        }
        case Stage2Mode::randomized: {
            const auto pairs = default_working_pairs(pr.w.names);
            ApsResult aps = adaptive_prespecification(pr.rows, pairs, config);
            Nuisance nu = working_nuisance(pr, all, pairs[aps.selected], config.g_bound);
            q1 = nu.predict_q(pr.x, 1);
            q0 = nu.predict_q(pr.x, 0);
            g = nu.predict_g(pr.w);
            selection = "aps: " + nu.description;
            break;
        }
        case Stage2Mode::pseudo_observational: {
            Stage1Options defaults;  // reuse the default candidate kinds
            std::vector<std::string> q_covariates = pr.x.names;
            const auto q_candidates = build_candidates(defaults.candidate_kinds, q_covariates, pr.x);
            EnsembleFit q_fit = sl_fit(pr.x, pr.y, Eigen::VectorXd::Ones(k), q_candidates,
                                       config.cv_folds, SlLoss::log_loss,
                                       mix_seed(config.seed, std::string("stage2/qbar")));
            q1 = sl_predict(q_fit, with_arm(pr.x, 1));
            q0 = sl_predict(q_fit, with_arm(pr.x, 0));

            Eigen::VectorXd g_raw;
            std::string g_text;
            if (pr.w.names.empty()) {
                g_raw = Eigen::VectorXd::Constant(k, static_cast<double>(pr.n1) / static_cast<double>(k));
                g_text = "marginal treatment share";
            } else {
                const auto g_candidates = build_candidates(defaults.candidate_kinds, pr.w.names, pr.w);
                EnsembleFit g_fit = sl_fit(pr.w, pr.arm, Eigen::VectorXd::Ones(k), g_candidates,
                                           config.cv_folds, SlLoss::log_loss,
                                           mix_seed(config.seed, std::string("stage2/g")));
                g_raw = sl_predict(g_fit, pr.w);
                g_text = "sl over " + std::to_string(g_candidates.size()) + " candidates";
            }
            g.resize(k);
            for (Eigen::Index i = 0; i < k; ++i) g[i] = bound_two_sided(g_raw[i], config.g_bound);
            selection = "sl qbar over " + std::to_string(q_candidates.size()) + " candidates, g: " + g_text;
            break;
        }
    }

    TargetedFit tf = target(pr.y, pr.arm, observed_q(pr.arm, q1, q0), q1, q0, g);

    EffectEstimate est;
    est.phi1 = tf.phi1;
    est.phi0 = tf.phi0;
    est.scale = config.effect_scale;
    est.selection = selection;
    est.max_score_residual = tf.score;
    est.n_units = static_cast<int>(k);
    est.n_treated = pr.n1;

    Eigen::VectorXd d1, d0;
    ic_components(pr.y, pr.arm, tf, d1, d0);
    Eigen::VectorXd ic = scale_ic(d1, d0, tf.phi1, tf.phi0, config.effect_scale);
    est.ic_values.assign(ic.data(), ic.data() + ic.size());
    est.ic_mean = ic.mean();
    est.se = std::sqrt(sample_variance(ic) / static_cast<double>(k));
    est.ci_multiplier = ci_multiplier_975(static_cast<int>(k));
    est.df_rule = k < 40 ? "t(K-2)" : "normal";

    if (config.effect_scale == EffectScale::risk_difference) {
        est.point = tf.phi1 - tf.phi0;
        est.ci_lower = est.point - est.ci_multiplier * est.se;
        est.ci_upper = est.point + est.ci_multiplier * est.se;
    } else {
        est.point = tf.phi1 / tf.phi0;
        est.log_point = std::log(est.point);
        est.ci_lower = std::exp(*est.log_point - est.ci_multiplier * est.se);
        est.ci_upper = std::exp(*est.log_point + est.ci_multiplier * est.se);
    }
    return est;
}

std::vector<EndpointEstimate> estimate_endpoints(const std::vector<UnitData>& units,
                                                 const AnalysisConfig& config, int threads) {
    std::vector<EndpointEstimate> out(units.size());
    parallel_for(units.size(), threads, [&](std::size_t i) {
        out[i] = estimate_endpoint(units[i], config);
    });
    return out;
}

std::vector<UnitRow> make_unit_rows(const std::vector<UnitData>& units,
                                    const std::vector<EndpointEstimate>& endpoints) {
    if (units.size() != endpoints.size()) {
        throw ValidationError("unit and endpoint lists differ in length");
    }
    std::vector<UnitRow> rows(units.size());
    for (std::size_t i = 0; i < units.size(); ++i) {
        if (units[i].unit_id != endpoints[i].unit_id) {
            throw ValidationError("unit and endpoint lists are not aligned");
        }
        rows[i].unit_id = units[i].unit_id;
        rows[i].arm = units[i].arm;
        rows[i].adjuster_names = units[i].covariate_names;
        rows[i].adjusters = units[i].covariate_values;
        rows[i].endpoint = std::min(1.0, std::max(0.0, endpoints[i].endpoint));
    }
    return rows;
}

std::vector<SensitivityRow> sensitivity_grid(const Dataset& data, const AnalysisConfig& config,
                                             int threads) {
    validate_config(config);
    const Stage2Mode adjusted_mode = config.stage2_mode == Stage2Mode::unadjusted
                                         ? Stage2Mode::pseudo_observational
                                         : config.stage2_mode;

    struct Stage1Cache {
        std::vector<UnitRow> rows;
        std::string error;
        bool done = false;
    };
    Stage1Cache cache[2][2];  // [level][stage1_adjusted]

    auto stage1_rows = [&](UnitLevel level, bool adjusted) -> Stage1Cache& {
        auto& slot = cache[level == UnitLevel::cluster ? 0 : 1][adjusted ? 1 : 0];
        if (slot.done) return slot;
        slot.done = true;
        AnalysisConfig c = config;
        c.unit_level = level;
        if (!adjusted) {
            c.stage1_unadjusted = true;
            c.stage1_adjustment.clear();
            c.stage1_adjustment_post.clear();
        } else {
            c.stage1_unadjusted = false;
        }
        try {
            auto units = group_units(data, level);
            auto endpoints = estimate_endpoints(units, c, threads);
            slot.rows = make_unit_rows(units, endpoints);
        } catch (const std::exception& e) {
            slot.error = e.what();
        }
        return slot;
    };

    struct RowSpec {
        std::string label;
        std::string assumptions;
        UnitLevel level;
        bool stage1_adjusted;
        Stage2Mode mode;
    };
    const std::string mar =
        "individual outcomes missing at random given baseline and post-baseline covariates";
    const std::string mcar = "individual outcomes missing completely at random";
    const std::vector<RowSpec> specs = {
        {"stage 1 adjusted, stage 2 adjusted, partition units (primary)",
         mar + "; partition endpoints conditionally independent given partition covariates",
         UnitLevel::partition, true, adjusted_mode},
        {"stage 1 adjusted, stage 2 adjusted, cluster units",
         mar + "; clusters independent by randomization",
         UnitLevel::cluster, true, Stage2Mode::randomized},
        {"stage 1 adjusted, stage 2 unadjusted, partition units",
         mar + "; partition endpoints independent across partitions",
         UnitLevel::partition, true, Stage2Mode::unadjusted},
        {"stage 1 unadjusted, stage 2 adjusted, partition units",
         mcar + "; partition endpoints conditionally independent given partition covariates",
         UnitLevel::partition, false, adjusted_mode},
        {"stage 1 unadjusted, stage 2 unadjusted, partition units",
         mcar + "; partition endpoints independent across partitions",
         UnitLevel::partition, false, Stage2Mode::unadjusted},
    };

    std::vector<SensitivityRow> out;
    for (const auto& spec : specs) {
        SensitivityRow row;
        row.label = spec.label;
        row.assumptions = spec.assumptions;
        row.unit_level = spec.level;
        row.stage1_adjusted = spec.stage1_adjusted;
        row.stage2_mode = spec.mode;
        Stage1Cache& stage1 = stage1_rows(spec.level, spec.stage1_adjusted);
        if (!stage1.error.empty()) {
            row.error = stage1.error;
        } else {
            AnalysisConfig c = config;
            c.unit_level = spec.level;
            c.stage2_mode = spec.mode;
            try {
                row.effect = tmle_effect(stage1.rows, c);
            } catch (const std::exception& e) {
                row.error = e.what();
            }
        }
        out.push_back(std::move(row));
    }
    return out;
}

}  // namespace crtmle
