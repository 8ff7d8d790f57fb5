#include "crtmle/learners.hpp"

#include <algorithm>
#include <limits>

namespace crtmle {

std::vector<Eigen::Index> NamedMatrix::find(const std::vector<std::string>& wanted) const {
    std::vector<Eigen::Index> idx;
    idx.reserve(wanted.size());
    for (const auto& name : wanted) {
        auto it = std::find(names.begin(), names.end(), name);
        if (it == names.end()) {
            throw ValidationError("covariate " + name + " not present in data");
        }
        idx.push_back(static_cast<Eigen::Index>(it - names.begin()));
    }
    return idx;
}

std::string to_string(LearnerKind kind) {
    switch (kind) {
        case LearnerKind::intercept_only_mean: return "intercept_only_mean";
        case LearnerKind::main_terms_logistic: return "main_terms_logistic";
        case LearnerKind::main_terms_linear: return "main_terms_linear";
        default: return "saturated_logistic";
    }
}

std::string LearnerSpec::label() const {
    std::string s = to_string(kind);
    if (!covariates.empty()) {
        s += "(";
        for (std::size_t i = 0; i < covariates.size(); ++i) {
            if (i) s += ",";
            s += covariates[i];
        }
        s += ")";
    }
    return s;
}

namespace {

constexpr int kMaxIrlsIterations = 100;
constexpr double kDevianceTol = 1e-10;
constexpr double kScoreTol = 1e-9;
constexpr double kRidgeLogistic = 1e-6;
constexpr double kRidgeLinear = 1e-8;
constexpr double kMuFloor = 1e-12;

void check_glm_inputs(const Eigen::MatrixXd& design, const Eigen::VectorXd& y,
                      const Eigen::VectorXd& weights, const Eigen::VectorXd& offset) {
    const Eigen::Index n = design.rows();
    if (n == 0) throw EstimationError("logistic fit on empty data");
    if (y.size() != n || weights.size() != n || offset.size() != n) {
        throw ValidationError("logistic fit: input length mismatch");
    }
    if (weights.minCoeff() < 0.0) throw ValidationError("logistic fit: negative weight");
    if (weights.maxCoeff() <= 0.0) throw EstimationError("logistic fit: all weights zero");
    if (y.minCoeff() < 0.0 || y.maxCoeff() > 1.0) {
        throw ValidationError("logistic fit: responses must lie in [0, 1]");
    }
}

double quasi_deviance(const Eigen::VectorXd& y, const Eigen::VectorXd& mu,
                      const Eigen::VectorXd& weights) {
    double dev = 0.0;
    for (Eigen::Index i = 0; i < y.size(); ++i) {
        if (weights[i] == 0.0) continue;
        double d = 0.0;
        if (y[i] > 0.0) d += y[i] * std::log(y[i] / mu[i]);
        if (y[i] < 1.0) d += (1.0 - y[i]) * std::log((1.0 - y[i]) / (1.0 - mu[i]));
        dev += 2.0 * weights[i] * d;
    }
    return dev;
}

Eigen::VectorXd mean_response(const Eigen::MatrixXd& design, const Eigen::VectorXd& offset,
                              const Eigen::VectorXd& beta) {
    Eigen::VectorXd mu = design * beta + offset;
    for (Eigen::Index i = 0; i < mu.size(); ++i) {
        mu[i] = std::min(1.0 - kMuFloor, std::max(kMuFloor, expit(mu[i])));
    }
    return mu;
}

// One IRLS pass. When ridge > 0 the weighted normal equations get a diagonal
// penalty; otherwise a rank-revealing QR keeps redundant columns at zero.
GlmFit irls(const Eigen::MatrixXd& design, const Eigen::VectorXd& y,
            const Eigen::VectorXd& weights, const Eigen::VectorXd& offset, double ridge) {
    const Eigen::Index n = design.rows();
    const Eigen::Index p = design.cols();
    GlmFit fit;
    fit.beta = Eigen::VectorXd::Zero(p);
    Eigen::VectorXd mu = mean_response(design, offset, fit.beta);
    double dev = quasi_deviance(y, mu, weights);
    double score_prev = std::numeric_limits<double>::infinity();

    for (int iter = 1; iter <= kMaxIrlsIterations; ++iter) {
        fit.n_iterations = iter;
        Eigen::VectorXd irls_w(n), z(n);
        for (Eigen::Index i = 0; i < n; ++i) {
            const double v = std::max(mu[i] * (1.0 - mu[i]), kMuFloor);
            irls_w[i] = weights[i] * v;
            const double eta = logit(mu[i]);
            z[i] = eta - offset[i] + (y[i] - mu[i]) / v;
        }
        Eigen::VectorXd beta_new;
        if (ridge > 0.0) {
            Eigen::MatrixXd xtwx = design.transpose() * irls_w.asDiagonal() * design;
            xtwx.diagonal().array() += ridge;
            beta_new = xtwx.ldlt().solve(design.transpose() * (irls_w.asDiagonal() * z));
        } else {
            Eigen::VectorXd sw = irls_w.cwiseSqrt();
            Eigen::MatrixXd a = sw.asDiagonal() * design;
            beta_new = a.colPivHouseholderQr().solve(sw.cwiseProduct(z));
        }
        if (!beta_new.allFinite()) return fit;  // converged stays false

        Eigen::VectorXd mu_new = mean_response(design, offset, beta_new);
        double dev_new = quasi_deviance(y, mu_new, weights);
        int halvings = 0;
        while ((!std::isfinite(dev_new) || dev_new > dev + 1e-12) && halvings < 30) {
            beta_new = 0.5 * (beta_new + fit.beta);
            mu_new = mean_response(design, offset, beta_new);
            dev_new = quasi_deviance(y, mu_new, weights);
            ++halvings;
        }
        if (!std::isfinite(dev_new)) return fit;

        const double change = std::abs(dev_new - dev) / (std::abs(dev_new) + 0.1);
        fit.beta = beta_new;
        mu = mu_new;
        dev = dev_new;
        // The deviance plateaus before the absolute score is tight when the
        // working weights are large, so keep taking Newton steps until the
        // score itself is small. Clamped fitted values pin the score at a
        // floor for separated data; the stall test accepts that fixed point.
        const double score = p == 0 ? 0.0
                                    : (design.transpose() * weights.cwiseProduct(y - mu))
                                          .cwiseAbs()
                                          .maxCoeff();
        if (change < kDevianceTol && (score < kScoreTol || score >= 0.9 * score_prev)) {
            fit.converged = true;
            return fit;
        }
        score_prev = score;
    }
    return fit;
}

}  // namespace

GlmFit fit_logistic_design(const Eigen::MatrixXd& design, const Eigen::VectorXd& y,
                           const Eigen::VectorXd& weights, const Eigen::VectorXd& offset) {
    check_glm_inputs(design, y, weights, offset);
    GlmFit fit = irls(design, y, weights, offset, 0.0);
    if (fit.converged && fit.beta.allFinite()) return fit;
    GlmFit ridge_fit = irls(design, y, weights, offset, kRidgeLogistic);
    ridge_fit.converged = false;
    if (!ridge_fit.beta.allFinite()) ridge_fit.beta.setZero();
    return ridge_fit;
}

double score_residual(const Eigen::MatrixXd& design, const Eigen::VectorXd& y,
                      const Eigen::VectorXd& weights, const Eigen::VectorXd& offset,
                      const Eigen::VectorXd& beta) {
    Eigen::VectorXd mu = mean_response(design, offset, beta);
    Eigen::VectorXd score = design.transpose() * (weights.cwiseProduct(y - mu));
    return score.size() == 0 ? 0.0 : score.cwiseAbs().maxCoeff();
}

namespace {

Eigen::MatrixXd main_terms_design(const NamedMatrix& X, const std::vector<Eigen::Index>& cols) {
    Eigen::MatrixXd design(X.rows(), 1 + static_cast<Eigen::Index>(cols.size()));
    design.col(0).setOnes();
    for (std::size_t j = 0; j < cols.size(); ++j) design.col(1 + j) = X.values.col(cols[j]);
    return design;
}

int cell_index(const NamedMatrix& X, const std::vector<Eigen::Index>& cols, Eigen::Index row) {
    int cell = 0;
    for (std::size_t j = 0; j < cols.size(); ++j) {
        const double v = X.values(row, cols[j]);
        if (v != 0.0 && v != 1.0) {
            throw ValidationError("saturated_logistic requires binary covariates");
        }
        if (v == 1.0) cell |= 1 << j;
    }
    return cell;
}

double weighted_mean(const Eigen::VectorXd& y, const Eigen::VectorXd& weights) {
    const double total = weights.sum();
    if (total <= 0.0) throw EstimationError("weighted mean with all weights zero");
    return y.cwiseProduct(weights).sum() / total;
}

}  // namespace

FittedLearner fit_logistic(const LearnerSpec& spec, const NamedMatrix& X,
                           const Eigen::VectorXd& y, const Eigen::VectorXd& weights,
                           const Eigen::VectorXd& offset) {
    if (y.size() != X.rows() || weights.size() != X.rows() || offset.size() != X.rows()) {
        throw ValidationError("logistic fit: input length mismatch");
    }
    if (y.size() > 0) {
        if (weights.minCoeff() < 0.0) throw ValidationError("logistic fit: negative weight");
        if (y.minCoeff() < 0.0 || y.maxCoeff() > 1.0) {
            throw ValidationError("logistic fit: responses must lie in [0, 1]");
        }
    }
    FittedLearner out;
    out.spec = spec;
    switch (spec.kind) {
        case LearnerKind::intercept_only_mean: {
            // weighted mean is the exact quasi-binomial solution with no
            // covariates and no offset; with an offset run the real fit
            if (offset.isZero(0.0)) {
                out.coefficients = {logit(clip_prob(weighted_mean(y, weights)))};
            } else {
                GlmFit fit = fit_logistic_design(Eigen::MatrixXd::Ones(X.rows(), 1), y, weights, offset);
                out.coefficients = {fit.beta[0]};
                out.converged = fit.converged;
                out.n_iterations = fit.n_iterations;
            }
            break;
        }
        case LearnerKind::main_terms_logistic: {
            const auto cols = X.find(spec.covariates);
            GlmFit fit = fit_logistic_design(main_terms_design(X, cols), y, weights, offset);
            out.coefficients.assign(fit.beta.data(), fit.beta.data() + fit.beta.size());
            out.converged = fit.converged;
            out.n_iterations = fit.n_iterations;
            break;
        }
        case LearnerKind::saturated_logistic: {
            if (spec.covariates.empty() || spec.covariates.size() > 4) {
                throw ValidationError("saturated_logistic needs 1 to 4 covariates");
            }
            if (!offset.isZero(0.0)) {
                throw ValidationError("saturated_logistic does not accept an offset");
            }
            const auto cols = X.find(spec.covariates);
            const int n_cells = 1 << spec.covariates.size();
            std::vector<double> num(n_cells, 0.0), den(n_cells, 0.0);
            for (Eigen::Index i = 0; i < X.rows(); ++i) {
                const int cell = cell_index(X, cols, i);
                num[cell] += weights[i] * y[i];
                den[cell] += weights[i];
            }
            out.fallback_mean = clip_prob(weighted_mean(y, weights));
            out.coefficients.assign(n_cells, std::numeric_limits<double>::quiet_NaN());
            for (int c = 0; c < n_cells; ++c) {
                if (den[c] > 0.0) out.coefficients[c] = logit(clip_prob(num[c] / den[c]));
            }
            break;
        }
        case LearnerKind::main_terms_linear:
            throw ValidationError("main_terms_linear must be fitted with fit_linear");
    }
    return out;
}

FittedLearner fit_logistic(const LearnerSpec& spec, const NamedMatrix& X,
                           const Eigen::VectorXd& y, const Eigen::VectorXd& weights) {
    return fit_logistic(spec, X, y, weights, Eigen::VectorXd::Zero(X.rows()));
}

FittedLearner fit_linear(const LearnerSpec& spec, const NamedMatrix& X,
                         const Eigen::VectorXd& y, const Eigen::VectorXd& weights) {
    if (spec.kind != LearnerKind::main_terms_linear) {
        throw ValidationError("fit_linear expects a main_terms_linear spec");
    }
    if (X.rows() == 0) throw EstimationError("linear fit on empty data");
    if (weights.maxCoeff() <= 0.0) throw EstimationError("linear fit: all weights zero");
    const auto cols = X.find(spec.covariates);
    Eigen::MatrixXd design = main_terms_design(X, cols);
    Eigen::MatrixXd xtwx = design.transpose() * weights.asDiagonal() * design;
    xtwx.diagonal().array() += kRidgeLinear;
    Eigen::VectorXd beta = xtwx.ldlt().solve(design.transpose() * (weights.asDiagonal() * y));
    FittedLearner out;
    out.spec = spec;
    out.coefficients.assign(beta.data(), beta.data() + beta.size());
    return out;
}

FittedLearner fit_learner(const LearnerSpec& spec, const NamedMatrix& X,
                          const Eigen::VectorXd& y, const Eigen::VectorXd& weights) {
    if (spec.kind == LearnerKind::main_terms_linear) return fit_linear(spec, X, y, weights);
    return fit_logistic(spec, X, y, weights);
}

Eigen::VectorXd predict(const FittedLearner& fit, const NamedMatrix& X) {
    const Eigen::Index n = X.rows();
    Eigen::VectorXd out(n);
    switch (fit.spec.kind) {
        case LearnerKind::intercept_only_mean:
            out.setConstant(clip_prob(expit(fit.coefficients[0])));
            break;
        case LearnerKind::main_terms_logistic: {
            const auto cols = X.find(fit.spec.covariates);
            Eigen::MatrixXd design = main_terms_design(X, cols);
            Eigen::Map<const Eigen::VectorXd> beta(fit.coefficients.data(),
                                                   static_cast<Eigen::Index>(fit.coefficients.size()));
            if (design.cols() != beta.size()) {
                throw ValidationError("prediction columns do not match fitted model");
            }
            Eigen::VectorXd eta = design * beta;
            for (Eigen::Index i = 0; i < n; ++i) out[i] = clip_prob(expit(eta[i]));
            break;
        }
        case LearnerKind::main_terms_linear: {
            const auto cols = X.find(fit.spec.covariates);
            Eigen::MatrixXd design = main_terms_design(X, cols);
            Eigen::Map<const Eigen::VectorXd> beta(fit.coefficients.data(),
                                                   static_cast<Eigen::Index>(fit.coefficients.size()));
            if (design.cols() != beta.size()) {
                throw ValidationError("prediction columns do not match fitted model");
            }
            Eigen::VectorXd eta = design * beta;
            for (Eigen::Index i = 0; i < n; ++i) out[i] = std::min(1.0, std::max(0.0, eta[i]));
            break;
        }
        case LearnerKind::saturated_logistic: {
            const auto cols = X.find(fit.spec.covariates);
            for (Eigen::Index i = 0; i < n; ++i) {
                const int cell = cell_index(X, cols, i);
                const double coef = fit.coefficients[static_cast<std::size_t>(cell)];
                out[i] = std::isnan(coef) ? fit.fallback_mean : clip_prob(expit(coef));
            }
            break;
        }
    }
    return out;
}

}  // namespace crtmle
