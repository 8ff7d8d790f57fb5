#pragma once

#include <Eigen/Dense>
#include <cmath>
#include <string>
#include <vector>

#include "crtmle/data_model.hpp"

namespace crtmle {

// Predictions that feed a logit are kept inside [kProbClip, 1 - kProbClip].
inline constexpr double kProbClip = 1e-6;

inline double expit(double x) { return 1.0 / (1.0 + std::exp(-x)); }
inline double logit(double p) { return std::log(p / (1.0 - p)); }
inline double clip_prob(double p) {
    return std::min(1.0 - kProbClip, std::max(kProbClip, p));
}

// Covariate matrix with column names; no intercept column. Learners select
// their columns by name so that fits only depend on the named values, not on
// column order.
struct NamedMatrix {
    Eigen::MatrixXd values;
    std::vector<std::string> names;

    Eigen::Index rows() const { return values.rows(); }
    std::vector<Eigen::Index> find(const std::vector<std::string>& wanted) const;
};

enum class LearnerKind {
    intercept_only_mean,
    main_terms_logistic,
    main_terms_linear,
    saturated_logistic,
};

std::string to_string(LearnerKind kind);

struct LearnerSpec {
    LearnerKind kind = LearnerKind::intercept_only_mean;
    std::vector<std::string> covariates;

    std::string label() const;
};

// Coefficient layout by kind:
//   intercept_only_mean   [logit(weighted mean)]
//   main_terms_logistic   [intercept, beta per covariate]
//   main_terms_linear     [intercept, beta per covariate]
//   saturated_logistic    one logit(cell mean) per cell, cells indexed by the
//                         bit pattern of the (binary) covariates; NaN marks a
//                         cell with no training weight, predicted from
//                         fallback_mean instead
struct FittedLearner {
    LearnerSpec spec;
    std::vector<double> coefficients;
    bool converged = true;
    int n_iterations = 0;
    double fallback_mean = 0.5;
};

// Raw iteratively reweighted least squares on an explicit design matrix,
// shared by the learners and the targeting steps. y may be fractional in
// [0, 1]; weights must be nonnegative with at least one positive entry.
// Falls back to a ridge-penalized refit (lambda 1e-6) when the plain fit
// produces non-finite values or fails to settle, and reports converged=false
// in that case.
struct GlmFit {
    Eigen::VectorXd beta;
    bool converged = true;
    int n_iterations = 0;
};

GlmFit fit_logistic_design(const Eigen::MatrixXd& design, const Eigen::VectorXd& y,
                           const Eigen::VectorXd& weights, const Eigen::VectorXd& offset);

// max_j |sum_i w_i x_ij (y_i - mu_i)|, the fitted-score residual.
double score_residual(const Eigen::MatrixXd& design, const Eigen::VectorXd& y,
                      const Eigen::VectorXd& weights, const Eigen::VectorXd& offset,
                      const Eigen::VectorXd& beta);

FittedLearner fit_logistic(const LearnerSpec& spec, const NamedMatrix& X,
                           const Eigen::VectorXd& y, const Eigen::VectorXd& weights,
                           const Eigen::VectorXd& offset);
FittedLearner fit_logistic(const LearnerSpec& spec, const NamedMatrix& X,
                           const Eigen::VectorXd& y, const Eigen::VectorXd& weights);

// Weighted least squares with a small ridge (1e-8) so duplicated columns
// stay finite.
FittedLearner fit_linear(const LearnerSpec& spec, const NamedMatrix& X,
                         const Eigen::VectorXd& y, const Eigen::VectorXd& weights);

FittedLearner fit_learner(const LearnerSpec& spec, const NamedMatrix& X,
                          const Eigen::VectorXd& y, const Eigen::VectorXd& weights);

// Offset-free predictions. Logistic kinds return probabilities clipped to
// [kProbClip, 1 - kProbClip]; the linear kind returns the linear predictor
// clipped to [0, 1].
Eigen::VectorXd predict(const FittedLearner& fit, const NamedMatrix& X);

}  // namespace crtmle
