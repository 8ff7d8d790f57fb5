#pragma once

#include <cstdint>

#include "crtmle/learners.hpp"

namespace crtmle {

enum class SlLoss { log_loss, squared_error };

struct CandidateSummary {
    LearnerSpec spec;
    double cv_risk = 0.0;  // +inf when the candidate could not be fitted
    double weight = 0.0;
    bool usable = true;
};

struct EnsembleFit {
    std::vector<FittedLearner> fits;  // full-data refits, aligned with candidates
    std::vector<CandidateSummary> candidates;
    double cv_risk = 0.0;  // risk of the weight optimum on held-out predictions
    int folds_used = 0;
    bool discrete = false;  // single lowest-risk candidate instead of a blend
};

// Fold labels in [0, folds) for rows given in canonical order. The assignment
// is a seeded permutation dealt round-robin, stratified on y when y is
// binary, so callers that sort rows canonically before the call get the same
// folds under any input row order.
std::vector<int> assign_folds(const Eigen::VectorXd& y, int folds, std::uint64_t seed);

// V-fold cross-validated ensemble over the candidate learners with simplex
// weights chosen to minimize held-out risk. Candidates that fail to fit are
// dropped; if every candidate fails an EstimationError is thrown. When some
// fold cannot hold both outcome classes after repeated redraws, selection
// falls back to the single candidate with the lowest held-out risk.
EnsembleFit sl_fit(const NamedMatrix& X, const Eigen::VectorXd& y,
                   const Eigen::VectorXd& weights, const std::vector<LearnerSpec>& candidates,
                   int folds, SlLoss loss, std::uint64_t seed);

// Weighted blend of candidate predictions, clipped to [kProbClip, 1 - kProbClip].
Eigen::VectorXd sl_predict(const EnsembleFit& fit, const NamedMatrix& X);

}  // namespace crtmle
