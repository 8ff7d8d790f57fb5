#pragma once

#include <cstdint>
#include <iosfwd>
#include <stdexcept>
#include <string>
#include <vector>

namespace crtmle {

// Input or configuration problems: malformed files, inconsistent columns,
// invalid settings. Mapped to exit code 1 by the command line tool.
class ValidationError : public std::runtime_error {
  public:
    using std::runtime_error::runtime_error;
};

// Estimation failures on structurally valid input: empty cohorts, degenerate
// denominators, single-arm effect requests. Mapped to exit code 2.
class EstimationError : public std::runtime_error {
  public:
    using std::runtime_error::runtime_error;
};

enum class UnitLevel { cluster, partition };
enum class Stage2Mode { randomized, pseudo_observational, unadjusted };
enum class EffectScale { risk_ratio, risk_difference };

std::string to_string(UnitLevel level);
std::string to_string(Stage2Mode mode);
std::string to_string(EffectScale scale);

// One person. Covariate values are stored positionally; the column names live
// once per dataset / unit (see Dataset, UnitData). Measurement structure:
//   s  sampled into the longitudinal sub-sample
//   d0 baseline outcome measured (requires s = 1)
//   y0 baseline outcome, zero whenever d0 = 0
//   d1 follow-up outcome measured (requires d0 = 1 and y0 = 0)
//   y1 follow-up outcome, zero whenever d1 = 0
struct IndividualRecord {
    std::string cluster_id;
    std::string partition_id;
    std::string individual_id;
    int arm = 0;
    int sampled = 0;
    int measured_baseline = 0;
    int outcome_baseline = 0;
    int measured_followup = 0;
    int outcome_followup = 0;
    std::vector<double> l0;  // individual baseline covariates
    std::vector<double> l1;  // individual post-baseline covariates
    std::vector<double> w;   // partition-level covariates (repeated per row)
    std::vector<double> e;   // cluster-level covariates (repeated per row)

    bool operator==(const IndividualRecord&) const = default;
};

// A parsed file before grouping.
struct Dataset {
    std::vector<std::string> l0_names;
    std::vector<std::string> l1_names;
    std::vector<std::string> w_names;
    std::vector<std::string> e_names;
    std::vector<IndividualRecord> records;

    bool operator==(const Dataset&) const = default;
};

// One independent unit for analysis. At cluster level the unit covariates are
// the e_* columns; at partition level the w_* columns.
struct UnitData {
    std::string unit_id;
    UnitLevel level = UnitLevel::partition;
    int arm = 0;
    std::vector<std::string> covariate_names;  // unit-level adjusters
    std::vector<double> covariate_values;
    std::vector<std::string> l0_names;
    std::vector<std::string> l1_names;
    std::vector<std::string> w_names;
    std::vector<std::string> e_names;
    std::vector<IndividualRecord> records;

    bool operator==(const UnitData&) const = default;
};

enum class Weighting { equal_unit };

struct AnalysisConfig {
    UnitLevel unit_level = UnitLevel::partition;
    bool stage1_unadjusted = false;
    std::vector<std::string> stage1_adjustment;       // baseline covariate names
    std::vector<std::string> stage1_adjustment_post;  // post-baseline covariate names
    Stage2Mode stage2_mode = Stage2Mode::randomized;
    EffectScale effect_scale = EffectScale::risk_ratio;
    double g_bound = 0.025;
    int cv_folds = 10;
    std::uint64_t seed = 20240801;
    Weighting weighting = Weighting::equal_unit;
};

// Throws ValidationError on out-of-range settings.
void validate_config(const AnalysisConfig& config);

// CSV schema (header required, strict column set):
//   cluster_id,partition_id,individual_id,a,s,d0,y0,d1,y1
// plus covariate columns prefixed l0_ (individual baseline), l1_ (individual
// post-baseline), w_ (partition level), e_ (cluster level). Binary columns
// must be exactly 0 or 1. Errors cite the offending file line.
Dataset parse_csv(const std::string& text);
Dataset parse_csv_file(const std::string& path);

// Canonical serialization; parse_csv(emit_csv(d)) == d for any valid dataset.
std::string emit_csv(const Dataset& dataset);
std::string emit_csv(const std::vector<UnitData>& units);

// Groups records into units at the requested level, validates arm constancy
// and unit-covariate constancy, and orders units by id and records by
// individual id.
std::vector<UnitData> group_units(const Dataset& dataset, UnitLevel level);

// parse + group in one step.
std::vector<UnitData> ingest(const std::string& text, UnitLevel level);
std::vector<UnitData> ingest_file(const std::string& path, UnitLevel level);

Dataset to_dataset(const std::vector<UnitData>& units);

// Members at risk at follow-up: measured at baseline and baseline-negative.
std::vector<IndividualRecord> incidence_cohort(const UnitData& unit);

}  // namespace crtmle
