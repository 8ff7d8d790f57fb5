#pragma once

#include <cstdint>
#include <iosfwd>
#include <optional>
#include <string>
#include <vector>

namespace crtmle {

// Command implementations behind the command line tool. Each returns the
// process exit code: 0 success, 1 invalid input or configuration, 2
// estimation failure. Human-readable summaries go to `out`, errors and
// progress to `err`; structured results are written to the requested paths
// and contain nothing that varies between runs with equal seeds.

struct AnalyzeOptions {
    std::string data_path;
    std::string config_path;  // empty: defaults
    std::string out_path;     // empty: no JSON written
    int threads = 0;          // 0: hardware concurrency
    std::optional<std::uint64_t> seed_override;
};

int cmd_analyze(const AnalyzeOptions& options, std::ostream& out, std::ostream& err);

struct SensitivityOptions {
    std::string data_path;
    std::string config_path;
    std::string out_path;
    int threads = 0;
    std::optional<std::uint64_t> seed_override;
};

int cmd_sensitivity(const SensitivityOptions& options, std::ostream& out, std::ostream& err);

struct SimulateOptions {
    std::string dgp_config_path;                    // empty: built-in example process
    std::vector<std::string> analysis_config_paths;  // one operating row per config
    int n_reps = 500;
    std::string out_path;  // operating characteristics CSV; truth JSON alongside
    int threads = 0;
    std::int64_t truth_cluster_draws = 200000;
    std::optional<std::uint64_t> seed_override;  // replaces the process seed
};

int cmd_simulate(const SimulateOptions& options, std::ostream& out, std::ostream& err);

struct GenerateOptions {
    std::string config_path;  // empty: built-in example process
    std::string out_path;
    bool force_measurement = false;
};

int cmd_generate(const GenerateOptions& options, std::ostream& out, std::ostream& err);

// Shared formatting helper: value rendered to 4 significant digits.
std::string format_value(double v);

}  // namespace crtmle
