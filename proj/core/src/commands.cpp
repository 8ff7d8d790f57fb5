#include "crtmle/commands.hpp"

#include <chrono>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <functional>
#include <iomanip>
#include <iostream>
#include <sstream>

#include <json.hpp>

#include "crtmle/config_file.hpp"
#include "crtmle/simulator.hpp"

namespace crtmle {

using nlohmann::json;

std::string format_value(double v) {
    char buffer[64];
    std::snprintf(buffer, sizeof(buffer), "%.4g", v);
    return buffer;
}

namespace {

std::string read_file(const std::string& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw ValidationError("cannot open file: " + path);
    std::ostringstream buffer;
    buffer << in.rdbuf();
    return buffer.str();
}

void write_file(const std::string& path, const std::string& content) {
    std::ofstream out(path, std::ios::binary);
    if (!out) throw ValidationError("cannot write file: " + path);
    out << content;
    if (!out) throw ValidationError("write failed: " + path);
}

std::string hash_hex(const std::string& bytes) {
    std::ostringstream out;
    out << std::hex << std::setfill('0') << std::setw(16) << fnv1a64(bytes);
    return out.str();
}

std::string shortest_number(double v) {
    std::ostringstream out;
    out << json(v);  // shortest round-trip formatting
    return out.str();
}

json config_json(const AnalysisConfig& c) {
    return json{{"unit_level", to_string(c.unit_level)},
                {"stage1_unadjusted", c.stage1_unadjusted},
                {"stage1_adjustment", c.stage1_adjustment},
                {"stage1_adjustment_post", c.stage1_adjustment_post},
                {"stage2_mode", to_string(c.stage2_mode)},
                {"effect_scale", to_string(c.effect_scale)},
                {"g_bound", c.g_bound},
                {"cv_folds", c.cv_folds},
                {"seed", c.seed},
                {"weighting", "equal_unit"}};
}

json endpoint_json(const EndpointEstimate& e) {
    json out{{"unit_id", e.unit_id},
             {"psi_den", e.psi_den_hat},
             {"psi_num", e.psi_num_hat},
             {"endpoint", e.endpoint},
             {"n_individuals", e.n_individuals},
             {"n_sampled", e.n_sampled},
             {"n_measured_baseline", e.n_measured_baseline},
             {"n_cohort", e.n_cohort},
             {"n_measured_followup", e.n_measured_followup},
             {"g_bound_activations", e.n_gbound_activations},
             {"adjusted", e.adjusted},
             {"max_score_residual", e.max_score_residual},
             {"flags", e.flags}};
    if (e.min_measurement_prob) out["min_measurement_prob"] = *e.min_measurement_prob;
    return out;
}

json effect_json(const EffectEstimate& e) {
    json out{{"scale", to_string(e.scale)},
             {"point", e.point},
             {"se", e.se},
             {"ci_lower", e.ci_lower},
             {"ci_upper", e.ci_upper},
             {"ci_multiplier", e.ci_multiplier},
             {"df_rule", e.df_rule},
             {"phi1", e.phi1},
             {"phi0", e.phi0},
             {"ic_mean", e.ic_mean},
             {"ic_values", e.ic_values},
             {"max_score_residual", e.max_score_residual},
             {"selection", e.selection},
             {"n_units", e.n_units},
             {"n_treated", e.n_treated}};
    if (e.log_point) out["log_point"] = *e.log_point;
    return out;
}

json truth_json(const std::string& label, const TruthReport& t) {
    return json{{"label", label},
                {"level", to_string(t.level)},
                {"psi_den", {t.psi_den[0], t.psi_den[1]}},
                {"psi_num", {t.psi_num[0], t.psi_num[1]}},
                {"endpoint", {t.endpoint[0], t.endpoint[1]}},
                {"rr", t.rr},
                {"rd", t.rd},
                {"mc_unit_draws", t.mc_unit_draws},
                {"mc_individuals", t.mc_individuals},
                {"mc_se_endpoint", {t.mc_se_endpoint[0], t.mc_se_endpoint[1]}},
                {"mc_se_rd", t.mc_se_rd},
                {"mc_se_log_rr", t.mc_se_log_rr},
                {"mc_se", t.mc_se}};
}

// left-aligned fixed-width cells for console tables
void print_row(std::ostream& out, const std::vector<std::string>& cells,
               const std::vector<int>& widths) {
    for (std::size_t i = 0; i < cells.size(); ++i) {
        out << std::left << std::setw(widths[i]) << cells[i];
        if (i + 1 < cells.size()) out << "  ";
    }
    out << "\n";
}

void print_table(std::ostream& out, const std::vector<std::vector<std::string>>& rows) {
    if (rows.empty()) return;
    std::vector<int> widths(rows.front().size(), 0);
    for (const auto& row : rows) {
        for (std::size_t i = 0; i < row.size(); ++i) {
            widths[i] = std::max(widths[i], static_cast<int>(row[i].size()));
        }
    }
    for (const auto& row : rows) print_row(out, row, widths);
}

void print_effect(std::ostream& out, const EffectEstimate& e) {
    out << "effect (" << to_string(e.scale) << "): " << format_value(e.point) << "  95% CI ["
        << format_value(e.ci_lower) << ", " << format_value(e.ci_upper) << "]  se("
        << (e.scale == EffectScale::risk_ratio ? "log" : "abs") << ") " << format_value(e.se)
        << "  " << e.df_rule << "\n";
    out << "arm means: treated " << format_value(e.phi1) << ", control " << format_value(e.phi0)
        << "  units " << e.n_units << " (" << e.n_treated << " treated)\n";
    out << "selection: " << e.selection << "\n";
}

AnalysisConfig load_analysis_config(const std::string& path) {
    if (path.empty()) {
        AnalysisConfig config;
        return config;
    }
    return analysis_config_from_ini(parse_ini_file(path));
}

int run_guarded(std::ostream& err, const std::function<void()>& body) {
    try {
        body();
        return 0;
    } catch (const ValidationError& e) {
        err << "error: " << e.what() << "\n";
        return 1;
    } catch (const EstimationError& e) {
        err << "estimation error: " << e.what() << "\n";
        return 2;
    } catch (const std::exception& e) {
        err << "error: " << e.what() << "\n";
        return 1;
    }
}

}  // namespace

int cmd_analyze(const AnalyzeOptions& options, std::ostream& out, std::ostream& err) {
    return run_guarded(err, [&] {
        const auto start = std::chrono::steady_clock::now();
        AnalysisConfig config = load_analysis_config(options.config_path);
        if (options.seed_override) config.seed = *options.seed_override;
        const std::string raw = read_file(options.data_path);
        const Dataset data = parse_csv(raw);
        const auto units = group_units(data, config.unit_level);
        const auto endpoints = estimate_endpoints(units, config, options.threads);
        const auto rows = make_unit_rows(units, endpoints);
        const EffectEstimate effect = tmle_effect(rows, config);

        int g_bound_total = 0;
        std::vector<std::string> flagged;
        for (const auto& e : endpoints) {
            g_bound_total += e.n_gbound_activations;
            if (!e.flags.empty()) flagged.push_back(e.unit_id);
        }

        if (!options.out_path.empty()) {
            json report{{"config", config_json(config)},
                        {"input", json{{"path", options.data_path},
                                       {"fnv1a64", hash_hex(raw)},
                                       {"n_records", data.records.size()}}},
                        {"units", json::array()},
                        {"effect", effect_json(effect)},
                        {"diagnostics", json{{"g_bound_activations_total", g_bound_total},
                                             {"flagged_units", flagged}}},
                        {"seed", config.seed}};
            for (const auto& e : endpoints) report["units"].push_back(endpoint_json(e));
            write_file(options.out_path, report.dump(2) + "\n");
        }

        std::vector<std::vector<std::string>> table;
        table.push_back({"unit", "arm", "n", "cohort", "psi_den", "psi_num", "endpoint", "flags"});
        for (std::size_t i = 0; i < endpoints.size(); ++i) {
            const auto& e = endpoints[i];
            std::string flags;
            for (const auto& f : e.flags) flags += (flags.empty() ? "" : ",") + f;
            table.push_back({e.unit_id, std::to_string(units[i].arm), std::to_string(e.n_individuals),
                             std::to_string(e.n_cohort), format_value(e.psi_den_hat),
                             format_value(e.psi_num_hat), format_value(e.endpoint), flags});
        }
        print_table(out, table);
        out << "\n";
        print_effect(out, effect);

        const auto elapsed = std::chrono::duration_cast<std::chrono::milliseconds>(
            std::chrono::steady_clock::now() - start);
        err << "analyze finished in " << elapsed.count() << " ms\n";
    });
}

int cmd_sensitivity(const SensitivityOptions& options, std::ostream& out, std::ostream& err) {
    return run_guarded(err, [&] {
        const auto start = std::chrono::steady_clock::now();
        AnalysisConfig config = load_analysis_config(options.config_path);
        if (options.seed_override) config.seed = *options.seed_override;
        const std::string raw = read_file(options.data_path);
        const Dataset data = parse_csv(raw);
        const auto grid = sensitivity_grid(data, config, options.threads);

        if (!options.out_path.empty()) {
            json report{{"config", config_json(config)},
                        {"input", json{{"path", options.data_path},
                                       {"fnv1a64", hash_hex(raw)},
                                       {"n_records", data.records.size()}}},
                        {"rows", json::array()},
                        {"seed", config.seed}};
            for (const auto& row : grid) {
                json r{{"label", row.label},
                       {"assumptions", row.assumptions},
                       {"unit_level", to_string(row.unit_level)},
                       {"stage1_adjusted", row.stage1_adjusted},
                       {"stage2_mode", to_string(row.stage2_mode)}};
                if (row.effect) r["effect"] = effect_json(*row.effect);
                if (!row.error.empty()) r["error"] = row.error;
                report["rows"].push_back(std::move(r));
            }
            write_file(options.out_path, report.dump(2) + "\n");
        }

        std::vector<std::vector<std::string>> table;
        table.push_back({"analysis", "point", "ci_lower", "ci_upper", "note"});
        for (const auto& row : grid) {
            if (row.effect) {
                table.push_back({row.label, format_value(row.effect->point),
                                 format_value(row.effect->ci_lower),
                                 format_value(row.effect->ci_upper), ""});
            } else {
                table.push_back({row.label, "-", "-", "-", row.error});
            }
        }
        print_table(out, table);

        const auto elapsed = std::chrono::duration_cast<std::chrono::milliseconds>(
            std::chrono::steady_clock::now() - start);
        err << "sensitivity finished in " << elapsed.count() << " ms\n";
    });
}

int cmd_simulate(const SimulateOptions& options, std::ostream& out, std::ostream& err) {
    return run_guarded(err, [&] {
        const auto start = std::chrono::steady_clock::now();
        DgpConfig dgp = options.dgp_config_path.empty()
                            ? example_dgp()
                            : dgp_from_ini(parse_ini_file(options.dgp_config_path));
        if (options.seed_override) dgp.seed = *options.seed_override;
        std::vector<AnalysisConfig> configs;
        std::vector<std::string> labels;
        if (options.analysis_config_paths.empty()) {
            configs.push_back(AnalysisConfig{});
            labels.push_back("default");
        } else {
            for (const auto& path : options.analysis_config_paths) {
                configs.push_back(analysis_config_from_ini(parse_ini_file(path)));
                labels.push_back(std::filesystem::path(path).stem().string());
            }
        }

        const ReplicateStudy study = replicate_study(dgp, configs, labels, options.n_reps,
                                                     options.threads, options.truth_cluster_draws);

        if (!options.out_path.empty()) {
            std::ostringstream csv;
            csv << "config_id,bias,emp_se,mean_se,coverage,rejection,n_fail\n";
            for (const auto& row : study.rows) {
                csv << row.label << "," << shortest_number(row.bias) << ","
                    << shortest_number(row.emp_se) << "," << shortest_number(row.mean_se) << ","
                    << shortest_number(row.coverage) << "," << shortest_number(row.rejection) << ","
                    << row.n_fail << "\n";
            }
            write_file(options.out_path, csv.str());

            json truths = json::array();
            for (std::size_t i = 0; i < study.rows.size(); ++i) {
                truths.push_back(truth_json(study.rows[i].label, study.truths[i]));
            }
            write_file(options.out_path + ".truth.json", json{{"truths", truths}}.dump(2) + "\n");
        }

        std::vector<std::vector<std::string>> table;
        table.push_back({"config", "scale", "truth", "mean", "bias", "emp_se", "mean_se", "cover",
                         "reject", "width", "fail"});
        for (const auto& row : study.rows) {
            table.push_back({row.label, to_string(row.scale), format_value(row.truth),
                             format_value(row.mean_point), format_value(row.bias),
                             format_value(row.emp_se), format_value(row.mean_se),
                             format_value(row.coverage), format_value(row.rejection),
                             format_value(row.mean_ci_width), std::to_string(row.n_fail)});
        }
        print_table(out, table);
        out << "(bias, mean and width on the log scale for ratio effects)\n";

        const auto elapsed = std::chrono::duration_cast<std::chrono::milliseconds>(
            std::chrono::steady_clock::now() - start);
        err << "simulate finished in " << elapsed.count() << " ms\n";
    });
}

int cmd_generate(const GenerateOptions& options, std::ostream& out, std::ostream& err) {
    return run_guarded(err, [&] {
        const DgpConfig dgp = options.config_path.empty()
                                  ? example_dgp()
                                  : dgp_from_ini(parse_ini_file(options.config_path));
        const Dataset data = generate(dgp, options.force_measurement);
        write_file(options.out_path, emit_csv(data));
        out << "wrote " << data.records.size() << " records to " << options.out_path << "\n";
    });
}

}  // namespace crtmle
