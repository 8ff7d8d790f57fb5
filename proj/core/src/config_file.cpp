#include "crtmle/config_file.hpp"

#include <algorithm>
#include <charconv>
#include <fstream>
#include <sstream>

namespace crtmle {

namespace {

std::string trim(const std::string& s) {
    const auto begin = s.find_first_not_of(" \t\r");
    if (begin == std::string::npos) return "";
    const auto end = s.find_last_not_of(" \t\r");
    return s.substr(begin, end - begin + 1);
}

std::vector<std::string> split_list(const std::string& value) {
    std::vector<std::string> out;
    std::string item;
    std::istringstream stream(value);
    while (std::getline(stream, item, ',')) {
        item = trim(item);
        if (!item.empty()) out.push_back(item);
    }
    return out;
}

[[noreturn]] void bad_value(const std::string& key, const std::string& value) {
    throw ValidationError("config key '" + key + "': invalid value '" + value + "'");
}

double parse_double(const std::string& key, const std::string& value) {
    try {
        std::size_t used = 0;
        const double parsed = std::stod(value, &used);
        if (used != value.size()) bad_value(key, value);
        return parsed;
    } catch (const ValidationError&) {
        throw;
    } catch (const std::exception&) {
        bad_value(key, value);
    }
}

long long parse_int(const std::string& key, const std::string& value) {
    long long parsed = 0;
    const auto result = std::from_chars(value.data(), value.data() + value.size(), parsed);
    if (result.ec != std::errc() || result.ptr != value.data() + value.size()) {
        bad_value(key, value);
    }
    return parsed;
}

std::uint64_t parse_seed(const std::string& key, const std::string& value) {
    std::uint64_t parsed = 0;
    const auto result = std::from_chars(value.data(), value.data() + value.size(), parsed);
    if (result.ec != std::errc() || result.ptr != value.data() + value.size()) {
        bad_value(key, value);
    }
    return parsed;
}

bool parse_bool(const std::string& key, const std::string& value) {
    if (value == "true" || value == "1") return true;
    if (value == "false" || value == "0") return false;
    bad_value(key, value);
}

// field table for the simulation section
struct DgpField {
    const char* key;
    double DgpConfig::*member;
};

constexpr DgpField kDgpFields[] = {
    {"effect_size", &DgpConfig::effect_size},
    {"p_e", &DgpConfig::p_e},
    {"w_intercept", &DgpConfig::w_intercept},
    {"w_e", &DgpConfig::w_e},
    {"h_intercept", &DgpConfig::h_intercept},
    {"h_w", &DgpConfig::h_w},
    {"x_intercept", &DgpConfig::x_intercept},
    {"x_h", &DgpConfig::x_h},
    {"x_w", &DgpConfig::x_w},
    {"s_intercept", &DgpConfig::s_intercept},
    {"s_h", &DgpConfig::s_h},
    {"s_x", &DgpConfig::s_x},
    {"y0_intercept", &DgpConfig::y0_intercept},
    {"y0_h", &DgpConfig::y0_h},
    {"y0_x", &DgpConfig::y0_x},
    {"d0_intercept", &DgpConfig::d0_intercept},
    {"d0_h", &DgpConfig::d0_h},
    {"d0_x", &DgpConfig::d0_x},
    {"z_intercept", &DgpConfig::z_intercept},
    {"z_arm", &DgpConfig::z_arm},
    {"z_h", &DgpConfig::z_h},
    {"z_x", &DgpConfig::z_x},
    {"y1_intercept", &DgpConfig::y1_intercept},
    {"y1_arm", &DgpConfig::y1_arm},
    {"y1_z", &DgpConfig::y1_z},
    {"y1_h", &DgpConfig::y1_h},
    {"y1_x", &DgpConfig::y1_x},
    {"d1_intercept", &DgpConfig::d1_intercept},
    {"d1_z", &DgpConfig::d1_z},
    {"d1_h", &DgpConfig::d1_h},
    {"y0_e", &DgpConfig::y0_e},
    {"y1_e", &DgpConfig::y1_e},
    {"z_neighbor", &DgpConfig::z_neighbor},
    {"y1_neighbor", &DgpConfig::y1_neighbor},
};

}  // namespace

std::optional<std::string> IniFile::get(const std::string& section, const std::string& key) const {
    const auto it = sections.find(section);
    if (it == sections.end()) return std::nullopt;
    for (const auto& [k, v] : it->second) {
        if (k == key) return v;
    }
    return std::nullopt;
}

IniFile parse_ini(const std::string& text) {
    IniFile ini;
    std::istringstream stream(text);
    std::string line;
    std::string section;
    int line_no = 0;
    while (std::getline(stream, line)) {
        ++line_no;
        const auto comment = line.find_first_of("#;");
        if (comment != std::string::npos) line = line.substr(0, comment);
        line = trim(line);
        if (line.empty()) continue;
        if (line.front() == '[') {
            if (line.back() != ']') {
                throw ValidationError("config line " + std::to_string(line_no) +
                                      ": unterminated section header");
            }
            section = trim(line.substr(1, line.size() - 2));
            if (section.empty()) {
                throw ValidationError("config line " + std::to_string(line_no) + ": empty section name");
            }
            ini.sections[section];
            continue;
        }
        const auto eq = line.find('=');
        if (eq == std::string::npos) {
            throw ValidationError("config line " + std::to_string(line_no) + ": expected key = value");
        }
        const std::string key = trim(line.substr(0, eq));
        const std::string value = trim(line.substr(eq + 1));
        if (key.empty()) {
            throw ValidationError("config line " + std::to_string(line_no) + ": empty key");
        }
        if (section.empty()) {
            throw ValidationError("config line " + std::to_string(line_no) +
                                  ": key outside any section");
        }
        if (ini.get(section, key)) {
            throw ValidationError("config line " + std::to_string(line_no) + ": duplicate key '" +
                                  key + "'");
        }
        ini.sections[section].emplace_back(key, value);
    }
    return ini;
}

IniFile parse_ini_file(const std::string& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw ValidationError("cannot open config file: " + path);
    std::ostringstream buffer;
    buffer << in.rdbuf();
    return parse_ini(buffer.str());
}

namespace {

void check_known_sections(const IniFile& ini) {
    for (const auto& [name, keys] : ini.sections) {
        if (name != "data" && name != "stage1" && name != "stage2" && name != "simulation") {
            throw ValidationError("unknown config section [" + name + "]");
        }
    }
}

void check_known_keys(const IniFile& ini, const std::string& section,
                      const std::vector<std::string>& known) {
    const auto it = ini.sections.find(section);
    if (it == ini.sections.end()) return;
    for (const auto& [key, value] : it->second) {
        if (std::find(known.begin(), known.end(), key) == known.end()) {
            throw ValidationError("unknown key '" + key + "' in section [" + section + "]");
        }
    }
}

}  // namespace

AnalysisConfig analysis_config_from_ini(const IniFile& ini) {
    check_known_sections(ini);
    check_known_keys(ini, "data", {"unit_level", "seed", "g_bound", "cv_folds", "weighting"});
    check_known_keys(ini, "stage1", {"unadjusted", "adjustment", "adjustment_post"});
    check_known_keys(ini, "stage2", {"mode", "scale"});

    AnalysisConfig config;
    if (auto v = ini.get("data", "unit_level")) {
        if (*v == "cluster") config.unit_level = UnitLevel::cluster;
        else if (*v == "partition") config.unit_level = UnitLevel::partition;
        else bad_value("unit_level", *v);
    }
    if (auto v = ini.get("data", "seed")) config.seed = parse_seed("seed", *v);
    if (auto v = ini.get("data", "g_bound")) config.g_bound = parse_double("g_bound", *v);
    if (auto v = ini.get("data", "cv_folds")) {
        config.cv_folds = static_cast<int>(parse_int("cv_folds", *v));
    }
    if (auto v = ini.get("data", "weighting")) {
        if (*v != "equal_unit") bad_value("weighting", *v);
    }
    if (auto v = ini.get("stage1", "unadjusted")) {
        config.stage1_unadjusted = parse_bool("unadjusted", *v);
    }
    if (auto v = ini.get("stage1", "adjustment")) config.stage1_adjustment = split_list(*v);
    if (auto v = ini.get("stage1", "adjustment_post")) {
        config.stage1_adjustment_post = split_list(*v);
    }
    if (auto v = ini.get("stage2", "mode")) {
        if (*v == "randomized") config.stage2_mode = Stage2Mode::randomized;
        else if (*v == "pseudo_observational") config.stage2_mode = Stage2Mode::pseudo_observational;
        else if (*v == "unadjusted") config.stage2_mode = Stage2Mode::unadjusted;
        else bad_value("mode", *v);
    }
    if (auto v = ini.get("stage2", "scale")) {
        if (*v == "risk_ratio") config.effect_scale = EffectScale::risk_ratio;
        else if (*v == "risk_difference") config.effect_scale = EffectScale::risk_difference;
        else bad_value("scale", *v);
    }
    validate_config(config);
    return config;
}

bool has_simulation_section(const IniFile& ini) {
    return ini.sections.count("simulation") > 0;
}

DgpConfig dgp_from_ini(const IniFile& ini) {
    check_known_sections(ini);
    std::vector<std::string> known = {"n_clusters", "partitions_per_cluster", "individuals_min",
                                      "individuals_max", "interference", "seed"};
    for (const auto& field : kDgpFields) known.push_back(field.key);
    check_known_keys(ini, "simulation", known);
    if (!has_simulation_section(ini)) {
        throw ValidationError("config has no [simulation] section");
    }

    DgpConfig dgp;
    if (auto v = ini.get("simulation", "n_clusters")) {
        dgp.n_clusters = static_cast<int>(parse_int("n_clusters", *v));
    }
    if (auto v = ini.get("simulation", "partitions_per_cluster")) {
        dgp.partitions_per_cluster = static_cast<int>(parse_int("partitions_per_cluster", *v));
    }
    if (auto v = ini.get("simulation", "individuals_min")) {
        dgp.individuals_min = static_cast<int>(parse_int("individuals_min", *v));
    }
    if (auto v = ini.get("simulation", "individuals_max")) {
        dgp.individuals_max = static_cast<int>(parse_int("individuals_max", *v));
    }
    if (auto v = ini.get("simulation", "interference")) {
        if (*v == "none") dgp.interference = InterferenceMode::none;
        else if (*v == "cross_partition") dgp.interference = InterferenceMode::cross_partition;
        else bad_value("interference", *v);
    }
    if (auto v = ini.get("simulation", "seed")) dgp.seed = parse_seed("seed", *v);
    for (const auto& field : kDgpFields) {
        if (auto v = ini.get("simulation", field.key)) {
            dgp.*(field.member) = parse_double(field.key, *v);
        }
    }
    validate_dgp(dgp);
    return dgp;
}

namespace {

std::string format_double(double v) {
    std::ostringstream out;
    out.precision(17);
    out << v;
    return out.str();
}

std::string join_list(const std::vector<std::string>& items) {
    std::string out;
    for (std::size_t i = 0; i < items.size(); ++i) {
        if (i > 0) out += ", ";
        out += items[i];
    }
    return out;
}

}  // namespace

std::string to_ini(const AnalysisConfig& config) {
    std::ostringstream out;
    out << "[data]\n";
    out << "unit_level = " << to_string(config.unit_level) << "\n";
    out << "seed = " << config.seed << "\n";
    out << "g_bound = " << format_double(config.g_bound) << "\n";
    out << "cv_folds = " << config.cv_folds << "\n";
    out << "weighting = equal_unit\n";
    out << "\n[stage1]\n";
    out << "unadjusted = " << (config.stage1_unadjusted ? "true" : "false") << "\n";
    out << "adjustment = " << join_list(config.stage1_adjustment) << "\n";
    out << "adjustment_post = " << join_list(config.stage1_adjustment_post) << "\n";
    out << "\n[stage2]\n";
    out << "mode = " << to_string(config.stage2_mode) << "\n";
    out << "scale = " << to_string(config.effect_scale) << "\n";
    return out.str();
}

std::string to_ini(const DgpConfig& dgp) {
    std::ostringstream out;
    out << "[simulation]\n";
    out << "n_clusters = " << dgp.n_clusters << "\n";
    out << "partitions_per_cluster = " << dgp.partitions_per_cluster << "\n";
    out << "individuals_min = " << dgp.individuals_min << "\n";
    out << "individuals_max = " << dgp.individuals_max << "\n";
    out << "interference = " << to_string(dgp.interference) << "\n";
    out << "seed = " << dgp.seed << "\n";
    for (const auto& field : kDgpFields) {
        out << field.key << " = " << format_double(dgp.*(field.member)) << "\n";
    }
    return out.str();
}

}  // namespace crtmle
