#pragma once

#include <map>
#include <optional>
#include <string>
#include <vector>

#include "crtmle/data_model.hpp"
#include "crtmle/simulator.hpp"

namespace crtmle {

// INI-style configuration: [section] headers, key = value lines, comments
// starting with '#' or ';'. Keys keep file order within their section.
struct IniFile {
    std::map<std::string, std::vector<std::pair<std::string, std::string>>> sections;

    std::optional<std::string> get(const std::string& section, const std::string& key) const;
};

IniFile parse_ini(const std::string& text);
IniFile parse_ini_file(const std::string& path);

// Sections [data], [stage1], [stage2]; unknown keys are errors, missing keys
// fall back to the defaults in AnalysisConfig.
AnalysisConfig analysis_config_from_ini(const IniFile& ini);

// Section [simulation]; unknown keys are errors.
DgpConfig dgp_from_ini(const IniFile& ini);

bool has_simulation_section(const IniFile& ini);

std::string to_ini(const AnalysisConfig& config);
std::string to_ini(const DgpConfig& dgp);

}  // namespace crtmle
