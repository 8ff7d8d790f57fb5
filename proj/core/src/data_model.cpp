#include "crtmle/data_model.hpp"

#include <algorithm>
#include <charconv>
#include <fstream>
#include <map>
#include <set>
#include <sstream>
#include <system_error>

namespace crtmle {

std::string to_string(UnitLevel level) {
    return level == UnitLevel::cluster ? "cluster" : "partition";
}

std::string to_string(Stage2Mode mode) {
    switch (mode) {
        case Stage2Mode::randomized: return "randomized";
        case Stage2Mode::pseudo_observational: return "pseudo_observational";
        default: return "unadjusted";
    }
}

std::string to_string(EffectScale scale) {
    return scale == EffectScale::risk_ratio ? "risk_ratio" : "risk_difference";
}

void validate_config(const AnalysisConfig& config) {
    if (!(config.g_bound > 0.0 && config.g_bound < 0.5)) {
        throw ValidationError("g_bound must lie strictly between 0 and 0.5");
    }
    if (config.cv_folds < 2) {
        throw ValidationError("cv_folds must be at least 2");
    }
    if (config.weighting != Weighting::equal_unit) {
        throw ValidationError("only equal_unit weighting is supported");
    }
    if (config.stage1_unadjusted &&
        (!config.stage1_adjustment.empty() || !config.stage1_adjustment_post.empty())) {
        throw ValidationError("stage1 adjustment lists must be empty in unadjusted mode");
    }
}

namespace {

std::vector<std::string> split_line(const std::string& line) {
    std::vector<std::string> out;
    std::size_t start = 0;
    for (;;) {
        std::size_t pos = line.find(',', start);
        if (pos == std::string::npos) {
            out.push_back(line.substr(start));
            return out;
        }
        out.push_back(line.substr(start, pos - start));
        start = pos + 1;
    }
}

[[noreturn]] void fail(std::size_t line_no, const std::string& what) {
    throw ValidationError("line " + std::to_string(line_no) + ": " + what);
}

int parse_binary(const std::string& field, std::size_t line_no, const std::string& column) {
    if (field == "0") return 0;
    if (field == "1") return 1;
    fail(line_no, "column " + column + " must be 0 or 1, got \"" + field + "\"");
}

double parse_real(const std::string& field, std::size_t line_no, const std::string& column) {
    if (field.empty()) fail(line_no, "missing value in column " + column);
    double value = 0.0;
    const char* first = field.data();
    const char* last = first + field.size();
    auto [ptr, ec] = std::from_chars(first, last, value);
    if (ec != std::errc() || ptr != last) {
        fail(line_no, "column " + column + " is not a number: \"" + field + "\"");
    }
    return value;
}

struct ColumnPlan {
    int cluster = -1, partition = -1, individual = -1;
    int a = -1, s = -1, d0 = -1, y0 = -1, d1 = -1, y1 = -1;
    std::vector<std::pair<int, std::string>> l0, l1, w, e;  // column index, bare name
};

ColumnPlan plan_columns(const std::vector<std::string>& header) {
    ColumnPlan plan;
    std::set<std::string> seen;
    auto require_new = [&](const std::string& name) {
        if (!seen.insert(name).second) fail(1, "duplicate column " + name);
    };
    for (int i = 0; i < static_cast<int>(header.size()); ++i) {
        const std::string& name = header[i];
        require_new(name);
        if (name == "cluster_id") plan.cluster = i;
        else if (name == "partition_id") plan.partition = i;
        else if (name == "individual_id") plan.individual = i;
        else if (name == "a") plan.a = i;
        else if (name == "s") plan.s = i;
        else if (name == "d0") plan.d0 = i;
        else if (name == "y0") plan.y0 = i;
        else if (name == "d1") plan.d1 = i;
        else if (name == "y1") plan.y1 = i;
        else if (name.rfind("l0_", 0) == 0) plan.l0.emplace_back(i, name);
        else if (name.rfind("l1_", 0) == 0) plan.l1.emplace_back(i, name);
        else if (name.rfind("w_", 0) == 0) plan.w.emplace_back(i, name);
        else if (name.rfind("e_", 0) == 0) plan.e.emplace_back(i, name);
        else fail(1, "unknown column " + name);
    }
    auto require = [&](int idx, const char* name) {
        if (idx < 0) fail(1, std::string("missing required column ") + name);
    };
    require(plan.cluster, "cluster_id");
    require(plan.partition, "partition_id");
    require(plan.individual, "individual_id");
    require(plan.a, "a");
    require(plan.s, "s");
    require(plan.d0, "d0");
    require(plan.y0, "y0");
    require(plan.d1, "d1");
    require(plan.y1, "y1");
    return plan;
}

void check_record_consistency(const IndividualRecord& r, std::size_t line_no) {
    if (r.sampled == 0 && r.measured_baseline == 1) {
        fail(line_no, "d0=1 requires s=1");
    }
    if (r.measured_baseline == 0 && r.outcome_baseline == 1) {
        fail(line_no, "y0=1 requires d0=1");
    }
    if (r.measured_followup == 1 && (r.measured_baseline == 0 || r.outcome_baseline == 1)) {
        fail(line_no, "d1=1 requires d0=1 and y0=0");
    }
    if (r.measured_followup == 0 && r.outcome_followup == 1) {
        fail(line_no, "y1=1 requires d1=1");
    }
}

// Constancy of cluster-level columns within a cluster, partition-level
// columns within a partition, and arm within a cluster.
void check_grouping_consistency(const Dataset& data) {
    std::map<std::string, std::pair<int, const std::vector<double>*>> by_cluster;
    std::map<std::pair<std::string, std::string>, const std::vector<double>*> by_partition;
    std::set<std::string> ids;
    for (std::size_t i = 0; i < data.records.size(); ++i) {
        const auto& r = data.records[i];
        const std::size_t line_no = i + 2;
        std::string key = r.cluster_id + "\x1f" + r.partition_id + "\x1f" + r.individual_id;
        if (!ids.insert(key).second) {
            fail(line_no, "duplicate individual_id " + r.individual_id + " within partition " +
                              r.partition_id + " of cluster " + r.cluster_id);
        }
        auto [cit, cnew] = by_cluster.try_emplace(r.cluster_id, r.arm, &r.e);
        if (!cnew) {
            if (cit->second.first != r.arm) {
                fail(line_no, "arm varies within cluster " + r.cluster_id);
            }
            if (*cit->second.second != r.e) {
                fail(line_no, "cluster-level covariates vary within cluster " + r.cluster_id);
            }
        }
        auto [pit, pnew] = by_partition.try_emplace({r.cluster_id, r.partition_id}, &r.w);
        if (!pnew && *pit->second != r.w) {
            fail(line_no, "partition-level covariates vary within partition " + r.partition_id +
                              " of cluster " + r.cluster_id);
        }
    }
}

std::string format_real(double v) {
    char buf[64];
    auto [ptr, ec] = std::to_chars(buf, buf + sizeof buf, v);
    return std::string(buf, ptr);
}

}  // namespace

Dataset parse_csv(const std::string& text) {
    std::vector<std::string> lines;
    {
        std::size_t start = 0;
        while (start <= text.size()) {
            std::size_t pos = text.find('\n', start);
            if (pos == std::string::npos) {
                lines.push_back(text.substr(start));
                break;
            }
            lines.push_back(text.substr(start, pos - start));
            start = pos + 1;
        }
        for (auto& line : lines) {
            if (!line.empty() && line.back() == '\r') line.pop_back();
        }
        while (!lines.empty() && lines.back().empty()) lines.pop_back();
    }
    if (lines.empty()) throw ValidationError("empty input, expected a header row");

    const auto header = split_line(lines[0]);
    const ColumnPlan plan = plan_columns(header);

    Dataset data;
    for (const auto& [idx, name] : plan.l0) data.l0_names.push_back(name);
    for (const auto& [idx, name] : plan.l1) data.l1_names.push_back(name);
    for (const auto& [idx, name] : plan.w) data.w_names.push_back(name);
    for (const auto& [idx, name] : plan.e) data.e_names.push_back(name);

    data.records.reserve(lines.size() - 1);
    for (std::size_t li = 1; li < lines.size(); ++li) {
        const std::size_t line_no = li + 1;
        if (lines[li].empty()) fail(line_no, "empty line");
        const auto fields = split_line(lines[li]);
        if (fields.size() != header.size()) {
            fail(line_no, "expected " + std::to_string(header.size()) + " fields, got " +
                              std::to_string(fields.size()));
        }
        IndividualRecord r;
        r.cluster_id = fields[plan.cluster];
        r.partition_id = fields[plan.partition];
        r.individual_id = fields[plan.individual];
        if (r.cluster_id.empty()) fail(line_no, "missing value in column cluster_id");
        if (r.partition_id.empty()) fail(line_no, "missing value in column partition_id");
        if (r.individual_id.empty()) fail(line_no, "missing value in column individual_id");
        r.arm = parse_binary(fields[plan.a], line_no, "a");
        r.sampled = parse_binary(fields[plan.s], line_no, "s");
        r.measured_baseline = parse_binary(fields[plan.d0], line_no, "d0");
        r.outcome_baseline = parse_binary(fields[plan.y0], line_no, "y0");
        r.measured_followup = parse_binary(fields[plan.d1], line_no, "d1");
        r.outcome_followup = parse_binary(fields[plan.y1], line_no, "y1");
        for (const auto& [idx, name] : plan.l0) r.l0.push_back(parse_real(fields[idx], line_no, name));
        for (const auto& [idx, name] : plan.l1) r.l1.push_back(parse_real(fields[idx], line_no, name));
        for (const auto& [idx, name] : plan.w) r.w.push_back(parse_real(fields[idx], line_no, name));
        for (const auto& [idx, name] : plan.e) r.e.push_back(parse_real(fields[idx], line_no, name));
        check_record_consistency(r, line_no);
        data.records.push_back(std::move(r));
    }
    check_grouping_consistency(data);
    return data;
}

Dataset parse_csv_file(const std::string& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw ValidationError("cannot open " + path);
    std::ostringstream buf;
    buf << in.rdbuf();
    return parse_csv(buf.str());
}

std::string emit_csv(const Dataset& data) {
    std::string out = "cluster_id,partition_id,individual_id,a,s,d0,y0,d1,y1";
    for (const auto& n : data.l0_names) out += "," + n;
    for (const auto& n : data.l1_names) out += "," + n;
    for (const auto& n : data.w_names) out += "," + n;
    for (const auto& n : data.e_names) out += "," + n;
    out += "\n";
    for (const auto& r : data.records) {
        out += r.cluster_id + "," + r.partition_id + "," + r.individual_id;
        out += "," + std::to_string(r.arm) + "," + std::to_string(r.sampled);
        out += "," + std::to_string(r.measured_baseline) + "," + std::to_string(r.outcome_baseline);
        out += "," + std::to_string(r.measured_followup) + "," + std::to_string(r.outcome_followup);
        for (double v : r.l0) out += "," + format_real(v);
        for (double v : r.l1) out += "," + format_real(v);
        for (double v : r.w) out += "," + format_real(v);
        for (double v : r.e) out += "," + format_real(v);
        out += "\n";
    }
    return out;
}

std::string emit_csv(const std::vector<UnitData>& units) {
    return emit_csv(to_dataset(units));
}

std::vector<UnitData> group_units(const Dataset& data, UnitLevel level) {
    if (data.records.empty()) throw ValidationError("no data rows");
    std::map<std::string, UnitData> units;
    for (const auto& r : data.records) {
        const std::string id = level == UnitLevel::cluster
                                   ? r.cluster_id
                                   : r.cluster_id + "/" + r.partition_id;
        auto [it, fresh] = units.try_emplace(id);
        UnitData& u = it->second;
        if (fresh) {
            u.unit_id = id;
            u.level = level;
            u.arm = r.arm;
            u.l0_names = data.l0_names;
            u.l1_names = data.l1_names;
            u.w_names = data.w_names;
            u.e_names = data.e_names;
            if (level == UnitLevel::cluster) {
                u.covariate_names = data.e_names;
                u.covariate_values = r.e;
            } else {
                u.covariate_names = data.w_names;
                u.covariate_values = r.w;
            }
        }
        u.records.push_back(r);
    }
    std::vector<UnitData> out;
    out.reserve(units.size());
    for (auto& [id, unit] : units) {
        std::sort(unit.records.begin(), unit.records.end(),
                  [](const IndividualRecord& a, const IndividualRecord& b) {
                      if (a.partition_id != b.partition_id) return a.partition_id < b.partition_id;
                      return a.individual_id < b.individual_id;
                  });
        out.push_back(std::move(unit));
    }
    return out;
}

std::vector<UnitData> ingest(const std::string& text, UnitLevel level) {
    return group_units(parse_csv(text), level);
}

std::vector<UnitData> ingest_file(const std::string& path, UnitLevel level) {
    return group_units(parse_csv_file(path), level);
}

Dataset to_dataset(const std::vector<UnitData>& units) {
    Dataset data;
    if (units.empty()) return data;
    data.l0_names = units[0].l0_names;
    data.l1_names = units[0].l1_names;
    data.w_names = units[0].w_names;
    data.e_names = units[0].e_names;
    for (const auto& u : units) {
        if (u.l0_names != data.l0_names || u.l1_names != data.l1_names ||
            u.w_names != data.w_names || u.e_names != data.e_names) {
            throw ValidationError("units disagree on covariate columns");
        }
        data.records.insert(data.records.end(), u.records.begin(), u.records.end());
    }
    return data;
}

std::vector<IndividualRecord> incidence_cohort(const UnitData& unit) {
    std::vector<IndividualRecord> cohort;
    for (const auto& r : unit.records) {
        if (r.measured_baseline == 1 && r.outcome_baseline == 0) cohort.push_back(r);
    }
    return cohort;
}

}  // namespace crtmle
