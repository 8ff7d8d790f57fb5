#include "crtmle/simulator.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>
#include <sstream>

#include "crtmle/learners.hpp"
#include "crtmle/parallel.hpp"

namespace crtmle {

std::string to_string(InterferenceMode mode) {
    return mode == InterferenceMode::none ? "none" : "cross_partition";
}

void validate_dgp(const DgpConfig& dgp) {
    if (dgp.n_clusters < 2) throw ValidationError("n_clusters must be at least 2");
    if (dgp.partitions_per_cluster < 1) throw ValidationError("partitions_per_cluster must be positive");
    if (dgp.individuals_min < 1 || dgp.individuals_min > dgp.individuals_max) {
        throw ValidationError("individual count range must satisfy 1 <= min <= max");
    }
    if (!(dgp.p_e > 0.0 && dgp.p_e < 1.0)) throw ValidationError("p_e must lie in (0, 1)");
    if (!std::isfinite(dgp.effect_size)) throw ValidationError("effect_size must be finite");
}

DgpConfig example_dgp() {
    DgpConfig d;
    d.n_clusters = 9;
    d.partitions_per_cluster = 2;
    d.individuals_min = 400;
    d.individuals_max = 400;
    d.seed = 7001;

    d.p_e = 0.5;
    d.w_intercept = -0.2;
    d.w_e = 1.2;

    d.h_intercept = -0.6;
    d.h_w = 1.1;
    d.x_intercept = -0.3;
    d.x_h = 0.6;
    d.x_w = 0.3;

    d.s_intercept = 0.5;
    d.s_h = 1.2;
    d.s_x = 0.3;

    d.y0_intercept = -2.2;
    d.y0_h = 1.1;
    d.y0_x = 0.6;

    d.d0_intercept = 2.0;
    d.d0_h = -0.9;
    d.d0_x = -0.4;

    d.z_intercept = 0.7;
    d.z_arm = -2.5;
    d.z_h = 0.7;
    d.z_x = 0.3;

    d.y1_intercept = -3.4;
    d.y1_arm = 1.99;
    d.y1_z = 4.0;
    d.y1_h = 0.7;
    d.y1_x = 0.4;

    d.d1_intercept = 2.6;
    d.d1_z = -3.8;
    d.d1_h = -1.0;
    return d;
}

namespace {

struct CellProbs {
    double p_h, p_x0, p_x1;  // p_x given h = 0 / 1
    double p_s[2][2];
    double p_y0[2][2];
    double p_d0[2][2];
    double p_z[2][2];
    double p_y1[2][2][2];  // [z][h][x]
    double p_d1[2][2];     // [z][h]
};

CellProbs cell_probs(const DgpConfig& dgp, int arm, int w, int e, double neighbor_w) {
    const bool cross = dgp.interference == InterferenceMode::cross_partition;
    const double a_eff = dgp.effect_size * arm;
    CellProbs p{};
    p.p_h = expit(dgp.h_intercept + dgp.h_w * w);
    p.p_x0 = expit(dgp.x_intercept + dgp.x_w * w);
    p.p_x1 = expit(dgp.x_intercept + dgp.x_h + dgp.x_w * w);
    for (int h = 0; h < 2; ++h) {
        for (int x = 0; x < 2; ++x) {
            p.p_s[h][x] = expit(dgp.s_intercept + dgp.s_h * h + dgp.s_x * x);
            p.p_y0[h][x] = expit(dgp.y0_intercept + dgp.y0_h * h + dgp.y0_x * x +
                                 (cross ? dgp.y0_e * e : 0.0));
            p.p_d0[h][x] = expit(dgp.d0_intercept + dgp.d0_h * h + dgp.d0_x * x);
            p.p_z[h][x] = expit(dgp.z_intercept + dgp.z_arm * a_eff + dgp.z_h * h + dgp.z_x * x +
                                (cross ? dgp.z_neighbor * neighbor_w : 0.0));
            for (int z = 0; z < 2; ++z) {
                p.p_y1[z][h][x] = expit(dgp.y1_intercept + dgp.y1_arm * a_eff + dgp.y1_z * z +
                                        dgp.y1_h * h + dgp.y1_x * x +
                                        (cross ? dgp.y1_e * e + dgp.y1_neighbor * neighbor_w : 0.0));
            }
        }
    }
    for (int z = 0; z < 2; ++z) {
        for (int h = 0; h < 2; ++h) {
            p.p_d1[z][h] = expit(dgp.d1_intercept + dgp.d1_z * z + dgp.d1_h * h);
        }
    }
    return p;
}

}  // namespace

CellRates cell_rates(const DgpConfig& dgp, int arm, int w, int e, double neighbor_w) {
    const CellProbs p = cell_probs(dgp, arm, w, e, neighbor_w);
    CellRates rates;
    for (int h = 0; h < 2; ++h) {
        const double ph = h == 1 ? p.p_h : 1.0 - p.p_h;
        const double px1 = h == 1 ? p.p_x1 : p.p_x0;
        for (int x = 0; x < 2; ++x) {
            const double phx = ph * (x == 1 ? px1 : 1.0 - px1);
            rates.baseline_positive += phx * p.p_y0[h][x];
            const double mean_y1 = p.p_z[h][x] * p.p_y1[1][h][x] +
                                   (1.0 - p.p_z[h][x]) * p.p_y1[0][h][x];
            rates.incident += phx * (1.0 - p.p_y0[h][x]) * mean_y1;
        }
    }
    rates.at_risk = 1.0 - rates.baseline_positive;
    return rates;
}

std::uint64_t partition_stream_seed(const DgpConfig& dgp, int cluster_index, int partition_index) {
    return mix_seed(mix_seed(mix_seed(dgp.seed, std::string("partition")),
                             static_cast<std::uint64_t>(cluster_index)),
                    static_cast<std::uint64_t>(partition_index));
}

PartitionFrame draw_partition_frame(const DgpConfig& dgp, int e, std::uint64_t stream_seed) {
    PartitionFrame frame{0, 0, Rng(stream_seed)};
    frame.w = frame.stream.bernoulli(expit(dgp.w_intercept + dgp.w_e * e)) ? 1 : 0;
    const auto range = static_cast<std::uint64_t>(dgp.individuals_max - dgp.individuals_min) + 1;
    frame.n_individuals = dgp.individuals_min + static_cast<int>(frame.stream.below(range));
    return frame;
}

std::vector<IndividualRecord> draw_partition_members(const DgpConfig& dgp, PartitionFrame& frame,
                                                     int arm, int e, double neighbor_w,
                                                     bool force_measurement) {
    const CellProbs p = cell_probs(dgp, arm, frame.w, e, neighbor_w);
    const int width = static_cast<int>(std::to_string(dgp.individuals_max).size());
    std::vector<IndividualRecord> out;
    out.reserve(static_cast<std::size_t>(frame.n_individuals));
    for (int i = 0; i < frame.n_individuals; ++i) {
        // fixed draw order so that coarsening choices never shift the stream
        const int h = frame.stream.bernoulli(p.p_h) ? 1 : 0;
        const int x = frame.stream.bernoulli(h == 1 ? p.p_x1 : p.p_x0) ? 1 : 0;
        const int s_draw = frame.stream.bernoulli(p.p_s[h][x]) ? 1 : 0;
        const int y0_latent = frame.stream.bernoulli(p.p_y0[h][x]) ? 1 : 0;
        const int d0_draw = frame.stream.bernoulli(p.p_d0[h][x]) ? 1 : 0;
        const int z = frame.stream.bernoulli(p.p_z[h][x]) ? 1 : 0;
        const int y1_latent = frame.stream.bernoulli(p.p_y1[z][h][x]) ? 1 : 0;
        const int d1_draw = frame.stream.bernoulli(p.p_d1[z][h]) ? 1 : 0;

        IndividualRecord r;
        std::ostringstream id;
        id << "i";
        id.width(width);
        id.fill('0');
        id << (i + 1);
        r.individual_id = id.str();
        r.arm = arm;
        r.sampled = force_measurement ? 1 : s_draw;
        r.measured_baseline = force_measurement ? 1 : (s_draw == 1 ? d0_draw : 0);
        r.outcome_baseline = r.measured_baseline == 1 ? y0_latent : 0;
        const bool at_risk = r.measured_baseline == 1 && y0_latent == 0;
        r.measured_followup = at_risk ? (force_measurement ? 1 : d1_draw) : 0;
        r.outcome_followup = r.measured_followup == 1 ? y1_latent : 0;
        r.l0 = {static_cast<double>(h), static_cast<double>(x)};
        r.l1 = {static_cast<double>(z)};
        r.w = {static_cast<double>(frame.w)};
        r.e = {static_cast<double>(e)};
        out.push_back(std::move(r));
    }
    return out;
}

namespace {

std::string padded_id(char prefix, int value, int count) {
    const int width = static_cast<int>(std::to_string(count).size());
    std::ostringstream id;
    id << prefix;
    id.width(width);
    id.fill('0');
    id << value;
    return id.str();
}

std::vector<int> draw_arms(const DgpConfig& dgp) {
    Rng rng(mix_seed(dgp.seed, std::string("arms")));
    int n_treated = dgp.n_clusters / 2;
    if (dgp.n_clusters % 2 == 1 && rng.bernoulli(0.5)) n_treated += 1;
    std::vector<int> arms(static_cast<std::size_t>(dgp.n_clusters), 0);
    std::fill_n(arms.begin(), n_treated, 1);
    rng.shuffle(arms);
    return arms;
}

}  // namespace

Dataset generate(const DgpConfig& dgp, bool force_measurement) {
    validate_dgp(dgp);
    Dataset data;
    data.l0_names = {"l0_h", "l0_x"};
    data.l1_names = {"l1_z"};
    data.w_names = {"w_w"};
    data.e_names = {"e_e"};

    const auto arms = draw_arms(dgp);
    const int n_partitions = dgp.partitions_per_cluster;
    for (int c = 0; c < dgp.n_clusters; ++c) {
        Rng cluster_rng(mix_seed(mix_seed(dgp.seed, std::string("cluster")),
                                 static_cast<std::uint64_t>(c)));
        const int e = cluster_rng.bernoulli(dgp.p_e) ? 1 : 0;

        std::vector<PartitionFrame> frames;
        frames.reserve(static_cast<std::size_t>(n_partitions));
        double w_sum = 0.0;
        for (int j = 0; j < n_partitions; ++j) {
            frames.push_back(draw_partition_frame(dgp, e, partition_stream_seed(dgp, c, j)));
            w_sum += frames.back().w;
        }
        for (int j = 0; j < n_partitions; ++j) {
            const double neighbor_w =
                n_partitions > 1 ? (w_sum - frames[static_cast<std::size_t>(j)].w) /
                                       static_cast<double>(n_partitions - 1)
                                 : 0.0;
            auto members = draw_partition_members(dgp, frames[static_cast<std::size_t>(j)],
                                                  arms[static_cast<std::size_t>(c)], e, neighbor_w,
                                                  force_measurement);
            for (auto& r : members) {
                r.cluster_id = padded_id('c', c + 1, dgp.n_clusters);
                r.partition_id = padded_id('p', j + 1, n_partitions);
                data.records.push_back(std::move(r));
            }
        }
    }
    return data;
}

namespace {

struct Tally {
    double endpoint[2] = {0.0, 0.0};
    double pos[2] = {0.0, 0.0};
    double num[2] = {0.0, 0.0};
    std::int64_t units = 0;
    std::int64_t individuals = 0;

    void add(const Tally& o) {
        for (int a = 0; a < 2; ++a) {
            endpoint[a] += o.endpoint[a];
            pos[a] += o.pos[a];
            num[a] += o.num[a];
        }
        units += o.units;
        individuals += o.individuals;
    }
};

// One simulated cluster structure, tallied at the requested unit level with
// both arms applied to the same covariate draws.
void tally_cluster(const DgpConfig& dgp, UnitLevel level, Rng& rng, Tally& tally) {
    const int e = rng.bernoulli(dgp.p_e) ? 1 : 0;
    const int n_partitions = dgp.partitions_per_cluster;
    const auto range = static_cast<std::uint64_t>(dgp.individuals_max - dgp.individuals_min) + 1;
    std::vector<int> w(static_cast<std::size_t>(n_partitions));
    std::vector<int> n(static_cast<std::size_t>(n_partitions));
    double w_sum = 0.0;
    for (int j = 0; j < n_partitions; ++j) {
        w[static_cast<std::size_t>(j)] = rng.bernoulli(expit(dgp.w_intercept + dgp.w_e * e)) ? 1 : 0;
        n[static_cast<std::size_t>(j)] = dgp.individuals_min + static_cast<int>(rng.below(range));
        w_sum += w[static_cast<std::size_t>(j)];
    }
    for (int a = 0; a < 2; ++a) {
        double cluster_num = 0.0, cluster_den = 0.0, cluster_pos = 0.0, cluster_inc = 0.0;
        double cluster_n = 0.0;
        for (int j = 0; j < n_partitions; ++j) {
            const double neighbor_w =
                n_partitions > 1
                    ? (w_sum - w[static_cast<std::size_t>(j)]) / static_cast<double>(n_partitions - 1)
                    : 0.0;
            const CellRates rates = cell_rates(dgp, a, w[static_cast<std::size_t>(j)], e, neighbor_w);
            const double nj = n[static_cast<std::size_t>(j)];
            if (level == UnitLevel::partition) {
                tally.endpoint[a] += rates.incident / rates.at_risk;
                tally.pos[a] += rates.baseline_positive;
                tally.num[a] += rates.incident;
            } else {
                cluster_num += nj * rates.incident;
                cluster_den += nj * rates.at_risk;
                cluster_pos += nj * rates.baseline_positive;
                cluster_inc += nj * rates.incident;
                cluster_n += nj;
            }
        }
        if (level == UnitLevel::cluster) {
            tally.endpoint[a] += cluster_num / cluster_den;
            tally.pos[a] += cluster_pos / cluster_n;
            tally.num[a] += cluster_inc / cluster_n;
        }
    }
    tally.units += level == UnitLevel::partition ? n_partitions : 1;
    for (int j = 0; j < n_partitions; ++j) tally.individuals += n[static_cast<std::size_t>(j)];
}

double sd_of(const std::vector<double>& v) {
    const double mean = std::accumulate(v.begin(), v.end(), 0.0) / static_cast<double>(v.size());
    double ss = 0.0;
    for (double x : v) ss += (x - mean) * (x - mean);
    return std::sqrt(ss / static_cast<double>(v.size() - 1));
}

}  // namespace

TruthReport true_parameters(const DgpConfig& dgp, std::int64_t cluster_draws, UnitLevel level) {
    validate_dgp(dgp);
    const double expected_individuals =
        static_cast<double>(cluster_draws) * dgp.partitions_per_cluster *
        0.5 * (dgp.individuals_min + dgp.individuals_max);
    if (expected_individuals < 1e5) {
        throw ValidationError("cluster_draws too small: need at least 1e5 individuals in total");
    }

    constexpr int kBatches = 10;
    const std::int64_t per_batch = (cluster_draws + kBatches - 1) / kBatches;
    Rng rng(mix_seed(dgp.seed, std::string("truth")));

    Tally total;
    std::vector<double> batch_e0, batch_e1, batch_rd, batch_log_rr;
    for (int b = 0; b < kBatches; ++b) {
        Tally batch;
        for (std::int64_t i = 0; i < per_batch; ++i) tally_cluster(dgp, level, rng, batch);
        const double units = static_cast<double>(batch.units);
        batch_e0.push_back(batch.endpoint[0] / units);
        batch_e1.push_back(batch.endpoint[1] / units);
        batch_rd.push_back(batch.endpoint[1] / units - batch.endpoint[0] / units);
        batch_log_rr.push_back(std::log((batch.endpoint[1] / units) / (batch.endpoint[0] / units)));
        total.add(batch);
    }

    TruthReport report;
    report.level = level;
    const double units = static_cast<double>(total.units);
    for (int a = 0; a < 2; ++a) {
        report.psi_den[static_cast<std::size_t>(a)] = total.pos[a] / units;
        report.psi_num[static_cast<std::size_t>(a)] = total.num[a] / units;
        report.endpoint[static_cast<std::size_t>(a)] = total.endpoint[a] / units;
    }
    report.rr = report.endpoint[1] / report.endpoint[0];
    report.rd = report.endpoint[1] - report.endpoint[0];
    report.mc_unit_draws = total.units;
    report.mc_individuals = total.individuals;
    const double root_b = std::sqrt(static_cast<double>(kBatches));
    report.mc_se_endpoint[0] = sd_of(batch_e0) / root_b;
    report.mc_se_endpoint[1] = sd_of(batch_e1) / root_b;
    report.mc_se_rd = sd_of(batch_rd) / root_b;
    report.mc_se_log_rr = sd_of(batch_log_rr) / root_b;
    report.mc_se = std::max(report.mc_se_endpoint[0], report.mc_se_endpoint[1]);
    return report;
}

TruthReport closed_form_parameters(const DgpConfig& dgp, UnitLevel level) {
    validate_dgp(dgp);
    if (dgp.interference != InterferenceMode::none) {
        throw ValidationError("closed-form parameters require interference mode none");
    }
    if (level == UnitLevel::cluster && dgp.individuals_min != dgp.individuals_max) {
        throw ValidationError("closed-form cluster parameters require a fixed partition size");
    }

    TruthReport report;
    report.level = level;
    for (int a = 0; a < 2; ++a) {
        double psi_den = 0.0, psi_num = 0.0, endpoint = 0.0;
        for (int e = 0; e < 2; ++e) {
            const double pe = e == 1 ? dgp.p_e : 1.0 - dgp.p_e;
            const double q = expit(dgp.w_intercept + dgp.w_e * e);
            const CellRates rate_w[2] = {cell_rates(dgp, a, 0, e, 0.0),
                                         cell_rates(dgp, a, 1, e, 0.0)};
            if (level == UnitLevel::partition) {
                for (int w = 0; w < 2; ++w) {
                    const double pw = pe * (w == 1 ? q : 1.0 - q);
                    psi_den += pw * rate_w[w].baseline_positive;
                    psi_num += pw * rate_w[w].incident;
                    endpoint += pw * rate_w[w].incident / rate_w[w].at_risk;
                }
            } else {
                const int np = dgp.partitions_per_cluster;
                double binom = std::pow(1.0 - q, np);  // P(m = 0), then recurrence
                for (int m = 0; m <= np; ++m) {
                    const double share1 = static_cast<double>(m) / np;
                    const double num = share1 * rate_w[1].incident + (1.0 - share1) * rate_w[0].incident;
                    const double den = share1 * rate_w[1].at_risk + (1.0 - share1) * rate_w[0].at_risk;
                    const double pos = share1 * rate_w[1].baseline_positive +
                                       (1.0 - share1) * rate_w[0].baseline_positive;
                    psi_den += pe * binom * pos;
                    psi_num += pe * binom * num;
                    endpoint += pe * binom * num / den;
                    binom *= static_cast<double>(np - m) / static_cast<double>(m + 1) * q / (1.0 - q);
                }
            }
        }
        report.psi_den[static_cast<std::size_t>(a)] = psi_den;
        report.psi_num[static_cast<std::size_t>(a)] = psi_num;
        report.endpoint[static_cast<std::size_t>(a)] = endpoint;
    }
    report.rr = report.endpoint[1] / report.endpoint[0];
    report.rd = report.endpoint[1] - report.endpoint[0];
    return report;
}

ReplicateStudy replicate_study(const DgpConfig& dgp, const std::vector<AnalysisConfig>& configs,
                               const std::vector<std::string>& labels, int n_reps, int threads,
                               std::int64_t truth_cluster_draws) {
    validate_dgp(dgp);
    if (configs.empty()) throw ValidationError("replicate study needs at least one analysis config");
    if (labels.size() != configs.size()) {
        throw ValidationError("replicate study labels must match configs");
    }
    if (n_reps < 2) throw ValidationError("replicate study needs at least 2 replicates");
    for (const auto& c : configs) validate_config(c);

    ReplicateStudy study;
    TruthReport truth_by_level[2];
    bool have_level[2] = {false, false};
    for (const auto& c : configs) {
        const int idx = c.unit_level == UnitLevel::cluster ? 0 : 1;
        if (!have_level[idx]) {
            truth_by_level[idx] = true_parameters(dgp, truth_cluster_draws, c.unit_level);
            have_level[idx] = true;
        }
        study.truths.push_back(truth_by_level[idx]);
    }

    struct RepResult {
        bool ok = false;
        double point = 0.0;  // inference scale
        double se = 0.0;
        double lo = 0.0;
        double hi = 0.0;
    };
    std::vector<std::vector<RepResult>> results(
        static_cast<std::size_t>(n_reps),
        std::vector<RepResult>(configs.size()));

    parallel_for(static_cast<std::size_t>(n_reps), threads, [&](std::size_t r) {
        DgpConfig rep_dgp = dgp;
        rep_dgp.seed = mix_seed(mix_seed(dgp.seed, std::string("replicate")),
                                static_cast<std::uint64_t>(r));
        const Dataset data = generate(rep_dgp);
        for (std::size_t ci = 0; ci < configs.size(); ++ci) {
            AnalysisConfig cfg = configs[ci];
            cfg.seed = mix_seed(mix_seed(cfg.seed, std::string("replicate")),
                                static_cast<std::uint64_t>(r));
            RepResult& slot = results[r][ci];
            try {
                const auto units = group_units(data, cfg.unit_level);
                const auto endpoints = estimate_endpoints(units, cfg, 1);
                const auto rows = make_unit_rows(units, endpoints);
                const EffectEstimate eff = tmle_effect(rows, cfg);
                slot.ok = true;
                slot.se = eff.se;
                if (cfg.effect_scale == EffectScale::risk_ratio) {
                    slot.point = *eff.log_point;
                    slot.lo = std::log(eff.ci_lower);
                    slot.hi = std::log(eff.ci_upper);
                } else {
                    slot.point = eff.point;
                    slot.lo = eff.ci_lower;
                    slot.hi = eff.ci_upper;
                }
            } catch (const std::exception&) {
                slot.ok = false;
            }
        }
    });

    for (std::size_t ci = 0; ci < configs.size(); ++ci) {
        OperatingRow row;
        row.label = labels[ci];
        row.level = configs[ci].unit_level;
        row.scale = configs[ci].effect_scale;
        const TruthReport& truth = study.truths[ci];
        row.truth = row.scale == EffectScale::risk_ratio ? std::log(truth.rr) : truth.rd;
        row.n_reps = n_reps;

        std::vector<double> points;
        double se_sum = 0.0, width_sum = 0.0;
        int covered = 0, rejected = 0;
        for (int r = 0; r < n_reps; ++r) {
            const RepResult& res = results[static_cast<std::size_t>(r)][ci];
            if (!res.ok) {
                row.n_fail += 1;
                continue;
            }
            points.push_back(res.point);
            se_sum += res.se;
            width_sum += res.hi - res.lo;
            if (res.lo <= row.truth && row.truth <= res.hi) covered += 1;
            if (res.lo > 0.0 || res.hi < 0.0) rejected += 1;
        }
        const auto n_ok = static_cast<double>(points.size());
        if (!points.empty()) {
            row.mean_point = std::accumulate(points.begin(), points.end(), 0.0) / n_ok;
            row.bias = row.mean_point - row.truth;
            row.emp_se = points.size() > 1 ? sd_of(points) : 0.0;
            row.mean_se = se_sum / n_ok;
            row.mean_ci_width = width_sum / n_ok;
            row.coverage = covered / n_ok;
            row.rejection = rejected / n_ok;
        }
        study.rows.push_back(std::move(row));
        study.points.push_back(std::move(points));
    }
    return study;
}

}  // namespace crtmle
