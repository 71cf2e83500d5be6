#include "latentprobe/scoring_stats.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <numeric>
#include <set>
#include <unordered_map>

namespace latentprobe {

namespace {

std::unordered_map<std::string, const IntruderTask*> index_tasks(const std::vector<IntruderTask>& tasks) {
    std::unordered_map<std::string, const IntruderTask*> index;
    for (const auto& t : tasks) {
        if (!index.emplace(t.task_id, &t).second) {
            throw StatsError("duplicate task id '" + t.task_id + "'");
        }
    }
    return index;
}

const IntruderTask& lookup(const std::unordered_map<std::string, const IntruderTask*>& index, const Verdict& v) {
    auto it = index.find(v.task_id);
    if (it == index.end()) {
        throw StatsError("verdict references unknown task '" + v.task_id + "'");
    }
    return *it->second;
}

// Recomputed against the task rather than trusting the stored flag.
bool is_correct(const IntruderTask& task, const Verdict& v) {
    return v.choice && *v.choice == task.intruder_position;
}

}  // namespace

std::map<std::string, LatentScore> accuracy(const std::vector<IntruderTask>& tasks,
                                            const std::vector<Verdict>& verdicts) {
    const auto index = index_tasks(tasks);
    std::map<std::string, LatentScore> scores;
    for (const auto& v : verdicts) {
        const auto& task = lookup(index, v);
        auto& score = scores[task.latent_id];
        score.latent_id = task.latent_id;
        auto& cell = score.per_decile[task.majority_decile];
        ++cell.total;
        if (is_correct(task, v)) {
            ++cell.correct;
        }
        ++score.n_tasks;
    }
    for (auto& [id, score] : scores) {
        double sum = 0.0;
        for (const auto& [d, cell] : score.per_decile) {
            sum += cell.accuracy();
        }
        score.overall = score.per_decile.empty() ? 0.0 : sum / static_cast<double>(score.per_decile.size());
    }
    return scores;
}

std::map<std::string, std::map<std::string, LatentScore>> accuracy_by_evaluator(
    const std::vector<IntruderTask>& tasks, const std::vector<Verdict>& verdicts) {
    std::map<std::string, std::vector<Verdict>> split;
    for (const auto& v : verdicts) {
        split[v.evaluator_id].push_back(v);
    }
    std::map<std::string, std::map<std::string, LatentScore>> out;
    for (const auto& [evaluator, subset] : split) {
        out[evaluator] = accuracy(tasks, subset);
    }
    return out;
}

int interpretability_bin(double score) {
    if (!(score >= 0.0 && score <= 1.0)) {
        throw StatsError("score " + std::to_string(score) + " outside [0, 1]");
    }
    if (score <= 0.2) {
        return 0;
    }
    if (score <= 0.4) {
        return 1;
    }
    if (score <= 0.6) {
        return 2;
    }
    if (score <= 0.8) {
        return 3;
    }
    return 4;
}

DecilePairMatrix decile_matrix(const std::vector<IntruderTask>& tasks, const std::vector<Verdict>& verdicts) {
    const auto index = index_tasks(tasks);
    DecilePairMatrix matrix;
    for (const auto& v : verdicts) {
        const auto& task = lookup(index, v);
        if (task.variant != TaskVariant::decile || !task.intruder_decile) {
            continue;
        }
        auto& cell = matrix.cells.at(static_cast<std::size_t>(task.majority_decile - 1))
                         .at(static_cast<std::size_t>(*task.intruder_decile - 1));
        ++cell.total;
        if (is_correct(task, v)) {
            ++cell.correct;
        }
    }
    return matrix;
}

double pearson(std::span<const double> xs, std::span<const double> ys) {
    if (xs.size() != ys.size()) {
        throw StatsError("pearson: lengths differ (" + std::to_string(xs.size()) + " vs " +
                         std::to_string(ys.size()) + ")");
    }
    if (xs.size() < 2) {
        throw StatsError("pearson: need at least 2 pairs");
    }
    const double n = static_cast<double>(xs.size());
    const double mx = std::accumulate(xs.begin(), xs.end(), 0.0) / n;
    const double my = std::accumulate(ys.begin(), ys.end(), 0.0) / n;
    double sxy = 0.0;
    double sxx = 0.0;
    double syy = 0.0;
    for (std::size_t i = 0; i < xs.size(); ++i) {
        const double dx = xs[i] - mx;
        const double dy = ys[i] - my;
        sxy += dx * dy;
        sxx += dx * dx;
        syy += dy * dy;
    }
    if (sxx == 0.0 || syy == 0.0) {
        throw StatsError("pearson: zero variance");
    }
    const double r = sxy / std::sqrt(sxx * syy);
    return std::clamp(r, -1.0, 1.0);
}

std::vector<double> average_ranks(std::span<const double> values) {
    std::vector<std::size_t> order(values.size());
    std::iota(order.begin(), order.end(), 0);
    std::stable_sort(order.begin(), order.end(), [&](std::size_t a, std::size_t b) { return values[a] < values[b]; });
    std::vector<double> ranks(values.size());
    std::size_t i = 0;
    while (i < order.size()) {
        std::size_t j = i;
        while (j + 1 < order.size() && values[order[j + 1]] == values[order[i]]) {
            ++j;
        }
        // Positions i..j (0-based) share rank mean(i+1..j+1).
        const double rank = (static_cast<double>(i) + static_cast<double>(j)) / 2.0 + 1.0;
        for (std::size_t k = i; k <= j; ++k) {
            ranks[order[k]] = rank;
        }
        i = j + 1;
    }
    return ranks;
}

double spearman(std::span<const double> xs, std::span<const double> ys) {
    if (xs.size() != ys.size()) {
        throw StatsError("spearman: lengths differ");
    }
    const auto rx = average_ranks(xs);
    const auto ry = average_ranks(ys);
    return pearson(rx, ry);
}

ScoreTable read_score_file(const std::filesystem::path& path) {
    std::ifstream in(path);
    if (!in) {
        throw StatsError("cannot read score file '" + path.string() + "'");
    }
    ScoreTable table;
    std::string line;
    std::size_t line_number = 0;
    while (std::getline(in, line)) {
        ++line_number;
        if (line.find_first_not_of(" \t\r") == std::string::npos) {
            continue;
        }
        const auto where = path.string() + ":" + std::to_string(line_number) + ": ";
        try {
            const auto j = nlohmann::json::parse(line);
            const auto id = j.at("latent_id").get<std::string>();
            ScoreEntry entry;
            entry.score = j.at("score").get<double>();
            if (!(entry.score >= 0.0 && entry.score <= 1.0)) {
                throw StatsError(where + "score outside [0, 1]");
            }
            if (j.contains("per_decile") && j["per_decile"].is_object()) {
                for (const auto& [key, value] : j["per_decile"].items()) {
                    if (!value.is_null()) {
                        entry.per_decile[std::stoi(key)] = value.get<double>();
                    }
                }
            }
            if (!table.emplace(id, std::move(entry)).second) {
                throw StatsError(where + "duplicate latent '" + id + "'");
            }
        } catch (const nlohmann::json::exception& e) {
            throw StatsError(where + e.what());
        } catch (const std::invalid_argument&) {
            throw StatsError(where + "per_decile keys must be decile numbers");
        }
    }
    return table;
}

void write_score_file(const std::filesystem::path& path, const ScoreTable& table) {
    std::ofstream out(path, std::ios::binary);
    if (!out) {
        throw StatsError("cannot write score file '" + path.string() + "'");
    }
    for (const auto& [id, entry] : table) {
        nlohmann::json j;
        j["latent_id"] = id;
        j["score"] = entry.score;
        if (!entry.per_decile.empty()) {
            nlohmann::json per = nlohmann::json::object();
            for (const auto& [d, value] : entry.per_decile) {
                per[std::to_string(d)] = value;
            }
            j["per_decile"] = std::move(per);
        }
        out << j.dump() << '\n';
    }
}

ScoreTable to_score_table(const std::map<std::string, LatentScore>& scores) {
    ScoreTable table;
    for (const auto& [id, score] : scores) {
        ScoreEntry entry;
        entry.score = score.overall;
        for (const auto& [d, cell] : score.per_decile) {
            entry.per_decile[d] = cell.accuracy();
        }
        table.emplace(id, std::move(entry));
    }
    return table;
}

CorrelationReport agreement_table(const std::vector<std::string>& ids, const std::vector<ScoreTable>& tables) {
    if (tables.size() < 2 || ids.size() != tables.size()) {
        throw StatsError("agreement table needs at least two score sets");
    }
    CorrelationReport report;
    report.ids = ids;
    for (const auto& [latent, entry] : tables.front()) {
        const bool everywhere = std::all_of(tables.begin() + 1, tables.end(),
                                            [&](const ScoreTable& t) { return t.contains(latent); });
        if (everywhere) {
            report.latents.push_back(latent);
        }
    }
    if (report.latents.empty()) {
        throw StatsError("no overlap: the score sets share no latent ids");
    }
    if (report.latents.size() < 2) {
        throw StatsError("score sets share only one latent; correlations need at least two");
    }

    const std::size_t k = tables.size();
    std::vector<std::vector<double>> columns(k);
    for (std::size_t a = 0; a < k; ++a) {
        for (const auto& latent : report.latents) {
            columns[a].push_back(tables[a].at(latent).score);
        }
    }
    report.pearson.assign(k, std::vector<std::optional<double>>(k));
    report.spearman.assign(k, std::vector<std::optional<double>>(k));
    report.n.assign(k, std::vector<std::size_t>(k, report.latents.size()));
    report.bin_agreement.assign(k, std::vector<std::array<std::array<int, kNumBins>, kNumBins>>(k));
    for (std::size_t a = 0; a < k; ++a) {
        for (std::size_t b = 0; b < k; ++b) {
            if (a == b) {
                report.pearson[a][b] = 1.0;
                report.spearman[a][b] = 1.0;
            } else if (b > a) {
                try {
                    report.pearson[a][b] = report.pearson[b][a] = pearson(columns[a], columns[b]);
                    report.spearman[a][b] = report.spearman[b][a] = spearman(columns[a], columns[b]);
                } catch (const StatsError&) {
                    // Zero variance in one set; left undefined.
                }
            }
            auto& grid = report.bin_agreement[a][b];
            for (std::size_t i = 0; i < report.latents.size(); ++i) {
                ++grid[static_cast<std::size_t>(interpretability_bin(columns[a][i]))]
                      [static_cast<std::size_t>(interpretability_bin(columns[b][i]))];
            }
        }
    }
    return report;
}

CorrelationReport agreement_table(const std::vector<std::filesystem::path>& score_files) {
    std::vector<std::string> ids;
    std::vector<ScoreTable> tables;
    for (const auto& path : score_files) {
        ids.push_back(path.stem().string());
        tables.push_back(read_score_file(path));
    }
    return agreement_table(ids, tables);
}

namespace {

nlohmann::json optional_matrix(const std::vector<std::vector<std::optional<double>>>& m) {
    nlohmann::json rows = nlohmann::json::array();
    for (const auto& row : m) {
        nlohmann::json r = nlohmann::json::array();
        for (const auto& v : row) {
            r.push_back(v ? nlohmann::json(*v) : nlohmann::json(nullptr));
        }
        rows.push_back(std::move(r));
    }
    return rows;
}

}  // namespace

nlohmann::json correlation_to_json(const CorrelationReport& report) {
    nlohmann::json j;
    j["ids"] = report.ids;
    j["latents"] = report.latents;
    j["n"] = report.n;
    j["pearson"] = optional_matrix(report.pearson);
    j["spearman"] = optional_matrix(report.spearman);
    nlohmann::json bins = nlohmann::json::array();
    for (const auto& row : report.bin_agreement) {
        nlohmann::json r = nlohmann::json::array();
        for (const auto& grid : row) {
            r.push_back(grid);
        }
        bins.push_back(std::move(r));
    }
    j["bin_agreement"] = std::move(bins);
    return j;
}

BinnedDecileCurves stratify_by_bin(const std::map<std::string, LatentScore>& scores) {
    BinnedDecileCurves out;
    std::array<std::array<double, kNumDeciles>, kNumBins> sums{};
    std::array<std::array<int, kNumDeciles>, kNumBins> counts{};
    for (const auto& [id, score] : scores) {
        const auto b = static_cast<std::size_t>(interpretability_bin(score.overall));
        ++out.latents_per_bin[b];
        for (const auto& [d, cell] : score.per_decile) {
            if (cell.total > 0) {
                sums[b][static_cast<std::size_t>(d - 1)] += cell.accuracy();
                ++counts[b][static_cast<std::size_t>(d - 1)];
            }
        }
    }
    for (std::size_t b = 0; b < kNumBins; ++b) {
        for (std::size_t d = 0; d < kNumDeciles; ++d) {
            if (counts[b][d] > 0) {
                out.curves[b][d] = sums[b][d] / counts[b][d];
            }
        }
    }
    return out;
}

namespace {

nlohmann::json latent_scores_json(const std::map<std::string, LatentScore>& scores) {
    nlohmann::json latents = nlohmann::json::array();
    std::array<int, kNumBins> bin_counts{};
    std::array<double, kNumDeciles> decile_sum{};
    std::array<int, kNumDeciles> decile_n{};
    double total = 0.0;
    for (const auto& [id, score] : scores) {
        const int bin = interpretability_bin(score.overall);
        ++bin_counts[static_cast<std::size_t>(bin)];
        total += score.overall;
        nlohmann::json per = nlohmann::json::object();
        for (const auto& [d, cell] : score.per_decile) {
            per[std::to_string(d)] = {{"correct", cell.correct}, {"total", cell.total}, {"accuracy", cell.accuracy()}};
            decile_sum[static_cast<std::size_t>(d - 1)] += cell.accuracy();
            ++decile_n[static_cast<std::size_t>(d - 1)];
        }
        latents.push_back({{"latent_id", id},
                           {"score", score.overall},
                           {"bin", bin},
                           {"bin_name", kBinNames[static_cast<std::size_t>(bin)]},
                           {"n_tasks", score.n_tasks},
                           {"per_decile", std::move(per)}});
    }
    nlohmann::json curve = nlohmann::json::array();
    for (std::size_t d = 0; d < kNumDeciles; ++d) {
        curve.push_back(decile_n[d] ? nlohmann::json(decile_sum[d] / decile_n[d]) : nlohmann::json(nullptr));
    }
    const auto strata = stratify_by_bin(scores);
    nlohmann::json stratified = nlohmann::json::array();
    for (std::size_t b = 0; b < kNumBins; ++b) {
        nlohmann::json c = nlohmann::json::array();
        for (const auto& v : strata.curves[b]) {
            c.push_back(v ? nlohmann::json(*v) : nlohmann::json(nullptr));
        }
        stratified.push_back({{"bin", b},
                              {"bin_name", kBinNames[b]},
                              {"latents", strata.latents_per_bin[b]},
                              {"decile_accuracy", std::move(c)}});
    }
    nlohmann::json j;
    j["latents"] = std::move(latents);
    j["mean_score"] = scores.empty() ? nlohmann::json(nullptr) : nlohmann::json(total / scores.size());
    j["bin_counts"] = bin_counts;
    j["decile_accuracy"] = std::move(curve);
    j["stratified_by_bin"] = std::move(stratified);
    return j;
}

nlohmann::json matrix_json(const DecilePairMatrix& matrix) {
    nlohmann::json acc = nlohmann::json::array();
    nlohmann::json counts = nlohmann::json::array();
    std::vector<double> distance;
    std::vector<double> accuracy_values;
    for (int m = 1; m <= kNumDeciles; ++m) {
        nlohmann::json acc_row = nlohmann::json::array();
        nlohmann::json count_row = nlohmann::json::array();
        for (int i = 1; i <= kNumDeciles; ++i) {
            const auto& cell = matrix.cells[static_cast<std::size_t>(m - 1)][static_cast<std::size_t>(i - 1)];
            const auto a = cell.accuracy();
            acc_row.push_back(a ? nlohmann::json(*a) : nlohmann::json(nullptr));
            count_row.push_back(cell.total);
            if (a) {
                distance.push_back(std::abs(m - i));
                accuracy_values.push_back(*a);
            }
        }
        acc.push_back(std::move(acc_row));
        counts.push_back(std::move(count_row));
    }
    nlohmann::json j;
    j["rows"] = "majority decile";
    j["columns"] = "intruder decile";
    j["accuracy"] = std::move(acc);
    j["counts"] = std::move(counts);
    try {
        j["distance_accuracy_spearman"] = spearman(distance, accuracy_values);
    } catch (const StatsError&) {
        j["distance_accuracy_spearman"] = nullptr;
    }
    return j;
}

}  // namespace

nlohmann::json score_report(const std::vector<IntruderTask>& tasks, const std::vector<Verdict>& verdicts) {
    const auto index = index_tasks(tasks);
    std::map<std::string, std::vector<Verdict>> standard;
    std::map<std::string, std::vector<Verdict>> decile;
    for (const auto& v : verdicts) {
        const auto& task = lookup(index, v);
        (task.variant == TaskVariant::standard ? standard : decile)[v.evaluator_id].push_back(v);
    }
    std::set<std::string> evaluators;
    for (const auto& [id, _] : standard) {
        evaluators.insert(id);
    }
    for (const auto& [id, _] : decile) {
        evaluators.insert(id);
    }

    nlohmann::json report;
    report["n_tasks"] = tasks.size();
    report["n_verdicts"] = verdicts.size();
    nlohmann::json per_evaluator = nlohmann::json::object();
    for (const auto& id : evaluators) {
        nlohmann::json e;
        const auto& s = standard[id];
        const auto& d = decile[id];
        std::size_t invalid = 0;
        for (const auto* list : {&s, &d}) {
            for (const auto& v : *list) {
                invalid += v.choice ? 0 : 1;
            }
        }
        e["n_verdicts"] = s.size() + d.size();
        e["invalid_verdicts"] = invalid;
        if (!s.empty()) {
            e["standard"] = latent_scores_json(accuracy(tasks, s));
        }
        if (!d.empty()) {
            e["decile_pairs"] = matrix_json(decile_matrix(tasks, d));
        }
        per_evaluator[id] = std::move(e);
    }
    report["evaluators"] = std::move(per_evaluator);
    return report;
}

}  // namespace latentprobe
