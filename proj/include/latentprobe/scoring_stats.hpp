#pragma once

#include <array>
#include <filesystem>
#include <map>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include <json.hpp>

#include "latentprobe/activation_store.hpp"
#include "latentprobe/task_builder.hpp"
#include "latentprobe/verdict.hpp"

namespace latentprobe {

class StatsError : public std::runtime_error {
public:
    using std::runtime_error::runtime_error;
};

struct DecileAccuracy {
    int correct = 0;
    int total = 0;
    double accuracy() const { return total == 0 ? 0.0 : static_cast<double>(correct) / total; }
};

struct LatentScore {
    std::string latent_id;
    std::map<int, DecileAccuracy> per_decile;  // only deciles with tasks
    double overall = 0.0;  // unweighted mean over per_decile accuracies
    int n_tasks = 0;
};

// Per-latent intruder accuracy, keyed by latent id. Invalid verdicts count as
// incorrect. Tasks are keyed by majority decile. Throws StatsError for a
// verdict naming an unknown task.
std::map<std::string, LatentScore> accuracy(const std::vector<IntruderTask>& tasks,
                                            const std::vector<Verdict>& verdicts);

// Verdicts split by evaluator_id, each scored with accuracy().
std::map<std::string, std::map<std::string, LatentScore>> accuracy_by_evaluator(
    const std::vector<IntruderTask>& tasks, const std::vector<Verdict>& verdicts);

inline constexpr int kNumBins = 5;
inline constexpr std::array<const char*, kNumBins> kBinNames{"non-interpretable", "low", "medium", "high",
                                                             "very high"};

// [0,0.2] -> 0, (0.2,0.4] -> 1, (0.4,0.6] -> 2, (0.6,0.8] -> 3, (0.8,1] -> 4.
int interpretability_bin(double score);

struct DecilePairCell {
    int correct = 0;
    int total = 0;
    std::optional<double> accuracy() const {
        return total == 0 ? std::nullopt : std::optional<double>(static_cast<double>(correct) / total);
    }
};

// cells[m-1][i-1] = accuracy over decile-variant tasks with majority m and intruder i.
struct DecilePairMatrix {
    std::array<std::array<DecilePairCell, kNumDeciles>, kNumDeciles> cells{};
};

DecilePairMatrix decile_matrix(const std::vector<IntruderTask>& tasks, const std::vector<Verdict>& verdicts);

// Sample Pearson r. Requires equal lengths >= 2 and nonzero variance.
double pearson(std::span<const double> xs, std::span<const double> ys);
// Average ranks (1-based), ties share the mean of their positions.
std::vector<double> average_ranks(std::span<const double> values);
double spearman(std::span<const double> xs, std::span<const double> ys);

struct ScoreEntry {
    double score = 0.0;
    std::map<int, double> per_decile;
};

// Score-file contents: latent_id -> entry.
using ScoreTable = std::map<std::string, ScoreEntry>;

ScoreTable read_score_file(const std::filesystem::path& path);
void write_score_file(const std::filesystem::path& path, const ScoreTable& table);
ScoreTable to_score_table(const std::map<std::string, LatentScore>& scores);

struct CorrelationReport {
    std::vector<std::string> ids;
    std::vector<std::string> latents;  // listwise intersection
    // Empty cells mark pairs where a correlation is undefined (zero variance).
    std::vector<std::vector<std::optional<double>>> pearson;
    std::vector<std::vector<std::optional<double>>> spearman;
    std::vector<std::vector<std::size_t>> n;
    // bin_agreement[a][b][i][j]: latents in bin i under a and bin j under b.
    std::vector<std::vector<std::array<std::array<int, kNumBins>, kNumBins>>> bin_agreement;
};

// Pairwise correlations over the latents present in every table. Needs >= 2
// tables sharing >= 2 latents.
CorrelationReport agreement_table(const std::vector<std::string>& ids, const std::vector<ScoreTable>& tables);
CorrelationReport agreement_table(const std::vector<std::filesystem::path>& score_files);

nlohmann::json correlation_to_json(const CorrelationReport& report);

// Mean decile accuracy curve per interpretability bin of the overall score.
struct BinnedDecileCurves {
    std::array<int, kNumBins> latents_per_bin{};
    // curves[b][d-1]: mean accuracy in decile d over latents of bin b with data there.
    std::array<std::array<std::optional<double>, kNumDeciles>, kNumBins> curves{};
};

BinnedDecileCurves stratify_by_bin(const std::map<std::string, LatentScore>& scores);

// Full report for one verdict set: per-evaluator latent scores, bins, decile
// curves, stratified curves and (for decile tasks) the decile-pair matrix.
nlohmann::json score_report(const std::vector<IntruderTask>& tasks, const std::vector<Verdict>& verdicts);

}  // namespace latentprobe
