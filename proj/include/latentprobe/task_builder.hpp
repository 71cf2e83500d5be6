#pragma once

#include <array>
#include <cstdint>
#include <filesystem>
#include <optional>
#include <string>
#include <string_view>
#include <vector>

#include <json.hpp>

#include "latentprobe/activation_store.hpp"
#include "latentprobe/rng.hpp"

namespace latentprobe {

inline constexpr int kExamplesPerTask = 5;
inline constexpr int kActivatingPerTask = 4;
inline constexpr std::string_view kHighlightOpen = "<<";
inline constexpr std::string_view kHighlightClose = ">>";

enum class TaskVariant { standard, decile };

std::string_view to_string(TaskVariant variant);
TaskVariant parse_variant(std::string_view text);

struct RenderedExample {
    std::string text;
    int highlight_count = 0;
    std::optional<int> source_decile;
    bool activating = false;
    // Provenance, kept in the task set but never rendered into prompts.
    std::string context_id;
    std::vector<std::string> tokens;
    std::vector<bool> highlighted;
};

struct IntruderTask {
    std::string task_id;
    std::string latent_id;
    TaskVariant variant = TaskVariant::standard;
    std::vector<RenderedExample> examples;
    int intruder_position = 0;  // 1-based
    int majority_decile = 0;
    std::optional<int> intruder_decile;

    const RenderedExample& intruder() const { return examples.at(static_cast<std::size_t>(intruder_position - 1)); }
};

class TaskError : public std::runtime_error {
public:
    using std::runtime_error::runtime_error;
};

// Joins tokens with spaces, wrapping each maximal run of highlighted tokens
// in a single << ... >> span.
std::string render_highlights(const std::vector<std::string>& tokens, const std::vector<bool>& highlighted);

// Activating: every token with activation > 0 is highlighted.
// Non-activating: min(target_count, token count) distinct random tokens are.
RenderedExample highlight(const ActivationRecord& record, bool activating, std::optional<int> target_count, Rng& rng);

// floor(mean) of the highlight counts of the activating examples.
int target_highlight_count(const std::vector<RenderedExample>& activating);

struct TaskBuildResult {
    std::optional<IntruderTask> task;
    std::string skip_reason;
};

TaskBuildResult build_standard_task(const ActivationStore& store, const LatentProfile& profile, int decile, Rng& rng,
                                    std::string task_id = {});

// Throws TaskError when majority_decile == intruder_decile.
TaskBuildResult build_decile_task(const ActivationStore& store, const LatentProfile& profile, int majority_decile,
                                  int intruder_decile, Rng& rng, std::string task_id = {});

// Assembles a standard task from already chosen examples.
IntruderTask assemble_standard_task(const ActivationStore& store, const LatentProfile& profile, int decile,
                                    const std::vector<RecordRef>& activating, RecordRef intruder, Rng& rng,
                                    std::string task_id);

IntruderTask assemble_decile_task(const ActivationStore& store, const LatentProfile& profile, int majority_decile,
                                  const std::vector<RecordRef>& majority, int intruder_decile, RecordRef intruder,
                                  Rng& rng, std::string task_id);

struct BatchConfig {
    int tasks_per_latent = 50;
    TaskVariant variant = TaskVariant::standard;
};

struct SkipNote {
    std::string latent_id;
    std::string reason;
};

struct ReuseNote {
    std::string latent_id;
    int decile = 0;  // 0 for the non-activating pool
    int reshuffles = 0;
};

struct TaskBatch {
    std::vector<IntruderTask> tasks;
    std::vector<SkipNote> skipped;
    std::vector<ReuseNote> reused;
};

// For each scoreable latent, draws tasks_per_latent tasks. Deciles (or ordered
// decile pairs for the decile variant) are drawn uniformly among those whose
// pools can supply a task. Examples are drawn without replacement across the
// latent's tasks until a pool runs dry, after which it is reshuffled and the
// reuse recorded. Every random choice derives from (seed, latent_id, index).
TaskBatch build_batch(const ActivationStore& store, const std::vector<LatentProfile>& profiles,
                      const BatchConfig& config, std::uint64_t seed);

// Every ordered (majority, intruder) pair whose pools allow it, `repetitions`
// times per latent: up to 90 tasks per latent per repetition.
TaskBatch build_decile_sweep(const ActivationStore& store, const std::vector<LatentProfile>& profiles,
                             int repetitions, std::uint64_t seed);

nlohmann::json task_to_json(const IntruderTask& task);
IntruderTask task_from_json(const nlohmann::json& j);

void write_tasks(const std::filesystem::path& path, const std::vector<IntruderTask>& tasks);
std::vector<IntruderTask> read_tasks(const std::filesystem::path& path);

}  // namespace latentprobe
