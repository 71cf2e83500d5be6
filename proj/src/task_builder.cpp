#include "latentprobe/task_builder.hpp"

#include <algorithm>
#include <fstream>
#include <iomanip>
#include <sstream>

namespace latentprobe {

std::string_view to_string(TaskVariant variant) {
    return variant == TaskVariant::standard ? "standard" : "decile";
}

TaskVariant parse_variant(std::string_view text) {
    if (text == "standard") {
        return TaskVariant::standard;
    }
    if (text == "decile") {
        return TaskVariant::decile;
    }
    throw TaskError("unknown task variant '" + std::string(text) + "' (expected standard or decile)");
}

std::string render_highlights(const std::vector<std::string>& tokens, const std::vector<bool>& highlighted) {
    std::string out;
    const std::size_t n = tokens.size();
    for (std::size_t i = 0; i < n; ++i) {
        if (i > 0) {
            out += ' ';
        }
        const bool on = highlighted[i];
        const bool starts = on && (i == 0 || !highlighted[i - 1]);
        const bool ends = on && (i + 1 == n || !highlighted[i + 1]);
        if (starts) {
            out += kHighlightOpen;
        }
        out += tokens[i];
        if (ends) {
            out += kHighlightClose;
        }
    }
    return out;
}

RenderedExample highlight(const ActivationRecord& record, bool activating, std::optional<int> target_count, Rng& rng) {
    RenderedExample ex;
    ex.activating = activating;
    ex.context_id = record.context.context_id;
    ex.tokens = record.context.tokens;
    const std::size_t n = ex.tokens.size();
    ex.highlighted.assign(n, false);
    int count = 0;
    if (activating) {
        for (std::size_t i = 0; i < n; ++i) {
            if (record.activations[i] > 0.0) {
                ex.highlighted[i] = true;
                ++count;
            }
        }
    } else {
        if (!target_count) {
            throw TaskError("non-activating highlight requires a target count");
        }
        const auto k = std::min<std::size_t>(static_cast<std::size_t>(std::max(0, *target_count)), n);
        for (std::size_t pos : rng.sample_without_replacement(n, k)) {
            ex.highlighted[pos] = true;
        }
        count = static_cast<int>(k);
    }
    ex.highlight_count = count;
    ex.text = render_highlights(ex.tokens, ex.highlighted);
    return ex;
}

int target_highlight_count(const std::vector<RenderedExample>& activating) {
    if (activating.empty()) {
        return 0;
    }
    int total = 0;
    for (const auto& ex : activating) {
        total += ex.highlight_count;
    }
    return total / static_cast<int>(activating.size());
}

namespace {

std::string default_task_id(const LatentProfile& profile, TaskVariant variant) {
    return profile.latent_id + "/" + std::string(to_string(variant));
}

void place_intruder(IntruderTask& task, std::vector<RenderedExample> majority, RenderedExample intruder, Rng& rng) {
    task.intruder_position = rng.uniform_int(1, kExamplesPerTask);
    task.examples = std::move(majority);
    task.examples.insert(task.examples.begin() + (task.intruder_position - 1), std::move(intruder));
}

std::vector<RecordRef> pick(const std::vector<RecordRef>& pool, std::size_t k, Rng& rng) {
    std::vector<RecordRef> out;
    out.reserve(k);
    for (std::size_t i : rng.sample_without_replacement(pool.size(), k)) {
        out.push_back(pool[i]);
    }
    return out;
}

}  // namespace

IntruderTask assemble_standard_task(const ActivationStore& store, const LatentProfile& profile, int decile,
                                    const std::vector<RecordRef>& activating, RecordRef intruder, Rng& rng,
                                    std::string task_id) {
    IntruderTask task;
    task.task_id = std::move(task_id);
    task.latent_id = profile.latent_id;
    task.variant = TaskVariant::standard;
    task.majority_decile = decile;

    std::vector<RenderedExample> majority;
    for (RecordRef ref : activating) {
        auto ex = highlight(window(store.record(ref)), true, std::nullopt, rng);
        ex.source_decile = decile;
        majority.push_back(std::move(ex));
    }
    const int target = target_highlight_count(majority);
    auto odd = highlight(window(store.record(intruder)), false, target, rng);
    place_intruder(task, std::move(majority), std::move(odd), rng);
    return task;
}

IntruderTask assemble_decile_task(const ActivationStore& store, const LatentProfile& profile, int majority_decile,
                                  const std::vector<RecordRef>& majority, int intruder_decile, RecordRef intruder,
                                  Rng& rng, std::string task_id) {
    IntruderTask task;
    task.task_id = std::move(task_id);
    task.latent_id = profile.latent_id;
    task.variant = TaskVariant::decile;
    task.majority_decile = majority_decile;
    task.intruder_decile = intruder_decile;

    std::vector<RenderedExample> rendered;
    for (RecordRef ref : majority) {
        auto ex = highlight(window(store.record(ref)), true, std::nullopt, rng);
        ex.source_decile = majority_decile;
        rendered.push_back(std::move(ex));
    }
    auto odd = highlight(window(store.record(intruder)), true, std::nullopt, rng);
    odd.source_decile = intruder_decile;
    place_intruder(task, std::move(rendered), std::move(odd), rng);
    return task;
}

TaskBuildResult build_standard_task(const ActivationStore& store, const LatentProfile& profile, int decile, Rng& rng,
                                    std::string task_id) {
    if (!profile.scoreable) {
        return {std::nullopt, "latent unscoreable: " + profile.unscoreable_reason};
    }
    if (decile < 1 || decile > kNumDeciles) {
        throw TaskError("decile out of range: " + std::to_string(decile));
    }
    const auto& pool = profile.pool(decile);
    if (pool.size() < static_cast<std::size_t>(kActivatingPerTask)) {
        return {std::nullopt, "insufficient activating examples in decile " + std::to_string(decile)};
    }
    if (profile.non_activating_pool.empty()) {
        return {std::nullopt, "insufficient non-activating examples"};
    }
    auto activating = pick(pool, kActivatingPerTask, rng);
    const RecordRef intruder = profile.non_activating_pool[rng.uniform_index(profile.non_activating_pool.size())];
    if (task_id.empty()) {
        task_id = default_task_id(profile, TaskVariant::standard);
    }
    return {assemble_standard_task(store, profile, decile, activating, intruder, rng, std::move(task_id)), {}};
}

TaskBuildResult build_decile_task(const ActivationStore& store, const LatentProfile& profile, int majority_decile,
                                  int intruder_decile, Rng& rng, std::string task_id) {
    if (majority_decile == intruder_decile) {
        throw TaskError("majority and intruder decile must differ (both " + std::to_string(majority_decile) + ")");
    }
    for (int d : {majority_decile, intruder_decile}) {
        if (d < 1 || d > kNumDeciles) {
            throw TaskError("decile out of range: " + std::to_string(d));
        }
    }
    if (!profile.scoreable) {
        return {std::nullopt, "latent unscoreable: " + profile.unscoreable_reason};
    }
    const auto& majority_pool = profile.pool(majority_decile);
    const auto& intruder_pool = profile.pool(intruder_decile);
    if (majority_pool.size() < static_cast<std::size_t>(kActivatingPerTask)) {
        return {std::nullopt, "insufficient activating examples in decile " + std::to_string(majority_decile)};
    }
    if (intruder_pool.empty()) {
        return {std::nullopt, "no intruder examples in decile " + std::to_string(intruder_decile)};
    }
    auto majority = pick(majority_pool, kActivatingPerTask, rng);
    const RecordRef intruder = intruder_pool[rng.uniform_index(intruder_pool.size())];
    if (task_id.empty()) {
        task_id = default_task_id(profile, TaskVariant::decile);
    }
    return {assemble_decile_task(store, profile, majority_decile, majority, intruder_decile, intruder, rng,
                                 std::move(task_id)),
            {}};
}

namespace {

// Draws without replacement across calls; reshuffles when fewer than the
// requested number of items remain.
class Deck {
public:
    Deck(std::vector<RecordRef> items, Rng& rng) : items_(std::move(items)) { rng.shuffle(items_); }

    std::vector<RecordRef> draw(std::size_t k, Rng& rng) {
        if (items_.size() - next_ < k) {
            rng.shuffle(items_);
            next_ = 0;
            ++reshuffles_;
        }
        std::vector<RecordRef> out(items_.begin() + static_cast<std::ptrdiff_t>(next_),
                                   items_.begin() + static_cast<std::ptrdiff_t>(next_ + k));
        next_ += k;
        return out;
    }

    int reshuffles() const { return reshuffles_; }

private:
    std::vector<RecordRef> items_;
    std::size_t next_ = 0;
    int reshuffles_ = 0;
};

std::string indexed_id(const LatentProfile& profile, TaskVariant variant, int index) {
    std::ostringstream os;
    os << profile.latent_id << '/' << to_string(variant) << '/' << std::setw(4) << std::setfill('0') << index;
    return os.str();
}

void build_latent_tasks(const ActivationStore& store, const LatentProfile& profile, const BatchConfig& config,
                        std::uint64_t seed, TaskBatch& batch) {
    Rng deck_rng(derive_seed(seed, profile.latent_id + "#decks"));
    std::array<std::optional<Deck>, kNumDeciles> decks;
    for (int d = 1; d <= kNumDeciles; ++d) {
        if (!profile.pool(d).empty()) {
            decks[static_cast<std::size_t>(d - 1)].emplace(profile.pool(d), deck_rng);
        }
    }
    std::optional<Deck> intruders;
    if (!profile.non_activating_pool.empty()) {
        intruders.emplace(profile.non_activating_pool, deck_rng);
    }
    const auto big_enough = [&](int d) {
        return profile.pool(d).size() >= static_cast<std::size_t>(kActivatingPerTask);
    };

    std::vector<std::pair<int, int>> choices;  // (majority, intruder); intruder 0 for standard
    if (config.variant == TaskVariant::standard) {
        if (intruders) {
            for (int d = 1; d <= kNumDeciles; ++d) {
                if (big_enough(d)) {
                    choices.emplace_back(d, 0);
                }
            }
        }
    } else {
        for (int m = 1; m <= kNumDeciles; ++m) {
            for (int i = 1; i <= kNumDeciles; ++i) {
                if (m != i && big_enough(m) && !profile.pool(i).empty()) {
                    choices.emplace_back(m, i);
                }
            }
        }
    }
    if (choices.empty()) {
        batch.skipped.push_back({profile.latent_id, config.variant == TaskVariant::standard
                                                        ? "no decile with 4 activating examples and an intruder"
                                                        : "no decile pair with enough examples"});
        return;
    }

    for (int t = 0; t < config.tasks_per_latent; ++t) {
        Rng rng(derive_seed(seed, profile.latent_id, static_cast<std::uint64_t>(t)));
        const auto [m, i] = choices[rng.uniform_index(choices.size())];
        auto majority = decks[static_cast<std::size_t>(m - 1)]->draw(kActivatingPerTask, deck_rng);
        if (config.variant == TaskVariant::standard) {
            const RecordRef odd = intruders->draw(1, deck_rng).front();
            batch.tasks.push_back(assemble_standard_task(store, profile, m, majority, odd, rng,
                                                         indexed_id(profile, config.variant, t)));
        } else {
            const RecordRef odd = decks[static_cast<std::size_t>(i - 1)]->draw(1, deck_rng).front();
            batch.tasks.push_back(assemble_decile_task(store, profile, m, majority, i, odd, rng,
                                                       indexed_id(profile, config.variant, t)));
        }
    }

    for (int d = 1; d <= kNumDeciles; ++d) {
        const auto& deck = decks[static_cast<std::size_t>(d - 1)];
        if (deck && deck->reshuffles() > 0) {
            batch.reused.push_back({profile.latent_id, d, deck->reshuffles()});
        }
    }
    if (intruders && intruders->reshuffles() > 0) {
        batch.reused.push_back({profile.latent_id, 0, intruders->reshuffles()});
    }
}

}  // namespace

TaskBatch build_batch(const ActivationStore& store, const std::vector<LatentProfile>& profiles,
                      const BatchConfig& config, std::uint64_t seed) {
    TaskBatch batch;
    if (config.tasks_per_latent <= 0) {
        return batch;
    }
    for (const auto& profile : profiles) {
        if (!profile.scoreable) {
            batch.skipped.push_back({profile.latent_id, "unscoreable: " + profile.unscoreable_reason});
            continue;
        }
        build_latent_tasks(store, profile, config, seed, batch);
    }
    return batch;
}

TaskBatch build_decile_sweep(const ActivationStore& store, const std::vector<LatentProfile>& profiles,
                             int repetitions, std::uint64_t seed) {
    TaskBatch batch;
    for (const auto& profile : profiles) {
        if (!profile.scoreable) {
            batch.skipped.push_back({profile.latent_id, "unscoreable: " + profile.unscoreable_reason});
            continue;
        }
        for (int rep = 0; rep < repetitions; ++rep) {
            for (int m = 1; m <= kNumDeciles; ++m) {
                for (int i = 1; i <= kNumDeciles; ++i) {
                    if (m == i) {
                        continue;
                    }
                    const auto index = static_cast<std::uint64_t>(rep * 100 + m * 10 + i);
                    Rng rng(derive_seed(seed, profile.latent_id + "#sweep", index));
                    std::ostringstream id;
                    id << profile.latent_id << "/decile/r" << rep << "/m" << m << "-i" << i;
                    auto result = build_decile_task(store, profile, m, i, rng, id.str());
                    if (result.task) {
                        batch.tasks.push_back(std::move(*result.task));
                    } else {
                        batch.skipped.push_back({profile.latent_id, id.str() + ": " + result.skip_reason});
                    }
                }
            }
        }
    }
    return batch;
}

nlohmann::json task_to_json(const IntruderTask& task) {
    nlohmann::json j;
    j["task_id"] = task.task_id;
    j["latent_id"] = task.latent_id;
    j["variant"] = std::string(to_string(task.variant));
    j["intruder_position"] = task.intruder_position;
    j["majority_decile"] = task.majority_decile;
    j["intruder_decile"] = task.intruder_decile ? nlohmann::json(*task.intruder_decile) : nlohmann::json(nullptr);
    nlohmann::json examples = nlohmann::json::array();
    for (const auto& ex : task.examples) {
        nlohmann::json e;
        e["text"] = ex.text;
        e["highlight_count"] = ex.highlight_count;
        e["source_decile"] = ex.source_decile ? nlohmann::json(*ex.source_decile) : nlohmann::json(nullptr);
        e["activating"] = ex.activating;
        e["context_id"] = ex.context_id;
        e["tokens"] = ex.tokens;
        e["highlighted"] = ex.highlighted;
        examples.push_back(std::move(e));
    }
    j["examples"] = std::move(examples);
    return j;
}

IntruderTask task_from_json(const nlohmann::json& j) {
    try {
        IntruderTask task;
        task.task_id = j.at("task_id").get<std::string>();
        task.latent_id = j.at("latent_id").get<std::string>();
        task.variant = parse_variant(j.at("variant").get<std::string>());
        task.intruder_position = j.at("intruder_position").get<int>();
        task.majority_decile = j.at("majority_decile").get<int>();
        if (j.contains("intruder_decile") && !j["intruder_decile"].is_null()) {
            task.intruder_decile = j["intruder_decile"].get<int>();
        }
        for (const auto& e : j.at("examples")) {
            RenderedExample ex;
            ex.text = e.at("text").get<std::string>();
            ex.highlight_count = e.at("highlight_count").get<int>();
            if (e.contains("source_decile") && !e["source_decile"].is_null()) {
                ex.source_decile = e["source_decile"].get<int>();
            }
            ex.activating = e.at("activating").get<bool>();
            ex.context_id = e.value("context_id", std::string{});
            if (e.contains("tokens")) {
                ex.tokens = e["tokens"].get<std::vector<std::string>>();
            }
            if (e.contains("highlighted")) {
                ex.highlighted = e["highlighted"].get<std::vector<bool>>();
            }
            task.examples.push_back(std::move(ex));
        }
        if (task.examples.size() != static_cast<std::size_t>(kExamplesPerTask)) {
            throw TaskError("task '" + task.task_id + "' has " + std::to_string(task.examples.size()) +
                            " examples, expected 5");
        }
        if (task.intruder_position < 1 || task.intruder_position > kExamplesPerTask) {
            throw TaskError("task '" + task.task_id + "' has intruder_position out of range");
        }
        return task;
    } catch (const nlohmann::json::exception& e) {
        throw TaskError(std::string("malformed task record: ") + e.what());
    }
}

void write_tasks(const std::filesystem::path& path, const std::vector<IntruderTask>& tasks) {
    std::ofstream out(path, std::ios::binary);
    if (!out) {
        throw TaskError("cannot write task set '" + path.string() + "'");
    }
    for (const auto& task : tasks) {
        out << task_to_json(task).dump() << '\n';
    }
}

std::vector<IntruderTask> read_tasks(const std::filesystem::path& path) {
    std::ifstream in(path);
    if (!in) {
        throw TaskError("cannot read task set '" + path.string() + "'");
    }
    std::vector<IntruderTask> tasks;
    std::string line;
    std::size_t line_number = 0;
    while (std::getline(in, line)) {
        ++line_number;
        if (line.find_first_not_of(" \t\r") == std::string::npos) {
            continue;
        }
        try {
            tasks.push_back(task_from_json(nlohmann::json::parse(line)));
        } catch (const nlohmann::json::parse_error& e) {
            throw TaskError(path.string() + ":" + std::to_string(line_number) + ": " + e.what());
        } catch (const TaskError& e) {
            throw TaskError(path.string() + ":" + std::to_string(line_number) + ": " + e.what());
        }
    }
    return tasks;
}

}  // namespace latentprobe
