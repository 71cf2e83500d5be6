#include "latentprobe/activation_store.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <set>

namespace latentprobe {

namespace {

const std::vector<RecordRef> kNoRecords;

}  // namespace

ActivationRecord parse_record(std::string_view line) {
    nlohmann::json j;
    try {
        j = nlohmann::json::parse(line);
    } catch (const nlohmann::json::parse_error& e) {
        throw DataError(std::string("invalid JSON: ") + e.what());
    }
    if (!j.is_object()) {
        throw DataError("record is not a JSON object");
    }
    for (const char* field : {"latent_id", "context_id", "tokens", "activations"}) {
        if (!j.contains(field)) {
            throw DataError(std::string("missing field '") + field + "'");
        }
    }
    if (!j["latent_id"].is_string() || !j["context_id"].is_string()) {
        throw DataError("latent_id and context_id must be strings");
    }
    if (!j["tokens"].is_array() || !j["activations"].is_array()) {
        throw DataError("tokens and activations must be arrays");
    }

    ActivationRecord record;
    record.latent_id = j["latent_id"].get<std::string>();
    record.context.context_id = j["context_id"].get<std::string>();
    if (record.latent_id.empty() || record.context.context_id.empty()) {
        throw DataError("latent_id and context_id must be non-empty");
    }
    for (const auto& token : j["tokens"]) {
        if (!token.is_string()) {
            throw DataError("tokens must be strings");
        }
        record.context.tokens.push_back(token.get<std::string>());
    }
    for (const auto& value : j["activations"]) {
        if (!value.is_number()) {
            throw DataError("activations must be numbers");
        }
        const double a = value.get<double>();
        if (!std::isfinite(a) || a < 0.0) {
            throw DataError("activations must be finite and non-negative");
        }
        record.activations.push_back(a);
    }
    if (record.context.tokens.empty()) {
        throw DataError("tokens must be non-empty");
    }
    if (record.activations.size() != record.context.tokens.size()) {
        throw DataError("activations length " + std::to_string(record.activations.size()) +
                        " != tokens length " + std::to_string(record.context.tokens.size()));
    }
    return record;
}

nlohmann::json record_to_json(const ActivationRecord& record) {
    nlohmann::json j;
    j["latent_id"] = record.latent_id;
    j["context_id"] = record.context.context_id;
    j["tokens"] = record.context.tokens;
    j["activations"] = record.activations;
    return j;
}

double example_strength(const ActivationRecord& record) {
    double best = 0.0;
    for (double a : record.activations) {
        best = std::max(best, a);
    }
    return best;
}

ActivationRecord window(const ActivationRecord& record, std::size_t length) {
    const std::size_t n = record.context.tokens.size();
    if (n <= length) {
        return record;
    }
    const auto argmax = static_cast<std::size_t>(
        std::max_element(record.activations.begin(), record.activations.end()) - record.activations.begin());
    // Place the argmax at offset length/2 (position 50 -> 34..65 for length 32).
    const std::size_t half = length / 2;
    std::size_t start = argmax >= half ? argmax - half : 0;
    start = std::min(start, n - length);

    ActivationRecord out;
    out.latent_id = record.latent_id;
    out.context.context_id = record.context.context_id;
    out.context.tokens.assign(record.context.tokens.begin() + static_cast<std::ptrdiff_t>(start),
                              record.context.tokens.begin() + static_cast<std::ptrdiff_t>(start + length));
    out.activations.assign(record.activations.begin() + static_cast<std::ptrdiff_t>(start),
                           record.activations.begin() + static_cast<std::ptrdiff_t>(start + length));
    return out;
}

ActivationStore::ActivationStore(std::vector<ActivationRecord> records) {
    for (auto& r : records) {
        add(std::move(r));
    }
}

void ActivationStore::add(ActivationRecord record) {
    if (record.context.tokens.empty() || record.activations.size() != record.context.tokens.size()) {
        throw DataError("record for latent '" + record.latent_id + "' has mismatched tokens/activations");
    }
    for (double a : record.activations) {
        if (!std::isfinite(a) || a < 0.0) {
            throw DataError("record for latent '" + record.latent_id + "' has a negative activation");
        }
    }
    auto ctx = by_context_.find(record.context.context_id);
    if (ctx != by_context_.end()) {
        for (RecordRef other : ctx->second) {
            const auto& existing = records_[other];
            if (existing.context.tokens != record.context.tokens) {
                throw DataError("context '" + record.context.context_id + "' reappears with different tokens");
            }
            if (existing.latent_id == record.latent_id) {
                throw DataError("duplicate record for latent '" + record.latent_id + "' on context '" +
                                record.context.context_id + "'");
            }
        }
    }
    const RecordRef ref = records_.size();
    strengths_.push_back(example_strength(record));
    by_latent_[record.latent_id].push_back(ref);
    by_context_[record.context.context_id].push_back(ref);
    records_.push_back(std::move(record));
}

ActivationStore ActivationStore::ingest(const std::filesystem::path& path) {
    std::ifstream in(path);
    if (!in) {
        throw DataError("cannot read activation dump '" + path.string() + "'");
    }
    ActivationStore store;
    std::string line;
    std::size_t line_number = 0;
    std::size_t non_blank = 0;
    while (std::getline(in, line)) {
        ++line_number;
        if (!line.empty() && line.back() == '\r') {
            line.pop_back();
        }
        if (line.find_first_not_of(" \t") == std::string::npos) {
            continue;
        }
        ++non_blank;
        try {
            store.add(parse_record(line));
        } catch (const DataError& e) {
            store.rejected_.push_back({line_number, e.what()});
        }
    }
    if (non_blank == 0) {
        throw DataError("no records in '" + path.string() + "'");
    }
    if (store.records_.empty()) {
        throw DataError("no records in '" + path.string() + "': all " + std::to_string(non_blank) +
                        " lines rejected (first: line " + std::to_string(store.rejected_.front().line_number) +
                        ": " + store.rejected_.front().reason + ")");
    }
    return store;
}

std::vector<std::string> ActivationStore::latent_ids() const {
    std::vector<std::string> ids;
    ids.reserve(by_latent_.size());
    for (const auto& [id, refs] : by_latent_) {
        ids.push_back(id);
    }
    return ids;
}

const std::vector<RecordRef>& ActivationStore::records_for_latent(std::string_view latent_id) const {
    auto it = by_latent_.find(latent_id);
    return it == by_latent_.end() ? kNoRecords : it->second;
}

const std::vector<RecordRef>& ActivationStore::records_for_context(std::string_view context_id) const {
    auto it = by_context_.find(context_id);
    return it == by_context_.end() ? kNoRecords : it->second;
}

double ActivationStore::strength_on_context(std::string_view latent_id, std::string_view context_id) const {
    for (RecordRef ref : records_for_context(context_id)) {
        if (records_[ref].latent_id == latent_id) {
            return strengths_[ref];
        }
    }
    return 0.0;
}

double nearest_rank_quantile(const std::vector<double>& sorted, int percent) {
    if (sorted.empty()) {
        throw DataError("quantile of empty data");
    }
    const std::size_t n = sorted.size();
    // ceil(percent * n / 100) in integer arithmetic.
    std::size_t rank = (static_cast<std::size_t>(percent) * n + 99) / 100;
    rank = std::clamp<std::size_t>(rank, 1, n);
    return sorted[rank - 1];
}

int decile_of(double strength, const std::array<double, kNumDeciles - 1>& boundaries) {
    int below = 0;
    for (double b : boundaries) {
        if (b < strength) {
            ++below;
        }
    }
    return below + 1;
}

LatentProfile compute_profile(const ActivationStore& store, std::string_view latent_id) {
    LatentProfile profile;
    profile.latent_id = std::string(latent_id);

    std::vector<RecordRef> positives;
    for (RecordRef ref : store.records_for_latent(latent_id)) {
        if (store.strength(ref) > 0.0) {
            positives.push_back(ref);
        }
    }
    profile.positive_count = positives.size();
    if (positives.size() < kMinPositiveExamples) {
        profile.scoreable = false;
        profile.unscoreable_reason = "only " + std::to_string(positives.size()) + " positive examples (need " +
                                     std::to_string(kMinPositiveExamples) + ")";
        return profile;
    }

    std::vector<double> sorted;
    sorted.reserve(positives.size());
    for (RecordRef ref : positives) {
        sorted.push_back(store.strength(ref));
    }
    std::sort(sorted.begin(), sorted.end());
    for (int k = 1; k < kNumDeciles; ++k) {
        profile.decile_boundaries[static_cast<std::size_t>(k - 1)] = nearest_rank_quantile(sorted, 10 * k);
    }
    for (RecordRef ref : positives) {
        const int d = decile_of(store.strength(ref), profile.decile_boundaries);
        profile.pools[static_cast<std::size_t>(d - 1)].push_back(ref);
    }

    // Contexts where some other latent fires and this one is silent. Walk the
    // store in record order so the pool order is deterministic.
    std::set<std::string, std::less<>> seen;
    for (RecordRef ref = 0; ref < store.records().size(); ++ref) {
        const auto& rec = store.record(ref);
        if (rec.latent_id == latent_id || store.strength(ref) <= 0.0) {
            continue;
        }
        const auto& ctx = rec.context.context_id;
        if (seen.contains(ctx)) {
            continue;
        }
        seen.insert(ctx);
        if (store.strength_on_context(latent_id, ctx) == 0.0) {
            profile.non_activating_pool.push_back(ref);
        }
    }
    profile.scoreable = true;
    return profile;
}

std::vector<LatentProfile> compute_profiles(const ActivationStore& store) {
    std::vector<LatentProfile> profiles;
    for (const auto& id : store.latent_ids()) {
        profiles.push_back(compute_profile(store, id));
    }
    return profiles;
}

nlohmann::json profile_to_json(const LatentProfile& profile, const ActivationStore& store) {
    nlohmann::json j;
    j["latent_id"] = profile.latent_id;
    j["scoreable"] = profile.scoreable;
    j["positive_count"] = profile.positive_count;
    if (!profile.scoreable) {
        j["reason"] = profile.unscoreable_reason;
        return j;
    }
    j["decile_boundaries"] = profile.decile_boundaries;
    nlohmann::json pools = nlohmann::json::object();
    for (int d = 1; d <= kNumDeciles; ++d) {
        nlohmann::json ids = nlohmann::json::array();
        for (RecordRef ref : profile.pool(d)) {
            ids.push_back(store.record(ref).context.context_id);
        }
        pools[std::to_string(d)] = std::move(ids);
    }
    j["pools"] = std::move(pools);
    j["non_activating_count"] = profile.non_activating_pool.size();
    return j;
}

}  // namespace latentprobe
