#pragma once

#include <array>
#include <cstddef>
#include <filesystem>
#include <map>
#include <optional>
#include <stdexcept>
#include <string>
#include <string_view>
#include <unordered_map>
#include <vector>

#include <json.hpp>

namespace latentprobe {

inline constexpr int kNumDeciles = 10;
inline constexpr std::size_t kWindowLength = 32;
inline constexpr std::size_t kMinPositiveExamples = 10;

class DataError : public std::runtime_error {
public:
    using std::runtime_error::runtime_error;
};

struct TokenizedContext {
    std::string context_id;
    std::vector<std::string> tokens;
};

struct ActivationRecord {
    std::string latent_id;
    TokenizedContext context;
    std::vector<double> activations;
};

// Index of a record inside an ActivationStore.
using RecordRef = std::size_t;

struct RejectedLine {
    std::size_t line_number = 0;  // 1-based
    std::string reason;
};

// Parses one line of the activation dump. Throws DataError describing the
// first violated field constraint.
ActivationRecord parse_record(std::string_view line);
nlohmann::json record_to_json(const ActivationRecord& record);

// Max over per-token activations; 0 for an all-zero record.
double example_strength(const ActivationRecord& record);

// Contiguous slice of at most `length` tokens containing the argmax token,
// centered on it when possible and clamped to the context edges. The first
// maximal token is the argmax when several tie.
ActivationRecord window(const ActivationRecord& record, std::size_t length = kWindowLength);

// Read-only after construction; safe for concurrent readers.
class ActivationStore {
public:
    ActivationStore() = default;

    // Throws DataError when `records` violate the record or store invariants.
    explicit ActivationStore(std::vector<ActivationRecord> records);

    static ActivationStore ingest(const std::filesystem::path& path);

    const std::vector<ActivationRecord>& records() const { return records_; }
    const ActivationRecord& record(RecordRef ref) const { return records_.at(ref); }
    double strength(RecordRef ref) const { return strengths_.at(ref); }

    // Sorted latent ids.
    std::vector<std::string> latent_ids() const;
    // Records of one latent in file order; empty when unknown.
    const std::vector<RecordRef>& records_for_latent(std::string_view latent_id) const;
    const std::vector<RecordRef>& records_for_context(std::string_view context_id) const;

    // Activation strength of `latent_id` on a context; records absent from
    // the dump count as zero activation.
    double strength_on_context(std::string_view latent_id, std::string_view context_id) const;

    const std::vector<RejectedLine>& rejected() const { return rejected_; }

private:
    void add(ActivationRecord record);

    std::vector<ActivationRecord> records_;
    std::vector<double> strengths_;
    std::map<std::string, std::vector<RecordRef>, std::less<>> by_latent_;
    std::map<std::string, std::vector<RecordRef>, std::less<>> by_context_;
    std::vector<RejectedLine> rejected_;
};

struct LatentProfile {
    std::string latent_id;
    bool scoreable = false;
    std::string unscoreable_reason;
    std::size_t positive_count = 0;
    // 9 ascending thresholds; decile d holds strengths in (b[d-2], b[d-1]].
    std::array<double, kNumDeciles - 1> decile_boundaries{};
    // pools[d - 1] holds the records in decile d.
    std::array<std::vector<RecordRef>, kNumDeciles> pools;
    // One representative record per context on which this latent is silent
    // while some other latent is active.
    std::vector<RecordRef> non_activating_pool;

    const std::vector<RecordRef>& pool(int decile) const { return pools.at(static_cast<std::size_t>(decile - 1)); }
};

// Nearest-rank quantile: value at 1-based rank ceil(p * n) of the sorted data.
double nearest_rank_quantile(const std::vector<double>& sorted, int percent);

// Decile (1..10) of a strength given the 9 boundaries; ties go to the lower decile.
int decile_of(double strength, const std::array<double, kNumDeciles - 1>& boundaries);

LatentProfile compute_profile(const ActivationStore& store, std::string_view latent_id);
// Profiles for every latent in the store, sorted by latent id.
std::vector<LatentProfile> compute_profiles(const ActivationStore& store);

nlohmann::json profile_to_json(const LatentProfile& profile, const ActivationStore& store);

}  // namespace latentprobe
