#pragma once

#include <array>
#include <chrono>
#include <filesystem>
#include <map>
#include <memory>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include "latentprobe/activation_store.hpp"
#include "latentprobe/rng.hpp"

namespace latentprobe {

using Vector = std::vector<double>;

class EmbeddingError : public std::runtime_error {
public:
    using std::runtime_error::runtime_error;
};

class EmbeddingBackend {
public:
    virtual ~EmbeddingBackend() = default;
    // One vector per input text, in input order, all of the same dimension.
    virtual std::vector<Vector> embed(const std::vector<std::string>& texts) = 0;
};

// Text -> vector lookup loaded from line-delimited {"text", "vector"} records.
class PrecomputedEmbeddings : public EmbeddingBackend {
public:
    explicit PrecomputedEmbeddings(std::map<std::string, Vector> table);
    static PrecomputedEmbeddings from_file(const std::filesystem::path& path);

    std::vector<Vector> embed(const std::vector<std::string>& texts) override;
    std::size_t size() const { return table_.size(); }

private:
    std::map<std::string, Vector> table_;
};

void write_embeddings(const std::filesystem::path& path, const std::map<std::string, Vector>& table);

struct HttpEmbeddingConfig {
    std::string endpoint;
    std::string model = "all-MiniLM-L6-v2";
    std::size_t batch_size = 64;
    int concurrency = 4;
    int max_retries = 2;
    std::chrono::milliseconds request_timeout{60'000};
    std::chrono::milliseconds backoff_base{500};
    std::string api_key;
};

// OpenAI-compatible POST /v1/embeddings client.
class HttpEmbeddingBackend : public EmbeddingBackend {
public:
    explicit HttpEmbeddingBackend(HttpEmbeddingConfig config);
    std::vector<Vector> embed(const std::vector<std::string>& texts) override;

private:
    HttpEmbeddingConfig config_;
};

// Throws EmbeddingError for a zero-norm vector or mismatched dimensions.
double cosine(std::span<const double> a, std::span<const double> b);

// (1/N)(sum cos(q, own_i) - sum cos(q, other_i)). Requires |own| == |other| >= 1.
double mean_cosine_gap(const Vector& query, const std::vector<Vector>& own, const std::vector<Vector>& other);

// How much closer an activating query is to the activating set than to the
// non-activating set.
double delta_plus(const Vector& q_plus, const std::vector<Vector>& e_plus, const std::vector<Vector>& e_minus);
// How much closer a non-activating query is to the non-activating set.
double delta_minus(const Vector& q_minus, const std::vector<Vector>& e_plus, const std::vector<Vector>& e_minus);

// Classifier score: mean cos to E+ minus mean cos to E-. Equals delta_plus
// for the positive query and -delta_minus for the negative query.
double classifier_score(const Vector& query, const std::vector<Vector>& e_plus, const std::vector<Vector>& e_minus);

// Mann-Whitney AUROC: P(pos > neg) + 1/2 P(pos == neg). Throws on empty input.
double auroc(std::span<const double> positives, std::span<const double> negatives);

struct ScoringRound {
    Vector q_plus;
    Vector q_minus;
    std::vector<Vector> e_plus;
    std::vector<Vector> e_minus;
};

// The same round with the classes exchanged.
ScoringRound swap_roles(const ScoringRound& round);

struct RoundScores {
    std::vector<double> positive_scores;  // s(q+) = delta_plus per round
    std::vector<double> negative_scores;  // s(q-) = -delta_minus per round
    double auroc = 0.5;
};

RoundScores score_rounds(const std::vector<ScoringRound>& rounds);

struct EmbeddingScoreConfig {
    std::size_t set_size = 10;   // N
    std::size_t iterations = 20;  // query rounds per latent-decile
};

struct EmbeddingScore {
    std::optional<double> auroc;  // empty when skipped
    std::vector<double> positive_scores;
    std::vector<double> negative_scores;
    bool reused = false;  // pool smaller than N + iterations, queries repeat
    std::string skip_reason;
};

// Text handed to the embedder for a record: activating examples are rendered
// with their << >> highlights, non-activating contexts as plain text.
std::string embedding_text(const ActivationRecord& record, bool activating);

// Activating decile pool against non-activating contexts.
EmbeddingScore score_latent(const ActivationStore& store, const LatentProfile& profile, int decile,
                            EmbeddingBackend& backend, const EmbeddingScoreConfig& config, Rng& rng);

// Positives from decile_a, negatives from decile_b. When a == b the sets are
// drawn disjointly from the one pool.
EmbeddingScore decile_pair_score(const ActivationStore& store, const LatentProfile& profile, int decile_a,
                                 int decile_b, EmbeddingBackend& backend, const EmbeddingScoreConfig& config, Rng& rng);

struct LatentEmbeddingReport {
    std::string latent_id;
    std::array<EmbeddingScore, kNumDeciles> per_decile;
    std::optional<double> overall;  // unweighted mean over scored deciles
};

// Deterministic in (seed, latent_id, decile).
LatentEmbeddingReport score_latent_deciles(const ActivationStore& store, const LatentProfile& profile,
                                           EmbeddingBackend& backend, const EmbeddingScoreConfig& config,
                                           std::uint64_t seed);

// 10x10 matrix of decile_pair_score, row = positive decile, column = negative decile.
std::array<std::array<std::optional<double>, kNumDeciles>, kNumDeciles> decile_pair_matrix(
    const ActivationStore& store, const LatentProfile& profile, EmbeddingBackend& backend,
    const EmbeddingScoreConfig& config, std::uint64_t seed);

}  // namespace latentprobe
