#include "latentprobe/embedding_scorer.hpp"

#include <algorithm>
#include <atomic>
#include <cmath>
#include <fstream>
#include <mutex>
#include <numeric>
#include <set>
#include <thread>

#include <httplib.h>
#include <json.hpp>

#include "http_util.hpp"
#include "latentprobe/task_builder.hpp"

namespace latentprobe {

PrecomputedEmbeddings::PrecomputedEmbeddings(std::map<std::string, Vector> table) : table_(std::move(table)) {
    std::optional<std::size_t> dim;
    for (const auto& [text, vec] : table_) {
        if (dim && vec.size() != *dim) {
            throw EmbeddingError("embedding for '" + text + "' has dimension " + std::to_string(vec.size()) +
                                 ", expected " + std::to_string(*dim));
        }
        dim = vec.size();
    }
}

PrecomputedEmbeddings PrecomputedEmbeddings::from_file(const std::filesystem::path& path) {
    std::ifstream in(path);
    if (!in) {
        throw EmbeddingError("cannot read embeddings file '" + path.string() + "'");
    }
    std::map<std::string, Vector> table;
    std::string line;
    std::size_t line_number = 0;
    while (std::getline(in, line)) {
        ++line_number;
        if (line.find_first_not_of(" \t\r") == std::string::npos) {
            continue;
        }
        try {
            const auto j = nlohmann::json::parse(line);
            auto text = j.at("text").get<std::string>();
            auto vec = j.at("vector").get<Vector>();
            auto [it, inserted] = table.emplace(text, vec);
            if (!inserted && it->second != vec) {
                throw EmbeddingError("conflicting vectors for text '" + text + "'");
            }
        } catch (const nlohmann::json::exception& e) {
            throw EmbeddingError(path.string() + ":" + std::to_string(line_number) + ": " + e.what());
        }
    }
    return PrecomputedEmbeddings(std::move(table));
}

std::vector<Vector> PrecomputedEmbeddings::embed(const std::vector<std::string>& texts) {
    std::vector<Vector> out;
    out.reserve(texts.size());
    for (const auto& text : texts) {
        auto it = table_.find(text);
        if (it == table_.end()) {
            throw EmbeddingError("no precomputed embedding for text: \"" + text + "\"");
        }
        out.push_back(it->second);
    }
    return out;
}

void write_embeddings(const std::filesystem::path& path, const std::map<std::string, Vector>& table) {
    std::ofstream out(path, std::ios::binary);
    if (!out) {
        throw EmbeddingError("cannot write embeddings file '" + path.string() + "'");
    }
    for (const auto& [text, vec] : table) {
        nlohmann::json j;
        j["text"] = text;
        j["vector"] = vec;
        out << j.dump() << '\n';
    }
}

HttpEmbeddingBackend::HttpEmbeddingBackend(HttpEmbeddingConfig config) : config_(std::move(config)) {
    if (config_.concurrency < 1 || config_.batch_size < 1 || config_.max_retries < 0) {
        throw std::invalid_argument("embedding backend needs concurrency >= 1, batch size >= 1, retries >= 0");
    }
    detail::resolve_endpoint(config_.endpoint, "embeddings");
}

std::vector<Vector> HttpEmbeddingBackend::embed(const std::vector<std::string>& texts) {
    const auto url = detail::resolve_endpoint(config_.endpoint, "embeddings");
    std::vector<Vector> out(texts.size());
    const std::size_t batches = (texts.size() + config_.batch_size - 1) / config_.batch_size;
    std::atomic<std::size_t> next{0};
    std::mutex error_mutex;
    std::string first_error;

    auto worker = [&] {
        httplib::Client client(url.scheme_host_port);
        const auto timeout = std::chrono::duration_cast<std::chrono::microseconds>(config_.request_timeout);
        client.set_connection_timeout(timeout);
        client.set_read_timeout(timeout);
        if (!config_.api_key.empty()) {
            client.set_bearer_token_auth(config_.api_key);
        }
        for (std::size_t b = next++; b < batches; b = next++) {
            const std::size_t lo = b * config_.batch_size;
            const std::size_t hi = std::min(texts.size(), lo + config_.batch_size);
            nlohmann::json body;
            body["model"] = config_.model;
            body["input"] = std::vector<std::string>(texts.begin() + static_cast<std::ptrdiff_t>(lo),
                                                     texts.begin() + static_cast<std::ptrdiff_t>(hi));
            const std::string payload = body.dump();
            std::string error;
            bool done = false;
            for (int attempt = 0; attempt <= config_.max_retries && !done; ++attempt) {
                if (attempt > 0) {
                    std::this_thread::sleep_for(config_.backoff_base * (1LL << std::min(attempt - 1, 16)));
                }
                auto result = client.Post(url.path, payload, "application/json");
                if (!result) {
                    error = "transport error: " + httplib::to_string(result.error());
                    continue;
                }
                if (result->status != 200) {
                    error = "HTTP " + std::to_string(result->status);
                    continue;
                }
                try {
                    const auto reply = nlohmann::json::parse(result->body);
                    const auto& data = reply.at("data");
                    if (data.size() != hi - lo) {
                        error = "embedding reply has " + std::to_string(data.size()) + " items for " +
                                std::to_string(hi - lo) + " inputs";
                        continue;
                    }
                    for (std::size_t k = 0; k < data.size(); ++k) {
                        const std::size_t index = data[k].contains("index") ? data[k]["index"].get<std::size_t>() : k;
                        if (index >= hi - lo) {
                            throw EmbeddingError("embedding index out of range");
                        }
                        out[lo + index] = data[k].at("embedding").get<Vector>();
                    }
                    done = true;
                } catch (const std::exception& e) {
                    error = std::string("malformed embedding reply: ") + e.what();
                }
            }
            if (!done) {
                std::lock_guard lock(error_mutex);
                if (first_error.empty()) {
                    first_error = error;
                }
            }
        }
    };

    {
        const auto workers = std::min<std::size_t>(static_cast<std::size_t>(config_.concurrency), batches);
        std::vector<std::jthread> pool;
        for (std::size_t w = 0; w < workers; ++w) {
            pool.emplace_back(worker);
        }
    }
    if (!first_error.empty()) {
        throw EmbeddingError("embedding endpoint " + config_.endpoint + " failed: " + first_error);
    }
    for (const auto& v : out) {
        if (v.size() != out.front().size() || v.empty()) {
            throw EmbeddingError("embedding endpoint returned inconsistent dimensions");
        }
    }
    return out;
}

double cosine(std::span<const double> a, std::span<const double> b) {
    if (a.size() != b.size()) {
        throw EmbeddingError("cosine of vectors with different dimensions");
    }
    double dot = 0.0;
    double na = 0.0;
    double nb = 0.0;
    for (std::size_t i = 0; i < a.size(); ++i) {
        dot += a[i] * b[i];
        na += a[i] * a[i];
        nb += b[i] * b[i];
    }
    if (na == 0.0 || nb == 0.0) {
        throw EmbeddingError("cosine undefined for a zero-norm vector");
    }
    return dot / (std::sqrt(na) * std::sqrt(nb));
}

double mean_cosine_gap(const Vector& query, const std::vector<Vector>& own, const std::vector<Vector>& other) {
    if (own.empty() || own.size() != other.size()) {
        throw EmbeddingError("example sets must be non-empty and of equal size (got " + std::to_string(own.size()) +
                             " and " + std::to_string(other.size()) + ")");
    }
    double own_sum = 0.0;
    for (const auto& e : own) {
        own_sum += cosine(query, e);
    }
    double other_sum = 0.0;
    for (const auto& e : other) {
        other_sum += cosine(query, e);
    }
    return (own_sum - other_sum) / static_cast<double>(own.size());
}

double delta_plus(const Vector& q_plus, const std::vector<Vector>& e_plus, const std::vector<Vector>& e_minus) {
    return mean_cosine_gap(q_plus, e_plus, e_minus);
}

double delta_minus(const Vector& q_minus, const std::vector<Vector>& e_plus, const std::vector<Vector>& e_minus) {
    return mean_cosine_gap(q_minus, e_minus, e_plus);
}

double classifier_score(const Vector& query, const std::vector<Vector>& e_plus, const std::vector<Vector>& e_minus) {
    return mean_cosine_gap(query, e_plus, e_minus);
}

double auroc(std::span<const double> positives, std::span<const double> negatives) {
    if (positives.empty() || negatives.empty()) {
        throw std::invalid_argument("auroc needs non-empty positive and negative scores");
    }
    std::vector<double> sorted(negatives.begin(), negatives.end());
    std::sort(sorted.begin(), sorted.end());
    // Twice the Mann-Whitney U, kept integral so ties stay exact.
    std::uint64_t twice_u = 0;
    for (double p : positives) {
        const auto lo = std::lower_bound(sorted.begin(), sorted.end(), p);
        const auto hi = std::upper_bound(lo, sorted.end(), p);
        twice_u += 2 * static_cast<std::uint64_t>(lo - sorted.begin()) + static_cast<std::uint64_t>(hi - lo);
    }
    const double pairs = static_cast<double>(positives.size()) * static_cast<double>(negatives.size());
    return static_cast<double>(twice_u) / (2.0 * pairs);
}

ScoringRound swap_roles(const ScoringRound& round) {
    return ScoringRound{round.q_minus, round.q_plus, round.e_minus, round.e_plus};
}

RoundScores score_rounds(const std::vector<ScoringRound>& rounds) {
    RoundScores scores;
    for (const auto& r : rounds) {
        scores.positive_scores.push_back(classifier_score(r.q_plus, r.e_plus, r.e_minus));
        scores.negative_scores.push_back(classifier_score(r.q_minus, r.e_plus, r.e_minus));
    }
    scores.auroc = auroc(scores.positive_scores, scores.negative_scores);
    return scores;
}

std::string embedding_text(const ActivationRecord& record, bool activating) {
    const auto w = window(record);
    std::vector<bool> flags(w.activations.size(), false);
    if (activating) {
        for (std::size_t i = 0; i < flags.size(); ++i) {
            flags[i] = w.activations[i] > 0.0;
        }
    }
    return render_highlights(w.context.tokens, flags);
}

namespace {

struct SampledRefs {
    std::vector<RecordRef> e_plus, e_minus;
    RecordRef q_plus = 0, q_minus = 0;
};

EmbeddingScore score_pools(const ActivationStore& store, const std::vector<RecordRef>& positive_pool,
                           const std::vector<RecordRef>& negative_pool, bool negatives_activating, bool shared_pool,
                           EmbeddingBackend& backend, const EmbeddingScoreConfig& config, Rng& rng) {
    EmbeddingScore result;
    const std::size_t n = config.set_size;
    if (n == 0 || config.iterations == 0) {
        result.skip_reason = "set size and iterations must be positive";
        return result;
    }
    const std::size_t per_class = n + 1;
    if (shared_pool ? positive_pool.size() < 2 * per_class : positive_pool.size() < per_class) {
        result.skip_reason = "insufficient activating examples (" + std::to_string(positive_pool.size()) + ")";
        return result;
    }
    if (!shared_pool && negative_pool.size() < per_class) {
        result.skip_reason = "insufficient negative examples (" + std::to_string(negative_pool.size()) + ")";
        return result;
    }
    result.reused = shared_pool ? positive_pool.size() < 2 * (n + config.iterations)
                                : positive_pool.size() < n + config.iterations ||
                                      negative_pool.size() < n + config.iterations;

    std::vector<SampledRefs> samples;
    for (std::size_t it = 0; it < config.iterations; ++it) {
        SampledRefs s;
        std::vector<RecordRef> pos;
        std::vector<RecordRef> neg;
        if (shared_pool) {
            for (std::size_t i : rng.sample_without_replacement(positive_pool.size(), 2 * per_class)) {
                (pos.size() < per_class ? pos : neg).push_back(positive_pool[i]);
            }
        } else {
            for (std::size_t i : rng.sample_without_replacement(positive_pool.size(), per_class)) {
                pos.push_back(positive_pool[i]);
            }
            for (std::size_t i : rng.sample_without_replacement(negative_pool.size(), per_class)) {
                neg.push_back(negative_pool[i]);
            }
        }
        s.q_plus = pos.back();
        pos.pop_back();
        s.q_minus = neg.back();
        neg.pop_back();
        s.e_plus = std::move(pos);
        s.e_minus = std::move(neg);
        samples.push_back(std::move(s));
    }

    // Embed every distinct text once.
    std::map<std::pair<RecordRef, bool>, std::size_t> slot;
    std::vector<std::string> texts;
    auto want = [&](RecordRef ref, bool activating) {
        auto key = std::make_pair(ref, activating);
        if (!slot.contains(key)) {
            slot.emplace(key, texts.size());
            texts.push_back(embedding_text(store.record(ref), activating));
        }
    };
    for (const auto& s : samples) {
        want(s.q_plus, true);
        want(s.q_minus, negatives_activating);
        for (RecordRef r : s.e_plus) {
            want(r, true);
        }
        for (RecordRef r : s.e_minus) {
            want(r, negatives_activating);
        }
    }
    const auto vectors = backend.embed(texts);
    if (vectors.size() != texts.size()) {
        throw EmbeddingError("embedding backend returned " + std::to_string(vectors.size()) + " vectors for " +
                             std::to_string(texts.size()) + " texts");
    }
    auto vec = [&](RecordRef ref, bool activating) -> const Vector& {
        return vectors[slot.at(std::make_pair(ref, activating))];
    };

    std::vector<ScoringRound> rounds;
    rounds.reserve(samples.size());
    for (const auto& s : samples) {
        ScoringRound r;
        r.q_plus = vec(s.q_plus, true);
        r.q_minus = vec(s.q_minus, negatives_activating);
        for (RecordRef ref : s.e_plus) {
            r.e_plus.push_back(vec(ref, true));
        }
        for (RecordRef ref : s.e_minus) {
            r.e_minus.push_back(vec(ref, negatives_activating));
        }
        rounds.push_back(std::move(r));
    }
    auto scores = score_rounds(rounds);
    result.auroc = scores.auroc;
    result.positive_scores = std::move(scores.positive_scores);
    result.negative_scores = std::move(scores.negative_scores);
    return result;
}

}  // namespace

EmbeddingScore score_latent(const ActivationStore& store, const LatentProfile& profile, int decile,
                            EmbeddingBackend& backend, const EmbeddingScoreConfig& config, Rng& rng) {
    if (!profile.scoreable) {
        EmbeddingScore skipped;
        skipped.skip_reason = "latent unscoreable: " + profile.unscoreable_reason;
        return skipped;
    }
    return score_pools(store, profile.pool(decile), profile.non_activating_pool, false, false, backend, config, rng);
}

EmbeddingScore decile_pair_score(const ActivationStore& store, const LatentProfile& profile, int decile_a,
                                 int decile_b, EmbeddingBackend& backend, const EmbeddingScoreConfig& config,
                                 Rng& rng) {
    if (!profile.scoreable) {
        EmbeddingScore skipped;
        skipped.skip_reason = "latent unscoreable: " + profile.unscoreable_reason;
        return skipped;
    }
    return score_pools(store, profile.pool(decile_a), profile.pool(decile_b), true, decile_a == decile_b, backend,
                       config, rng);
}

LatentEmbeddingReport score_latent_deciles(const ActivationStore& store, const LatentProfile& profile,
                                           EmbeddingBackend& backend, const EmbeddingScoreConfig& config,
                                           std::uint64_t seed) {
    LatentEmbeddingReport report;
    report.latent_id = profile.latent_id;
    double sum = 0.0;
    int scored = 0;
    for (int d = 1; d <= kNumDeciles; ++d) {
        Rng rng(derive_seed(seed, profile.latent_id + "#embedding", static_cast<std::uint64_t>(d)));
        auto& slot = report.per_decile[static_cast<std::size_t>(d - 1)];
        slot = score_latent(store, profile, d, backend, config, rng);
        if (slot.auroc) {
            sum += *slot.auroc;
            ++scored;
        }
    }
    if (scored > 0) {
        report.overall = sum / scored;
    }
    return report;
}

std::array<std::array<std::optional<double>, kNumDeciles>, kNumDeciles> decile_pair_matrix(
    const ActivationStore& store, const LatentProfile& profile, EmbeddingBackend& backend,
    const EmbeddingScoreConfig& config, std::uint64_t seed) {
    std::array<std::array<std::optional<double>, kNumDeciles>, kNumDeciles> matrix{};
    // Swapping the roles of two deciles on the same sampled sets leaves the
    // AUROC unchanged, so each unordered pair is sampled once and mirrored.
    for (int a = 1; a <= kNumDeciles; ++a) {
        for (int b = a; b <= kNumDeciles; ++b) {
            Rng rng(derive_seed(seed, profile.latent_id + "#pair", static_cast<std::uint64_t>(a * 10 + b)));
            auto score = decile_pair_score(store, profile, a, b, backend, config, rng);
            matrix[static_cast<std::size_t>(a - 1)][static_cast<std::size_t>(b - 1)] = score.auroc;
            matrix[static_cast<std::size_t>(b - 1)][static_cast<std::size_t>(a - 1)] = score.auroc;
        }
    }
    return matrix;
}

}  // namespace latentprobe
