#include "latentprobe/activation_store.hpp"

#include <algorithm>
#include <gtest/gtest.h>

#include "test_support.hpp"

using namespace latentprobe;
using namespace latentprobe::testing;

namespace {

std::string line(const ActivationRecord& r) { return record_to_json(r).dump(); }

}  // namespace

TEST(parse_record, round_trips) {
    const auto r = make_record("L1", "c1", {"a", "b"}, {0.0, 1.5});
    const auto parsed = parse_record(line(r));
    EXPECT_EQ(parsed.latent_id, "L1");
    EXPECT_EQ(parsed.context.context_id, "c1");
    EXPECT_EQ(parsed.context.tokens, (std::vector<std::string>{"a", "b"}));
    EXPECT_EQ(parsed.activations, (std::vector<double>{0.0, 1.5}));
}

TEST(parse_record, rejects_contract_violations) {
    EXPECT_THROW(parse_record(R"({"latent_id":"L","context_id":"c","tokens":["a"],"activations":[1,2]})"),
                 DataError);
    EXPECT_THROW(parse_record(R"({"latent_id":"L","context_id":"c","tokens":["a"],"activations":[-1]})"),
                 DataError);
    EXPECT_THROW(parse_record(R"({"latent_id":"L","context_id":"c","tokens":["a"]})"), DataError);
    EXPECT_THROW(parse_record(R"({"latent_id":"L","context_id":"c","tokens":[],"activations":[]})"), DataError);
    EXPECT_THROW(parse_record(R"({"latent_id":"L","context_id":"c","tok)"), DataError);
    EXPECT_THROW(parse_record("[1,2]"), DataError);
}

TEST(ingest, three_good_lines) {
    TempDir dir;
    std::string text;
    for (int i = 0; i < 3; ++i) {
        text += line(make_record("L", "c" + std::to_string(i), {"x", "y"}, {0.0, 1.0 + i})) + "\n";
    }
    write_text(dir / "dump.jsonl", text);
    const auto store = ActivationStore::ingest(dir / "dump.jsonl");
    EXPECT_EQ(store.records().size(), 3u);
    EXPECT_TRUE(store.rejected().empty());
}

TEST(ingest, truncated_line_is_rejected_with_line_number) {
    TempDir dir;
    const std::string good1 = line(make_record("L", "c1", {"x"}, {1.0}));
    const std::string good2 = line(make_record("L", "c2", {"x"}, {2.0}));
    write_text(dir / "dump.jsonl", good1 + "\n" + good2.substr(0, good2.size() / 2) + "\n" + good2 + "\n");
    const auto store = ActivationStore::ingest(dir / "dump.jsonl");
    EXPECT_EQ(store.records().size(), 2u);
    ASSERT_EQ(store.rejected().size(), 1u);
    EXPECT_EQ(store.rejected()[0].line_number, 2u);
}

TEST(ingest, empty_file_has_no_records) {
    TempDir dir;
    write_text(dir / "dump.jsonl", "");
    try {
        ActivationStore::ingest(dir / "dump.jsonl");
        FAIL() << "expected DataError";
    } catch (const DataError& e) {
        EXPECT_NE(std::string(e.what()).find("no records"), std::string::npos);
    }
}

TEST(ingest, missing_file_throws) { EXPECT_THROW(ActivationStore::ingest("/nonexistent/dump.jsonl"), DataError); }

TEST(store, rejects_inconsistent_contexts_and_duplicates) {
    EXPECT_THROW(ActivationStore({make_record("A", "c", {"x"}, {1}), make_record("B", "c", {"y"}, {1})}), DataError);
    EXPECT_THROW(ActivationStore({make_record("A", "c", {"x"}, {1}), make_record("A", "c", {"x"}, {2})}), DataError);
    EXPECT_NO_THROW(ActivationStore({make_record("A", "c", {"x"}, {1}), make_record("B", "c", {"x"}, {0})}));
}

TEST(store, absent_records_count_as_zero) {
    const ActivationStore store({make_record("A", "c", {"x", "y"}, {0, 2.5})});
    EXPECT_EQ(store.strength_on_context("A", "c"), 2.5);
    EXPECT_EQ(store.strength_on_context("B", "c"), 0.0);
}

TEST(example_strength, is_the_max_activation) {
    EXPECT_EQ(example_strength(make_record("L", "c", {"a", "b", "c", "d"}, {0, 0, 3.5, 1.2})), 3.5);
    EXPECT_EQ(example_strength(make_record("L", "c", {"a", "b", "c", "d"}, {0, 0, 0, 0})), 0.0);
    EXPECT_EQ(example_strength(make_record("L", "c", {"a", "b"}, {2, 2})), 2.0);
}

TEST(window, centers_the_argmax) {
    const auto w = window(peaked_record("L", "c", 100, 50, 1.0));
    ASSERT_EQ(w.context.tokens.size(), 32u);
    EXPECT_EQ(w.context.tokens.front(), "c_w34");
    EXPECT_EQ(w.context.tokens.back(), "c_w65");
}

TEST(window, short_context_is_unchanged) {
    const auto r = peaked_record("L", "c", 20, 5, 1.0);
    const auto w = window(r);
    EXPECT_EQ(w.context.tokens, r.context.tokens);
}

TEST(window, clamps_to_edges) {
    auto w = window(peaked_record("L", "c", 100, 2, 1.0));
    EXPECT_EQ(w.context.tokens.front(), "c_w0");
    EXPECT_EQ(w.context.tokens.back(), "c_w31");
    w = window(peaked_record("L", "c", 100, 98, 1.0));
    EXPECT_EQ(w.context.tokens.front(), "c_w68");
    EXPECT_EQ(w.context.tokens.back(), "c_w99");
}

TEST(window, always_contains_the_argmax) {
    Rng rng(7);
    for (int trial = 0; trial < 500; ++trial) {
        const std::size_t n = 1 + rng.uniform_index(120);
        const std::size_t peak = rng.uniform_index(n);
        const auto w = window(peaked_record("L", "c", n, peak, 1.0));
        EXPECT_EQ(w.context.tokens.size(), std::min<std::size_t>(n, 32));
        EXPECT_EQ(example_strength(w), 1.0);
    }
}

TEST(nearest_rank_quantile, matches_sort_and_index_oracle) {
    Rng rng(3);
    for (int trial = 0; trial < 200; ++trial) {
        const std::size_t n = 1 + rng.uniform_index(60);
        std::vector<double> data;
        for (std::size_t i = 0; i < n; ++i) {
            data.push_back(rng.uniform(0, 10));
        }
        std::sort(data.begin(), data.end());
        for (int p = 10; p <= 90; p += 10) {
            const double exact_rank = std::ceil(p / 100.0 * static_cast<double>(n) - 1e-12);
            const auto rank = static_cast<std::size_t>(std::max(1.0, exact_rank));
            EXPECT_EQ(nearest_rank_quantile(data, p), data[rank - 1]);
        }
    }
}

TEST(compute_profile, ten_strengths_one_per_decile) {
    const auto store = latent_store(range_strengths(1, 10), 3);
    const auto p = compute_profile(store, "L");
    ASSERT_TRUE(p.scoreable);
    for (int d = 1; d <= kNumDeciles; ++d) {
        ASSERT_EQ(p.pool(d).size(), 1u);
        EXPECT_EQ(store.strength(p.pool(d)[0]), static_cast<double>(d));
    }
}

TEST(compute_profile, hundred_strengths_have_round_boundaries) {
    const auto store = latent_store(range_strengths(1, 100), 3);
    const auto p = compute_profile(store, "L");
    for (int k = 1; k <= 9; ++k) {
        EXPECT_EQ(p.decile_boundaries[static_cast<std::size_t>(k - 1)], 10.0 * k);
    }
    for (int d = 1; d <= kNumDeciles; ++d) {
        EXPECT_EQ(p.pool(d).size(), 10u);
    }
}

TEST(compute_profile, five_positives_are_unscoreable) {
    const auto p = compute_profile(latent_store(range_strengths(1, 5), 3), "L");
    EXPECT_FALSE(p.scoreable);
    EXPECT_FALSE(p.unscoreable_reason.empty());
}

TEST(compute_profile, zero_strength_records_are_not_positive) {
    auto strengths = range_strengths(1, 12);
    strengths.push_back(0.0);
    const auto p = compute_profile(latent_store(strengths, 0), "L");
    EXPECT_EQ(p.positive_count, 12u);
}

TEST(compute_profile, pools_partition_positives_and_respect_ordering) {
    Rng rng(11);
    for (int trial = 0; trial < 50; ++trial) {
        std::vector<double> strengths;
        const std::size_t n = 10 + rng.uniform_index(200);
        for (std::size_t i = 0; i < n; ++i) {
            strengths.push_back(static_cast<double>(1 + rng.uniform_index(30)));  // plenty of ties
        }
        const auto store = latent_store(strengths, 2);
        const auto p = compute_profile(store, "L");
        std::size_t total = 0;
        double prev_max = -1;
        for (int d = 1; d <= kNumDeciles; ++d) {
            total += p.pool(d).size();
            double lo = 1e300;
            double hi = -1;
            for (RecordRef r : p.pool(d)) {
                lo = std::min(lo, store.strength(r));
                hi = std::max(hi, store.strength(r));
            }
            if (!p.pool(d).empty()) {
                EXPECT_GT(lo, prev_max);
                prev_max = hi;
            }
        }
        EXPECT_EQ(total, n);
        EXPECT_TRUE(std::is_sorted(p.decile_boundaries.begin(), p.decile_boundaries.end()));
    }
}

TEST(compute_profile, non_activating_pool_excludes_contexts_where_latent_fires) {
    std::vector<ActivationRecord> records;
    for (int i = 0; i < 10; ++i) {
        records.push_back(peaked_record("L", "p" + std::to_string(i), 4, 0, 1.0 + i));
    }
    records.push_back(peaked_record("M", "p0", 4, 1, 2.0));  // shares a context with L
    auto silent = peaked_record("M", "q", 4, 1, 2.0);
    records.push_back(silent);
    auto l_zero = silent;
    l_zero.latent_id = "L";
    l_zero.activations.assign(4, 0.0);
    records.push_back(l_zero);  // L explicitly silent on q
    records.push_back(peaked_record("M", "r", 4, 2, 2.0));
    records.push_back(peaked_record("N", "r", 4, 2, 3.0));  // same context, listed once
    const ActivationStore store(records);
    const auto p = compute_profile(store, "L");
    std::vector<std::string> ctx;
    for (RecordRef r : p.non_activating_pool) {
        ctx.push_back(store.record(r).context.context_id);
    }
    EXPECT_EQ(ctx, (std::vector<std::string>{"q", "r"}));
}
