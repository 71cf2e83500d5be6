#include "latentprobe/synthetic_bench.hpp"

#include <gtest/gtest.h>
#include <set>

#include "latentprobe/scoring_stats.hpp"
#include "test_support.hpp"

using namespace latentprobe;
using namespace latentprobe::testing;

TEST(generate_corpus, monosemantic_fires_exactly_on_triggers) {
    auto specs = default_specs(1, 0, 0, 100);
    const std::set<std::string> triggers(specs[0].trigger_tokens.begin(), specs[0].trigger_tokens.end());
    const auto records = generate_corpus(specs, 3);
    ASSERT_EQ(records.size(), 100u);
    int positive = 0;
    for (const auto& r : records) {
        if (example_strength(r) > 0) {
            ++positive;
        }
        for (std::size_t i = 0; i < r.activations.size(); ++i) {
            EXPECT_EQ(r.activations[i] > 0, triggers.contains(r.context.tokens[i]));
        }
    }
    EXPECT_GT(positive, 80);
}

TEST(generate_corpus, scalar_strengths_span_all_deciles) {
    const auto specs = default_specs(0, 1, 0, 300);
    const ActivationStore store(generate_corpus(specs, 5));
    const auto profile = compute_profile(store, specs[0].latent_id);
    ASSERT_TRUE(profile.scoreable);
    // Strength is uniform on (0, scale]: decile boundaries sit near scale * k / 10.
    for (int k = 1; k <= 9; ++k) {
        EXPECT_NEAR(profile.decile_boundaries[static_cast<std::size_t>(k - 1)], specs[0].scale * k / 10.0,
                    0.15 * specs[0].scale);
    }
    for (int d = 1; d <= 10; ++d) {
        EXPECT_GE(profile.pool(d).size(), 10u);
    }
}

TEST(generate_corpus, scalar_marker_tracks_strength) {
    auto specs = default_specs(0, 1, 0, 400);
    specs[0].marker_noise = 0.0;
    const auto records = generate_corpus(specs, 6);
    for (const auto& r : records) {
        const double s = example_strength(r);
        if (s == 0) {
            continue;
        }
        int level = -1;
        for (std::size_t i = 0; i < r.activations.size(); ++i) {
            if (r.activations[i] > 0) {
                const auto& markers = specs[0].trigger_tokens;
                level = static_cast<int>(std::find(markers.begin(), markers.end(), r.context.tokens[i]) -
                                         markers.begin());
            }
        }
        EXPECT_EQ(level, static_cast<int>(std::lround(s / specs[0].scale * 9)));
    }
}

TEST(generate_corpus, deterministic_bytes) {
    const auto specs = default_specs(2, 1, 1, 50);
    TempDir dir;
    write_corpus(dir / "a.jsonl", generate_corpus(specs, 10));
    write_corpus(dir / "b.jsonl", generate_corpus(specs, 10));
    write_corpus(dir / "c.jsonl", generate_corpus(specs, 11));
    EXPECT_EQ(read_text(dir / "a.jsonl"), read_text(dir / "b.jsonl"));
    EXPECT_NE(read_text(dir / "a.jsonl"), read_text(dir / "c.jsonl"));
}

TEST(generate_corpus, rejects_bad_specs) {
    auto specs = default_specs(1, 0, 0, 10);
    specs.push_back(specs[0]);
    EXPECT_THROW(generate_corpus(specs, 1), DataError);
    specs.pop_back();
    specs[0].trigger_tokens.clear();
    EXPECT_THROW(generate_corpus(specs, 1), DataError);
}

TEST(specs, json_round_trip) {
    TempDir dir;
    auto specs = default_specs(2, 2, 2, 77);
    specs[3].marker_noise = 0.25;
    write_specs(dir / "s.json", specs);
    const auto back = read_specs(dir / "s.json");
    ASSERT_EQ(back.size(), specs.size());
    for (std::size_t i = 0; i < specs.size(); ++i) {
        EXPECT_EQ(spec_to_json(back[i]), spec_to_json(specs[i]));
    }
    EXPECT_EQ(back[3].kind, LatentKind::scalar);
    EXPECT_EQ(back[3].marker_noise, 0.25);
    EXPECT_THROW(parse_latent_kind("other"), DataError);
}

TEST(oracle, monosemantic_perfect_noise_at_chance) {
    const auto specs = default_specs(3, 0, 3, 200);
    const ActivationStore store(generate_corpus(specs, 1));
    const auto tasks = build_batch(store, compute_profiles(store), {200, TaskVariant::standard}, 2).tasks;
    const auto scores = accuracy(tasks, oracle_evaluate_all(tasks, specs, 3));
    for (const auto& [id, score] : scores) {
        if (id.starts_with("mono")) {
            EXPECT_EQ(score.overall, 1.0) << id;
        } else {
            EXPECT_NEAR(score.overall, 0.2, 0.12) << id;
        }
    }
}

TEST(oracle, unknown_latent_throws) {
    IntruderTask t;
    t.latent_id = "ghost";
    Rng rng(1);
    EXPECT_THROW(oracle_evaluate(t, {}, rng), DataError);
}

TEST(random_evaluate, uniform_choices) {
    std::vector<long> counts(5, 0);
    IntruderTask t;
    t.task_id = "t";
    t.intruder_position = 1;
    Rng rng(4);
    for (int i = 0; i < 10000; ++i) {
        const auto v = random_evaluate(t, rng);
        ASSERT_TRUE(v.choice);
        ++counts[static_cast<std::size_t>(*v.choice - 1)];
    }
    EXPECT_LT(chi_square_uniform(counts), kChiSquare4DofP001);
}

TEST(evaluate_all, independent_of_task_order) {
    const auto specs = default_specs(2, 1, 1, 100);
    const ActivationStore store(generate_corpus(specs, 1));
    auto tasks = build_batch(store, compute_profiles(store), {20, TaskVariant::standard}, 2).tasks;
    const auto forward = random_evaluate_all(tasks, 9);
    std::reverse(tasks.begin(), tasks.end());
    auto backward = random_evaluate_all(tasks, 9);
    std::reverse(backward.begin(), backward.end());
    for (std::size_t i = 0; i < forward.size(); ++i) {
        EXPECT_EQ(forward[i].choice, backward[i].choice);
    }
}

TEST(bag_of_words, highlighted_words_weigh_more) {
    const auto plain = bag_of_words_embedding("alpha beta", 64);
    const auto marked = bag_of_words_embedding("<<alpha>> beta", 64);
    const auto idx = fnv1a64("alpha") % 64;
    EXPECT_EQ(marked[idx] - plain[idx], 2.0);
    const auto span = bag_of_words_embedding("<<alpha beta>> gamma", 64);
    EXPECT_EQ(span, [] {
        Vector v(64, 0.0);
        v[fnv1a64("alpha") % 64] += 3;
        v[fnv1a64("beta") % 64] += 3;
        v[fnv1a64("gamma") % 64] += 1;
        return v;
    }());
}

TEST(synthetic_embeddings, cover_every_text_scoring_requests) {
    const auto specs = default_specs(2, 0, 2, 120);
    const ActivationStore store(generate_corpus(specs, 7));
    PrecomputedEmbeddings table(synthetic_embeddings(store));
    std::map<std::string, double> overall;
    for (const auto& p : compute_profiles(store)) {
        const auto report = score_latent_deciles(store, p, table, {5, 10}, 1);
        ASSERT_TRUE(report.overall) << p.latent_id;
        overall[p.latent_id] = *report.overall;
    }
    EXPECT_GT(overall["mono-000"], overall["noise-000"]);
    EXPECT_GT(overall["mono-001"], overall["noise-001"]);
}
