#include "latentprobe/scoring_stats.hpp"

#include <gtest/gtest.h>

#include "test_support.hpp"

using namespace latentprobe;
using namespace latentprobe::testing;

namespace {

IntruderTask bare_task(const std::string& id, const std::string& latent, int decile, int position,
                       std::optional<int> intruder_decile = std::nullopt) {
    IntruderTask t;
    t.task_id = id;
    t.latent_id = latent;
    t.majority_decile = decile;
    t.intruder_position = position;
    t.intruder_decile = intruder_decile;
    t.variant = intruder_decile ? TaskVariant::decile : TaskVariant::standard;
    return t;
}

Verdict answer(const IntruderTask& t, const std::string& evaluator, std::optional<int> choice) {
    return make_verdict(t, evaluator, choice);
}

// Textbook n*Sxy - Sx*Sy form in long double.
double pearson_oracle(const std::vector<double>& x, const std::vector<double>& y) {
    long double n = x.size(), sx = 0, sy = 0, sxx = 0, syy = 0, sxy = 0;
    for (std::size_t i = 0; i < x.size(); ++i) {
        sx += x[i];
        sy += y[i];
        sxx += static_cast<long double>(x[i]) * x[i];
        syy += static_cast<long double>(y[i]) * y[i];
        sxy += static_cast<long double>(x[i]) * y[i];
    }
    return static_cast<double>((n * sxy - sx * sy) / std::sqrt((n * sxx - sx * sx) * (n * syy - sy * sy)));
}

// Rank = 1 + #smaller + (#equal - 1) / 2, by direct counting.
std::vector<double> rank_oracle(const std::vector<double>& v) {
    std::vector<double> r;
    for (double a : v) {
        double smaller = 0, equal = 0;
        for (double b : v) {
            smaller += b < a ? 1 : 0;
            equal += b == a ? 1 : 0;
        }
        r.push_back(1 + smaller + (equal - 1) / 2);
    }
    return r;
}

}  // namespace

TEST(accuracy, ratio_in_single_decile) {
    std::vector<IntruderTask> tasks;
    std::vector<Verdict> verdicts;
    for (int i = 0; i < 10; ++i) {
        tasks.push_back(bare_task("t" + std::to_string(i), "L", 3, 2));
        verdicts.push_back(answer(tasks.back(), "e", i < 8 ? 2 : 4));
    }
    const auto s = accuracy(tasks, verdicts);
    EXPECT_DOUBLE_EQ(s.at("L").overall, 0.8);
    EXPECT_EQ(s.at("L").n_tasks, 10);
}

TEST(accuracy, unweighted_mean_over_deciles) {
    std::vector<IntruderTask> tasks;
    std::vector<Verdict> verdicts;
    for (int i = 0; i < 5; ++i) {
        tasks.push_back(bare_task("a" + std::to_string(i), "L", 1, 1));
        verdicts.push_back(answer(tasks.back(), "e", 1));
    }
    for (int i = 0; i < 20; ++i) {
        tasks.push_back(bare_task("b" + std::to_string(i), "L", 2, 1));
        verdicts.push_back(answer(tasks.back(), "e", i % 2 == 0 ? 1 : 5));
    }
    EXPECT_DOUBLE_EQ(accuracy(tasks, verdicts).at("L").overall, 0.75);
}

TEST(accuracy, invalid_counts_as_incorrect) {
    std::vector<IntruderTask> tasks;
    std::vector<Verdict> verdicts;
    for (int i = 0; i < 4; ++i) {
        tasks.push_back(bare_task("t" + std::to_string(i), "L", 1 + i, 3));
        verdicts.push_back(answer(tasks.back(), "e", std::nullopt));
    }
    EXPECT_EQ(accuracy(tasks, verdicts).at("L").overall, 0.0);
}

TEST(accuracy, correctness_recomputed_and_unknown_task_rejected) {
    const auto t = bare_task("t", "L", 1, 3);
    auto v = answer(t, "e", 2);
    v.correct = true;  // a tampered flag does not count
    EXPECT_EQ(accuracy({t}, {v}).at("L").overall, 0.0);
    v.task_id = "missing";
    EXPECT_THROW(accuracy({t}, {v}), StatsError);
}

TEST(accuracy_by_evaluator, separates_annotators) {
    const auto t = bare_task("t", "L", 1, 3);
    const auto split = accuracy_by_evaluator({t}, {answer(t, "alice", 3), answer(t, "bob", 1)});
    EXPECT_EQ(split.at("alice").at("L").overall, 1.0);
    EXPECT_EQ(split.at("bob").at("L").overall, 0.0);
}

TEST(interpretability_bin, edges) {
    EXPECT_EQ(interpretability_bin(0.0), 0);
    EXPECT_EQ(interpretability_bin(0.2), 0);
    EXPECT_EQ(interpretability_bin(std::nextafter(0.2, 1.0)), 1);
    EXPECT_EQ(interpretability_bin(0.4), 1);
    EXPECT_EQ(interpretability_bin(std::nextafter(0.4, 1.0)), 2);
    EXPECT_EQ(interpretability_bin(0.6), 2);
    EXPECT_EQ(interpretability_bin(0.65), 3);
    EXPECT_EQ(interpretability_bin(0.8), 3);
    EXPECT_EQ(interpretability_bin(std::nextafter(0.8, 1.0)), 4);
    EXPECT_EQ(interpretability_bin(1.0), 4);
    EXPECT_THROW(interpretability_bin(1.01), StatsError);
    EXPECT_THROW(interpretability_bin(-0.01), StatsError);
    EXPECT_THROW(interpretability_bin(std::nan("")), StatsError);
}

TEST(decile_matrix, empty_cells_are_no_data) {
    const auto t = bare_task("t", "L", 10, 2, 1);
    const auto m = decile_matrix({t}, {answer(t, "e", 2)});
    EXPECT_EQ(m.cells[9][0].accuracy(), 1.0);
    EXPECT_FALSE(m.cells[0][9].accuracy());
    EXPECT_FALSE(m.cells[4][4].accuracy());
}

TEST(decile_matrix, random_answers_near_chance) {
    Rng rng(3);
    std::vector<IntruderTask> tasks;
    std::vector<Verdict> verdicts;
    const int per_cell = 400;
    for (int m = 1; m <= 10; ++m) {
        for (int i = 1; i <= 10; ++i) {
            if (m == i) {
                continue;
            }
            for (int k = 0; k < per_cell; ++k) {
                tasks.push_back(bare_task(std::to_string(m) + "-" + std::to_string(i) + "-" + std::to_string(k), "L",
                                          m, rng.uniform_int(1, 5), i));
                verdicts.push_back(answer(tasks.back(), "random", rng.uniform_int(1, 5)));
            }
        }
    }
    const auto matrix = decile_matrix(tasks, verdicts);
    const double sigma = std::sqrt(0.2 * 0.8 / per_cell);
    for (int m = 0; m < 10; ++m) {
        for (int i = 0; i < 10; ++i) {
            const auto a = matrix.cells[static_cast<std::size_t>(m)][static_cast<std::size_t>(i)].accuracy();
            if (m == i) {
                EXPECT_FALSE(a);
            } else {
                ASSERT_TRUE(a);
                // 90 cells: a 4 sigma band keeps the family-wise false alarm rate small.
                EXPECT_NEAR(*a, 0.2, 4 * sigma);
            }
        }
    }
}

TEST(pearson, examples) {
    EXPECT_DOUBLE_EQ(pearson(std::vector<double>{1, 2, 3}, std::vector<double>{2, 4, 6}), 1.0);
    EXPECT_DOUBLE_EQ(pearson(std::vector<double>{1, 2, 3}, std::vector<double>{3, 2, 1}), -1.0);
    // Hand computation: dx = (-1.5,-0.5,0.5,1.5), dy = (-6.5,-3.5,1.5,8.5),
    // Sxy = 25, Sxx = 5, Syy = 129, r = 25 / sqrt(645).
    EXPECT_NEAR(pearson(std::vector<double>{1, 2, 3, 4}, std::vector<double>{1, 4, 9, 16}), 25 / std::sqrt(645.0),
                1e-15);
    EXPECT_THROW(pearson(std::vector<double>{1, 2}, std::vector<double>{1, 2, 3}), StatsError);
    EXPECT_THROW(pearson(std::vector<double>{1}, std::vector<double>{1}), StatsError);
    EXPECT_THROW(pearson(std::vector<double>{1, 1}, std::vector<double>{1, 2}), StatsError);
}

TEST(spearman, examples) {
    EXPECT_DOUBLE_EQ(spearman(std::vector<double>{1, 2, 3}, std::vector<double>{1, 8, 27}), 1.0);
    EXPECT_DOUBLE_EQ(spearman(std::vector<double>{1, 2, 3}, std::vector<double>{27, 8, 1}), -1.0);
    // Ranks (1.5, 1.5, 3) vs (1, 2, 3): r = 1.5 / sqrt(1.5 * 2).
    EXPECT_NEAR(spearman(std::vector<double>{1, 1, 2}, std::vector<double>{1, 2, 3}), 1.5 / std::sqrt(3.0), 1e-15);
}

TEST(correlations, match_oracles_on_random_instances) {
    Rng rng(2024);
    for (int trial = 0; trial < 100; ++trial) {
        const std::size_t n = 3 + rng.uniform_index(50);
        std::vector<double> x(n), y(n);
        for (std::size_t i = 0; i < n; ++i) {
            x[i] = trial % 3 == 0 ? static_cast<double>(rng.uniform_index(6)) : rng.normal();
            y[i] = 0.5 * x[i] + (trial % 3 == 1 ? static_cast<double>(rng.uniform_index(4)) : rng.normal());
        }
        EXPECT_NEAR(pearson(x, y), pearson_oracle(x, y), 1e-12);
        EXPECT_EQ(average_ranks(x), rank_oracle(x));
        EXPECT_NEAR(spearman(x, y), pearson_oracle(rank_oracle(x), rank_oracle(y)), 1e-12);
    }
}

TEST(agreement_table, self_disjoint_and_shape) {
    const ScoreTable a{{"x", {0.1, {}}}, {"y", {0.5, {}}}, {"z", {0.9, {}}}};
    const ScoreTable b{{"x", {0.3, {}}}, {"y", {0.2, {}}}, {"z", {0.95, {}}}, {"w", {0.5, {}}}};
    const ScoreTable c{{"x", {0.9, {}}}, {"y", {0.5, {}}}, {"z", {0.1, {}}}};
    const ScoreTable disjoint{{"p", {0.1, {}}}, {"q", {0.2, {}}}};

    const auto self = agreement_table({"a", "a2"}, {a, a});
    EXPECT_DOUBLE_EQ(*self.pearson[0][1], 1.0);
    EXPECT_DOUBLE_EQ(*self.spearman[0][0], 1.0);
    try {
        agreement_table({"a", "d"}, {a, disjoint});
        FAIL();
    } catch (const StatsError& e) {
        EXPECT_NE(std::string(e.what()).find("no overlap"), std::string::npos);
    }

    const auto three = agreement_table({"a", "b", "c"}, {a, b, c});
    EXPECT_EQ(three.latents, (std::vector<std::string>{"x", "y", "z"}));
    ASSERT_EQ(three.pearson.size(), 3u);
    for (std::size_t i = 0; i < 3; ++i) {
        ASSERT_EQ(three.pearson[i].size(), 3u);
        EXPECT_DOUBLE_EQ(*three.pearson[i][i], 1.0);
        for (std::size_t j = 0; j < 3; ++j) {
            EXPECT_EQ(three.pearson[i][j], three.pearson[j][i]);
            EXPECT_EQ(three.spearman[i][j], three.spearman[j][i]);
            EXPECT_EQ(three.n[i][j], 3u);
        }
    }
    EXPECT_DOUBLE_EQ(*three.spearman[0][2], -1.0);
    EXPECT_NEAR(*three.pearson[0][1], pearson_oracle({0.1, 0.5, 0.9}, {0.3, 0.2, 0.95}), 1e-12);
    // bins: a = (0, 2, 4), c = (4, 2, 0)
    EXPECT_EQ(three.bin_agreement[0][2][0][4], 1);
    EXPECT_EQ(three.bin_agreement[0][2][2][2], 1);
    EXPECT_EQ(three.bin_agreement[0][2][4][0], 1);
}

TEST(score_files, round_trip_and_file_agreement) {
    TempDir dir;
    const ScoreTable a{{"x", {0.1, {{1, 0.2}, {10, 0.0}}}}, {"y", {0.5, {}}}};
    write_score_file(dir / "a.jsonl", a);
    const auto back = read_score_file(dir / "a.jsonl");
    ASSERT_EQ(back.size(), 2u);
    EXPECT_EQ(back.at("x").per_decile, (std::map<int, double>{{1, 0.2}, {10, 0.0}}));
    write_score_file(dir / "b.jsonl", {{"x", {0.3, {}}}, {"y", {0.6, {}}}});
    const auto report = agreement_table(std::vector<std::filesystem::path>{dir / "a.jsonl", dir / "b.jsonl"});
    EXPECT_EQ(report.ids, (std::vector<std::string>{"a", "b"}));
    write_text(dir / "bad.jsonl", R"({"latent_id":"x","score":1.5})" "\n");
    EXPECT_THROW(read_score_file(dir / "bad.jsonl"), StatsError);
}

TEST(stratify_by_bin, groups_decile_curves) {
    std::map<std::string, LatentScore> scores;
    scores["hi"].overall = 0.9;
    scores["hi"].per_decile[1] = {9, 10};
    scores["hi2"].overall = 0.85;
    scores["hi2"].per_decile[1] = {7, 10};
    scores["lo"].overall = 0.1;
    scores["lo"].per_decile[2] = {1, 10};
    const auto s = stratify_by_bin(scores);
    EXPECT_EQ(s.latents_per_bin[4], 2);
    EXPECT_EQ(s.latents_per_bin[0], 1);
    EXPECT_DOUBLE_EQ(*s.curves[4][0], 0.8);
    EXPECT_FALSE(s.curves[4][1]);
    EXPECT_DOUBLE_EQ(*s.curves[0][1], 0.1);
}

TEST(score_report, splits_evaluators_and_variants) {
    const auto s1 = bare_task("s1", "L", 1, 2);
    const auto d1 = bare_task("d1", "L", 10, 4, 1);
    const auto report = score_report({s1, d1}, {answer(s1, "human:a", 2), answer(d1, "human:a", 4),
                                                answer(s1, "llm:m", std::nullopt)});
    const auto& a = report["evaluators"]["human:a"];
    EXPECT_EQ(a["standard"]["latents"][0]["score"], 1.0);
    EXPECT_EQ(a["standard"]["latents"][0]["bin"], 4);
    EXPECT_EQ(a["decile_pairs"]["accuracy"][9][0], 1.0);
    EXPECT_TRUE(a["decile_pairs"]["accuracy"][0][9].is_null());
    const auto& m = report["evaluators"]["llm:m"];
    EXPECT_EQ(m["invalid_verdicts"], 1);
    EXPECT_EQ(m["standard"]["latents"][0]["score"], 0.0);
    EXPECT_FALSE(m.contains("decile_pairs"));
}
