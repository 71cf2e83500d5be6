#include <algorithm>
#include <atomic>
#include <csignal>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <map>
#include <memory>
#include <set>
#include <string>
#include <vector>

#include <CLI11.hpp>
#include <httplib.h>
#include <json.hpp>

#include "latentprobe/activation_store.hpp"
#include "latentprobe/annotation_service.hpp"
#include "latentprobe/embedding_scorer.hpp"
#include "latentprobe/llm_evaluator.hpp"
#include "latentprobe/scoring_stats.hpp"
#include "latentprobe/synthetic_bench.hpp"
#include "latentprobe/task_builder.hpp"
#include "latentprobe/verdict.hpp"

namespace fs = std::filesystem;
using nlohmann::json;
using namespace latentprobe;

namespace {

// Sibling of `path` with its extension replaced by `suffix`, e.g.
// out/tasks.jsonl -> out/tasks.config.json.
fs::path sidecar(const fs::path& path, const std::string& suffix) {
    return path.parent_path() / (path.stem().string() + suffix);
}

void ensure_parent(const fs::path& path) {
    if (path.has_parent_path()) {
        fs::create_directories(path.parent_path());
    }
}

void write_json(const fs::path& path, const json& j) {
    ensure_parent(path);
    std::ofstream out(path, std::ios::binary);
    if (!out) {
        throw std::runtime_error("cannot write '" + path.string() + "'");
    }
    out << j.dump(2) << '\n';
}

// Every option of the subcommand with its effective value, so the run can be
// replayed with --config.
json snapshot(const CLI::App& sub) {
    json options = json::object();
    for (const CLI::Option* opt : sub.get_options()) {
        const std::string name = opt->get_single_name();
        if (name.empty() || name == "help" || name == "help-all") {
            continue;
        }
        if (opt->get_expected_min() == 0) {
            options[name] = opt->count() > 0;
            continue;
        }
        const bool multi = opt->get_expected_max() > 1;
        std::vector<std::string> values = opt->results();
        if (values.empty() && !multi && !opt->get_default_str().empty()) {
            values.push_back(opt->get_default_str());
        }
        if (values.empty()) {
            continue;
        }
        options[name] = multi ? json(values) : json(values.front());
    }
    return json{{"subcommand", sub.get_name()}, {"options", std::move(options)}};
}

std::vector<std::string> replay_args(const fs::path& config_path) {
    std::ifstream in(config_path);
    if (!in) {
        throw std::runtime_error("--config: cannot read '" + config_path.string() + "'");
    }
    const json j = json::parse(in);
    std::vector<std::string> args{j.at("subcommand").get<std::string>()};
    for (const auto& [name, value] : j.at("options").items()) {
        if (value.is_boolean()) {
            if (value.get<bool>()) {
                args.push_back("--" + name);
            }
        } else if (value.is_array()) {
            args.push_back("--" + name);
            for (const auto& v : value) {
                args.push_back(v.get<std::string>());
            }
        } else {
            args.push_back("--" + name);
            args.push_back(value.get<std::string>());
        }
    }
    return args;
}

void report_rejected(const ActivationStore& store) {
    if (!store.rejected().empty()) {
        std::cerr << "warning: " << store.rejected().size() << " malformed line(s) skipped, first at line "
                  << store.rejected().front().line_number << ": " << store.rejected().front().reason << '\n';
    }
}

json rejected_json(const ActivationStore& store) {
    json out = json::array();
    for (const auto& r : store.rejected()) {
        out.push_back({{"line", r.line_number}, {"reason", r.reason}});
    }
    return out;
}

json batch_notes(const TaskBatch& batch, const ActivationStore& store) {
    json skipped = json::array();
    for (const auto& s : batch.skipped) {
        skipped.push_back({{"latent_id", s.latent_id}, {"reason", s.reason}});
    }
    json reused = json::array();
    for (const auto& r : batch.reused) {
        reused.push_back({{"latent_id", r.latent_id}, {"decile", r.decile}, {"reshuffles", r.reshuffles}});
    }
    return {{"tasks", batch.tasks.size()},
            {"skipped", std::move(skipped)},
            {"reused", std::move(reused)},
            {"rejected_lines", rejected_json(store)}};
}

std::string file_safe(const std::string& id) {
    std::string out;
    for (char c : id) {
        out += (std::isalnum(static_cast<unsigned char>(c)) || c == '-' || c == '_') ? c : '_';
    }
    return out;
}

json score_json(const EmbeddingScore& s) {
    json j;
    j["auroc"] = s.auroc ? json(*s.auroc) : json(nullptr);
    j["reused"] = s.reused;
    if (!s.skip_reason.empty()) {
        j["skip_reason"] = s.skip_reason;
    }
    return j;
}

std::atomic<httplib::Server*> g_server{nullptr};

void stop_server(int) {
    if (auto* server = g_server.load()) {
        server->stop();
    }
}

}  // namespace

int main(int argc, char** argv) {
    std::vector<std::string> args(argv + 1, argv + argc);
    if (args.size() == 2 && args[0] == "--config") {
        try {
            args = replay_args(args[1]);
        } catch (const std::exception& e) {
            std::cerr << "error: " << e.what() << '\n';
            return 1;
        }
    }

    CLI::App app{"latentprobe: intruder-detection and example-embedding scoring for SAE latents"};
    app.require_subcommand(1);
    app.option_defaults()->always_capture_default();
    app.set_help_all_flag("--help-all");
    app.footer("Re-run any recorded invocation with: latentprobe --config <output>.config.json");

    // synth
    auto* synth = app.add_subcommand("synth", "Generate a planted-latent activation corpus");
    fs::path synth_out;
    fs::path synth_specs_in;
    fs::path synth_specs_out;
    fs::path synth_embeddings_out;
    int n_mono = 40;
    int n_scalar = 0;
    int n_noise = 10;
    int n_contexts = 200;
    double marker_noise = 1.0;
    std::uint64_t synth_seed = 1;
    synth->add_option("--output", synth_out, "Activation dump to write (jsonl)")->required();
    synth->add_option("--specs", synth_specs_in, "Planted latent specs to use instead of the counts below")
        ->check(CLI::ExistingFile);
    synth->add_option("--specs-output", synth_specs_out, "Where to write the specs (default <output>.specs.json)");
    synth->add_option("--embeddings-output", synth_embeddings_out,
                      "Also write bag-of-words embeddings for score-embedding");
    synth->add_option("--monosemantic", n_mono, "Number of monosemantic latents")->check(CLI::NonNegativeNumber);
    synth->add_option("--scalar", n_scalar, "Number of scalar (graded) latents")->check(CLI::NonNegativeNumber);
    synth->add_option("--noise", n_noise, "Number of noise latents")->check(CLI::NonNegativeNumber);
    synth->add_option("--contexts", n_contexts, "Contexts per latent")->check(CLI::PositiveNumber);
    synth->add_option("--marker-noise", marker_noise, "Scalar marker jitter in levels")
        ->check(CLI::NonNegativeNumber);
    synth->add_option("--seed", synth_seed, "Random seed");

    // profile
    auto* profile = app.add_subcommand("profile", "Compute decile profiles for every latent");
    fs::path profile_in;
    fs::path profile_out;
    profile->add_option("--input", profile_in, "Activation dump (jsonl)")->required()->check(CLI::ExistingFile);
    profile->add_option("--output", profile_out, "Profiles to write (jsonl)")->required();

    // build-tasks
    auto* build = app.add_subcommand("build-tasks", "Build intruder tasks");
    fs::path build_in;
    fs::path build_out;
    std::string variant_name = "standard";
    int tasks_per_latent = 50;
    int sweep_repetitions = 0;
    std::uint64_t build_seed = 1;
    build->add_option("--input", build_in, "Activation dump (jsonl)")->required()->check(CLI::ExistingFile);
    build->add_option("--output", build_out, "Task set to write (jsonl)")->required();
    build->add_option("--variant", variant_name, "Task variant")->check(CLI::IsMember({"standard", "decile"}));
    build->add_option("--tasks-per-latent", tasks_per_latent, "Tasks per latent")->check(CLI::PositiveNumber);
    build->add_option("--sweep-repetitions", sweep_repetitions,
                      "Build every ordered decile pair this many times per latent instead (decile variant)")
        ->check(CLI::NonNegativeNumber);
    build->add_option("--seed", build_seed, "Random seed");

    // eval-llm
    auto* eval_llm = app.add_subcommand("eval-llm", "Ask an OpenAI-compatible chat endpoint to solve tasks");
    fs::path llm_in;
    fs::path llm_out;
    EvaluatorConfig llm;
    int llm_timeout_ms = 60'000;
    int llm_backoff_ms = 500;
    eval_llm->add_option("--input", llm_in, "Task set (jsonl)")->required()->check(CLI::ExistingFile);
    eval_llm->add_option("--output", llm_out, "Verdicts to write (jsonl)")->required();
    eval_llm->add_option("--endpoint", llm.endpoint, "Base URL of the chat endpoint")->required();
    eval_llm->add_option("--model", llm.model, "Model name")->required();
    eval_llm->add_option("--temperature", llm.temperature, "Sampling temperature");
    eval_llm->add_option("--concurrency", llm.concurrency, "Maximum requests in flight")->check(CLI::PositiveNumber);
    eval_llm->add_option("--max-retries", llm.max_retries, "Retries per task")->check(CLI::NonNegativeNumber);
    eval_llm->add_option("--timeout-ms", llm_timeout_ms, "Per-request timeout")->check(CLI::PositiveNumber);
    eval_llm->add_option("--backoff-ms", llm_backoff_ms, "Base retry backoff")->check(CLI::NonNegativeNumber);
    eval_llm->add_option("--evaluator-id", llm.evaluator_id, "Evaluator id (default llm:<model>)");

    // eval-oracle
    auto* eval_oracle = app.add_subcommand("eval-oracle", "Solve tasks on a synthetic corpus from its planted specs");
    fs::path oracle_in;
    fs::path oracle_specs;
    fs::path oracle_out;
    std::uint64_t oracle_seed = 1;
    eval_oracle->add_option("--input", oracle_in, "Task set (jsonl)")->required()->check(CLI::ExistingFile);
    eval_oracle->add_option("--specs", oracle_specs, "Planted specs written by synth")
        ->required()
        ->check(CLI::ExistingFile);
    eval_oracle->add_option("--output", oracle_out, "Verdicts to write (jsonl)")->required();
    eval_oracle->add_option("--seed", oracle_seed, "Random seed for ties");

    // eval-random
    auto* eval_random = app.add_subcommand("eval-random", "Answer every task uniformly at random");
    fs::path random_in;
    fs::path random_out;
    std::uint64_t random_seed = 1;
    eval_random->add_option("--input", random_in, "Task set (jsonl)")->required()->check(CLI::ExistingFile);
    eval_random->add_option("--output", random_out, "Verdicts to write (jsonl)")->required();
    eval_random->add_option("--seed", random_seed, "Random seed");

    // score-embedding
    auto* score_emb = app.add_subcommand("score-embedding", "Score latents by example-embedding AUROC");
    fs::path emb_in;
    fs::path emb_out;
    fs::path emb_table;
    HttpEmbeddingConfig emb_http;
    EmbeddingScoreConfig emb_cfg;
    bool emb_pairs = false;
    std::uint64_t emb_seed = 1;
    score_emb->add_option("--input", emb_in, "Activation dump (jsonl)")->required()->check(CLI::ExistingFile);
    score_emb->add_option("--output", emb_out, "Score file to write (jsonl)")->required();
    auto* emb_file_opt = score_emb->add_option("--embeddings", emb_table, "Precomputed embeddings (jsonl)")
                             ->check(CLI::ExistingFile);
    auto* emb_endpoint_opt =
        score_emb->add_option("--endpoint", emb_http.endpoint, "OpenAI-compatible embeddings endpoint");
    emb_file_opt->excludes(emb_endpoint_opt);
    score_emb->add_option("--model", emb_http.model, "Embedding model name");
    score_emb->add_option("--concurrency", emb_http.concurrency, "Maximum requests in flight")
        ->check(CLI::PositiveNumber);
    score_emb->add_option("--max-retries", emb_http.max_retries, "Retries per batch")->check(CLI::NonNegativeNumber);
    score_emb->add_option("--set-size", emb_cfg.set_size, "Examples per set (N)")->check(CLI::PositiveNumber);
    score_emb->add_option("--iterations", emb_cfg.iterations, "Query rounds per latent decile")
        ->check(CLI::PositiveNumber);
    score_emb->add_flag("--decile-pairs", emb_pairs, "Also compute the 10x10 decile-pair AUROC matrix");
    score_emb->add_option("--seed", emb_seed, "Random seed");

    // stats
    auto* stats = app.add_subcommand("stats", "Scores, bins, decile matrices and agreement tables");
    fs::path stats_tasks;
    std::vector<fs::path> stats_verdicts;
    std::vector<fs::path> stats_score_files;
    std::vector<std::string> stats_ids;
    fs::path stats_out;
    stats->add_option("--input", stats_tasks, "Task set (jsonl)")->check(CLI::ExistingFile);
    stats->add_option("--verdicts", stats_verdicts, "Verdict files (jsonl)")->check(CLI::ExistingFile);
    stats->add_option("--score-files", stats_score_files, "Score files to correlate")->check(CLI::ExistingFile);
    stats->add_option("--ids", stats_ids, "Names for the score files (default: file stems)");
    stats->add_option("--output", stats_out, "Report to write (json)")->required();

    // serve
    auto* serve = app.add_subcommand("serve", "Serve tasks to human annotators");
    fs::path serve_in;
    fs::path serve_data;
    fs::path serve_ui;
    std::string serve_host = "127.0.0.1";
    int serve_port = 8080;
    bool serve_feedback = false;
    serve->add_option("--input", serve_in, "Task set (jsonl)")->required()->check(CLI::ExistingFile);
    serve->add_option("--data-dir", serve_data, "Directory for the session index and verdict log")->required();
    serve->add_option("--ui-dir", serve_ui, "Built UI bundle to serve at /")->check(CLI::ExistingDirectory);
    serve->add_option("--host", serve_host, "Bind address");
    serve->add_option("--port", serve_port, "Port")->check(CLI::Range(1, 65535));
    serve->add_flag("--feedback", serve_feedback, "Tell annotators whether each answer was correct");

    std::reverse(args.begin(), args.end());
    try {
        app.parse(args);
    } catch (const CLI::ParseError& e) {
        return app.exit(e);
    }

    try {
        if (*synth) {
            std::vector<PlantedLatentSpec> specs;
            if (!synth_specs_in.empty()) {
                specs = read_specs(synth_specs_in);
            } else {
                specs = default_specs(n_mono, n_scalar, n_noise, n_contexts);
                for (auto& s : specs) {
                    s.marker_noise = marker_noise;
                }
            }
            if (synth_specs_out.empty()) {
                synth_specs_out = sidecar(synth_out, ".specs.json");
            }
            const auto records = generate_corpus(specs, synth_seed);
            ensure_parent(synth_out);
            write_corpus(synth_out, records);
            ensure_parent(synth_specs_out);
            write_specs(synth_specs_out, specs);
            if (!synth_embeddings_out.empty()) {
                ensure_parent(synth_embeddings_out);
                write_embeddings(synth_embeddings_out, synthetic_embeddings(ActivationStore(records)));
            }
            write_json(sidecar(synth_out, ".config.json"), snapshot(*synth));
            std::cerr << "wrote " << records.size() << " records for " << specs.size() << " latents to "
                      << synth_out.string() << '\n';
        } else if (*profile) {
            const auto store = ActivationStore::ingest(profile_in);
            report_rejected(store);
            ensure_parent(profile_out);
            std::ofstream out(profile_out, std::ios::binary);
            std::size_t scoreable = 0;
            for (const auto& p : compute_profiles(store)) {
                scoreable += p.scoreable ? 1 : 0;
                out << profile_to_json(p, store).dump() << '\n';
            }
            write_json(sidecar(profile_out, ".config.json"), snapshot(*profile));
            std::cerr << scoreable << " of " << store.latent_ids().size() << " latents scoreable\n";
        } else if (*build) {
            const auto store = ActivationStore::ingest(build_in);
            report_rejected(store);
            const auto profiles = compute_profiles(store);
            const auto variant = parse_variant(variant_name);
            TaskBatch batch;
            if (sweep_repetitions > 0) {
                if (variant != TaskVariant::decile) {
                    throw std::runtime_error("--sweep-repetitions requires --variant decile");
                }
                batch = build_decile_sweep(store, profiles, sweep_repetitions, build_seed);
            } else {
                batch = build_batch(store, profiles, BatchConfig{tasks_per_latent, variant}, build_seed);
            }
            ensure_parent(build_out);
            write_tasks(build_out, batch.tasks);
            write_json(sidecar(build_out, ".notes.json"), batch_notes(batch, store));
            write_json(sidecar(build_out, ".config.json"), snapshot(*build));
            std::cerr << "wrote " << batch.tasks.size() << " tasks, skipped " << batch.skipped.size()
                      << " latent(s)\n";
        } else if (*eval_llm) {
            llm.api_key = api_key_from_env();
            llm.request_timeout = std::chrono::milliseconds(llm_timeout_ms);
            llm.backoff_base = std::chrono::milliseconds(llm_backoff_ms);
            const auto tasks = read_tasks(llm_in);
            const auto verdicts = evaluate(tasks, llm);
            ensure_parent(llm_out);
            write_verdicts(llm_out, verdicts);
            write_json(sidecar(llm_out, ".config.json"), snapshot(*eval_llm));
            const auto invalid = std::count_if(verdicts.begin(), verdicts.end(),
                                               [](const Verdict& v) { return !v.choice.has_value(); });
            std::cerr << "evaluated " << verdicts.size() << " tasks, " << invalid << " invalid\n";
        } else if (*eval_oracle) {
            const auto tasks = read_tasks(oracle_in);
            const auto verdicts = oracle_evaluate_all(tasks, read_specs(oracle_specs), oracle_seed);
            ensure_parent(oracle_out);
            write_verdicts(oracle_out, verdicts);
            write_json(sidecar(oracle_out, ".config.json"), snapshot(*eval_oracle));
        } else if (*eval_random) {
            const auto tasks = read_tasks(random_in);
            const auto verdicts = random_evaluate_all(tasks, random_seed);
            ensure_parent(random_out);
            write_verdicts(random_out, verdicts);
            write_json(sidecar(random_out, ".config.json"), snapshot(*eval_random));
        } else if (*score_emb) {
            std::unique_ptr<EmbeddingBackend> backend;
            if (!emb_table.empty()) {
                backend = std::make_unique<PrecomputedEmbeddings>(PrecomputedEmbeddings::from_file(emb_table));
            } else if (!emb_http.endpoint.empty()) {
                emb_http.api_key = api_key_from_env();
                backend = std::make_unique<HttpEmbeddingBackend>(emb_http);
            } else {
                throw std::runtime_error("score-embedding needs --embeddings or --endpoint");
            }
            const auto store = ActivationStore::ingest(emb_in);
            report_rejected(store);
            ScoreTable table;
            json details = json::object();
            for (const auto& p : compute_profiles(store)) {
                json entry;
                if (!p.scoreable) {
                    entry["skip_reason"] = p.unscoreable_reason;
                    details[p.latent_id] = std::move(entry);
                    continue;
                }
                const auto report = score_latent_deciles(store, p, *backend, emb_cfg, emb_seed);
                json per = json::object();
                ScoreEntry score_entry;
                for (int d = 1; d <= kNumDeciles; ++d) {
                    const auto& s = report.per_decile[static_cast<std::size_t>(d - 1)];
                    per[std::to_string(d)] = score_json(s);
                    if (s.auroc) {
                        score_entry.per_decile[d] = *s.auroc;
                    }
                }
                entry["overall"] = report.overall ? json(*report.overall) : json(nullptr);
                entry["per_decile"] = std::move(per);
                if (emb_pairs) {
                    json rows = json::array();
                    for (const auto& row : decile_pair_matrix(store, p, *backend, emb_cfg, emb_seed)) {
                        json r = json::array();
                        for (const auto& cell : row) {
                            r.push_back(cell ? json(*cell) : json(nullptr));
                        }
                        rows.push_back(std::move(r));
                    }
                    entry["decile_pairs"] = std::move(rows);
                }
                if (report.overall) {
                    score_entry.score = *report.overall;
                    table[p.latent_id] = std::move(score_entry);
                }
                details[p.latent_id] = std::move(entry);
            }
            ensure_parent(emb_out);
            write_score_file(emb_out, table);
            write_json(sidecar(emb_out, ".details.json"), details);
            write_json(sidecar(emb_out, ".config.json"), snapshot(*score_emb));
            std::cerr << "scored " << table.size() << " latent(s)\n";
        } else if (*stats) {
            ensure_parent(stats_out);
            if (!stats_score_files.empty()) {
                if (!stats_verdicts.empty()) {
                    throw std::runtime_error("--score-files cannot be combined with --verdicts");
                }
                CorrelationReport report;
                if (stats_ids.empty()) {
                    report = agreement_table(stats_score_files);
                } else {
                    if (stats_ids.size() != stats_score_files.size()) {
                        throw std::runtime_error("--ids needs one name per --score-files entry");
                    }
                    std::vector<ScoreTable> tables;
                    for (const auto& f : stats_score_files) {
                        tables.push_back(read_score_file(f));
                    }
                    report = agreement_table(stats_ids, tables);
                }
                write_json(stats_out, correlation_to_json(report));
            } else {
                if (stats_tasks.empty() || stats_verdicts.empty()) {
                    throw std::runtime_error("stats needs --input and --verdicts, or --score-files");
                }
                const auto tasks = read_tasks(stats_tasks);
                std::vector<Verdict> verdicts;
                for (const auto& f : stats_verdicts) {
                    auto part = read_verdicts(f);
                    verdicts.insert(verdicts.end(), part.begin(), part.end());
                }
                write_json(stats_out, score_report(tasks, verdicts));
                std::vector<IntruderTask> standard;
                for (const auto& t : tasks) {
                    if (t.variant == TaskVariant::standard) {
                        standard.push_back(t);
                    }
                }
                if (!standard.empty()) {
                    std::vector<Verdict> standard_verdicts;
                    std::set<std::string> standard_ids;
                    for (const auto& t : standard) {
                        standard_ids.insert(t.task_id);
                    }
                    for (const auto& v : verdicts) {
                        if (standard_ids.contains(v.task_id)) {
                            standard_verdicts.push_back(v);
                        }
                    }
                    for (const auto& [evaluator, scores] : accuracy_by_evaluator(standard, standard_verdicts)) {
                        write_score_file(sidecar(stats_out, "." + file_safe(evaluator) + ".scores.jsonl"),
                                         to_score_table(scores));
                    }
                }
            }
            write_json(sidecar(stats_out, ".config.json"), snapshot(*stats));
        } else if (*serve) {
            AnnotationService service(read_tasks(serve_in), AnnotationConfig{serve_data, serve_feedback});
            write_json(serve_data / "serve.config.json", snapshot(*serve));
            httplib::Server server;
            register_annotation_routes(server, service, serve_ui);
            g_server = &server;
            std::signal(SIGINT, stop_server);
            std::signal(SIGTERM, stop_server);
            std::cerr << "serving on http://" << serve_host << ":" << serve_port << '\n';
            if (!server.listen(serve_host, serve_port)) {
                throw std::runtime_error("cannot listen on " + serve_host + ":" + std::to_string(serve_port));
            }
            g_server = nullptr;
        }
    } catch (const std::exception& e) {
        std::cerr << "error: " << e.what() << '\n';
        return 1;
    }
    return 0;
}
