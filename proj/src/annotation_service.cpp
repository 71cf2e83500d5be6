#include "latentprobe/annotation_service.hpp"

#include <algorithm>
#include <ctime>
#include <fstream>
#include <iomanip>
#include <random>
#include <sstream>

#include <httplib.h>

#include "latentprobe/rng.hpp"

namespace latentprobe {

InterleavedQueue interleave_queue(const std::vector<IntruderTask>& tasks, std::uint64_t seed) {
    Rng rng(derive_seed(seed, "annotation#queue"));
    std::map<std::string, std::vector<std::size_t>> groups;
    for (std::size_t i = 0; i < tasks.size(); ++i) {
        groups[tasks[i].latent_id].push_back(i);
    }
    std::vector<std::vector<std::size_t>> decks;
    for (auto& [latent, members] : groups) {
        rng.shuffle(members);
        decks.push_back(members);
    }
    std::vector<std::size_t> remaining(decks.size());
    std::size_t total = 0;
    for (std::size_t g = 0; g < decks.size(); ++g) {
        remaining[g] = decks[g].size();
        total += remaining[g];
    }

    InterleavedQueue out;
    std::optional<std::size_t> last;
    while (total > 0) {
        // After placing g, the remaining R items can still be ordered with no
        // repeats (and not starting with g) iff count(g) <= floor(R/2) and
        // every other count <= ceil(R/2).
        auto feasible_after = [&](std::size_t g) {
            const std::size_t r = total - 1;
            for (std::size_t h = 0; h < decks.size(); ++h) {
                const std::size_t c = remaining[h] - (h == g ? 1 : 0);
                if (h == g ? c > r / 2 : c > (r + 1) / 2) {
                    return false;
                }
            }
            return true;
        };
        std::vector<std::size_t> feasible;
        std::vector<std::size_t> others;
        for (std::size_t g = 0; g < decks.size(); ++g) {
            if (remaining[g] == 0 || (last && *last == g)) {
                continue;
            }
            others.push_back(g);
            if (feasible_after(g)) {
                feasible.push_back(g);
            }
        }
        std::size_t chosen = 0;
        if (!feasible.empty()) {
            std::size_t weight = 0;
            for (std::size_t g : feasible) {
                weight += remaining[g];
            }
            std::size_t ticket = rng.uniform_index(weight);
            for (std::size_t g : feasible) {
                if (ticket < remaining[g]) {
                    chosen = g;
                    break;
                }
                ticket -= remaining[g];
            }
        } else if (!others.empty()) {
            chosen = *std::max_element(others.begin(), others.end(),
                                       [&](std::size_t a, std::size_t b) { return remaining[a] < remaining[b]; });
        } else {
            chosen = *last;
            out.adjacency_avoided = false;
        }
        const auto& deck = decks[chosen];
        out.order.push_back(deck[deck.size() - remaining[chosen]]);
        --remaining[chosen];
        --total;
        last = chosen;
    }
    return out;
}

namespace {

std::string now_iso8601() {
    const auto now = std::chrono::system_clock::to_time_t(std::chrono::system_clock::now());
    std::tm tm{};
    gmtime_r(&now, &tm);
    std::ostringstream os;
    os << std::put_time(&tm, "%Y-%m-%dT%H:%M:%SZ");
    return os.str();
}

std::string hex64(std::uint64_t x) {
    std::ostringstream os;
    os << std::hex << std::setw(16) << std::setfill('0') << x;
    return os.str();
}

std::filesystem::path sessions_path(const AnnotationConfig& c) { return c.data_dir / "sessions.jsonl"; }
std::filesystem::path verdicts_path(const AnnotationConfig& c) { return c.data_dir / "verdicts.jsonl"; }

}  // namespace

AnnotationService::AnnotationService(std::vector<IntruderTask> tasks, AnnotationConfig config)
    : tasks_(std::move(tasks)), config_(std::move(config)) {
    for (std::size_t i = 0; i < tasks_.size(); ++i) {
        if (!task_index_.emplace(tasks_[i].task_id, i).second) {
            throw AnnotationError(500, "duplicate task id '" + tasks_[i].task_id + "'");
        }
    }
    if (config_.data_dir.empty()) {
        throw AnnotationError(500, "annotation service needs a data directory");
    }
    std::filesystem::create_directories(config_.data_dir);
    load();
}

void AnnotationService::load() {
    if (std::ifstream in(sessions_path(config_)); in) {
        std::string line;
        while (std::getline(in, line)) {
            if (line.empty()) {
                continue;
            }
            const auto j = nlohmann::json::parse(line);
            Session s;
            s.session_id = j.at("session_id").get<std::string>();
            s.annotator_id = j.at("annotator_id").get<std::string>();
            s.seed = j.at("seed").get<std::uint64_t>();
            s.created_at = j.value("created_at", std::string{});
            for (const auto& id : j.at("queue")) {
                auto it = task_index_.find(id.get<std::string>());
                if (it == task_index_.end()) {
                    throw AnnotationError(500, "session '" + s.session_id + "' references task '" +
                                                   id.get<std::string>() + "' missing from the task set");
                }
                s.queue.push_back(it->second);
            }
            sessions_[s.session_id] = std::move(s);
        }
    }
    if (std::ifstream in(verdicts_path(config_)); in) {
        std::string line;
        while (std::getline(in, line)) {
            if (line.empty()) {
                continue;
            }
            auto v = verdict_from_json(nlohmann::json::parse(line));
            auto it = sessions_.find(v.session_id);
            if (it == sessions_.end()) {
                continue;
            }
            auto& s = it->second;
            const std::size_t position = s.responses.size();
            if (position < s.queue.size() && tasks_[s.queue[position]].task_id == v.task_id) {
                s.responses.push_back(std::move(v));
            }
        }
    }
}

void AnnotationService::append_line(const std::filesystem::path& path, const std::string& line) {
    std::ofstream out(path, std::ios::app | std::ios::binary);
    out << line << '\n';
    out.flush();
    if (!out) {
        throw AnnotationError(500, "failed to persist to '" + path.string() + "'");
    }
}

const AnnotationService::Session& AnnotationService::find(const std::string& session_id) const {
    auto it = sessions_.find(session_id);
    if (it == sessions_.end()) {
        throw AnnotationError(404, "unknown session '" + session_id + "'");
    }
    return it->second;
}

AnnotationService::Session& AnnotationService::find(const std::string& session_id) {
    return const_cast<Session&>(std::as_const(*this).find(session_id));
}

std::string AnnotationService::item_id(const Session& session, std::size_t queue_index) const {
    return hex64(fnv1a64(session.session_id + "\n" + tasks_[session.queue[queue_index]].task_id));
}

CreatedSession AnnotationService::create_session(const std::string& annotator_id, std::optional<std::uint64_t> seed) {
    if (annotator_id.empty()) {
        throw AnnotationError(400, "annotator_id is required");
    }
    if (tasks_.empty()) {
        throw AnnotationError(400, "the task set is empty");
    }
    std::lock_guard lock(mutex_);
    Session s;
    s.annotator_id = annotator_id;
    s.seed = seed ? *seed : (static_cast<std::uint64_t>(std::random_device{}()) << 32) ^ std::random_device{}();
    std::random_device device;
    do {
        s.session_id = hex64((static_cast<std::uint64_t>(device()) << 32) ^ device());
    } while (sessions_.contains(s.session_id));
    s.created_at = now_iso8601();
    const auto queue = interleave_queue(tasks_, s.seed);
    s.queue = queue.order;

    CreatedSession created;
    created.session_id = s.session_id;
    created.total = s.queue.size();
    if (!queue.adjacency_avoided) {
        created.warnings.push_back("task set has too few distinct latents; some consecutive tasks share a latent");
    }

    nlohmann::json record;
    record["session_id"] = s.session_id;
    record["annotator_id"] = s.annotator_id;
    record["seed"] = s.seed;
    record["created_at"] = s.created_at;
    nlohmann::json ids = nlohmann::json::array();
    for (std::size_t i : s.queue) {
        ids.push_back(tasks_[i].task_id);
    }
    record["queue"] = std::move(ids);
    append_line(sessions_path(config_), record.dump());
    sessions_[s.session_id] = std::move(s);
    return created;
}

nlohmann::json AnnotationService::next_task(const std::string& session_id) const {
    std::lock_guard lock(mutex_);
    const auto& s = find(session_id);
    const std::size_t position = s.responses.size();
    nlohmann::json view;
    view["session_id"] = s.session_id;
    view["answered"] = position;
    view["total"] = s.queue.size();
    if (position >= s.queue.size()) {
        view["done"] = true;
        return view;
    }
    view["done"] = false;
    view["task_id"] = item_id(s, position);
    view["position"] = position + 1;
    nlohmann::json examples = nlohmann::json::array();
    for (const auto& ex : tasks_[s.queue[position]].examples) {
        examples.push_back(ex.text);
    }
    view["examples"] = std::move(examples);
    return view;
}

nlohmann::json AnnotationService::submit(const std::string& session_id, const std::string& item, int choice) {
    std::lock_guard lock(mutex_);
    auto& s = find(session_id);
    if (choice < 1 || choice > kExamplesPerTask) {
        throw AnnotationError(400, "choice must be between 1 and 5, got " + std::to_string(choice));
    }
    const std::size_t position = s.responses.size();
    for (std::size_t i = 0; i < position; ++i) {
        if (item_id(s, i) == item) {
            throw AnnotationError(409, "task already answered; the first answer stands");
        }
    }
    if (position >= s.queue.size()) {
        throw AnnotationError(409, "session is complete");
    }
    if (item_id(s, position) != item) {
        throw AnnotationError(409, "task '" + item + "' is not the current task of this session");
    }
    const auto& task = tasks_[s.queue[position]];
    Verdict v = make_verdict(task, s.annotator_id, choice, std::to_string(choice), 1);
    v.session_id = s.session_id;
    append_line(verdicts_path(config_), verdict_to_json(v).dump());
    s.responses.push_back(v);

    nlohmann::json receipt;
    receipt["accepted"] = true;
    receipt["answered"] = s.responses.size();
    receipt["remaining"] = s.queue.size() - s.responses.size();
    if (config_.feedback) {
        receipt["correct"] = *v.correct;
    }
    return receipt;
}

std::vector<Verdict> AnnotationService::export_verdicts(const std::string& session_id) const {
    std::lock_guard lock(mutex_);
    std::vector<Verdict> out;
    if (!session_id.empty()) {
        const auto& s = find(session_id);
        out = s.responses;
        return out;
    }
    for (const auto& [id, s] : sessions_) {
        out.insert(out.end(), s.responses.begin(), s.responses.end());
    }
    return out;
}

std::vector<std::string> AnnotationService::queue_task_ids(const std::string& session_id) const {
    std::lock_guard lock(mutex_);
    const auto& s = find(session_id);
    std::vector<std::string> ids;
    for (std::size_t i : s.queue) {
        ids.push_back(tasks_[i].task_id);
    }
    return ids;
}

namespace {

void send_json(httplib::Response& res, int status, const nlohmann::json& body) {
    res.status = status;
    res.set_content(body.dump(), "application/json");
}

void send_error(httplib::Response& res, int status, const std::string& message) {
    send_json(res, status, {{"error", message}});
}

std::string verdict_lines(const std::vector<Verdict>& verdicts) {
    std::string out;
    for (const auto& v : verdicts) {
        out += verdict_to_json(v).dump();
        out += '\n';
    }
    return out;
}

template <typename Handler>
auto guarded(Handler handler) {
    return [handler](const httplib::Request& req, httplib::Response& res) {
        try {
            handler(req, res);
        } catch (const AnnotationError& e) {
            send_error(res, e.status(), e.what());
        } catch (const nlohmann::json::exception& e) {
            send_error(res, 400, std::string("malformed request body: ") + e.what());
        }
    };
}

}  // namespace

void register_annotation_routes(httplib::Server& server, AnnotationService& service,
                                const std::filesystem::path& ui_dir) {
    server.Post("/sessions", guarded([&service](const httplib::Request& req, httplib::Response& res) {
                    const auto body = req.body.empty() ? nlohmann::json::object() : nlohmann::json::parse(req.body);
                    std::optional<std::uint64_t> seed;
                    if (body.contains("seed") && !body["seed"].is_null()) {
                        seed = body["seed"].get<std::uint64_t>();
                    }
                    const auto created = service.create_session(body.value("annotator_id", std::string{}), seed);
                    send_json(res, 201,
                              {{"session_id", created.session_id},
                               {"total", created.total},
                               {"warnings", created.warnings}});
                }));
    server.Get(R"(/sessions/([0-9a-f]+)/next)",
               guarded([&service](const httplib::Request& req, httplib::Response& res) {
                   send_json(res, 200, service.next_task(req.matches[1]));
               }));
    server.Post(R"(/sessions/([0-9a-f]+)/answers)",
                guarded([&service](const httplib::Request& req, httplib::Response& res) {
                    const auto body = nlohmann::json::parse(req.body);
                    if (!body.contains("task_id") || !body["task_id"].is_string() || !body.contains("choice") ||
                        !body["choice"].is_number_integer()) {
                        throw AnnotationError(400, "body must have string task_id and integer choice");
                    }
                    send_json(res, 200,
                              service.submit(req.matches[1], body["task_id"].get<std::string>(),
                                             body["choice"].get<int>()));
                }));
    server.Get(R"(/sessions/([0-9a-f]+)/export)",
               guarded([&service](const httplib::Request& req, httplib::Response& res) {
                   res.set_content(verdict_lines(service.export_verdicts(req.matches[1])), "application/x-ndjson");
               }));
    server.Get("/export", guarded([&service](const httplib::Request&, httplib::Response& res) {
                   res.set_content(verdict_lines(service.export_verdicts()), "application/x-ndjson");
               }));
    if (!ui_dir.empty()) {
        if (!server.set_mount_point("/", ui_dir.string())) {
            throw AnnotationError(500, "cannot mount UI directory '" + ui_dir.string() + "'");
        }
    }
}

}  // namespace latentprobe
