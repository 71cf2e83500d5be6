#pragma once

#include <chrono>
#include <cstdint>
#include <filesystem>
#include <map>
#include <mutex>
#include <optional>
#include <set>
#include <stdexcept>
#include <string>
#include <unordered_map>
#include <vector>

#include <json.hpp>

#include "latentprobe/task_builder.hpp"
#include "latentprobe/verdict.hpp"

namespace httplib {
class Server;
}

namespace latentprobe {

// Carries the HTTP status the API maps it to.
class AnnotationError : public std::runtime_error {
public:
    AnnotationError(int status, const std::string& message) : std::runtime_error(message), status_(status) {}
    int status() const { return status_; }

private:
    int status_;
};

struct InterleavedQueue {
    std::vector<std::size_t> order;  // indices into the task list
    bool adjacency_avoided = true;   // false when the latent mix made repeats unavoidable
};

// Seeded order in which no two consecutive tasks share a latent whenever the
// per-latent counts allow it.
InterleavedQueue interleave_queue(const std::vector<IntruderTask>& tasks, std::uint64_t seed);

struct AnnotationConfig {
    std::filesystem::path data_dir;
    // Return correctness after each answer. Off by default so annotators
    // carry no feedback from one task to the next.
    bool feedback = false;
};

struct CreatedSession {
    std::string session_id;
    std::size_t total = 0;
    std::vector<std::string> warnings;
};

// Serves a task set to human annotators. Sessions and answers are persisted to
// an append-only session index and verdict log in data_dir, and reloaded on
// construction. All public methods are thread-safe.
class AnnotationService {
public:
    AnnotationService(std::vector<IntruderTask> tasks, AnnotationConfig config);

    CreatedSession create_session(const std::string& annotator_id, std::optional<std::uint64_t> seed = std::nullopt);

    // Client view of the current task: opaque task_id, five example texts and
    // progress. Nothing identifying the latent, decile or intruder. A
    // completion marker once every task is answered.
    nlohmann::json next_task(const std::string& session_id) const;

    // Records the answer to the session's current task and returns a receipt.
    nlohmann::json submit(const std::string& session_id, const std::string& item_id, int choice);

    // Answered tasks only; all sessions when session_id is empty.
    std::vector<Verdict> export_verdicts(const std::string& session_id = {}) const;

    // Real task ids in queue order (operator/debug use, never served).
    std::vector<std::string> queue_task_ids(const std::string& session_id) const;

    const AnnotationConfig& config() const { return config_; }

private:
    struct Session {
        std::string session_id;
        std::string annotator_id;
        std::uint64_t seed = 0;
        std::string created_at;
        std::vector<std::size_t> queue;
        std::vector<Verdict> responses;  // in queue order
    };

    const Session& find(const std::string& session_id) const;
    Session& find(const std::string& session_id);
    std::string item_id(const Session& session, std::size_t queue_index) const;
    void load();
    void append_line(const std::filesystem::path& path, const std::string& line);

    std::vector<IntruderTask> tasks_;
    std::unordered_map<std::string, std::size_t> task_index_;
    AnnotationConfig config_;
    std::map<std::string, Session> sessions_;
    mutable std::mutex mutex_;
};

// Mounts the JSON API:
//   POST /sessions                 {"annotator_id", "seed"?}
//   GET  /sessions/{id}/next
//   POST /sessions/{id}/answers    {"task_id", "choice"}
//   GET  /sessions/{id}/export     line-delimited verdicts
//   GET  /export                   all sessions
// and, when ui_dir is non-empty, serves it statically at /.
void register_annotation_routes(httplib::Server& server, AnnotationService& service,
                                const std::filesystem::path& ui_dir = {});

}  // namespace latentprobe
