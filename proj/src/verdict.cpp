#include "latentprobe/verdict.hpp"

#include <fstream>

namespace latentprobe {

Verdict make_verdict(const IntruderTask& task, std::string evaluator_id, std::optional<int> choice,
                     std::string raw_response, int attempts) {
    Verdict v;
    v.task_id = task.task_id;
    v.evaluator_id = std::move(evaluator_id);
    v.raw_response = std::move(raw_response);
    v.attempts = attempts;
    if (choice && *choice >= 1 && *choice <= kExamplesPerTask) {
        v.choice = choice;
        v.correct = (*choice == task.intruder_position);
    }
    return v;
}

nlohmann::json verdict_to_json(const Verdict& v) {
    nlohmann::json j;
    j["task_id"] = v.task_id;
    j["evaluator_id"] = v.evaluator_id;
    j["choice"] = v.choice ? nlohmann::json(*v.choice) : nlohmann::json(nullptr);
    j["correct"] = v.correct ? nlohmann::json(*v.correct) : nlohmann::json(nullptr);
    j["raw_response"] = v.raw_response;
    j["attempts"] = v.attempts;
    if (!v.note.empty()) {
        j["note"] = v.note;
    }
    if (!v.session_id.empty()) {
        j["session_id"] = v.session_id;
    }
    return j;
}

Verdict verdict_from_json(const nlohmann::json& j) {
    Verdict v;
    v.task_id = j.at("task_id").get<std::string>();
    v.evaluator_id = j.at("evaluator_id").get<std::string>();
    if (j.contains("choice") && !j["choice"].is_null()) {
        v.choice = j["choice"].get<int>();
    }
    if (j.contains("correct") && !j["correct"].is_null()) {
        v.correct = j["correct"].get<bool>();
    }
    v.raw_response = j.value("raw_response", std::string{});
    v.attempts = j.value("attempts", 1);
    v.note = j.value("note", std::string{});
    v.session_id = j.value("session_id", std::string{});
    return v;
}

void write_verdicts(const std::filesystem::path& path, const std::vector<Verdict>& verdicts) {
    std::ofstream out(path, std::ios::binary);
    if (!out) {
        throw std::runtime_error("cannot write verdicts '" + path.string() + "'");
    }
    for (const auto& v : verdicts) {
        out << verdict_to_json(v).dump() << '\n';
    }
}

std::vector<Verdict> read_verdicts(const std::filesystem::path& path) {
    std::ifstream in(path);
    if (!in) {
        throw std::runtime_error("cannot read verdicts '" + path.string() + "'");
    }
    std::vector<Verdict> out;
    std::string line;
    std::size_t line_number = 0;
    while (std::getline(in, line)) {
        ++line_number;
        if (line.find_first_not_of(" \t\r") == std::string::npos) {
            continue;
        }
        try {
            out.push_back(verdict_from_json(nlohmann::json::parse(line)));
        } catch (const nlohmann::json::exception& e) {
            throw std::runtime_error(path.string() + ":" + std::to_string(line_number) + ": malformed verdict: " +
                                     e.what());
        }
    }
    return out;
}

}  // namespace latentprobe
