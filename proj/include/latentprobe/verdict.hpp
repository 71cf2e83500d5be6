#pragma once

#include <filesystem>
#include <optional>
#include <string>
#include <vector>

#include <json.hpp>

#include "latentprobe/task_builder.hpp"

namespace latentprobe {

// One evaluator decision on one task. Human, LLM, oracle and random
// evaluators all produce this same record.
struct Verdict {
    std::string task_id;
    std::string evaluator_id;
    std::optional<int> choice;   // 1..5, empty when the response was unusable
    std::optional<bool> correct;  // empty exactly when choice is empty
    std::string raw_response;
    int attempts = 1;
    std::string note;  // error detail for invalid verdicts
    std::string session_id;  // annotation sessions only
};

// Sets choice/correct from a parsed choice; invalid choices clear both.
Verdict make_verdict(const IntruderTask& task, std::string evaluator_id, std::optional<int> choice,
                     std::string raw_response = {}, int attempts = 1);

nlohmann::json verdict_to_json(const Verdict& verdict);
Verdict verdict_from_json(const nlohmann::json& j);

void write_verdicts(const std::filesystem::path& path, const std::vector<Verdict>& verdicts);
std::vector<Verdict> read_verdicts(const std::filesystem::path& path);

}  // namespace latentprobe
