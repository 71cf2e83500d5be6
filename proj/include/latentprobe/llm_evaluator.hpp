#pragma once

#include <chrono>
#include <optional>
#include <string>
#include <string_view>
#include <vector>

#include <json.hpp>

#include "latentprobe/task_builder.hpp"
#include "latentprobe/verdict.hpp"

namespace latentprobe {

struct ChatMessage {
    std::string role;
    std::string content;

    bool operator==(const ChatMessage&) const = default;
};

struct EvaluatorConfig {
    // Base URL such as http://localhost:8000 or https://api.example.com/v1;
    // /v1/chat/completions is appended unless already present.
    std::string endpoint;
    std::string model;
    double temperature = 0.0;
    int max_retries = 2;
    int concurrency = 4;
    std::chrono::milliseconds request_timeout{60'000};
    std::chrono::milliseconds backoff_base{500};
    std::string api_key;
    // Defaults to "llm:<model>".
    std::string evaluator_id;

    void validate() const;
};

// Reads the API key from LATENTPROBE_API_KEY, then OPENAI_API_KEY.
std::string api_key_from_env();

// System message, the two fixed few-shot demonstrations, then the task's five
// examples as a numbered list. Depends only on the example texts.
std::vector<ChatMessage> render_prompt(const IntruderTask& task);

// The final user message for a list of five example texts.
std::string render_candidates(const std::vector<std::string>& texts);

// The last standalone integer in 1..5, if any.
std::optional<int> parse_choice(std::string_view response);

nlohmann::json chat_request_body(const std::vector<ChatMessage>& messages, const EvaluatorConfig& config);

// Extracts choices[0].message.content; empty when the body has no such field.
std::optional<std::string> chat_response_content(const nlohmann::json& body);

// One fresh request per task, at most config.concurrency in flight. Output
// order follows input order. Unparseable answers are retried, transport and
// HTTP errors are retried with exponential backoff; after max_retries the
// verdict is recorded as invalid.
std::vector<Verdict> evaluate(const std::vector<IntruderTask>& tasks, const EvaluatorConfig& config);

}  // namespace latentprobe
