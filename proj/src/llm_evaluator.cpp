#include "latentprobe/llm_evaluator.hpp"

#include <atomic>
#include <cctype>
#include <cstdlib>
#include <stdexcept>
#include <thread>

#include <httplib.h>

#include "few_shot_fixtures.hpp"
#include "http_util.hpp"

namespace latentprobe {

void EvaluatorConfig::validate() const {
    if (concurrency < 1) {
        throw std::invalid_argument("concurrency limit must be >= 1");
    }
    if (max_retries < 0) {
        throw std::invalid_argument("max retries must be >= 0");
    }
    if (model.empty()) {
        throw std::invalid_argument("model identifier is required");
    }
    detail::resolve_endpoint(endpoint, "chat/completions");
}

std::string api_key_from_env() {
    for (const char* name : {"LATENTPROBE_API_KEY", "OPENAI_API_KEY"}) {
        if (const char* value = std::getenv(name); value != nullptr && *value != '\0') {
            return value;
        }
    }
    return {};
}

std::string render_candidates(const std::vector<std::string>& texts) {
    std::string out = "Examples:\n";
    for (std::size_t i = 0; i < texts.size(); ++i) {
        out += std::to_string(i + 1) + ". " + texts[i] + "\n";
    }
    out += "\nWhich example is the intruder? End your reply with its number.";
    return out;
}

std::vector<ChatMessage> render_prompt(const IntruderTask& task) {
    std::vector<ChatMessage> messages;
    messages.push_back({"system", std::string(detail::kSystemPrompt)});
    for (const auto& demo : detail::kFewShotDemos) {
        std::vector<std::string> texts(demo.examples.begin(), demo.examples.end());
        messages.push_back({"user", render_candidates(texts)});
        messages.push_back({"assistant", std::string(demo.answer)});
    }
    std::vector<std::string> texts;
    texts.reserve(task.examples.size());
    for (const auto& ex : task.examples) {
        texts.push_back(ex.text);
    }
    messages.push_back({"user", render_candidates(texts)});
    return messages;
}

std::optional<int> parse_choice(std::string_view response) {
    const auto is_word = [](char c) { return std::isalnum(static_cast<unsigned char>(c)) != 0 || c == '_'; };
    const auto is_digit = [](char c) { return std::isdigit(static_cast<unsigned char>(c)) != 0; };
    std::optional<int> last;
    std::size_t i = 0;
    const std::size_t n = response.size();
    while (i < n) {
        if (!is_digit(response[i])) {
            ++i;
            continue;
        }
        const std::size_t start = i;
        while (i < n && is_digit(response[i])) {
            ++i;
        }
        const bool word_before = start > 0 && (is_word(response[start - 1]) ||
                                               (response[start - 1] == '.' && start > 1 && is_digit(response[start - 2])));
        const bool word_after = i < n && (is_word(response[i]) ||
                                          (response[i] == '.' && i + 1 < n && is_digit(response[i + 1])));
        if (word_before || word_after) {
            continue;
        }
        const auto digits = response.substr(start, i - start);
        if (digits.size() == 1 && digits[0] >= '1' && digits[0] <= '5') {
            last = digits[0] - '0';
        }
    }
    return last;
}

nlohmann::json chat_request_body(const std::vector<ChatMessage>& messages, const EvaluatorConfig& config) {
    nlohmann::json body;
    body["model"] = config.model;
    body["temperature"] = config.temperature;
    nlohmann::json list = nlohmann::json::array();
    for (const auto& m : messages) {
        list.push_back({{"role", m.role}, {"content", m.content}});
    }
    body["messages"] = std::move(list);
    return body;
}

std::optional<std::string> chat_response_content(const nlohmann::json& body) {
    if (!body.is_object() || !body.contains("choices") || !body["choices"].is_array() || body["choices"].empty()) {
        return std::nullopt;
    }
    const auto& first = body["choices"][0];
    if (!first.is_object() || !first.contains("message") || !first["message"].is_object()) {
        return std::nullopt;
    }
    const auto& message = first["message"];
    if (!message.contains("content") || !message["content"].is_string()) {
        return std::nullopt;
    }
    return message["content"].get<std::string>();
}

namespace {

Verdict evaluate_one(httplib::Client& client, const std::string& path, const IntruderTask& task,
                     const EvaluatorConfig& config, const std::string& evaluator_id) {
    const std::string payload = chat_request_body(render_prompt(task), config).dump();
    std::string last_response;
    std::string note;
    int transport_failures = 0;
    const int max_attempts = config.max_retries + 1;
    for (int attempt = 1; attempt <= max_attempts; ++attempt) {
        if (attempt > 1 && transport_failures > 0) {
            // Exponential backoff only after transport or HTTP failures.
            std::this_thread::sleep_for(config.backoff_base * (1LL << std::min(transport_failures - 1, 16)));
        }
        auto result = client.Post(path, payload, "application/json");
        if (!result) {
            note = "transport error: " + httplib::to_string(result.error());
            ++transport_failures;
            continue;
        }
        if (result->status != 200) {
            note = "HTTP " + std::to_string(result->status);
            last_response = result->body;
            ++transport_failures;
            continue;
        }
        nlohmann::json body = nlohmann::json::parse(result->body, nullptr, false);
        auto content = chat_response_content(body);
        if (!content) {
            note = "response has no choices[0].message.content";
            last_response = result->body;
            ++transport_failures;
            continue;
        }
        last_response = *content;
        if (auto choice = parse_choice(*content)) {
            return make_verdict(task, evaluator_id, choice, std::move(last_response), attempt);
        }
        note = "no answer in 1..5";
    }
    Verdict v = make_verdict(task, evaluator_id, std::nullopt, std::move(last_response), max_attempts);
    v.note = note;
    return v;
}

}  // namespace

std::vector<Verdict> evaluate(const std::vector<IntruderTask>& tasks, const EvaluatorConfig& config) {
    config.validate();
    const auto url = detail::resolve_endpoint(config.endpoint, "chat/completions");
    const std::string evaluator_id = config.evaluator_id.empty() ? "llm:" + config.model : config.evaluator_id;

    std::vector<Verdict> out(tasks.size());
    std::atomic<std::size_t> next{0};
    auto worker = [&] {
        httplib::Client client(url.scheme_host_port);
        const auto timeout = std::chrono::duration_cast<std::chrono::microseconds>(config.request_timeout);
        client.set_connection_timeout(timeout);
        client.set_read_timeout(timeout);
        client.set_write_timeout(timeout);
        if (!config.api_key.empty()) {
            client.set_bearer_token_auth(config.api_key);
        }
        for (std::size_t i = next++; i < tasks.size(); i = next++) {
            out[i] = evaluate_one(client, url.path, tasks[i], config, evaluator_id);
        }
    };

    const auto workers = std::min<std::size_t>(static_cast<std::size_t>(config.concurrency), tasks.size());
    {
        std::vector<std::jthread> pool;
        pool.reserve(workers);
        for (std::size_t w = 0; w < workers; ++w) {
            pool.emplace_back(worker);
        }
    }
    return out;
}

}  // namespace latentprobe
