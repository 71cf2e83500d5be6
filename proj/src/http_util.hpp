#pragma once

#include <stdexcept>
#include <string>
#include <string_view>

namespace latentprobe::detail {

struct EndpointUrl {
    std::string scheme_host_port;  // e.g. http://localhost:8080
    std::string path;              // e.g. /v1/chat/completions
};

// Splits a base URL and appends the OpenAI-style route. "http://h:1" ->
// /v1/<route>, "http://h:1/v1" -> /v1/<route>, full paths are kept.
inline EndpointUrl resolve_endpoint(std::string_view url, std::string_view route) {
    const auto scheme_end = url.find("://");
    if (scheme_end == std::string_view::npos) {
        throw std::invalid_argument("endpoint '" + std::string(url) + "' must start with http:// or https://");
    }
    const auto scheme = url.substr(0, scheme_end);
    if (scheme != "http" && scheme != "https") {
        throw std::invalid_argument("unsupported endpoint scheme '" + std::string(scheme) + "'");
    }
    const auto path_start = url.find('/', scheme_end + 3);
    EndpointUrl out;
    out.scheme_host_port = std::string(url.substr(0, path_start));
    std::string path = path_start == std::string_view::npos ? std::string() : std::string(url.substr(path_start));
    while (!path.empty() && path.back() == '/') {
        path.pop_back();
    }
    const std::string suffix = "/" + std::string(route);
    if (path.size() >= suffix.size() && path.compare(path.size() - suffix.size(), suffix.size(), suffix) == 0) {
        out.path = path;
    } else if (path.empty()) {
        out.path = "/v1" + suffix;
    } else {
        out.path = path + suffix;
    }
    return out;
}

}  // namespace latentprobe::detail
