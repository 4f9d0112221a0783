#pragma once

#include <cstdlib>
#include <string>
#include <vector>

#include <httplib.h>
#include <json.hpp>

#include "kpa/prompt.hpp"
#include "kpa/synth.hpp"

namespace kpa {

namespace detail {

struct SplitUrl {
    std::string host;  // scheme://host[:port]
    std::string path;  // /route, "/" when absent
};

inline SplitUrl split_url(const std::string& url) {
    auto scheme_end = url.find("://");
    if (scheme_end == std::string::npos)
        throw std::invalid_argument("url '" + url + "' has no scheme");
    auto path_start = url.find('/', scheme_end + 3);
    if (path_start == std::string::npos) return {url, "/"};
    return {url.substr(0, path_start), url.substr(path_start)};
}

inline std::string require_env(const char* name) {
    const char* v = std::getenv(name);
    if (v == nullptr || *v == '\0')
        throw std::runtime_error(std::string("environment variable ") + name + " is not set");
    return v;
}

}  // namespace detail

// Text-completion client speaking {model, prompt, max_tokens, temperature} ->
// {text}. Endpoint from KPA_LLM_URL, credential (optional) from KPA_LLM_KEY.
class HttpTextClient : public TextClient {
  public:
    struct Options {
        std::string model = "default";
        int max_tokens = 512;
        double temperature = 0.7;
        int timeout_seconds = 30;
    };

    HttpTextClient() : HttpTextClient(detail::require_env("KPA_LLM_URL"), Options{}) {}
    explicit HttpTextClient(Options opts)
        : HttpTextClient(detail::require_env("KPA_LLM_URL"), std::move(opts)) {}
    explicit HttpTextClient(const std::string& url) : HttpTextClient(url, Options{}) {}

    HttpTextClient(const std::string& url, Options opts) : opts_(std::move(opts)) {
        auto parts = detail::split_url(url);
        host_ = parts.host;
        path_ = parts.path;
        const char* key = std::getenv("KPA_LLM_KEY");
        if (key != nullptr && *key != '\0') bearer_ = key;
    }

    std::string complete(const std::string& prompt) override {
        nlohmann::json body{{"model", opts_.model},
                            {"prompt", prompt},
                            {"max_tokens", opts_.max_tokens},
                            {"temperature", opts_.temperature}};
        nlohmann::json reply = post_json(body);
        if (!reply.contains("text") || !reply["text"].is_string())
            throw std::runtime_error("llm response has no 'text' field: " + reply.dump());
        return reply["text"].get<std::string>();
    }

  private:
    nlohmann::json post_json(const nlohmann::json& body) {
        httplib::Client cli(host_);
        cli.set_connection_timeout(opts_.timeout_seconds);
        cli.set_read_timeout(opts_.timeout_seconds);
        httplib::Headers headers;
        if (!bearer_.empty()) headers.emplace("Authorization", "Bearer " + bearer_);
        auto res = cli.Post(path_, headers, body.dump(), "application/json");
        if (!res)
            throw std::runtime_error("llm request to " + host_ + path_ +
                                     " failed: " + httplib::to_string(res.error()));
        if (res->status != 200)
            throw std::runtime_error("llm request returned status " +
                                     std::to_string(res->status) + ": " + res->body);
        return nlohmann::json::parse(res->body);
    }

    Options opts_;
    std::string host_, path_, bearer_;
};

// Image-token client speaking {instruction, report, context_tokens, target}
// -> {tokens}. Endpoint from KPA_IMGLLM_URL.
class HttpImageTokenClient : public ImageTokenClient {
  public:
    explicit HttpImageTokenClient(int timeout_seconds = 60)
        : HttpImageTokenClient(detail::require_env("KPA_IMGLLM_URL"), timeout_seconds) {}

    HttpImageTokenClient(const std::string& url, int timeout_seconds = 60)
        : timeout_(timeout_seconds) {
        auto parts = detail::split_url(url);
        host_ = parts.host;
        path_ = parts.path;
    }

    std::vector<long long> predict(const SynthesisRequest& request, std::size_t rows,
                                   std::size_t cols) override {
        nlohmann::json body{{"instruction", request.instruction},
                            {"report", request.report},
                            {"context_tokens", request.context_tokens},
                            {"target", {{"rows", rows}, {"cols", cols}}}};
        httplib::Client cli(host_);
        cli.set_connection_timeout(timeout_);
        cli.set_read_timeout(timeout_);
        auto res = cli.Post(path_, body.dump(), "application/json");
        if (!res)
            throw std::runtime_error("image-token request to " + host_ + path_ +
                                     " failed: " + httplib::to_string(res.error()));
        if (res->status != 200)
            throw std::runtime_error("image-token request returned status " +
                                     std::to_string(res->status) + ": " + res->body);
        nlohmann::json reply = nlohmann::json::parse(res->body);
        if (!reply.contains("tokens") || !reply["tokens"].is_array())
            throw std::runtime_error("image-token response has no 'tokens' array: " +
                                     reply.dump());
        return reply["tokens"].get<std::vector<long long>>();
    }

  private:
    std::string host_, path_;
    int timeout_ = 60;
};

}  // namespace kpa
