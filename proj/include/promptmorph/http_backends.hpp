#pragma once

#include <cstdint>
#include <cstdlib>
#include <memory>
#include <string>
#include <thread>
#include <vector>

#include <httplib.h>
#include <nlohmann/json.hpp>

#include "promptmorph/backends.hpp"
#include "promptmorph/errors.hpp"
#include "promptmorph/util.hpp"

namespace promptmorph {

inline std::string base64_encode(const std::vector<unsigned char>& data) {
    static const char* alphabet =
        "ABCDEFGHIJKLMNOPQRSTUVWXYZabcdefghijklmnopqrstuvwxyz0123456789+/";
    std::string out;
    out.reserve((data.size() + 2) / 3 * 4);
    for (std::size_t i = 0; i < data.size(); i += 3) {
        std::uint32_t n = static_cast<std::uint32_t>(data[i]) << 16;
        if (i + 1 < data.size()) n |= static_cast<std::uint32_t>(data[i + 1]) << 8;
        if (i + 2 < data.size()) n |= static_cast<std::uint32_t>(data[i + 2]);
        out.push_back(alphabet[(n >> 18) & 63]);
        out.push_back(alphabet[(n >> 12) & 63]);
        out.push_back(i + 1 < data.size() ? alphabet[(n >> 6) & 63] : '=');
        out.push_back(i + 2 < data.size() ? alphabet[n & 63] : '=');
    }
    return out;
}

inline std::vector<unsigned char> base64_decode(const std::string& text) {
    auto value = [](char c) -> int {
        if (c >= 'A' && c <= 'Z') return c - 'A';
        if (c >= 'a' && c <= 'z') return c - 'a' + 26;
        if (c >= '0' && c <= '9') return c - '0' + 52;
        if (c == '+') return 62;
        if (c == '/') return 63;
        return -1;
    };
    std::vector<unsigned char> out;
    int buffer = 0, bits = 0;
    for (char c : text) {
        if (c == '=' || c == '\n' || c == '\r') continue;
        int v = value(c);
        if (v < 0) throw MalformedResponse("invalid base64 payload");
        buffer = (buffer << 6) | v;
        bits += 6;
        if (bits >= 8) {
            bits -= 8;
            out.push_back(static_cast<unsigned char>((buffer >> bits) & 0xff));
        }
    }
    return out;
}

struct ParsedUrl {
    std::string base;  // scheme://host[:port]
    std::string path;  // /path, defaults to "/"
};

inline ParsedUrl split_url(const std::string& url) {
    auto scheme_end = url.find("://");
    if (scheme_end == std::string::npos) throw ValidationError("endpoint '" + url + "' has no scheme");
    auto path_start = url.find('/', scheme_end + 3);
    if (path_start == std::string::npos) return ParsedUrl{url, "/"};
    return ParsedUrl{url.substr(0, path_start), url.substr(path_start)};
}

// Shared JSON-over-HTTP plumbing: bearer auth, bounded concurrency, the
// retry policy (max_retries+1 attempts on retryable failures, exponential
// backoff, immediate failure on 4xx), and the response cache.
class HttpJsonClient {
public:
    HttpJsonClient(BackendConfig config, ResponseCache* cache)
        : config_(std::move(config)), gate_(config_.max_concurrency), cache_(cache) {
        config_.validate();
        url_ = split_url(config_.endpoint);
    }

    const BackendConfig& config() const { return config_; }

    std::string backend_id() const {
        return config_.capability + ":" + config_.model_name + "@" + config_.endpoint;
    }

    // POSTs the body, returns the response body. Throws BackendError with
    // the attempt count on exhaustion.
    std::string post_json(const std::string& body) {
        std::string cache_key;
        if (cache_) {
            cache_key = ResponseCache::key(backend_id(), config_.capability, body);
            if (auto hit = cache_->get(cache_key)) return *hit;
        }
        BoundedGate::Scope slot(gate_);
        const int attempts_allowed = config_.max_retries + 1;
        std::string last_failure;
        for (int attempt = 1; attempt <= attempts_allowed; ++attempt) {
            if (attempt > 1) {
                auto delay = config_.initial_backoff * (1LL << (attempt - 2));
                std::this_thread::sleep_for(delay);
            }
            httplib::Client client(url_.base);
            client.set_connection_timeout(std::chrono::duration_cast<std::chrono::seconds>(
                config_.timeout));
            client.set_read_timeout(std::chrono::duration_cast<std::chrono::seconds>(config_.timeout));
            if (!config_.api_key_env.empty()) {
                if (const char* token = std::getenv(config_.api_key_env.c_str())) {
                    client.set_bearer_token_auth(token);
                }
            }
            httplib::Result res = client.Post(url_.path, body, "application/json");
            if (!res) {
                last_failure = "transport error (" + httplib::to_string(res.error()) + ")";
                continue;  // retryable
            }
            if (res->status >= 200 && res->status < 300) {
                if (cache_) cache_->put(cache_key, res->body);
                return res->body;
            }
            if (res->status >= 500 || res->status == 429) {
                last_failure = "status " + std::to_string(res->status);
                continue;  // retryable
            }
            throw BackendError(backend_id() + ": non-retryable status " +
                               std::to_string(res->status) + ": " + res->body);
        }
        throw BackendError(backend_id() + ": " + last_failure + " after " +
                           std::to_string(attempts_allowed) + " attempts");
    }

    static nlohmann::json parse_response(const std::string& body, const std::string& who) {
        try {
            return nlohmann::json::parse(body);
        } catch (const nlohmann::json::exception& e) {
            throw MalformedResponse(who + ": response is not JSON: " + e.what());
        }
    }

private:
    BackendConfig config_;
    BoundedGate gate_;
    ResponseCache* cache_;
    ParsedUrl url_;
};

// Embedding-shaped template: {"model", "input"} -> {"data":[{"embedding":[...]}]}
class HttpEmbedBackend : public EmbedBackend {
public:
    HttpEmbedBackend(BackendConfig config, ResponseCache* cache = nullptr)
        : client_(std::move(config), cache) {}

    Vec embed(const std::string& text) override {
        nlohmann::ordered_json req;
        req["model"] = client_.config().model_name;
        req["input"] = text;
        nlohmann::json res = HttpJsonClient::parse_response(client_.post_json(req.dump()), id());
        if (!res.contains("data") || !res["data"].is_array() || res["data"].empty() ||
            !res["data"][0].contains("embedding")) {
            throw MalformedResponse(id() + ": missing data[0].embedding");
        }
        Vec v = res["data"][0]["embedding"].get<Vec>();
        if (v.empty()) throw MalformedResponse(id() + ": empty embedding");
        return v;
    }

    std::string id() const override { return client_.backend_id(); }

private:
    HttpJsonClient client_;
};

// Chat-completion-shaped template. The "logprobs" template id requests and
// reads per-token log probabilities.
class HttpGenerateBackend : public GenerateBackend {
public:
    HttpGenerateBackend(BackendConfig config, ResponseCache* cache = nullptr,
                        std::vector<std::string> refusal_patterns = default_refusal_patterns())
        : client_(std::move(config), cache), refusal_patterns_(std::move(refusal_patterns)) {}

    GenerationResult generate(const std::string& system_instruction,
                              const std::string& user_content) override {
        if (user_content.empty()) throw BackendError("InvalidRequest: empty user content");
        nlohmann::ordered_json req;
        req["model"] = client_.config().model_name;
        req["messages"] = nlohmann::ordered_json::array(
            {{{"role", "system"}, {"content", system_instruction}},
             {{"role", "user"}, {"content", user_content}}});
        if (supports_logprobs()) req["logprobs"] = true;
        nlohmann::json res = HttpJsonClient::parse_response(client_.post_json(req.dump()), id());
        if (!res.contains("choices") || !res["choices"].is_array() || res["choices"].empty()) {
            throw MalformedResponse(id() + ": missing choices");
        }
        const auto& choice = res["choices"][0];
        GenerationResult result;
        if (!choice.contains("message") || !choice["message"].contains("content")) {
            throw MalformedResponse(id() + ": missing choices[0].message.content");
        }
        result.text = choice["message"]["content"].get<std::string>();
        if (choice.contains("logprobs") && choice["logprobs"].contains("content")) {
            std::vector<double> lps;
            for (const auto& tok : choice["logprobs"]["content"]) {
                if (tok.contains("logprob")) lps.push_back(tok["logprob"].get<double>());
            }
            if (!lps.empty()) result.token_logprobs = std::move(lps);
        }
        result.refused = matches_refusal(result.text, refusal_patterns_);
        return result;
    }

    std::string id() const override { return client_.backend_id(); }
    bool supports_logprobs() const override {
        return client_.config().request_template == "logprobs";
    }

private:
    HttpJsonClient client_;
    std::vector<std::string> refusal_patterns_;
};

// {"model", "prompt", "seed"} -> {"data":[{"b64": ...}]} or {"refused": true}
class HttpImageBackend : public ImageBackend {
public:
    HttpImageBackend(BackendConfig config, ResponseCache* cache = nullptr)
        : client_(std::move(config), cache) {}

    ImageResult generate(const std::string& prompt, std::uint64_t seed,
                         const std::filesystem::path& out_dir,
                         const std::string& artifact_name) override {
        nlohmann::ordered_json req;
        req["model"] = client_.config().model_name;
        req["prompt"] = prompt;
        req["seed"] = seed;
        nlohmann::json res = HttpJsonClient::parse_response(client_.post_json(req.dump()), id());
        if (res.value("refused", false)) return ImageResult{{}, true};
        if (!res.contains("data") || !res["data"].is_array() || res["data"].empty() ||
            !res["data"][0].contains("b64")) {
            throw MalformedResponse(id() + ": missing data[0].b64");
        }
        std::vector<unsigned char> bytes = base64_decode(res["data"][0]["b64"].get<std::string>());
        std::filesystem::create_directories(out_dir);
        std::filesystem::path path = out_dir / (artifact_name + ".png");
        write_text_file(path, std::string_view(reinterpret_cast<const char*>(bytes.data()),
                                               bytes.size()));
        return ImageResult{path, false};
    }

    std::string id() const override { return client_.backend_id(); }

private:
    HttpJsonClient client_;
};

// Chat-shaped with an inline base64 image part.
class HttpVlmBackend : public VlmBackend {
public:
    HttpVlmBackend(BackendConfig config, ResponseCache* cache = nullptr)
        : client_(std::move(config), cache) {}

    std::string query(const std::string& instruction,
                      const std::vector<unsigned char>& image_bytes) override {
        nlohmann::ordered_json req;
        req["model"] = client_.config().model_name;
        nlohmann::ordered_json content = nlohmann::ordered_json::array();
        content.push_back({{"type", "text"}, {"text", instruction}});
        content.push_back({{"type", "image_b64"}, {"data", base64_encode(image_bytes)}});
        req["messages"] =
            nlohmann::ordered_json::array({{{"role", "user"}, {"content", std::move(content)}}});
        nlohmann::json res = HttpJsonClient::parse_response(client_.post_json(req.dump()), id());
        if (!res.contains("choices") || res["choices"].empty() ||
            !res["choices"][0].contains("message")) {
            throw MalformedResponse(id() + ": missing choices[0].message");
        }
        return res["choices"][0]["message"].value("content", std::string());
    }

    std::string id() const override { return client_.backend_id(); }

private:
    HttpJsonClient client_;
};

// {"input": prompt} -> {"flagged": bool, "score": number?}
class HttpFilterBackend : public FilterBackend {
public:
    HttpFilterBackend(BackendConfig config, ResponseCache* cache = nullptr)
        : client_(std::move(config), cache) {}

    FilterVerdict check(const std::string& prompt) override {
        nlohmann::ordered_json req;
        req["input"] = prompt;
        nlohmann::json res = HttpJsonClient::parse_response(client_.post_json(req.dump()), id());
        if (!res.contains("flagged") || !res["flagged"].is_boolean()) {
            throw MalformedResponse(id() + ": missing boolean 'flagged'");
        }
        FilterVerdict v;
        v.flagged = res["flagged"].get<bool>();
        if (res.contains("score") && res["score"].is_number()) {
            v.raw_score = res["score"].get<double>();
        }
        v.filter_id = id();
        return v;
    }

    std::string id() const override { return client_.backend_id(); }

private:
    HttpJsonClient client_;
};

// Embedding-shaped with a base64 image payload.
class HttpImageEmbedBackend : public ImageEmbedBackend {
public:
    HttpImageEmbedBackend(BackendConfig config, ResponseCache* cache = nullptr)
        : client_(std::move(config), cache) {}

    Vec embed_image(const std::vector<unsigned char>& image_bytes) override {
        nlohmann::ordered_json req;
        req["model"] = client_.config().model_name;
        req["input_b64"] = base64_encode(image_bytes);
        nlohmann::json res = HttpJsonClient::parse_response(client_.post_json(req.dump()), id());
        if (!res.contains("data") || res["data"].empty() || !res["data"][0].contains("embedding")) {
            throw MalformedResponse(id() + ": missing data[0].embedding");
        }
        return res["data"][0]["embedding"].get<Vec>();
    }

    std::string id() const override { return client_.backend_id(); }

private:
    HttpJsonClient client_;
};

}  // namespace promptmorph
