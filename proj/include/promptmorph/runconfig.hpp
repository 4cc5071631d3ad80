#pragma once

#include <cctype>
#include <chrono>
#include <cmath>
#include <cstdio>
#include <cstdlib>
#include <ctime>
#include <functional>
#include <map>
#include <memory>
#include <optional>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "promptmorph/backends.hpp"
#include "promptmorph/checker.hpp"
#include "promptmorph/errors.hpp"
#include "promptmorph/http_backends.hpp"
#include "promptmorph/morph_pipeline.hpp"
#include "promptmorph/util.hpp"

namespace promptmorph {

// ---------------------------------------------------------------------------
// Configuration precedence: flags > environment > config file > defaults
// ---------------------------------------------------------------------------

enum class ConfigSource { flag, env, file, fallback };

inline const char* config_source_name(ConfigSource s) {
    switch (s) {
        case ConfigSource::flag: return "flag";
        case ConfigSource::env: return "env";
        case ConfigSource::file: return "file";
        case ConfigSource::fallback: return "default";
    }
    return "?";
}

inline std::string env_var_for_key(const std::string& key, const std::string& prefix = "PROMPTMORPH_") {
    std::string out = prefix;
    for (char c : key) {
        if (std::isalnum(static_cast<unsigned char>(c))) {
            out.push_back(static_cast<char>(std::toupper(static_cast<unsigned char>(c))));
        } else {
            out.push_back('_');
        }
    }
    return out;
}

class ConfigResolver {
public:
    using EnvLookup = std::function<std::optional<std::string>(const std::string&)>;

    ConfigResolver(std::map<std::string, std::string> flag_values, nlohmann::json config_file,
                   EnvLookup env = real_env())
        : flags_(std::move(flag_values)), file_(std::move(config_file)), env_(std::move(env)) {}

    static EnvLookup real_env() {
        return [](const std::string& name) -> std::optional<std::string> {
            const char* v = std::getenv(name.c_str());
            if (!v) return std::nullopt;
            return std::string(v);
        };
    }

    // Dotted keys; config-file lookup walks nested objects.
    std::optional<std::string> resolve(const std::string& key, ConfigSource* source = nullptr) const {
        auto fit = flags_.find(key);
        if (fit != flags_.end()) {
            if (source) *source = ConfigSource::flag;
            return fit->second;
        }
        if (auto ev = env_(env_var_for_key(key))) {
            if (source) *source = ConfigSource::env;
            return ev;
        }
        if (auto fv = file_lookup(key)) {
            if (source) *source = ConfigSource::file;
            return fv;
        }
        if (source) *source = ConfigSource::fallback;
        return std::nullopt;
    }

    std::string get_string(const std::string& key, const std::string& fallback) const {
        auto v = resolve(key);
        return v ? *v : fallback;
    }

    double get_double(const std::string& key, double fallback) const {
        auto v = resolve(key);
        if (!v) return fallback;
        try {
            return std::stod(*v);
        } catch (const std::exception&) {
            throw ValidationError("config key '" + key + "' is not a number: " + *v);
        }
    }

    int get_int(const std::string& key, int fallback) const {
        auto v = resolve(key);
        if (!v) return fallback;
        try {
            return std::stoi(*v);
        } catch (const std::exception&) {
            throw ValidationError("config key '" + key + "' is not an integer: " + *v);
        }
    }

    bool get_bool(const std::string& key, bool fallback) const {
        auto v = resolve(key);
        if (!v) return fallback;
        std::string s = to_lower(*v);
        if (s == "true" || s == "1" || s == "yes" || s == "on") return true;
        if (s == "false" || s == "0" || s == "no" || s == "off") return false;
        throw ValidationError("config key '" + key + "' is not a boolean: " + *v);
    }

    ConfigSource source_of(const std::string& key) const {
        ConfigSource s = ConfigSource::fallback;
        resolve(key, &s);
        return s;
    }

    const nlohmann::json& file_config() const { return file_; }

private:
    std::optional<std::string> file_lookup(const std::string& key) const {
        const nlohmann::json* node = &file_;
        std::size_t start = 0;
        while (true) {
            std::size_t dot = key.find('.', start);
            std::string part = key.substr(start, dot == std::string::npos ? dot : dot - start);
            if (!node->is_object() || !node->contains(part)) return std::nullopt;
            node = &(*node)[part];
            if (dot == std::string::npos) break;
            start = dot + 1;
        }
        if (node->is_string()) return node->get<std::string>();
        if (node->is_boolean()) return std::string(node->get<bool>() ? "true" : "false");
        if (node->is_number_integer()) return std::to_string(node->get<long long>());
        if (node->is_number()) {
            char buf[64];
            std::snprintf(buf, sizeof(buf), "%.17g", node->get<double>());
            return std::string(buf);
        }
        return std::nullopt;
    }

    std::map<std::string, std::string> flags_;
    nlohmann::json file_;
    EnvLookup env_;
};

// ---------------------------------------------------------------------------
// Clock
// ---------------------------------------------------------------------------

// Fixed mode pins every timestamp to epoch so demo runs are byte-stable.
struct Clock {
    bool fixed = false;

    std::string now() const {
        if (fixed) return "1970-01-01T00:00:00Z";
        std::time_t t = std::time(nullptr);
        std::tm tm{};
        gmtime_r(&t, &tm);
        char buf[32];
        std::strftime(buf, sizeof(buf), "%Y-%m-%dT%H:%M:%SZ", &tm);
        return buf;
    }
};

// ---------------------------------------------------------------------------
// Demo mocks wired through mock:// endpoints
// ---------------------------------------------------------------------------

namespace detail {

inline std::vector<double> synthetic_logprobs(const std::string& text, std::uint64_t seed) {
    auto words = tokenize_words(text);
    std::vector<double> lps;
    if (words.empty()) words.push_back(text.empty() ? "x" : text);
    lps.reserve(words.size());
    for (const std::string& w : words) {
        std::uint64_t state = fnv1a64(w) ^ seed;
        lps.push_back(-(0.2 + 1.3 * unit_double(state)));
    }
    return lps;
}

inline std::string nth_feature_snippet(const std::string& user_content, int variant) {
    std::vector<std::string> features;
    std::size_t pos = 0;
    while ((pos = user_content.find("\n- ", pos)) != std::string::npos) {
        pos += 3;
        std::size_t end = user_content.find('\n', pos);
        features.push_back(user_content.substr(pos, end == std::string::npos ? end : end - pos));
    }
    if (features.empty()) return "";
    const std::string& f = features[static_cast<std::size_t>(variant - 1) % features.size()];
    auto words = tokenize_words(f);
    std::vector<std::string> head(words.begin(),
                                  words.begin() + std::min<std::size_t>(words.size(), 6));
    return join(head, " ");
}

}  // namespace detail

// Deterministic generation mock for offline demo runs: answers the parse
// instruction with the heuristic decomposition, answers fuse requests with
// the base plus one retrieved-feature snippet per variant, echoes anything
// else. Refuses any request whose user content contains the marker.
class DemoGenerateBackend : public GenerateBackend {
public:
    explicit DemoGenerateBackend(std::uint64_t seed, std::string refuse_marker = {})
        : seed_(seed), refuse_marker_(std::move(refuse_marker)) {}

    GenerationResult generate(const std::string& system_instruction,
                              const std::string& user_content) override {
        if (user_content.empty()) throw BackendError("InvalidRequest: empty user content");
        GenerationResult r;
        if (!refuse_marker_.empty() && user_content.find(refuse_marker_) != std::string::npos) {
            r.text = "I can't help with that request.";
            r.refused = true;
            r.token_logprobs = detail::synthetic_logprobs(r.text, seed_);
            return r;
        }
        if (system_instruction == kParseInstruction &&
            user_content.find("Previous reply:") == std::string::npos) {
            ParsedPrompt p = heuristic_parse(user_content);
            nlohmann::ordered_json j;
            j["subject"] = p.subject;
            j["scene"] = p.scene;
            j["is_human_subject"] = p.is_human_subject;
            j["body_parts"] = p.body_parts;
            r.text = j.dump();
        } else if (system_instruction == kFuseInstruction) {
            std::string base;
            std::size_t b = user_content.find("Base prompt: ");
            std::size_t e = user_content.find("\nFeatures:");
            if (b != std::string::npos && e != std::string::npos) {
                base = user_content.substr(b + 13, e - (b + 13));
            } else {
                base = user_content;
            }
            int variant = 1;
            std::size_t v = user_content.rfind("Variant ");
            if (v != std::string::npos) variant = std::atoi(user_content.c_str() + v + 8);
            std::string snippet = detail::nth_feature_snippet(user_content, variant);
            r.text = snippet.empty() ? base : base + ", " + snippet;
        } else {
            r.text = user_content;
        }
        r.token_logprobs = detail::synthetic_logprobs(r.text, seed_);
        return r;
    }

    std::string id() const override {
        return "mock-generate:demo,seed=" + std::to_string(seed_) +
               (refuse_marker_.empty() ? "" : ",marker=" + refuse_marker_);
    }

    bool supports_logprobs() const override { return true; }

private:
    std::uint64_t seed_;
    std::string refuse_marker_;
};

// Deterministic VLM mock: captions and scores derived from the image bytes
// and the full instruction, so reference updates change scores reproducibly.
class DemoVlmBackend : public VlmBackend {
public:
    explicit DemoVlmBackend(std::uint64_t seed) : seed_(seed) {}

    std::string query(const std::string& instruction,
                      const std::vector<unsigned char>& image_bytes) override {
        std::uint64_t h = fnv1a64(std::string_view(
                              reinterpret_cast<const char*>(image_bytes.data()), image_bytes.size())) ^
                          seed_;
        if (instruction == kCaptionInstruction) {
            return "a rendered scene tagged " + hex64(h).substr(0, 8);
        }
        std::uint64_t state = h ^ fnv1a64(instruction);
        nlohmann::ordered_json j;
        j["main_subject_score"] = std::round(unit_double(state) * 100.0) / 100.0;
        nlohmann::ordered_json feats = nlohmann::ordered_json::array();
        static const char* labels[] = {"texture", "lighting", "contrast"};
        std::size_t n = splitmix64(state) % 3;
        for (std::size_t i = 0; i < n; ++i) {
            nlohmann::ordered_json f;
            f["label"] = labels[i];
            f["score"] = std::round(unit_double(state) * 100.0) / 100.0;
            feats.push_back(std::move(f));
        }
        j["features"] = std::move(feats);
        j["category"] = nullptr;
        j["rationale"] = "deterministic mock score";
        return j.dump();
    }

    std::string id() const override { return "mock-vlm:demo,seed=" + std::to_string(seed_); }

private:
    std::uint64_t seed_;
};

// Bag-of-words mock embedding: texts sharing vocabulary land near each
// other, which gives retrieval and the semantic-distance gate plausible
// offline behavior. The plain hash mode embeds each distinct text in a
// near-orthogonal direction.
class BowEmbedBackend : public EmbedBackend {
public:
    BowEmbedBackend(std::size_t dim, std::uint64_t seed) : dim_(dim), seed_(seed) {}

    Vec embed(const std::string& text) override {
        BackendStats::Scope probe(stats_);
        auto words = tokenize_words(text);
        Vec v(dim_, 0.0);
        if (words.empty()) words.push_back(text.empty() ? "(empty)" : text);
        for (const std::string& w : words) {
            std::uint64_t state = fnv1a64(w) ^ seed_;
            for (double& x : v) x += unit_double(state) * 2.0 - 1.0;
        }
        return v;
    }

    std::string id() const override {
        return "mock-embed:bow,dim=" + std::to_string(dim_) + ",seed=" + std::to_string(seed_);
    }

    BackendStats& stats() { return stats_; }

private:
    std::size_t dim_;
    std::uint64_t seed_;
    BackendStats stats_;
};

// ---------------------------------------------------------------------------
// Backend factory
// ---------------------------------------------------------------------------

struct MockEndpoint {
    std::string name;
    std::map<std::string, std::string> params;

    std::string param(const std::string& key, const std::string& fallback) const {
        auto it = params.find(key);
        return it == params.end() ? fallback : it->second;
    }
};

inline MockEndpoint parse_mock_endpoint(const std::string& endpoint) {
    MockEndpoint out;
    std::string rest = endpoint.substr(std::string("mock://").size());
    std::size_t q = rest.find('?');
    out.name = rest.substr(0, q);
    if (q != std::string::npos) {
        std::string query = rest.substr(q + 1);
        std::size_t start = 0;
        while (start < query.size()) {
            std::size_t amp = query.find('&', start);
            std::string pair = query.substr(start, amp == std::string::npos ? amp : amp - start);
            std::size_t eq = pair.find('=');
            if (eq != std::string::npos) {
                out.params[pair.substr(0, eq)] = pair.substr(eq + 1);
            } else if (!pair.empty()) {
                out.params[pair] = "";
            }
            if (amp == std::string::npos) break;
            start = amp + 1;
        }
    }
    return out;
}

inline BackendConfig backend_config_from_json(const std::string& capability,
                                              const nlohmann::json& j) {
    BackendConfig c;
    c.capability = capability;
    c.endpoint = j.value("endpoint", std::string());
    if (c.endpoint.empty()) throw ValidationError("backend '" + capability + "' has no endpoint");
    c.model_name = j.value("model_name", j.value("model", std::string("default")));
    c.timeout = std::chrono::milliseconds(j.value("timeout_ms", 30000));
    c.max_retries = j.value("max_retries", 2);
    c.max_concurrency = j.value("max_concurrency", 4);
    c.request_template = j.value("request_template", std::string("default"));
    c.api_key_env = j.value("api_key_env", std::string());
    c.initial_backoff = std::chrono::milliseconds(j.value("initial_backoff_ms", 250));
    c.validate();
    return c;
}

struct BackendSet {
    std::shared_ptr<EmbedBackend> embed;
    std::shared_ptr<GenerateBackend> gen;
    std::shared_ptr<ImageBackend> image;
    std::shared_ptr<VlmBackend> vlm;
    std::vector<std::shared_ptr<FilterBackend>> filters;
    std::shared_ptr<ImageEmbedBackend> image_embed;
    std::shared_ptr<ResponseCache> cache = std::make_shared<ResponseCache>();

    std::map<std::string, std::string> ids() const {
        std::map<std::string, std::string> out;
        if (embed) out["embed"] = embed->id();
        if (gen) out["generate"] = gen->id();
        if (image) out["image"] = image->id();
        if (vlm) out["vlm"] = vlm->id();
        if (image_embed) out["image_embed"] = image_embed->id();
        for (std::size_t i = 0; i < filters.size(); ++i) {
            out["filter." + std::to_string(i)] = filters[i]->id();
        }
        return out;
    }
};

inline std::shared_ptr<EmbedBackend> make_embed_backend(const BackendConfig& config,
                                                        ResponseCache* cache) {
    if (config.endpoint.rfind("mock://", 0) == 0) {
        MockEndpoint m = parse_mock_endpoint(config.endpoint);
        std::size_t dim = std::stoul(m.param("dim", "24"));
        std::uint64_t seed = std::stoull(m.param("seed", "42"));
        if (m.param("mode", "bow") == "hash") {
            return std::make_shared<MockEmbedBackend>(dim, seed, config.max_concurrency);
        }
        return std::make_shared<BowEmbedBackend>(dim, seed);
    }
    return std::make_shared<HttpEmbedBackend>(config, cache);
}

inline std::shared_ptr<GenerateBackend> make_generate_backend(const BackendConfig& config,
                                                              ResponseCache* cache) {
    if (config.endpoint.rfind("mock://", 0) == 0) {
        MockEndpoint m = parse_mock_endpoint(config.endpoint);
        std::uint64_t seed = std::stoull(m.param("seed", "42"));
        std::string mode = m.param("mode", "demo");
        if (mode == "echo") return make_echo_backend();
        return std::make_shared<DemoGenerateBackend>(seed, m.param("refuse_marker", ""));
    }
    return std::make_shared<HttpGenerateBackend>(config, cache);
}

inline std::shared_ptr<VlmBackend> make_vlm_backend(const BackendConfig& config,
                                                    ResponseCache* cache) {
    if (config.endpoint.rfind("mock://", 0) == 0) {
        MockEndpoint m = parse_mock_endpoint(config.endpoint);
        return std::make_shared<DemoVlmBackend>(std::stoull(m.param("seed", "42")));
    }
    return std::make_shared<HttpVlmBackend>(config, cache);
}

inline std::shared_ptr<ImageBackend> make_image_backend(const BackendConfig& config,
                                                        ResponseCache* cache) {
    if (config.endpoint.rfind("mock://", 0) == 0) {
        MockEndpoint m = parse_mock_endpoint(config.endpoint);
        return std::make_shared<MockImageBackend>(m.param("mode", "ok") == "refuse");
    }
    return std::make_shared<HttpImageBackend>(config, cache);
}

inline std::shared_ptr<FilterBackend> make_filter_backend(const BackendConfig& config,
                                                          ResponseCache* cache) {
    if (config.endpoint.rfind("mock://", 0) == 0) {
        MockEndpoint m = parse_mock_endpoint(config.endpoint);
        std::string mode = m.param("mode", "never");
        if (mode == "always") {
            return std::make_shared<MockFilterBackend>(MockFilterBackend::Mode::always);
        }
        if (mode == "marker") {
            return std::make_shared<MockFilterBackend>(MockFilterBackend::Mode::marker,
                                                       m.param("marker", ""));
        }
        return std::make_shared<MockFilterBackend>(MockFilterBackend::Mode::never);
    }
    return std::make_shared<HttpFilterBackend>(config, cache);
}

inline std::shared_ptr<ImageEmbedBackend> make_image_embed_backend(const BackendConfig& config,
                                                                   ResponseCache* cache) {
    if (config.endpoint.rfind("mock://", 0) == 0) {
        MockEndpoint m = parse_mock_endpoint(config.endpoint);
        return std::make_shared<MockImageEmbedBackend>(std::stoul(m.param("dim", "24")),
                                                       std::stoull(m.param("seed", "42")));
    }
    return std::make_shared<HttpImageEmbedBackend>(config, cache);
}

// Builds every configured capability from the config file's "backends" tree.
inline BackendSet make_backends(const nlohmann::json& config_file) {
    BackendSet set;
    if (!config_file.is_object() || !config_file.contains("backends")) return set;
    const nlohmann::json& b = config_file["backends"];
    ResponseCache* cache = set.cache.get();
    if (b.contains("embed")) {
        set.embed = make_embed_backend(backend_config_from_json("embed", b["embed"]), cache);
    }
    if (b.contains("generate")) {
        set.gen = make_generate_backend(backend_config_from_json("generate", b["generate"]), cache);
    }
    if (b.contains("vlm")) {
        set.vlm = make_vlm_backend(backend_config_from_json("vlm", b["vlm"]), cache);
    }
    if (b.contains("image")) {
        set.image = make_image_backend(backend_config_from_json("image", b["image"]), cache);
    }
    if (b.contains("image_embed")) {
        set.image_embed =
            make_image_embed_backend(backend_config_from_json("image_embed", b["image_embed"]), cache);
    }
    if (b.contains("filters")) {
        for (const auto& fj : b["filters"]) {
            set.filters.push_back(make_filter_backend(backend_config_from_json("filter", fj), cache));
        }
    }
    return set;
}

// The built-in offline profile: all mocks, benign demo corpus, fixed seed.
inline nlohmann::json demo_profile_config(const std::string& data_dir, std::uint64_t seed) {
    nlohmann::json j;
    j["run"] = {{"seed", seed}, {"fixed_clock", true}};
    j["paths"] = {{"taxonomy", data_dir + "/taxonomy.json"},
                  {"corpus", data_dir + "/corpus"},
                  {"prompts", data_dir + "/prompts.jsonl"}};
    j["image_generation"] = {{"acknowledge_risk", true}};
    std::string s = std::to_string(seed);
    j["backends"] = {
        {"embed", {{"endpoint", "mock://embed?dim=24&mode=bow&seed=" + s}}},
        {"generate", {{"endpoint", "mock://generate?mode=demo&seed=" + s},
                      {"request_template", "logprobs"}}},
        {"vlm", {{"endpoint", "mock://vlm?seed=" + s}}},
        {"image", {{"endpoint", "mock://image"}}},
        {"image_embed", {{"endpoint", "mock://embed-image?dim=24&seed=" + s}}},
        {"filters", nlohmann::json::array({{{"endpoint", "mock://filter?mode=never"}}})},
    };
    return j;
}

// ---------------------------------------------------------------------------
// Run manifest
// ---------------------------------------------------------------------------

struct RunManifest {
    std::string run_id;
    std::string command;
    std::string started_at;
    std::string finished_at;
    nlohmann::ordered_json config_snapshot;
    std::map<std::string, std::string> backend_ids;
    std::map<std::string, std::string> input_hashes;
    nlohmann::ordered_json toggles;

    nlohmann::ordered_json to_json() const {
        nlohmann::ordered_json j;
        j["run_id"] = run_id;
        j["command"] = command;
        j["started_at"] = started_at;
        j["finished_at"] = finished_at;
        j["config"] = config_snapshot;
        j["backend_ids"] = backend_ids;
        j["input_hashes"] = input_hashes;
        j["toggles"] = toggles;
        return j;
    }

    void write(const std::filesystem::path& path) const {
        write_text_file(path, to_json().dump(2) + "\n");
    }
};

inline std::string make_run_id(const std::string& command, const std::string& started_at,
                               std::uint64_t seed) {
    return hex64(fnv1a64(command + "|" + started_at + "|" + std::to_string(seed)));
}

}  // namespace promptmorph
