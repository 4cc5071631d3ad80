#include <catch2/catch_amalgamated.hpp>

#include <atomic>
#include <chrono>
#include <cmath>
#include <cstdlib>
#include <thread>

#include <httplib.h>
#include <nlohmann/json.hpp>

#include "promptmorph/backends.hpp"
#include "promptmorph/http_backends.hpp"
#include "promptmorph/perplexity.hpp"

using namespace promptmorph;

namespace {

// Ephemeral local server for exercising the HTTP clients end to end.
class TestServer {
public:
    TestServer() {
        server_.Post("/embed", [this](const httplib::Request& req, httplib::Response& res) {
            hits_.fetch_add(1);
            auto body = nlohmann::json::parse(req.body);
            std::string text = body.value("input", std::string());
            nlohmann::json out;
            out["data"] = nlohmann::json::array(
                {{{"embedding", {1.0, static_cast<double>(text.size()), 2.0}}}});
            res.set_content(out.dump(), "application/json");
        });
        server_.Post("/flaky", [this](const httplib::Request&, httplib::Response& res) {
            int n = hits_.fetch_add(1);
            if (n < 2) {
                res.status = 500;
                res.set_content("try later", "text/plain");
                return;
            }
            nlohmann::json out;
            out["data"] = nlohmann::json::array({{{"embedding", {1.0, 2.0, 3.0}}}});
            res.set_content(out.dump(), "application/json");
        });
        server_.Post("/reject", [this](const httplib::Request&, httplib::Response& res) {
            hits_.fetch_add(1);
            res.status = 400;
            res.set_content("bad request", "text/plain");
        });
        server_.Post("/chat", [this](const httplib::Request& req, httplib::Response& res) {
            hits_.fetch_add(1);
            auto body = nlohmann::json::parse(req.body);
            last_auth_ = req.get_header_value("Authorization");
            std::string user = body["messages"][1]["content"].get<std::string>();
            nlohmann::json out;
            nlohmann::json choice;
            choice["message"] = {{"content", "reply to: " + user}};
            if (body.value("logprobs", false)) {
                choice["logprobs"] = {{"content", nlohmann::json::array({{{"logprob", -0.5}},
                                                                         {{"logprob", -1.5}}})}};
            }
            out["choices"] = nlohmann::json::array({choice});
            res.set_content(out.dump(), "application/json");
        });
        server_.Post("/filter", [this](const httplib::Request& req, httplib::Response& res) {
            hits_.fetch_add(1);
            auto body = nlohmann::json::parse(req.body);
            bool flagged = body.value("input", std::string()).find("marker") != std::string::npos;
            nlohmann::json out = {{"flagged", flagged}, {"score", flagged ? 0.9 : 0.1}};
            res.set_content(out.dump(), "application/json");
        });
        port_ = server_.bind_to_any_port("127.0.0.1");
        thread_ = std::thread([this] { server_.listen_after_bind(); });
        server_.wait_until_ready();
    }

    ~TestServer() {
        server_.stop();
        thread_.join();
    }

    std::string endpoint(const std::string& path) const {
        return "http://127.0.0.1:" + std::to_string(port_) + path;
    }

    int hits() const { return hits_.load(); }
    void reset_hits() { hits_.store(0); }
    std::string last_auth() const { return last_auth_; }

private:
    httplib::Server server_;
    std::thread thread_;
    int port_ = 0;
    std::atomic<int> hits_{0};
    std::string last_auth_;
};

BackendConfig fast_config(const std::string& capability, const std::string& endpoint) {
    BackendConfig c;
    c.capability = capability;
    c.endpoint = endpoint;
    c.model_name = "m";
    c.timeout = std::chrono::milliseconds(2000);
    c.max_retries = 2;
    c.max_concurrency = 4;
    c.initial_backoff = std::chrono::milliseconds(1);
    return c;
}

}  // namespace

TEST_CASE("mock embedding is deterministic") {
    MockEmbedBackend backend(8, 42);
    Vec a = backend.embed("abc");
    Vec b = backend.embed("abc");
    CHECK(a == b);
    CHECK(a.size() == 8);
    CHECK(backend.embed("abd") != a);
}

TEST_CASE("batch embedding respects the concurrency bound") {
    MockEmbedBackend backend(4, 1, /*max_concurrency=*/4, std::chrono::milliseconds(10));
    std::vector<std::string> texts;
    for (int i = 0; i < 8; ++i) texts.push_back("text " + std::to_string(i));
    auto vectors = embed_batch(backend, texts, /*max_parallel=*/8);
    REQUIRE(vectors.size() == 8);
    for (std::size_t i = 0; i < texts.size(); ++i) CHECK(vectors[i] == backend.embed(texts[i]));
    CHECK(backend.stats().max_in_flight.load() <= 4);
    CHECK(backend.stats().requests.load() >= 8);
}

TEST_CASE("generation mock contract") {
    SECTION("echo returns the user content, not refused") {
        auto echo = make_echo_backend();
        GenerationResult r = echo->generate("sys", "hello there");
        CHECK(r.text == "hello there");
        CHECK_FALSE(r.refused);
    }
    SECTION("refusal prefixes are flagged") {
        FnGenerateBackend backend("m", [](const std::string&, const std::string&) {
            return GenerationResult{"I can't assist with that", std::nullopt, false};
        });
        CHECK(backend.generate("sys", "x").refused);
    }
    SECTION("refusal matching is prefix-anchored and case-insensitive") {
        CHECK(matches_refusal("I CANNOT help", default_refusal_patterns()));
        CHECK_FALSE(matches_refusal("the model said i can't", default_refusal_patterns()));
    }
    SECTION("empty user content is an invalid request") {
        auto echo = make_echo_backend();
        REQUIRE_THROWS_AS(echo->generate("sys", ""), BackendError);
    }
}

TEST_CASE("http embed client") {
    TestServer server;
    SECTION("round trip") {
        HttpEmbedBackend backend(fast_config("embed", server.endpoint("/embed")));
        Vec v = backend.embed("hello");
        REQUIRE(v.size() == 3);
        CHECK(v[1] == 5.0);
    }
    SECTION("response cache short-circuits the network") {
        ResponseCache cache;
        HttpEmbedBackend backend(fast_config("embed", server.endpoint("/embed")), &cache);
        server.reset_hits();
        Vec a = backend.embed("same text");
        Vec b = backend.embed("same text");
        CHECK(a == b);
        CHECK(server.hits() == 1);
        CHECK(cache.size() == 1);
    }
}

TEST_CASE("http retry policy") {
    TestServer server;
    SECTION("retryable 500s are retried until success") {
        server.reset_hits();
        HttpEmbedBackend backend(fast_config("embed", server.endpoint("/flaky")));
        Vec v = backend.embed("x");
        CHECK(v.size() == 3);
        CHECK(server.hits() == 3);  // 500, 500, 200
    }
    SECTION("4xx fails immediately without retries") {
        server.reset_hits();
        HttpEmbedBackend backend(fast_config("embed", server.endpoint("/reject")));
        REQUIRE_THROWS_AS(backend.embed("x"), BackendError);
        CHECK(server.hits() == 1);
    }
    SECTION("unreachable endpoint exhausts max_retries+1 attempts") {
        HttpEmbedBackend backend(fast_config("embed", "http://127.0.0.1:1/embed"));
        try {
            backend.embed("x");
            FAIL("expected BackendError");
        } catch (const BackendError& e) {
            CHECK(std::string(e.what()).find("3 attempts") != std::string::npos);
        }
    }
}

TEST_CASE("http generate client") {
    TestServer server;
    SECTION("chat round trip with bearer token") {
        setenv("PM_TEST_TOKEN", "sekret", 1);
        BackendConfig config = fast_config("generate", server.endpoint("/chat"));
        config.api_key_env = "PM_TEST_TOKEN";
        HttpGenerateBackend backend(config);
        GenerationResult r = backend.generate("sys", "ping");
        CHECK(r.text == "reply to: ping");
        CHECK_FALSE(r.token_logprobs.has_value());
        CHECK(server.last_auth() == "Bearer sekret");
        unsetenv("PM_TEST_TOKEN");
    }
    SECTION("logprobs template requests and reads token logprobs") {
        BackendConfig config = fast_config("generate", server.endpoint("/chat"));
        config.request_template = "logprobs";
        HttpGenerateBackend backend(config);
        CHECK(backend.supports_logprobs());
        GenerationResult r = backend.generate("sys", "ping");
        REQUIRE(r.token_logprobs.has_value());
        CHECK(r.token_logprobs->size() == 2);
        CHECK((*r.token_logprobs)[0] == -0.5);
    }
}

TEST_CASE("http filter client") {
    TestServer server;
    HttpFilterBackend backend(fast_config("filter", server.endpoint("/filter")));
    CHECK(backend.check("clean prompt").flagged == false);
    CHECK(backend.check("contains marker word").flagged == true);
}

TEST_CASE("mock filter modes") {
    MockFilterBackend never(MockFilterBackend::Mode::never);
    MockFilterBackend always(MockFilterBackend::Mode::always);
    MockFilterBackend marker(MockFilterBackend::Mode::marker, "xyz");
    CHECK_FALSE(never.check("anything").flagged);
    CHECK(always.check("anything").flagged);
    CHECK(marker.check("has xyz inside").flagged);
    CHECK_FALSE(marker.check("clean").flagged);
}

TEST_CASE("mock image backend writes stable artifacts") {
    auto temp = std::filesystem::temp_directory_path() / "pm_img_test";
    std::filesystem::remove_all(temp);
    MockImageBackend backend;
    ImageResult a = backend.generate("a prompt", 7, temp, "p1_baseline");
    REQUIRE_FALSE(a.refused);
    CHECK(a.path.filename() == "p1_baseline.pgm");
    CHECK(std::filesystem::exists(a.path));
    ImageResult b = backend.generate("a prompt", 7, temp, "p1_again");
    CHECK(read_binary_file(a.path) == read_binary_file(b.path));  // same (prompt, seed)

    MockImageBackend refusing(true);
    CHECK(refusing.generate("p", 1, temp, "x").refused);
    std::filesystem::remove_all(temp);
}

TEST_CASE("base64 round trip") {
    std::mt19937_64 rng(5);
    for (int trial = 0; trial < 50; ++trial) {
        std::vector<unsigned char> data(rng() % 64);
        for (auto& b : data) b = static_cast<unsigned char>(rng() & 0xff);
        CHECK(base64_decode(base64_encode(data)) == data);
    }
    REQUIRE_THROWS_AS(base64_decode("!!!"), MalformedResponse);
}

TEST_CASE("perplexity from token logprobs") {
    SECTION("uniform -ln2 logprobs give perplexity 2.0") {
        double ln2 = std::log(2.0);
        std::vector<double> lps(10, -ln2);
        CHECK(perplexity_from_logprobs(lps) == Catch::Approx(2.0).margin(1e-12));
    }
    SECTION("a single zero logprob gives perplexity 1.0") {
        CHECK(perplexity_from_logprobs({0.0}) == Catch::Approx(1.0).margin(1e-15));
    }
    SECTION("empty list is malformed") {
        REQUIRE_THROWS_AS(perplexity_from_logprobs({}), MalformedResponse);
    }
}

TEST_CASE("perplexity service source selection") {
    SECTION("logprob-capable backend wins and the method is recorded") {
        FnGenerateBackend backend(
            "lp",
            [](const std::string&, const std::string&) {
                return GenerationResult{"t", std::vector<double>{-std::log(2.0), -std::log(2.0)},
                                        false};
            },
            /*logprobs=*/true);
        PerplexityService service(&backend, nullptr);
        PerplexityResult r = service.score("some text");
        CHECK(r.method == "logprob");
        CHECK(r.value == Catch::Approx(2.0).margin(1e-12));
    }
    SECTION("no logprobs and no fallback is NoPerplexitySource") {
        auto echo = make_echo_backend();
        PerplexityService service(echo.get(), nullptr);
        REQUIRE_THROWS_AS(service.score("text"), NoPerplexitySource);
    }
    SECTION("backend claiming logprobs but returning none is NoPerplexitySource") {
        FnGenerateBackend liar(
            "liar",
            [](const std::string&, const std::string&) {
                return GenerationResult{"t", std::nullopt, false};
            },
            /*logprobs=*/true);
        PerplexityService service(&liar, nullptr);
        REQUIRE_THROWS_AS(service.score("text"), NoPerplexitySource);
    }
    SECTION("ngram fallback is deterministic and never mixed") {
        auto scorer = std::make_shared<NgramScorer>(
            "the quick brown fox jumps over the lazy dog and runs far away");
        auto echo = make_echo_backend();
        PerplexityService service(echo.get(), scorer);
        CHECK(service.method() == "ngram");
        PerplexityResult a = service.score("the quick fox");
        PerplexityResult b = service.score("the quick fox");
        CHECK(a.method == "ngram");
        CHECK(a.value == b.value);
        CHECK(a.value > 0.0);
        // In-distribution text scores lower than alien text.
        CHECK(service.score("the quick brown fox").value < service.score("zzqx##@@!!").value);
    }
    SECTION("empty text is rejected") {
        auto scorer = std::make_shared<NgramScorer>("training text");
        PerplexityService service(nullptr, scorer);
        REQUIRE_THROWS_AS(service.score(""), BackendError);
    }
}

TEST_CASE("backend config validation") {
    BackendConfig c;
    c.capability = "embed";
    c.endpoint = "http://x/y";
    c.timeout = std::chrono::milliseconds(0);
    REQUIRE_THROWS_AS(c.validate(), ValidationError);
    c.timeout = std::chrono::milliseconds(10);
    c.max_retries = -1;
    REQUIRE_THROWS_AS(c.validate(), ValidationError);
    c.max_retries = 0;
    c.max_concurrency = 0;
    REQUIRE_THROWS_AS(c.validate(), ValidationError);
    c.max_concurrency = 1;
    CHECK_NOTHROW(c.validate());
}
