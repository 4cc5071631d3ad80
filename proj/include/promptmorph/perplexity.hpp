#pragma once

#include <cmath>
#include <cstdint>
#include <memory>
#include <set>
#include <string>
#include <unordered_map>
#include <vector>

#include "promptmorph/backends.hpp"
#include "promptmorph/errors.hpp"

namespace promptmorph {

struct PerplexityResult {
    double value = 0.0;
    std::string method;  // "logprob" or "ngram"
};

inline double perplexity_from_logprobs(const std::vector<double>& logprobs) {
    if (logprobs.empty()) throw MalformedResponse("empty token logprob list");
    double sum = 0.0;
    for (double lp : logprobs) sum += lp;
    return std::exp(-sum / static_cast<double>(logprobs.size()));
}

// Character n-gram model with add-one smoothing. Self-contained so the
// fluency gate works with no generation backend at all.
class NgramScorer {
public:
    explicit NgramScorer(const std::string& training_text, std::size_t order = 3)
        : order_(order < 2 ? 2 : order) {
        if (training_text.empty()) throw ValidationError("ngram scorer needs non-empty training text");
        std::set<char> alphabet(training_text.begin(), training_text.end());
        vocab_size_ = alphabet.size() + 1;  // +1 for the unseen-char bucket
        known_.assign(256, false);
        for (char c : alphabet) known_[static_cast<unsigned char>(c)] = true;

        std::string padded = padding() + training_text;
        for (std::size_t i = order_ - 1; i < padded.size(); ++i) {
            ngram_counts_[padded.substr(i - (order_ - 1), order_)]++;
            context_counts_[padded.substr(i - (order_ - 1), order_ - 1)]++;
        }
    }

    double log_prob(const std::string& text) const {
        std::string padded = padding() + normalize(text);
        double sum = 0.0;
        for (std::size_t i = order_ - 1; i < padded.size(); ++i) {
            std::string gram = padded.substr(i - (order_ - 1), order_);
            std::string ctx = padded.substr(i - (order_ - 1), order_ - 1);
            auto ng = ngram_counts_.find(gram);
            auto cg = context_counts_.find(ctx);
            double num = 1.0 + (ng == ngram_counts_.end() ? 0.0 : static_cast<double>(ng->second));
            double den = static_cast<double>(vocab_size_) +
                         (cg == context_counts_.end() ? 0.0 : static_cast<double>(cg->second));
            sum += std::log(num / den);
        }
        return sum;
    }

    double perplexity(const std::string& text) const {
        if (text.empty()) throw BackendError("InvalidRequest: empty text");
        return std::exp(-log_prob(text) / static_cast<double>(text.size()));
    }

private:
    std::string padding() const { return std::string(order_ - 1, '\x02'); }

    std::string normalize(const std::string& text) const {
        std::string out = text;
        for (char& c : out) {
            if (!known_[static_cast<unsigned char>(c)]) c = '\x01';
        }
        return out;
    }

    std::size_t order_;
    std::size_t vocab_size_;
    std::vector<bool> known_;
    std::unordered_map<std::string, std::uint64_t> ngram_counts_;
    std::unordered_map<std::string, std::uint64_t> context_counts_;
};

inline const char* kPerplexityProbeInstruction =
    "Return the text exactly as given, with per-token log probabilities.";

// Picks its source once, at construction: backend token log-probs when the
// backend supports them, otherwise the configured n-gram fallback. The two
// sources are never mixed within one service instance.
class PerplexityService {
public:
    PerplexityService(GenerateBackend* backend, std::shared_ptr<const NgramScorer> fallback)
        : fallback_(std::move(fallback)) {
        if (backend && backend->supports_logprobs()) {
            backend_ = backend;
            method_ = "logprob";
        } else if (fallback_) {
            method_ = "ngram";
        } else {
            method_ = "none";
        }
    }

    PerplexityResult score(const std::string& text) const {
        if (text.empty()) throw BackendError("InvalidRequest: empty text");
        if (method_ == "logprob") {
            GenerationResult r = backend_->generate(kPerplexityProbeInstruction, text);
            if (!r.token_logprobs || r.token_logprobs->empty()) {
                throw NoPerplexitySource("backend '" + backend_->id() +
                                         "' returned no token logprobs");
            }
            return {perplexity_from_logprobs(*r.token_logprobs), "logprob"};
        }
        if (method_ == "ngram") {
            return {fallback_->perplexity(text), "ngram"};
        }
        throw NoPerplexitySource("no logprob backend and no n-gram fallback configured");
    }

    const std::string& method() const { return method_; }

private:
    GenerateBackend* backend_ = nullptr;
    std::shared_ptr<const NgramScorer> fallback_;
    std::string method_;
};

}  // namespace promptmorph
