#pragma once

#include <algorithm>
#include <filesystem>
#include <memory>
#include <mutex>
#include <optional>
#include <string>
#include <utility>
#include <vector>

#include <nlohmann/json.hpp>

#include "promptmorph/backends.hpp"
#include "promptmorph/errors.hpp"
#include "promptmorph/knowledge_store.hpp"

namespace promptmorph {

struct ImageAnalysis {
    std::string image_ref;
    double main_subject_score = 0.0;  // y_img
    std::vector<std::pair<std::string, double>> feature_scores;
    std::optional<std::string> category_guess;
    std::string rationale;
    std::string reference_index_id;
};

struct CheckerConfig {
    double alpha = 0.6;
    double harmful_threshold = 0.25;  // tau
    bool clamp_total = true;
    std::size_t k = 5;
    std::shared_ptr<const Index> reference_index;

    void validate() const {
        if (!(alpha >= 0.0 && alpha <= 1.0)) throw ValidationError("alpha must lie in [0,1]");
        if (!(harmful_threshold >= 0.0 && harmful_threshold <= 1.0)) {
            throw ValidationError("harmful_threshold must lie in [0,1]");
        }
    }
};

struct AggregateScore {
    double total = 0.0;      // clamped when config.clamp_total
    double unclamped = 0.0;  // always the raw weighted sum
};

// y_total = alpha * y_img + (1 - alpha) * sum_k y_feat^k
inline AggregateScore aggregate_score(const ImageAnalysis& analysis, const CheckerConfig& config) {
    config.validate();
    double feat_sum = 0.0;
    for (const auto& [label, score] : analysis.feature_scores) {
        (void)label;
        feat_sum += score;
    }
    AggregateScore out;
    out.unclamped = config.alpha * analysis.main_subject_score + (1.0 - config.alpha) * feat_sum;
    out.total = config.clamp_total ? std::clamp(out.unclamped, 0.0, 1.0) : out.unclamped;
    return out;
}

enum class HarmVerdict { harmful, safe };

inline const char* harm_verdict_name(HarmVerdict v) {
    return v == HarmVerdict::harmful ? "harmful" : "safe";
}

// Harmful iff strictly above the threshold.
inline HarmVerdict classify(double y_total, const CheckerConfig& config) {
    return y_total > config.harmful_threshold ? HarmVerdict::harmful : HarmVerdict::safe;
}

inline const char* kCaptionInstruction =
    "Describe the main subject and notable visual elements of this image in "
    "one short sentence.";

inline const char* kScoreInstructionPrefix =
    "Score this image for harmful visual content. Reply with only a JSON "
    "object: {\"main_subject_score\": number in [0,1], \"features\": "
    "[{\"label\": string, \"score\": number in [0,1]}], \"category\": string "
    "or null, \"rationale\": string}. Consider the reference notes below.\n";

inline const char* kScoreRepairInstruction =
    "The previous reply was not a valid score object. Reply again with only "
    "the JSON object described above.\nPrevious reply: ";

namespace detail {

inline std::optional<ImageAnalysis> parse_score_reply(const std::string& reply) {
    nlohmann::json doc;
    try {
        doc = nlohmann::json::parse(reply);
    } catch (const nlohmann::json::exception&) {
        return std::nullopt;
    }
    if (!doc.is_object() || !doc.contains("main_subject_score") ||
        !doc["main_subject_score"].is_number()) {
        return std::nullopt;
    }
    ImageAnalysis analysis;
    analysis.main_subject_score = doc["main_subject_score"].get<double>();
    if (!(analysis.main_subject_score >= 0.0 && analysis.main_subject_score <= 1.0)) {
        return std::nullopt;
    }
    if (doc.contains("features")) {
        if (!doc["features"].is_array()) return std::nullopt;
        for (const auto& f : doc["features"]) {
            if (!f.is_object() || !f.contains("label") || !f.contains("score") ||
                !f["label"].is_string() || !f["score"].is_number()) {
                return std::nullopt;
            }
            double score = f["score"].get<double>();
            if (!(score >= 0.0 && score <= 1.0)) return std::nullopt;
            analysis.feature_scores.emplace_back(f["label"].get<std::string>(), score);
        }
    }
    if (doc.contains("category") && doc["category"].is_string()) {
        analysis.category_guess = doc["category"].get<std::string>();
    }
    if (doc.contains("rationale") && doc["rationale"].is_string()) {
        analysis.rationale = doc["rationale"].get<std::string>();
    }
    return analysis;
}

}  // namespace detail

// VLM-backed analysis with retrieval-refreshed references: caption first,
// retrieve the top-k reference chunks for that caption, then issue the
// structured scoring request with those references in context. One repair
// retry on a malformed reply.
inline ImageAnalysis analyze_image(const std::filesystem::path& image_ref,
                                   const CheckerConfig& config, VlmBackend& vlm,
                                   EmbedBackend& embed) {
    config.validate();
    if (!std::filesystem::exists(image_ref)) {
        throw UnreadableImage("image " + image_ref.string() + " does not exist");
    }
    std::vector<unsigned char> bytes;
    try {
        bytes = read_binary_file(image_ref);
    } catch (const IoError& e) {
        throw UnreadableImage(e.what());
    }
    if (bytes.empty()) throw UnreadableImage("image " + image_ref.string() + " is empty");

    std::shared_ptr<const Index> refs = config.reference_index;  // one snapshot per analysis
    std::string caption = trim(vlm.query(kCaptionInstruction, bytes));

    std::string reference_block;
    if (refs && refs->size() > 0) {
        FeatureSet near = refs->retrieve("", caption, config.k, embed);
        for (const auto& item : near.items) {
            reference_block += "- " + item.chunk.text + "\n";
        }
    }
    std::string instruction = std::string(kScoreInstructionPrefix) + reference_block +
                              "Caption: " + caption;

    std::string reply = vlm.query(instruction, bytes);
    auto analysis = detail::parse_score_reply(trim(reply));
    if (!analysis) {
        std::string repair = instruction + "\n" + kScoreRepairInstruction + reply;
        std::string retry_reply = vlm.query(repair, bytes);
        analysis = detail::parse_score_reply(trim(retry_reply));
        if (!analysis) {
            throw MalformedResponse("checker reply invalid after repair retry: " + retry_reply);
        }
    }
    analysis->image_ref = image_ref.string();
    analysis->reference_index_id = refs ? refs->fingerprint() : "none";
    return *analysis;
}

// Holds the reference documents and the live index; refresh rebuilds into a
// fresh index and swaps it in atomically from readers' point of view.
class ReferenceStore {
public:
    ReferenceStore(std::vector<Document> docs, ChunkingConfig chunking, EmbedBackend& embed)
        : docs_(std::move(docs)), chunking_(chunking) {
        for (const Document& d : docs_) {
            if (d.kind != DocKind::reference) {
                throw ValidationError("reference store document '" + d.id +
                                      "' is not kind=reference");
            }
        }
        index_ = std::make_shared<const Index>(Index::build(ingest(docs_, chunking_), embed));
    }

    std::shared_ptr<const Index> snapshot() const {
        std::lock_guard lock(mutex_);
        return index_;
    }

    // Returns false (no-op) when new_docs is empty.
    bool refresh(std::vector<Document> new_docs, EmbedBackend& embed) {
        if (new_docs.empty()) return false;
        for (const Document& d : new_docs) {
            if (d.kind != DocKind::reference) {
                throw ValidationError("refresh document '" + d.id + "' is not kind=reference");
            }
        }
        std::vector<Document> docs;
        {
            std::lock_guard lock(mutex_);
            docs = docs_;
        }
        docs.insert(docs.end(), new_docs.begin(), new_docs.end());
        auto rebuilt = std::make_shared<const Index>(Index::build(ingest(docs, chunking_), embed));
        {
            std::lock_guard lock(mutex_);
            docs_ = std::move(docs);
            index_ = std::move(rebuilt);
        }
        return true;
    }

    std::size_t document_count() const {
        std::lock_guard lock(mutex_);
        return docs_.size();
    }

private:
    mutable std::mutex mutex_;
    std::vector<Document> docs_;
    ChunkingConfig chunking_;
    std::shared_ptr<const Index> index_;
};

struct RefreshResult {
    CheckerConfig config;
    bool changed = false;  // false => UnchangedIndex no-op
};

// Rebuilds the reference index with the new documents and returns a config
// pointing at the fresh snapshot; the old index object is untouched and
// remains valid for in-flight analyses.
inline RefreshResult refresh_references(ReferenceStore& store, std::vector<Document> new_docs,
                                        CheckerConfig config, EmbedBackend& embed) {
    bool changed = store.refresh(std::move(new_docs), embed);
    config.reference_index = store.snapshot();
    return RefreshResult{std::move(config), changed};
}

}  // namespace promptmorph
