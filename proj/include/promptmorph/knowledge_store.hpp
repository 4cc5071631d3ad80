#pragma once

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <filesystem>
#include <map>
#include <memory>
#include <optional>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "promptmorph/backends.hpp"
#include "promptmorph/errors.hpp"
#include "promptmorph/util.hpp"

namespace promptmorph {

enum class DocKind { feature, style, reference };

inline const char* doc_kind_name(DocKind k) {
    switch (k) {
        case DocKind::feature: return "feature";
        case DocKind::style: return "style";
        case DocKind::reference: return "reference";
    }
    return "?";
}

inline DocKind doc_kind_from_name(const std::string& name) {
    if (name == "feature") return DocKind::feature;
    if (name == "style") return DocKind::style;
    if (name == "reference") return DocKind::reference;
    throw ValidationError("unknown document kind '" + name + "'");
}

struct Document {
    std::string id;
    DocKind kind = DocKind::feature;
    std::vector<std::string> category_tags;
    std::string body;
};

struct ChunkingConfig {
    std::size_t size = 1024;
    std::size_t overlap = 128;
};

struct Chunk {
    std::string doc_id;
    std::size_t ordinal = 0;  // global, dense, in ingestion order
    std::string text;
    std::vector<std::string> category_tags;
};

// Sliding-window chunking: windows start at 0, stride = size - overlap,
// and a window is emitted for every start < body length.
inline std::vector<Chunk> ingest(const std::vector<Document>& documents,
                                 const ChunkingConfig& chunking) {
    if (documents.empty()) throw EmptyCorpus("no documents to ingest");
    if (chunking.size == 0 || chunking.overlap >= chunking.size) {
        throw InvalidChunking("chunk overlap (" + std::to_string(chunking.overlap) +
                              ") must be smaller than chunk size (" +
                              std::to_string(chunking.size) + ")");
    }
    const std::size_t stride = chunking.size - chunking.overlap;
    std::vector<Chunk> chunks;
    std::size_t ordinal = 0;
    for (const Document& doc : documents) {
        if (doc.body.empty()) throw ValidationError("document '" + doc.id + "' has an empty body");
        for (std::size_t start = 0; start < doc.body.size(); start += stride) {
            Chunk c;
            c.doc_id = doc.id;
            c.ordinal = ordinal++;
            c.text = doc.body.substr(start, chunking.size);
            c.category_tags = doc.category_tags;
            chunks.push_back(std::move(c));
        }
    }
    return chunks;
}

struct EmbeddedChunk {
    Chunk chunk;
    Vec embedding;
};

struct RetrievedChunk {
    Chunk chunk;
    double similarity = 0.0;
};

// Eq.-6 result: ordered by nonincreasing similarity, ordinal tie-break.
struct FeatureSet {
    std::vector<RetrievedChunk> items;

    bool empty() const { return items.empty(); }
    std::size_t size() const { return items.size(); }

    std::vector<std::string> texts() const {
        std::vector<std::string> out;
        out.reserve(items.size());
        for (const auto& it : items) out.push_back(it.chunk.text);
        return out;
    }
};

inline double cosine_similarity(const Vec& v, const Vec& w) {
    if (v.size() != w.size()) {
        throw DimensionMismatch("cosine over dimensions " + std::to_string(v.size()) + " vs " +
                                std::to_string(w.size()));
    }
    double dot = 0.0, nv = 0.0, nw = 0.0;
    for (std::size_t i = 0; i < v.size(); ++i) {
        dot += v[i] * w[i];
        nv += v[i] * v[i];
        nw += w[i] * w[i];
    }
    if (nv == 0.0 || nw == 0.0) throw ZeroVector("cosine of an all-zero vector");
    return dot / (std::sqrt(nv) * std::sqrt(nw));
}

// Disk cache of embeddings keyed by (backend id, chunk text hash); lets
// re-ingestion of an unchanged corpus skip every embedding request.
class EmbeddingCache {
public:
    static std::string key(const std::string& backend_id, const std::string& text) {
        return backend_id + "/" + hex64(fnv1a64(text));
    }

    const Vec* lookup(const std::string& backend_id, const std::string& text) const {
        auto it = entries_.find(key(backend_id, text));
        return it == entries_.end() ? nullptr : &it->second;
    }

    void insert(const std::string& backend_id, const std::string& text, Vec v) {
        entries_[key(backend_id, text)] = std::move(v);
    }

    std::size_t size() const { return entries_.size(); }

    void save(const std::filesystem::path& path) const {
        nlohmann::ordered_json doc;
        doc["format"] = "promptmorph-embedding-cache/1";
        nlohmann::ordered_json body = nlohmann::ordered_json::object();
        for (const auto& [k, v] : entries_) body[k] = v;
        doc["entries"] = std::move(body);
        write_text_file(path, doc.dump() + "\n");
    }

    static EmbeddingCache load(const std::filesystem::path& path) {
        EmbeddingCache cache;
        if (!std::filesystem::exists(path)) return cache;
        nlohmann::json doc;
        try {
            doc = nlohmann::json::parse(read_text_file(path));
        } catch (const nlohmann::json::exception& e) {
            throw ParseError("embedding cache " + path.string() + ": " + e.what());
        }
        if (doc.value("format", std::string()) != "promptmorph-embedding-cache/1") {
            throw ParseError("embedding cache " + path.string() + ": unknown format");
        }
        for (auto it = doc["entries"].begin(); it != doc["entries"].end(); ++it) {
            cache.entries_[it.key()] = it.value().get<Vec>();
        }
        return cache;
    }

private:
    std::map<std::string, Vec> entries_;
};

struct DuplicatePair {
    std::size_t a = 0;  // lower ordinal
    std::size_t b = 0;
    double similarity = 0.0;
};

inline constexpr const char* kQuerySeparator = " | ";

// Frozen, exact-search vector index. Construction is the only writer; all
// readers after that are lock-free.
class Index {
public:
    Index(std::vector<EmbeddedChunk> chunks, std::string backend_id)
        : chunks_(std::move(chunks)), backend_id_(std::move(backend_id)) {
        if (!chunks_.empty()) dim_ = chunks_.front().embedding.size();
        for (const EmbeddedChunk& ec : chunks_) {
            if (ec.embedding.size() != dim_) {
                throw DimensionMismatch("chunk " + std::to_string(ec.chunk.ordinal) + " has dim " +
                                        std::to_string(ec.embedding.size()) + ", index dim " +
                                        std::to_string(dim_));
            }
            for (double x : ec.embedding) {
                if (!std::isfinite(x)) {
                    throw ValidationError("non-finite embedding component in chunk " +
                                          std::to_string(ec.chunk.ordinal));
                }
            }
        }
        std::uint64_t h = fnv1a64(backend_id_);
        for (const EmbeddedChunk& ec : chunks_) {
            h = fnv1a64(ec.chunk.text, h);
            for (double x : ec.embedding) {
                h = fnv1a64(std::string_view(reinterpret_cast<const char*>(&x), sizeof(x)), h);
            }
        }
        fingerprint_ = hex64(h);
    }

    static Index build(const std::vector<Chunk>& chunks, EmbedBackend& backend,
                       EmbeddingCache* cache = nullptr, int max_parallel = 1) {
        if (chunks.empty()) throw EmptyCorpus("no chunks to index");
        std::vector<std::string> to_embed;
        std::vector<std::size_t> missing;
        std::vector<Vec> embeddings(chunks.size());
        for (std::size_t i = 0; i < chunks.size(); ++i) {
            const Vec* hit = cache ? cache->lookup(backend.id(), chunks[i].text) : nullptr;
            if (hit) {
                embeddings[i] = *hit;
            } else {
                missing.push_back(i);
                to_embed.push_back(chunks[i].text);
            }
        }
        std::vector<Vec> fresh = embed_batch(backend, to_embed, max_parallel);
        for (std::size_t j = 0; j < missing.size(); ++j) {
            embeddings[missing[j]] = std::move(fresh[j]);
            if (cache) cache->insert(backend.id(), chunks[missing[j]].text, embeddings[missing[j]]);
        }
        std::vector<EmbeddedChunk> embedded;
        embedded.reserve(chunks.size());
        for (std::size_t i = 0; i < chunks.size(); ++i) {
            embedded.push_back(EmbeddedChunk{chunks[i], std::move(embeddings[i])});
        }
        return Index(std::move(embedded), backend.id());
    }

    std::size_t size() const { return chunks_.size(); }
    std::size_t dimension() const { return dim_; }
    const std::string& backend_id() const { return backend_id_; }
    const std::string& fingerprint() const { return fingerprint_; }
    const std::vector<EmbeddedChunk>& chunks() const { return chunks_; }

    // Exact top-k by cosine, ties broken by ascending ordinal. k larger
    // than the index returns the full ranking.
    std::vector<RetrievedChunk> top_k(const Vec& query, std::size_t k) const {
        if (chunks_.empty()) throw EmptyIndex("top_k on an empty index");
        if (k == 0) throw ValidationError("k must be >= 1");
        std::vector<std::pair<double, std::size_t>> scored;  // (similarity, position)
        scored.reserve(chunks_.size());
        for (std::size_t i = 0; i < chunks_.size(); ++i) {
            scored.emplace_back(cosine_similarity(query, chunks_[i].embedding), i);
        }
        std::stable_sort(scored.begin(), scored.end(), [&](const auto& x, const auto& y) {
            if (x.first != y.first) return x.first > y.first;
            return chunks_[x.second].chunk.ordinal < chunks_[y.second].chunk.ordinal;
        });
        std::size_t take = std::min(k, scored.size());
        std::vector<RetrievedChunk> out;
        out.reserve(take);
        for (std::size_t i = 0; i < take; ++i) {
            out.push_back(RetrievedChunk{chunks_[scored[i].second].chunk, scored[i].first});
        }
        return out;
    }

    // Joint query per the E(C,P) convention: descriptor, separator, prompt;
    // an empty descriptor means a prompt-only query.
    static std::string joint_query(const std::string& category_descriptor,
                                   const std::string& prompt) {
        if (category_descriptor.empty()) return prompt;
        return category_descriptor + kQuerySeparator + prompt;
    }

    FeatureSet retrieve(const std::string& category_descriptor, const std::string& prompt,
                        std::size_t k, EmbedBackend& backend) const {
        if (chunks_.empty()) throw EmptyIndex("retrieve on an empty index");
        Vec query = backend.embed(joint_query(category_descriptor, prompt));
        return FeatureSet{top_k(query, k)};
    }

    // Every unordered pair at or above the threshold, lower ordinal first,
    // sorted by (a, b).
    std::vector<DuplicatePair> dedup(double threshold) const {
        if (chunks_.empty()) throw EmptyIndex("dedup on an empty index");
        if (!(threshold > 0.0 && threshold <= 1.0)) {
            throw ValidationError("dedup threshold must lie in (0, 1]");
        }
        std::vector<DuplicatePair> pairs;
        for (std::size_t i = 0; i < chunks_.size(); ++i) {
            for (std::size_t j = i + 1; j < chunks_.size(); ++j) {
                double sim = cosine_similarity(chunks_[i].embedding, chunks_[j].embedding);
                if (sim >= threshold) {
                    std::size_t oa = chunks_[i].chunk.ordinal;
                    std::size_t ob = chunks_[j].chunk.ordinal;
                    pairs.push_back(DuplicatePair{std::min(oa, ob), std::max(oa, ob), sim});
                }
            }
        }
        std::sort(pairs.begin(), pairs.end(), [](const DuplicatePair& x, const DuplicatePair& y) {
            if (x.a != y.a) return x.a < y.a;
            return x.b < y.b;
        });
        return pairs;
    }

    void save(const std::filesystem::path& path) const {
        nlohmann::ordered_json doc;
        doc["format"] = "promptmorph-index/1";
        doc["backend_id"] = backend_id_;
        doc["dimension"] = dim_;
        doc["chunks"] = nlohmann::ordered_json::array();
        for (const EmbeddedChunk& ec : chunks_) {
            nlohmann::ordered_json cj;
            cj["doc_id"] = ec.chunk.doc_id;
            cj["ordinal"] = ec.chunk.ordinal;
            cj["text"] = ec.chunk.text;
            cj["category_tags"] = ec.chunk.category_tags;
            cj["embedding"] = ec.embedding;
            doc["chunks"].push_back(std::move(cj));
        }
        write_text_file(path, doc.dump() + "\n");
    }

    static Index load(const std::filesystem::path& path) {
        nlohmann::json doc;
        try {
            doc = nlohmann::json::parse(read_text_file(path));
        } catch (const nlohmann::json::exception& e) {
            throw ParseError("index file " + path.string() + ": " + e.what());
        }
        if (doc.value("format", std::string()) != "promptmorph-index/1") {
            throw ParseError("index file " + path.string() + ": unknown format");
        }
        std::vector<EmbeddedChunk> chunks;
        for (const auto& cj : doc["chunks"]) {
            EmbeddedChunk ec;
            ec.chunk.doc_id = cj.value("doc_id", std::string());
            ec.chunk.ordinal = cj.value("ordinal", std::size_t{0});
            ec.chunk.text = cj.value("text", std::string());
            if (cj.contains("category_tags")) {
                ec.chunk.category_tags = cj["category_tags"].get<std::vector<std::string>>();
            }
            ec.embedding = cj["embedding"].get<Vec>();
            chunks.push_back(std::move(ec));
        }
        Index index(std::move(chunks), doc.value("backend_id", std::string()));
        if (index.dimension() != doc.value("dimension", std::size_t{0})) {
            throw ParseError("index file " + path.string() + ": dimension header mismatch");
        }
        return index;
    }

private:
    std::vector<EmbeddedChunk> chunks_;
    std::string backend_id_;
    std::size_t dim_ = 0;
    std::string fingerprint_;
};

// Corpus directory layout: plain-text documents plus manifest.json mapping
// file name -> {kind, category_tags}.
inline std::vector<Document> load_corpus_dir(const std::filesystem::path& dir) {
    std::filesystem::path manifest_path = dir / "manifest.json";
    if (!std::filesystem::exists(dir)) throw IoError("corpus directory " + dir.string() + " not found");
    if (!std::filesystem::exists(manifest_path)) {
        throw EmptyCorpus("no manifest.json in " + dir.string());
    }
    nlohmann::json manifest;
    try {
        manifest = nlohmann::json::parse(read_text_file(manifest_path));
    } catch (const nlohmann::json::exception& e) {
        throw ParseError("corpus manifest: " + std::string(e.what()));
    }
    if (!manifest.is_object() || manifest.empty()) {
        throw EmptyCorpus("corpus manifest lists no documents");
    }
    std::vector<Document> docs;
    for (auto it = manifest.begin(); it != manifest.end(); ++it) {
        Document d;
        d.id = it.key();
        d.kind = doc_kind_from_name(it.value().value("kind", std::string("feature")));
        if (it.value().contains("category_tags")) {
            d.category_tags = it.value()["category_tags"].get<std::vector<std::string>>();
        }
        d.body = read_text_file(dir / it.key());
        docs.push_back(std::move(d));
    }
    return docs;
}

}  // namespace promptmorph
