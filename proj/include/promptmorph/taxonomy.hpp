#pragma once

#include <array>
#include <cmath>
#include <cstddef>
#include <map>
#include <optional>
#include <set>
#include <string>
#include <string_view>
#include <vector>

#include <nlohmann/json.hpp>

#include "promptmorph/errors.hpp"
#include "promptmorph/util.hpp"

namespace promptmorph {

// The five cognitive-perceptual dimensions of the toxicity risk matrix.
enum class Dimension : std::size_t { MC = 0, EP, VMI, AC, SI };

inline constexpr std::array<Dimension, 5> kAllDimensions = {
    Dimension::MC, Dimension::EP, Dimension::VMI, Dimension::AC, Dimension::SI};

inline constexpr const char* dimension_name(Dimension d) {
    switch (d) {
        case Dimension::MC: return "MC";
        case Dimension::EP: return "EP";
        case Dimension::VMI: return "VMI";
        case Dimension::AC: return "AC";
        case Dimension::SI: return "SI";
    }
    return "?";
}

inline std::optional<Dimension> dimension_from_name(std::string_view name) {
    for (Dimension d : kAllDimensions) {
        if (name == dimension_name(d)) return d;
    }
    return std::nullopt;
}

// Fixed map over the five dimensions.
struct DimensionScores {
    std::array<double, 5> values{};

    double& operator[](Dimension d) { return values[static_cast<std::size_t>(d)]; }
    double operator[](Dimension d) const { return values[static_cast<std::size_t>(d)]; }

    double sum() const {
        double s = 0.0;
        for (double v : values) s += v;
        return s;
    }

    bool operator==(const DimensionScores&) const = default;
};

// Default base scores: MC 0.30, EP 0.25, VMI 0.20, AC 0.15, SI 0.10.
inline DimensionScores default_base_scores() {
    DimensionScores s;
    s[Dimension::MC] = 0.30;
    s[Dimension::EP] = 0.25;
    s[Dimension::VMI] = 0.20;
    s[Dimension::AC] = 0.15;
    s[Dimension::SI] = 0.10;
    return s;
}

struct Category {
    std::string id;
    std::string name;
    std::vector<std::string> subcategories;
    DimensionScores dimension_weights;
};

// Base scores plus per-category dimension weights; the scoring surface.
struct RiskMatrix {
    DimensionScores base_scores = default_base_scores();
    std::map<std::string, DimensionScores> per_category;

    const DimensionScores& weights_for(const std::string& category_id) const {
        auto it = per_category.find(category_id);
        if (it == per_category.end()) {
            throw UnknownCategory("no category '" + category_id + "' in risk matrix");
        }
        return it->second;
    }
};

// Per-dimension base*weight products; sums to category_risk_score.
inline DimensionScores dimension_profile(const RiskMatrix& matrix, const std::string& category_id) {
    const DimensionScores& w = matrix.weights_for(category_id);
    DimensionScores out;
    for (Dimension d : kAllDimensions) out[d] = matrix.base_scores[d] * w[d];
    return out;
}

inline double category_risk_score(const RiskMatrix& matrix, const std::string& category_id) {
    return dimension_profile(matrix, category_id).sum();
}

struct Taxonomy {
    std::string version;
    DimensionScores base_scores = default_base_scores();
    std::vector<Category> categories;

    const Category* find(const std::string& id) const {
        for (const Category& c : categories) {
            if (c.id == id) return &c;
        }
        return nullptr;
    }

    // Query text used when retrieval is conditioned on a category.
    std::string descriptor(const std::string& id) const {
        const Category* c = find(id);
        if (!c) return id;
        return c->name.empty() ? c->id : c->name;
    }

    RiskMatrix risk_matrix() const {
        RiskMatrix m;
        m.base_scores = base_scores;
        for (const Category& c : categories) m.per_category[c.id] = c.dimension_weights;
        return m;
    }
};

namespace detail {

inline DimensionScores parse_dimension_map(const nlohmann::json& obj, const std::string& where,
                                           bool must_sum_to_one) {
    if (!obj.is_object()) throw ParseError(where + ": expected an object of dimension scores");
    DimensionScores out;
    std::set<std::string> seen;
    for (auto it = obj.begin(); it != obj.end(); ++it) {
        auto dim = dimension_from_name(it.key());
        if (!dim) {
            throw ValidationError(where + ": unknown dimension '" + it.key() + "'");
        }
        if (!it.value().is_number()) {
            throw ParseError(where + ": dimension '" + it.key() + "' is not a number");
        }
        double v = it.value().get<double>();
        if (!(v >= 0.0 && v <= 1.0) || !std::isfinite(v)) {
            throw ValidationError(where + ": dimension '" + it.key() + "' weight " +
                                  std::to_string(v) + " outside [0,1]");
        }
        out[*dim] = v;
        seen.insert(it.key());
    }
    if (seen.size() != kAllDimensions.size()) {
        for (Dimension d : kAllDimensions) {
            if (!seen.count(dimension_name(d))) {
                throw ValidationError(where + ": missing dimension '" +
                                      std::string(dimension_name(d)) + "'");
            }
        }
    }
    if (must_sum_to_one && std::abs(out.sum() - 1.0) > 1e-9) {
        throw ValidationError(where + ": base scores sum to " + std::to_string(out.sum()) +
                              ", expected 1.0");
    }
    return out;
}

}  // namespace detail

inline Taxonomy parse_taxonomy(const std::string& text) {
    nlohmann::json doc;
    try {
        doc = nlohmann::json::parse(text);
    } catch (const nlohmann::json::exception& e) {
        throw ParseError(std::string("taxonomy file is not valid JSON: ") + e.what());
    }
    if (!doc.is_object()) throw ParseError("taxonomy file: top level must be an object");

    Taxonomy tax;
    tax.version = doc.value("version", std::string("unversioned"));
    if (doc.contains("base_scores")) {
        tax.base_scores = detail::parse_dimension_map(doc["base_scores"], "base_scores", true);
    }

    if (!doc.contains("categories") || !doc["categories"].is_array()) {
        throw ParseError("taxonomy file: missing 'categories' array");
    }
    std::set<std::string> category_ids;
    std::set<std::string> sub_ids_global;
    for (const auto& cj : doc["categories"]) {
        if (!cj.is_object()) throw ParseError("taxonomy file: category entries must be objects");
        Category c;
        c.id = cj.value("id", std::string());
        if (c.id.empty()) throw ValidationError("category with empty or missing id");
        if (!category_ids.insert(c.id).second) {
            throw ValidationError("duplicate category id '" + c.id + "'");
        }
        c.name = cj.value("name", std::string());
        if (cj.contains("subcategories")) {
            if (!cj["subcategories"].is_array()) {
                throw ParseError("category '" + c.id + "': subcategories must be an array");
            }
            std::set<std::string> sub_ids;
            for (const auto& s : cj["subcategories"]) {
                if (!s.is_string()) {
                    throw ParseError("category '" + c.id + "': subcategory ids must be strings");
                }
                std::string sid = s.get<std::string>();
                if (!sub_ids.insert(sid).second) {
                    throw ValidationError("category '" + c.id + "': duplicate subcategory '" + sid + "'");
                }
                if (!sub_ids_global.insert(sid).second) {
                    throw ValidationError("subcategory '" + sid +
                                          "' belongs to more than one category");
                }
                c.subcategories.push_back(sid);
            }
        }
        if (!cj.contains("dimension_weights")) {
            throw ValidationError("category '" + c.id + "': missing dimension_weights");
        }
        c.dimension_weights = detail::parse_dimension_map(
            cj["dimension_weights"], "category '" + c.id + "' dimension_weights", false);
        tax.categories.push_back(std::move(c));
    }
    return tax;
}

inline Taxonomy load_taxonomy(const std::filesystem::path& path) {
    return parse_taxonomy(read_text_file(path));
}

// Canonical serialized form; load -> serialize -> load is the identity.
inline nlohmann::ordered_json taxonomy_to_json(const Taxonomy& tax) {
    nlohmann::ordered_json doc;
    doc["version"] = tax.version;
    nlohmann::ordered_json base;
    for (Dimension d : kAllDimensions) base[dimension_name(d)] = tax.base_scores[d];
    doc["base_scores"] = base;
    doc["categories"] = nlohmann::ordered_json::array();
    for (const Category& c : tax.categories) {
        nlohmann::ordered_json cj;
        cj["id"] = c.id;
        cj["name"] = c.name;
        cj["subcategories"] = c.subcategories;
        nlohmann::ordered_json weights;
        for (Dimension d : kAllDimensions) weights[dimension_name(d)] = c.dimension_weights[d];
        cj["dimension_weights"] = weights;
        doc["categories"].push_back(std::move(cj));
    }
    return doc;
}

inline std::string serialize_taxonomy(const Taxonomy& tax) {
    return taxonomy_to_json(tax).dump(2) + "\n";
}

// Optional overlay file carrying base_scores (and optionally per-category
// weights) that replace the combined file's values.
inline void apply_matrix_overlay(Taxonomy& tax, const std::string& text) {
    nlohmann::json doc;
    try {
        doc = nlohmann::json::parse(text);
    } catch (const nlohmann::json::exception& e) {
        throw ParseError(std::string("matrix file is not valid JSON: ") + e.what());
    }
    if (!doc.is_object()) throw ParseError("matrix file: top level must be an object");
    if (doc.contains("base_scores")) {
        tax.base_scores = detail::parse_dimension_map(doc["base_scores"], "base_scores", true);
    }
    if (doc.contains("per_category")) {
        if (!doc["per_category"].is_object()) {
            throw ParseError("matrix file: per_category must be an object");
        }
        for (auto it = doc["per_category"].begin(); it != doc["per_category"].end(); ++it) {
            bool found = false;
            for (Category& c : tax.categories) {
                if (c.id == it.key()) {
                    c.dimension_weights = detail::parse_dimension_map(
                        it.value(), "per_category '" + it.key() + "'", false);
                    found = true;
                    break;
                }
            }
            if (!found) throw UnknownCategory("matrix overlay names unknown category '" + it.key() + "'");
        }
    }
}

}  // namespace promptmorph
