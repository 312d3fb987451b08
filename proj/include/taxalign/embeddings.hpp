#pragma once

#include <initializer_list>
#include <algorithm>
#include <charconv>
#include <cmath>
#include <cstdint>
#include <cstdio>
#include <span>
#include <string>
#include <string_view>
#include <unordered_map>
#include <utility>
#include <vector>

#include "taxalign/binary_io.hpp"
#include "taxalign/errors.hpp"
#include "taxalign/random.hpp"
#include "taxalign/taxonomy.hpp"
#include "taxalign/text.hpp"

namespace taxalign {

/// Id -> dense vector of fixed width. Vectors are stored as ingested; any
/// normalisation happens inside the similarity functions.
class EmbeddingTable {
public:
    explicit EmbeddingTable(std::size_t dim) : dim_(dim) {
        if (dim == 0) throw domain_error("embedding dimension must be positive");
    }

    void add(std::string id, std::initializer_list<double> values) {
        add(std::move(id), std::span<const double>(values.begin(), values.size()));
    }

    void add(std::string id, std::span<const double> values) {
        if (values.size() != dim_) {
            throw shape_error("embedding '" + id + "' has " + std::to_string(values.size()) +
                              " components, expected " + std::to_string(dim_));
        }
        for (double v : values) {
            if (!std::isfinite(v)) throw domain_error("embedding '" + id + "' has a non-finite value");
        }
        if (index_.contains(id)) throw domain_error("duplicate embedding id '" + id + "'");
        index_.emplace(id, ids_.size());
        ids_.push_back(std::move(id));
        data_.insert(data_.end(), values.begin(), values.end());
    }

    [[nodiscard]] std::size_t dim() const noexcept { return dim_; }
    [[nodiscard]] std::size_t size() const noexcept { return ids_.size(); }
    [[nodiscard]] bool empty() const noexcept { return ids_.empty(); }
    [[nodiscard]] bool contains(std::string_view id) const { return index_.contains(std::string(id)); }
    /// Ids in insertion order.
    [[nodiscard]] const std::vector<std::string>& ids() const noexcept { return ids_; }

    [[nodiscard]] std::span<const double> at(std::string_view id) const {
        auto it = index_.find(std::string(id));
        if (it == index_.end()) throw lookup_error("no embedding for '" + std::string(id) + "'");
        return row(it->second);
    }

    [[nodiscard]] std::span<const double> row(std::size_t i) const {
        return std::span<const double>(data_).subspan(i * dim_, dim_);
    }

    /// Content hash over ids and raw bits, in insertion order.
    [[nodiscard]] std::uint64_t hash() const {
        std::uint64_t h = fnv1a64("dim=" + std::to_string(dim_));
        for (std::size_t i = 0; i < ids_.size(); ++i) {
            h = fnv1a64(ids_[i], h);
            h = fnv1a64(row(i), h);
        }
        return h;
    }

    friend bool operator==(const EmbeddingTable& a, const EmbeddingTable& b) {
        return a.dim_ == b.dim_ && a.ids_ == b.ids_ && a.data_ == b.data_;
    }

private:
    std::size_t dim_;
    std::vector<std::string> ids_;
    std::vector<double> data_;
    std::unordered_map<std::string, std::size_t> index_;
};

namespace detail {

inline double parse_double(std::string_view tok, std::size_t line) {
    double v = 0.0;
    auto [ptr, ec] = std::from_chars(tok.data(), tok.data() + tok.size(), v);
    if (ec != std::errc() || ptr != tok.data() + tok.size()) {
        throw parse_error(line, "invalid number '" + std::string(tok) + "'");
    }
    if (!std::isfinite(v)) throw parse_error(line, "non-finite value '" + std::string(tok) + "'");
    return v;
}

}  // namespace detail

/// Text format: `dim=<d>` then `id<TAB>v1 v2 ... vd` per line.
inline EmbeddingTable load_embeddings(std::string_view doc) {
    auto rows = text::lines(doc);
    if (rows.empty() || !rows[0].starts_with("dim=")) throw parse_error(1, "expected 'dim=<d>' header");
    std::string_view dim_text = std::string_view(rows[0]).substr(4);
    std::size_t dim = 0;
    auto [ptr, ec] = std::from_chars(dim_text.data(), dim_text.data() + dim_text.size(), dim);
    if (ec != std::errc() || ptr != dim_text.data() + dim_text.size() || dim == 0) {
        throw parse_error(1, "invalid dimension '" + std::string(dim_text) + "'");
    }
    EmbeddingTable table(dim);
    std::vector<double> values;
    values.reserve(dim);
    for (std::size_t i = 1; i < rows.size(); ++i) {
        const std::size_t line = i + 1;
        auto tab = rows[i].find('\t');
        if (tab == std::string::npos) throw parse_error(line, "missing tab after id");
        std::string id = rows[i].substr(0, tab);
        if (id.empty()) throw parse_error(line, "empty id");
        values.clear();
        std::string_view rest = std::string_view(rows[i]).substr(tab + 1);
        std::size_t pos = 0;
        while (pos < rest.size()) {
            auto next = rest.find(' ', pos);
            if (next == std::string_view::npos) next = rest.size();
            if (next > pos) values.push_back(detail::parse_double(rest.substr(pos, next - pos), line));
            pos = next + 1;
        }
        if (values.size() != dim) {
            throw parse_error(line, "id '" + id + "' has " + std::to_string(values.size()) +
                                        " components, expected " + std::to_string(dim));
        }
        if (table.contains(id)) throw parse_error(line, "duplicate id '" + id + "'");
        table.add(std::move(id), values);
    }
    if (table.empty()) throw parse_error(0, "embedding table has no entries");
    return table;
}

/// Writes the text format with 17 significant digits, which round-trips doubles.
inline std::string save_embeddings(const EmbeddingTable& table) {
    std::string out = "dim=" + std::to_string(table.dim()) + "\n";
    char buf[32];
    for (std::size_t i = 0; i < table.size(); ++i) {
        out += table.ids()[i];
        out.push_back('\t');
        auto row = table.row(i);
        for (std::size_t j = 0; j < row.size(); ++j) {
            if (j) out.push_back(' ');
            int n = std::snprintf(buf, sizeof buf, "%.17g", row[j]);
            out.append(buf, static_cast<std::size_t>(n));
        }
        out.push_back('\n');
    }
    return out;
}

/// Binary format: `EMB1`, u32 dim, u32 count, then per entry u16 id length,
/// id bytes and dim little-endian f32 values.
inline std::string save_embeddings_binary(const EmbeddingTable& table) {
    std::string out = "EMB1";
    binary::put_le<std::uint32_t>(out, static_cast<std::uint32_t>(table.dim()));
    binary::put_le<std::uint32_t>(out, static_cast<std::uint32_t>(table.size()));
    for (std::size_t i = 0; i < table.size(); ++i) {
        const auto& id = table.ids()[i];
        if (id.size() > 0xffff) throw domain_error("id too long for binary format: '" + id.substr(0, 32) + "...'");
        binary::put_le<std::uint16_t>(out, static_cast<std::uint16_t>(id.size()));
        out += id;
        for (double v : table.row(i)) binary::put_f32(out, static_cast<float>(v));
    }
    return out;
}

inline EmbeddingTable load_embeddings_binary(std::string_view data) {
    binary::Reader in(data);
    if (in.get_bytes(4) != "EMB1") throw parse_error(0, "bad magic, expected EMB1");
    auto dim = in.get_le<std::uint32_t>();
    auto count = in.get_le<std::uint32_t>();
    if (dim == 0) throw parse_error(0, "zero dimension");
    EmbeddingTable table(dim);
    std::vector<double> values(dim);
    for (std::uint32_t i = 0; i < count; ++i) {
        auto len = in.get_le<std::uint16_t>();
        std::string id = in.get_bytes(len);
        for (auto& v : values) v = in.get_f32();
        if (table.contains(id)) throw parse_error(0, "duplicate id '" + id + "'");
        try {
            table.add(std::move(id), values);
        } catch (const domain_error& e) {
            throw parse_error(0, e.what());
        }
    }
    if (!in.done()) throw parse_error(0, "trailing bytes after " + std::to_string(count) + " entries");
    if (table.empty()) throw parse_error(0, "embedding table has no entries");
    return table;
}

inline double norm(std::span<const double> v) noexcept {
    double s = 0.0;
    for (double x : v) s += x * x;
    return std::sqrt(s);
}

inline double dot(std::span<const double> u, std::span<const double> v) noexcept {
    double s = 0.0;
    for (std::size_t i = 0; i < u.size(); ++i) s += u[i] * v[i];
    return s;
}

/// u.v / (|u||v|), clamped to [-1, 1]. Zero-norm inputs are rejected.
inline double cosine_similarity(std::span<const double> u, std::span<const double> v) {
    if (u.size() != v.size()) {
        throw shape_error("cosine of vectors with lengths " + std::to_string(u.size()) + " and " +
                          std::to_string(v.size()));
    }
    double nu = norm(u);
    double nv = norm(v);
    if (nu == 0.0 || nv == 0.0) throw domain_error("cosine similarity of a zero-norm vector");
    return std::clamp(dot(u, v) / (nu * nv), -1.0, 1.0);
}

struct ScoredId {
    std::string id;
    double score = 0.0;

    friend bool operator==(const ScoredId&, const ScoredId&) = default;
};

struct Candidate {
    std::string id;
    std::span<const double> vector;
};

/// The k candidates most cosine-similar to `query`, by descending score with
/// ties broken by ascending id. Returns every candidate when k exceeds the pool.
inline std::vector<ScoredId> top_k_similar(std::span<const double> query, std::span<const Candidate> candidates,
                                           std::size_t k) {
    if (candidates.empty()) throw domain_error("top-k over an empty candidate list");
    if (k == 0) throw domain_error("k must be positive");
    std::vector<ScoredId> scored;
    scored.reserve(candidates.size());
    for (const auto& c : candidates) scored.push_back({c.id, cosine_similarity(query, c.vector)});
    auto before = [](const ScoredId& a, const ScoredId& b) {
        if (a.score != b.score) return a.score > b.score;
        return a.id < b.id;
    };
    k = std::min(k, scored.size());
    std::partial_sort(scored.begin(), scored.begin() + static_cast<std::ptrdiff_t>(k), scored.end(), before);
    scored.resize(k);
    return scored;
}

/// Id of a node in tables produced by synth_hierarchical_embeddings: labels of
/// its path joined by '/'.
inline std::string synth_node_id(const TaxonomyTree& tree, NodeId id) {
    if (id == TaxonomyTree::root) return "<root>";
    return text::join(tree.path_of(id), "/");
}

/// Seeded unit Gaussian direction for one node.
inline std::vector<double> node_direction(const TaxonomyTree& tree, NodeId id, std::size_t dim, std::uint64_t seed) {
    Rng rng(derive_seed(seed, "node:" + tree.node(id).key + (id == TaxonomyTree::root ? "<root>" : "")));
    std::vector<double> r(dim);
    double n = 0.0;
    do {
        for (auto& x : r) x = rng.normal();
        n = norm(r);
    } while (n == 0.0);
    for (auto& x : r) x /= n;
    return r;
}

/// Embeds every node (root included) as the sum over its ancestors-or-self of
/// decay^depth * r(ancestor). Nodes sharing more ancestry share more terms.
inline EmbeddingTable synth_hierarchical_embeddings(const TaxonomyTree& tree, std::size_t dim, double decay,
                                                    std::uint64_t seed) {
    if (!(decay > 0.0 && decay <= 1.0)) throw domain_error("decay must lie in (0, 1]");
    EmbeddingTable table(dim);
    std::vector<std::vector<double>> raw(tree.node_count());
    for (NodeId id = 0; id < tree.node_count(); ++id) {
        const auto& n = tree.node(id);
        auto r = node_direction(tree, id, dim, seed);
        double w = std::pow(decay, static_cast<double>(n.depth));
        std::vector<double> v(dim, 0.0);
        if (id != TaxonomyTree::root) v = raw[n.parent];
        for (std::size_t j = 0; j < dim; ++j) v[j] += w * r[j];
        raw[id] = std::move(v);
        table.add(synth_node_id(tree, id), raw[id]);
    }
    return table;
}

/// Re-keys a synth node table by display label. Throws if two nodes share a
/// display label, since the result would be ambiguous.
inline EmbeddingTable label_table_from_nodes(const TaxonomyTree& tree, const EmbeddingTable& nodes) {
    EmbeddingTable out(nodes.dim());
    for (NodeId id = 1; id < tree.node_count(); ++id) {
        const auto& label = tree.node(id).label;
        if (out.contains(label)) throw domain_error("display label '" + label + "' is not unique in the tree");
        out.add(label, nodes.at(synth_node_id(tree, id)));
    }
    return out;
}

}  // namespace taxalign
