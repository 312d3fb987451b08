#pragma once

// Taxonomy tree with uniform depth. Node identity is the full label path from
// the synthetic root, so equal display labels under different parents are
// distinct nodes.

#include <algorithm>
#include <cstddef>
#include <map>
#include <optional>
#include <set>
#include <span>
#include <string>
#include <string_view>
#include <unordered_map>
#include <vector>

#include "taxalign/errors.hpp"
#include "taxalign/text.hpp"

namespace taxalign {

using NodeId = std::size_t;

/// Ordered display labels from the first rank to the leaf.
using LabelPath = std::vector<std::string>;

/// Key of a path prefix. Tabs cannot occur inside labels, so the tab-joined
/// path is collision-free.
inline std::string node_key(std::span<const std::string> path) {
    std::string key;
    for (std::size_t i = 0; i < path.size(); ++i) {
        if (i) key.push_back('\t');
        key += path[i];
    }
    return key;
}

inline std::string node_key(std::initializer_list<std::string> path) {
    std::vector<std::string> v(path);
    return node_key(std::span<const std::string>(v));
}

struct PathVerdict {
    bool valid = false;
    /// First 1-based depth at which the path fails; 0 when valid.
    std::size_t failing_depth = 0;

    explicit operator bool() const noexcept { return valid; }
};

class TaxonomyTree {
public:
    struct Node {
        std::string label;
        std::size_t depth = 0;  // 0 for the synthetic root
        NodeId parent = 0;
        std::vector<NodeId> children;
        std::string key;
    };

    static constexpr NodeId root = 0;

    explicit TaxonomyTree(std::vector<std::string> ranks) : ranks_(std::move(ranks)) {
        if (ranks_.empty()) throw domain_error("taxonomy needs at least one rank");
        std::set<std::string> seen;
        for (const auto& r : ranks_) {
            if (r.empty()) throw domain_error("empty rank name");
            if (!seen.insert(r).second) throw domain_error("duplicate rank name '" + r + "'");
        }
        nodes_.push_back(Node{"", 0, root, {}, ""});
    }

    /// Inserts a full root-to-leaf path; existing prefixes are reused.
    NodeId insert(std::span<const std::string> path) {
        if (path.size() != depth()) {
            throw domain_error("path has " + std::to_string(path.size()) + " labels, tree depth is " +
                               std::to_string(depth()));
        }
        NodeId current = root;
        for (std::size_t i = 0; i < path.size(); ++i) {
            if (path[i].empty()) throw domain_error("empty label at depth " + std::to_string(i + 1));
            if (path[i].find('\t') != std::string::npos || path[i].find('\n') != std::string::npos) {
                throw domain_error("label '" + path[i] + "' contains a tab or newline");
            }
            std::string key = node_key(path.subspan(0, i + 1));
            auto it = index_.find(key);
            if (it != index_.end()) {
                current = it->second;
                continue;
            }
            NodeId id = nodes_.size();
            nodes_.push_back(Node{path[i], i + 1, current, {}, key});
            nodes_[current].children.push_back(id);
            index_.emplace(std::move(key), id);
            if (i + 1 == depth()) leaves_.push_back(id);
            current = id;
        }
        return current;
    }

    NodeId insert(const LabelPath& path) { return insert(std::span<const std::string>(path)); }

    [[nodiscard]] std::size_t depth() const noexcept { return ranks_.size(); }
    [[nodiscard]] const std::vector<std::string>& ranks() const noexcept { return ranks_; }
    [[nodiscard]] const std::string& rank_name(std::size_t rank_index) const {
        check_rank(rank_index);
        return ranks_[rank_index - 1];
    }
    [[nodiscard]] std::size_t node_count() const noexcept { return nodes_.size(); }
    [[nodiscard]] const Node& node(NodeId id) const { return nodes_.at(id); }
    [[nodiscard]] const std::vector<Node>& nodes() const noexcept { return nodes_; }
    /// Leaves in first-insertion order.
    [[nodiscard]] const std::vector<NodeId>& leaves() const noexcept { return leaves_; }

    [[nodiscard]] std::optional<NodeId> find(std::string_view key) const {
        auto it = index_.find(std::string(key));
        if (it == index_.end()) return std::nullopt;
        return it->second;
    }

    [[nodiscard]] std::optional<NodeId> find(std::span<const std::string> path) const {
        return find(node_key(path));
    }

    [[nodiscard]] NodeId at(std::string_view key) const {
        auto id = find(key);
        if (!id) throw lookup_error("unknown node '" + std::string(key) + "'");
        return *id;
    }

    /// Root-rank-first labels of a node's path, excluding the synthetic root.
    [[nodiscard]] LabelPath path_of(NodeId id) const {
        if (id >= nodes_.size() || id == root) throw lookup_error("unknown node id " + std::to_string(id));
        LabelPath out(nodes_[id].depth);
        for (NodeId cur = id; cur != root; cur = nodes_[cur].parent) {
            out[nodes_[cur].depth - 1] = nodes_[cur].label;
        }
        return out;
    }

    void check_rank(std::size_t rank_index) const {
        if (rank_index < 1 || rank_index > depth()) {
            throw domain_error("rank index " + std::to_string(rank_index) + " outside 1.." +
                               std::to_string(depth()));
        }
    }

private:
    std::vector<std::string> ranks_;
    std::vector<Node> nodes_;
    std::vector<NodeId> leaves_;
    std::unordered_map<std::string, NodeId> index_;
};

/// Parses the taxonomy TSV: a header of rank names followed by one leaf path
/// per row.
inline TaxonomyTree parse_taxonomy(std::string_view doc) {
    if (!text::is_valid_utf8(doc)) throw parse_error(0, "taxonomy is not valid UTF-8");
    auto rows = text::lines(doc);
    if (rows.empty()) throw parse_error(1, "missing rank header");
    auto header = text::split(rows[0], '\t');
    std::set<std::string> seen;
    for (const auto& r : header) {
        if (r.empty()) throw parse_error(1, "empty rank name in header");
        if (!seen.insert(r).second) throw parse_error(1, "duplicate rank name '" + r + "'");
    }
    TaxonomyTree tree(header);
    for (std::size_t i = 1; i < rows.size(); ++i) {
        auto fields = text::split(rows[i], '\t');
        if (fields.size() != header.size()) {
            throw parse_error(i + 1, "expected " + std::to_string(header.size()) + " fields, found " +
                                         std::to_string(fields.size()));
        }
        for (std::size_t j = 0; j < fields.size(); ++j) {
            if (fields[j].empty()) {
                throw parse_error(i + 1, "empty label for rank '" + header[j] + "'");
            }
        }
        tree.insert(fields);
    }
    return tree;
}

/// Writes the tree back in TSV form, one row per leaf in insertion order.
inline std::string serialize_taxonomy(const TaxonomyTree& tree) {
    std::string out = text::join(tree.ranks(), "\t") + "\n";
    for (NodeId leaf : tree.leaves()) {
        out += text::join(tree.path_of(leaf), "\t") + "\n";
    }
    return out;
}

/// Full label path of a leaf.
inline LabelPath ancestors(const TaxonomyTree& tree, NodeId leaf) {
    if (leaf >= tree.node_count() || tree.node(leaf).depth != tree.depth()) {
        throw lookup_error("node " + std::to_string(leaf) + " is not a leaf");
    }
    return tree.path_of(leaf);
}

inline LabelPath ancestors(const TaxonomyTree& tree, std::string_view leaf_key) {
    auto id = tree.find(leaf_key);
    if (!id) throw lookup_error("unknown leaf '" + std::string(leaf_key) + "'");
    return ancestors(tree, *id);
}

/// Distinct display labels at a 1-based rank, sorted.
inline std::set<std::string> level_labels(const TaxonomyTree& tree, std::size_t rank_index) {
    tree.check_rank(rank_index);
    std::set<std::string> out;
    for (const auto& n : tree.nodes()) {
        if (n.depth == rank_index) out.insert(n.label);
    }
    return out;
}

inline PathVerdict validate_path(const TaxonomyTree& tree, std::span<const std::string> path) {
    std::size_t n = std::min(path.size(), tree.depth());
    for (std::size_t i = 0; i < n; ++i) {
        if (!tree.find(path.subspan(0, i + 1))) return {false, i + 1};
    }
    if (path.size() != tree.depth()) return {false, n + 1};
    return {true, 0};
}

inline PathVerdict validate_path(const TaxonomyTree& tree, const LabelPath& path) {
    return validate_path(tree, std::span<const std::string>(path));
}

}  // namespace taxalign
