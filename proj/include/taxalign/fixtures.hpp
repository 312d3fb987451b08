#pragma once

// Deterministic generators for property tests and acceptance runs. Every
// generator is a pure function of its spec and seed (see random.hpp for the
// pinned generator).

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <span>
#include <string>
#include <vector>

#include "taxalign/benchmark.hpp"
#include "taxalign/embeddings.hpp"
#include "taxalign/metrics.hpp"
#include "taxalign/nn.hpp"
#include "taxalign/random.hpp"
#include "taxalign/taxonomy.hpp"

namespace taxalign::fixtures {

enum class LabelStyle {
    /// Labels unique across the whole tree, e.g. "r2n5".
    unique,
    /// Labels only unique among siblings ("n0", "n1", ...), so display labels repeat across branches.
    local,
};

struct RandomSpec {
    std::size_t min_depth = 3;
    std::size_t max_depth = 3;
    std::size_t min_branching = 2;
    std::size_t max_branching = 2;
    LabelStyle labels = LabelStyle::unique;
    /// Per-rank corruption probability for gen_records; the last entry repeats
    /// for deeper ranks. Empty means no corruption.
    std::vector<double> flip_probability;
    std::uint64_t seed = 0;
};

inline TaxonomyTree gen_tree(const RandomSpec& spec) {
    if (spec.min_depth == 0 || spec.min_depth > spec.max_depth) throw domain_error("invalid depth range");
    if (spec.min_branching == 0 || spec.min_branching > spec.max_branching) {
        throw domain_error("invalid branching range");
    }
    Rng rng(derive_seed(spec.seed, "gen_tree"));
    const auto depth = static_cast<std::size_t>(
        rng.between(static_cast<std::int64_t>(spec.min_depth), static_cast<std::int64_t>(spec.max_depth)));
    std::vector<std::string> ranks;
    for (std::size_t r = 1; r <= depth; ++r) ranks.push_back("rank" + std::to_string(r));
    TaxonomyTree tree(ranks);
    std::vector<std::size_t> counter(depth + 1, 0);
    // Depth-first expansion so leaves come out in lexicographic path order.
    std::vector<std::string> path;
    auto expand = [&](auto&& self, std::size_t level) -> void {
        if (level > depth) {
            tree.insert(path);
            return;
        }
        const auto branches = static_cast<std::size_t>(rng.between(static_cast<std::int64_t>(spec.min_branching),
                                                                   static_cast<std::int64_t>(spec.max_branching)));
        for (std::size_t b = 0; b < branches; ++b) {
            std::string label = spec.labels == LabelStyle::unique
                                    ? "r" + std::to_string(level) + "n" + std::to_string(counter[level]++)
                                    : "n" + std::to_string(b);
            path.push_back(std::move(label));
            self(self, level + 1);
            path.pop_back();
        }
    };
    expand(expand, 1);
    return tree;
}

/// Records with random leaf truths; each rank is independently replaced by a
/// random wrong label of the same rank with the spec's flip probability.
inline std::vector<PredictionRecord> gen_records(const TaxonomyTree& tree, std::size_t n,
                                                 std::span<const double> flip_probability, std::uint64_t seed,
                                                 const std::string& id_prefix = "s") {
    Rng rng(derive_seed(seed, "gen_records"));
    std::vector<std::vector<std::string>> labels(tree.depth() + 1);
    for (std::size_t r = 1; r <= tree.depth(); ++r) {
        auto set = level_labels(tree, r);
        labels[r].assign(set.begin(), set.end());
    }
    const auto& leaves = tree.leaves();
    std::vector<PredictionRecord> out;
    out.reserve(n);
    for (std::size_t i = 0; i < n; ++i) {
        PredictionRecord rec;
        rec.sample_id = id_prefix + std::to_string(i);
        rec.truth = ancestors(tree, leaves[rng.below(leaves.size())]);
        rec.predicted = rec.truth;
        for (std::size_t r = 1; r <= tree.depth(); ++r) {
            double p = flip_probability.empty()
                           ? 0.0
                           : flip_probability[std::min(r - 1, flip_probability.size() - 1)];
            if (!rng.bernoulli(p)) continue;
            const auto& pool = labels[r];
            if (pool.size() < 2) {
                if (!rec.note.empty()) rec.note += ";";
                rec.note += "uncorrupted rank " + std::to_string(r);
                continue;
            }
            std::size_t pick = rng.below(pool.size() - 1);
            auto truth_pos = static_cast<std::size_t>(
                std::lower_bound(pool.begin(), pool.end(), rec.truth[r - 1]) - pool.begin());
            if (pick >= truth_pos) ++pick;
            rec.predicted[r - 1] = pool[pick];
        }
        out.push_back(std::move(rec));
    }
    return out;
}

inline std::vector<PredictionRecord> gen_records(const TaxonomyTree& tree, std::size_t n, const RandomSpec& spec) {
    return gen_records(tree, n, spec.flip_probability, spec.seed);
}

/// 1,000-style mixed-depth record set: one random tree per depth in
/// [min_depth, max_depth], records drawn round-robin from the trees.
inline std::vector<PredictionRecord> gen_mixed_depth_records(std::size_t n, std::size_t min_depth,
                                                             std::size_t max_depth, std::uint64_t seed) {
    std::vector<TaxonomyTree> trees;
    Rng rng(derive_seed(seed, "mixed"));
    for (std::size_t d = min_depth; d <= max_depth; ++d) {
        RandomSpec spec;
        spec.min_depth = spec.max_depth = d;
        spec.min_branching = 1;
        spec.max_branching = 3;
        spec.seed = derive_seed(seed, d);
        trees.push_back(gen_tree(spec));
    }
    std::vector<PredictionRecord> out;
    for (std::size_t i = 0; i < n; ++i) {
        const auto& tree = trees[i % trees.size()];
        std::vector<double> flips(tree.depth());
        for (auto& f : flips) f = rng.uniform(0.0, 0.8);
        auto one = gen_records(tree, 1, flips, derive_seed(seed, i), "m" + std::to_string(i) + "_");
        out.push_back(std::move(one.front()));
    }
    return out;
}

/// The hand-worked record whose correctness vector is [1,1,0,1,1,0].
inline PredictionRecord worked_record() {
    PredictionRecord r;
    r.sample_id = "worked";
    r.truth = {"A", "B", "C", "D", "E", "F"};
    r.predicted = {"A", "B", "x", "D", "E", "x"};
    return r;
}

/// Three samples at one rank: truth [A, A, B], predicted [A, Unknown, A].
inline std::vector<PredictionRecord> f1_unknown_fixture() {
    return {
        {"f1", {"A"}, {"A"}, ""},
        {"f2", {"Unknown"}, {"A"}, ""},
        {"f3", {"A"}, {"B"}, ""},
    };
}

// ---------------------------------------------------------------------------
// Toy world for alignment + RFT training.

struct ToyWorldSpec {
    std::size_t depth = 3;
    std::size_t branching = 3;
    std::size_t teacher_dim = 32;
    std::size_t tokens = 4;
    double decay = 1.0;
    std::size_t train_images_per_leaf = 10;
    std::size_t eval_images_per_leaf = 10;
    /// Per-image deviation from the leaf direction (relative to unit norm).
    double image_noise = 0.3;
    /// Per-token deviation from the image vector.
    double token_noise = 0.15;
    std::uint64_t seed = 1;
};

struct ToyWorld {
    TaxonomyTree tree{std::vector<std::string>{"rank1"}};
    /// Teacher label embeddings keyed by display label.
    EmbeddingTable labels{1};
    /// Teacher image embeddings: pooled row `<image>` plus token rows `<image>#k`.
    EmbeddingTable images{1};
    std::vector<ImageAssignment> train;
    std::vector<ImageAssignment> eval;
};

inline std::vector<double> gaussian_vector(Rng& rng, std::size_t dim, double scale) {
    std::vector<double> v(dim);
    for (auto& x : v) x = scale * rng.normal();
    return v;
}

inline ToyWorld make_toy_world(const ToyWorldSpec& spec) {
    RandomSpec tree_spec;
    tree_spec.min_depth = tree_spec.max_depth = spec.depth;
    tree_spec.min_branching = tree_spec.max_branching = spec.branching;
    tree_spec.seed = derive_seed(spec.seed, "tree");
    ToyWorld world;
    world.tree = gen_tree(tree_spec);
    auto nodes = synth_hierarchical_embeddings(world.tree, spec.teacher_dim, spec.decay, derive_seed(spec.seed, "labels"));
    world.labels = label_table_from_nodes(world.tree, nodes);
    world.images = EmbeddingTable(spec.teacher_dim);
    Rng rng(derive_seed(spec.seed, "images"));
    const double per_dim = 1.0 / std::sqrt(static_cast<double>(spec.teacher_dim));
    std::size_t counter = 0;
    auto make_image = [&](NodeId leaf) {
        std::string id = "img" + std::to_string(counter++);
        auto base = world.labels.at(world.tree.node(leaf).label);
        double n = norm(base);
        std::vector<double> pooled(spec.teacher_dim);
        auto noise = gaussian_vector(rng, spec.teacher_dim, spec.image_noise * per_dim);
        for (std::size_t j = 0; j < pooled.size(); ++j) pooled[j] = base[j] / n + noise[j];
        world.images.add(id, pooled);
        for (std::size_t k = 0; k < spec.tokens; ++k) {
            auto tn = gaussian_vector(rng, spec.teacher_dim, spec.token_noise * per_dim);
            for (std::size_t j = 0; j < tn.size(); ++j) tn[j] += pooled[j];
            world.images.add(id + "#" + std::to_string(k), tn);
        }
        return ImageAssignment{id, leaf};
    };
    for (NodeId leaf : world.tree.leaves()) {
        for (std::size_t i = 0; i < spec.train_images_per_leaf; ++i) world.train.push_back(make_image(leaf));
    }
    for (NodeId leaf : world.tree.leaves()) {
        for (std::size_t i = 0; i < spec.eval_images_per_leaf; ++i) world.eval.push_back(make_image(leaf));
    }
    return world;
}

// ---------------------------------------------------------------------------
// Probing fixtures.

struct TokenSpreadSpec {
    std::size_t classes = 20;
    std::size_t train_per_class = 50;
    std::size_t test_per_class = 50;
    std::size_t tokens = 16;
    std::size_t width = 32;
    /// Norm of each class mean.
    double signal = 8.0;
    /// Per-component noise standard deviation on every token.
    double noise = 4.0;
    std::uint64_t seed = 7;
};

struct TokenSample {
    std::string id;
    nn::Matrix tokens;  // tokens x width
    int label = 0;
    bool train = true;
};

/// Class signal is present in every token except the last, which is pure
/// noise; averaging over tokens also averages the noise away.
inline std::vector<TokenSample> token_spread_dataset(const TokenSpreadSpec& spec) {
    Rng rng(derive_seed(spec.seed, "token_spread"));
    std::vector<std::vector<double>> means;
    for (std::size_t c = 0; c < spec.classes; ++c) {
        auto m = gaussian_vector(rng, spec.width, 1.0);
        double n = norm(m);
        for (auto& x : m) x *= spec.signal / n;
        means.push_back(std::move(m));
    }
    std::vector<TokenSample> out;
    std::size_t counter = 0;
    auto emit = [&](bool train, std::size_t per_class) {
        for (std::size_t c = 0; c < spec.classes; ++c) {
            for (std::size_t i = 0; i < per_class; ++i) {
                TokenSample s;
                s.id = "p" + std::to_string(counter++);
                s.label = static_cast<int>(c);
                s.train = train;
                s.tokens = nn::Matrix(spec.tokens, spec.width);
                for (std::size_t t = 0; t < spec.tokens; ++t) {
                    const bool carries_signal = t + 1 < spec.tokens;
                    for (std::size_t j = 0; j < spec.width; ++j) {
                        s.tokens(t, j) = (carries_signal ? means[c][j] : 0.0) + spec.noise * rng.normal();
                    }
                }
                out.push_back(std::move(s));
            }
        }
    };
    emit(true, spec.train_per_class);
    emit(false, spec.test_per_class);
    return out;
}

/// Two Gaussian blobs in 2-d that are linearly separable with a wide margin.
inline std::vector<TokenSample> separable_blobs(std::size_t per_class, std::uint64_t seed) {
    Rng rng(derive_seed(seed, "blobs"));
    std::vector<TokenSample> out;
    std::size_t counter = 0;
    for (int split = 0; split < 2; ++split) {
        for (int c = 0; c < 2; ++c) {
            for (std::size_t i = 0; i < per_class; ++i) {
                TokenSample s;
                s.id = "b" + std::to_string(counter++);
                s.label = c;
                s.train = split == 0;
                s.tokens = nn::Matrix(1, 2);
                s.tokens(0, 0) = (c == 0 ? -3.0 : 3.0) + 0.5 * rng.normal();
                s.tokens(0, 1) = 0.5 * rng.normal();
                out.push_back(std::move(s));
            }
        }
    }
    return out;
}

}  // namespace taxalign::fixtures
