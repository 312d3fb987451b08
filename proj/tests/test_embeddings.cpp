#include <gtest/gtest.h>

#include <algorithm>
#include <cmath>
#include <cstring>

#include "taxalign/embeddings.hpp"
#include "taxalign/fixtures.hpp"

using namespace taxalign;

namespace {

std::vector<double> random_vec(Rng& rng, std::size_t n) {
    std::vector<double> v(n);
    for (auto& x : v) x = rng.normal();
    return v;
}

// Oracle: literal definition with no clamping or shared helpers.
double cosine_oracle(const std::vector<double>& u, const std::vector<double>& v) {
    long double uv = 0, uu = 0, vv = 0;
    for (std::size_t i = 0; i < u.size(); ++i) {
        uv += static_cast<long double>(u[i]) * v[i];
        uu += static_cast<long double>(u[i]) * u[i];
        vv += static_cast<long double>(v[i]) * v[i];
    }
    return static_cast<double>(uv / std::sqrt(uu * vv));
}

}  // namespace

TEST(LoadEmbeddings, SingleRow) {
    auto t = load_embeddings("dim=2\na\t1 0\n");
    EXPECT_EQ(t.dim(), 2u);
    ASSERT_EQ(t.size(), 1u);
    EXPECT_EQ(t.at("a")[0], 1.0);
    EXPECT_EQ(t.at("a")[1], 0.0);
}

TEST(LoadEmbeddings, DuplicateIdNamed) {
    try {
        load_embeddings("dim=1\nx\t1\nx\t2\n");
        FAIL();
    } catch (const parse_error& e) {
        EXPECT_EQ(e.line(), 3u);
        EXPECT_NE(std::string(e.what()).find("'x'"), std::string::npos);
    }
}

TEST(LoadEmbeddings, WrongComponentCountReportsLine) {
    try {
        load_embeddings("dim=3\na\t1 2 3\nb\t1 2\n");
        FAIL();
    } catch (const parse_error& e) {
        EXPECT_EQ(e.line(), 3u);
    }
}

TEST(LoadEmbeddings, RejectsNonFiniteAndGarbage) {
    EXPECT_THROW(load_embeddings("dim=1\na\tnan\n"), parse_error);
    EXPECT_THROW(load_embeddings("dim=1\na\tinf\n"), parse_error);
    EXPECT_THROW(load_embeddings("dim=1\na\t1x\n"), parse_error);
    EXPECT_THROW(load_embeddings("dim=0\n"), parse_error);
    EXPECT_THROW(load_embeddings("a\t1\n"), parse_error);
    EXPECT_THROW(load_embeddings("dim=1\n"), parse_error);
}

TEST(LoadEmbeddings, LoaderDoesNotRescale) {
    auto t = load_embeddings("dim=2\na\t3 4\n");
    EXPECT_EQ(t.at("a")[0], 3.0);
    EXPECT_EQ(t.at("a")[1], 4.0);
}

TEST(LoadEmbeddings, ThousandRowTextRoundTripIsExact) {
    Rng rng(99);
    EmbeddingTable t(7);
    for (int i = 0; i < 1000; ++i) {
        auto v = random_vec(rng, 7);
        v[0] *= std::pow(10.0, rng.between(-30, 30));
        t.add("row" + std::to_string(i), v);
    }
    auto back = load_embeddings(save_embeddings(t));
    ASSERT_EQ(back.size(), 1000u);
    for (std::size_t i = 0; i < t.size(); ++i) {
        auto a = t.row(i), b = back.row(i);
        EXPECT_EQ(std::memcmp(a.data(), b.data(), a.size_bytes()), 0) << t.ids()[i];
    }
    EXPECT_EQ(back, t);
    EXPECT_EQ(back.hash(), t.hash());
}

TEST(LoadEmbeddings, BinaryRoundTripAtFloatPrecision) {
    Rng rng(3);
    EmbeddingTable t(5);
    for (int i = 0; i < 50; ++i) t.add("é" + std::to_string(i), random_vec(rng, 5));
    auto bytes = save_embeddings_binary(t);
    EXPECT_EQ(bytes.substr(0, 4), "EMB1");
    EXPECT_EQ(static_cast<unsigned char>(bytes[4]), 5u);  // little-endian dim
    auto back = load_embeddings_binary(bytes);
    ASSERT_EQ(back.ids(), t.ids());
    for (std::size_t i = 0; i < t.size(); ++i) {
        for (std::size_t j = 0; j < 5; ++j) EXPECT_EQ(back.row(i)[j], static_cast<double>(static_cast<float>(t.row(i)[j])));
    }
    EXPECT_THROW(load_embeddings_binary(bytes + "x"), parse_error);
    EXPECT_THROW(load_embeddings_binary("EMB0" + bytes.substr(4)), parse_error);
    EXPECT_THROW(load_embeddings_binary(bytes.substr(0, bytes.size() - 1)), error);
}

TEST(Cosine, Examples) {
    std::vector<double> a{1, 0}, b{0, 1}, c{2, 0}, d{5, 0};
    EXPECT_EQ(cosine_similarity(a, a), 1.0);
    EXPECT_EQ(cosine_similarity(a, b), 0.0);
    EXPECT_EQ(cosine_similarity(c, d), 1.0);
}

TEST(Cosine, ZeroNormAndShapeRejected) {
    std::vector<double> z{0, 0}, a{1, 0}, three{1, 2, 3};
    EXPECT_THROW((void)cosine_similarity(z, a), domain_error);
    EXPECT_THROW((void)cosine_similarity(a, z), domain_error);
    EXPECT_THROW((void)cosine_similarity(a, three), shape_error);
}

TEST(Cosine, PropertiesOverRandomVectors) {
    Rng rng(17);
    for (int trial = 0; trial < 500; ++trial) {
        const std::size_t n = 1 + rng.below(40);
        auto u = random_vec(rng, n), v = random_vec(rng, n);
        const double s = cosine_similarity(u, v);
        EXPECT_GE(s, -1.0);
        EXPECT_LE(s, 1.0);
        EXPECT_NEAR(s, cosine_oracle(u, v), 1e-12);
        EXPECT_EQ(s, cosine_similarity(v, u));
        EXPECT_NEAR(cosine_similarity(u, u), 1.0, 1e-15);
        const double alpha = std::exp(rng.uniform(-10, 10)), beta = std::exp(rng.uniform(-10, 10));
        auto su = u, sv = v;
        for (auto& x : su) x *= alpha;
        for (auto& x : sv) x *= beta;
        EXPECT_NEAR(cosine_similarity(su, sv), s, 1e-12);
    }
}

TEST(TopK, Examples) {
    std::vector<double> q{1, 0}, a{1, 0}, b{0, 1}, c{-1, 0};
    std::vector<Candidate> cands{{"c", c}, {"b", b}, {"a", a}};
    auto top = top_k_similar(q, cands, 2);
    ASSERT_EQ(top.size(), 2u);
    EXPECT_EQ(top[0], (ScoredId{"a", 1.0}));
    EXPECT_EQ(top[1], (ScoredId{"b", 0.0}));
    EXPECT_EQ(top_k_similar(q, cands, 10).size(), 3u);
    EXPECT_THROW(top_k_similar(q, std::span<const Candidate>{}, 1), domain_error);
}

TEST(TopK, TiesBrokenByAscendingId) {
    std::vector<double> q{1, 1}, v{2, 2}, w{1, 0};
    std::vector<Candidate> cands{{"zeta", v}, {"alpha", v}, {"mid", w}, {"beta", v}};
    auto top = top_k_similar(q, cands, 3);
    EXPECT_EQ(top[0].id, "alpha");
    EXPECT_EQ(top[1].id, "beta");
    EXPECT_EQ(top[2].id, "zeta");
}

TEST(TopK, MatchesExhaustiveSortOracle) {
    Rng rng(2024);
    for (int trial = 0; trial < 20; ++trial) {
        const std::size_t dim = 2 + rng.below(6);
        std::vector<std::vector<double>> store;
        for (int i = 0; i < 500; ++i) {
            auto v = random_vec(rng, dim);
            // Duplicate a few directions so ties occur.
            if (i % 50 == 1) v = store.back();
            store.push_back(v);
        }
        std::vector<Candidate> cands;
        for (std::size_t i = 0; i < store.size(); ++i) cands.push_back({"id" + std::to_string(i), store[i]});
        auto q = random_vec(rng, dim);
        std::vector<ScoredId> oracle;
        for (const auto& c : cands) oracle.push_back({c.id, cosine_similarity(q, c.vector)});
        std::stable_sort(oracle.begin(), oracle.end(), [](const ScoredId& a, const ScoredId& b) {
            return a.score != b.score ? a.score > b.score : a.id < b.id;
        });
        for (std::size_t k : {1u, 3u, 17u, 500u}) {
            auto top = top_k_similar(q, cands, k);
            ASSERT_EQ(top.size(), k);
            EXPECT_TRUE(std::equal(top.begin(), top.end(), oracle.begin()));
        }
    }
}

TEST(Synth, SiblingsCloserThanCrossKingdomAcrossSeeds) {
    fixtures::RandomSpec spec;
    spec.min_depth = spec.max_depth = 3;
    spec.min_branching = spec.max_branching = 2;
    auto tree = fixtures::gen_tree(spec);
    const auto& leaves = tree.leaves();
    // Leaves 0 and 1 share all ancestors; leaf 0 and the last leaf share only the root.
    ASSERT_EQ(tree.node(leaves[0]).parent, tree.node(leaves[1]).parent);
    ASSERT_NE(ancestors(tree, leaves[0])[0], ancestors(tree, leaves.back())[0]);
    for (std::uint64_t seed = 0; seed < 20; ++seed) {
        auto t = synth_hierarchical_embeddings(tree, 64, 0.5, seed);
        auto v = [&](NodeId id) { return t.at(synth_node_id(tree, id)); };
        EXPECT_GT(cosine_similarity(v(leaves[0]), v(leaves[1])), cosine_similarity(v(leaves[0]), v(leaves.back())))
            << "seed " << seed;
    }
}

TEST(Synth, RawVectorIsWeightedAncestorSum) {
    auto tree = parse_taxonomy("k\tp\tc\nA\tB\tC\nA\tB\tD\n");
    const double alpha = 0.7;
    auto t = synth_hierarchical_embeddings(tree, 16, alpha, 5);
    for (NodeId id = 0; id < tree.node_count(); ++id) {
        std::vector<double> expect(16, 0.0);
        for (NodeId cur = id;; cur = tree.node(cur).parent) {
            auto r = node_direction(tree, cur, 16, 5);
            EXPECT_NEAR(norm(r), 1.0, 1e-12);
            const double w = std::pow(alpha, static_cast<double>(tree.node(cur).depth));
            for (std::size_t j = 0; j < 16; ++j) expect[j] += w * r[j];
            if (cur == TaxonomyTree::root) break;
        }
        auto got = t.at(synth_node_id(tree, id));
        for (std::size_t j = 0; j < 16; ++j) EXPECT_NEAR(got[j], expect[j], 1e-12);
    }
}

TEST(Synth, SmallDecayCollapsesOntoRoot) {
    fixtures::RandomSpec spec;
    auto tree = fixtures::gen_tree(spec);
    auto t = synth_hierarchical_embeddings(tree, 32, 1e-6, 1);
    for (auto a : tree.leaves()) {
        for (auto b : tree.leaves()) {
            EXPECT_GT(cosine_similarity(t.at(synth_node_id(tree, a)), t.at(synth_node_id(tree, b))), 1.0 - 1e-9);
        }
    }
}

TEST(Synth, DeterministicAndRejectsBadDecay) {
    fixtures::RandomSpec spec;
    auto tree = fixtures::gen_tree(spec);
    auto a = synth_hierarchical_embeddings(tree, 16, 0.5, 9);
    auto b = synth_hierarchical_embeddings(tree, 16, 0.5, 9);
    EXPECT_EQ(save_embeddings(a), save_embeddings(b));
    EXPECT_NE(a.hash(), synth_hierarchical_embeddings(tree, 16, 0.5, 10).hash());
    EXPECT_THROW(synth_hierarchical_embeddings(tree, 16, 0.0, 1), domain_error);
    EXPECT_THROW(synth_hierarchical_embeddings(tree, 16, 1.5, 1), domain_error);
}

TEST(Synth, MeanSiblingCosineExceedsCrossKingdomOverManyTrees) {
    double sib_sum = 0, cross_sum = 0;
    std::size_t sib_n = 0, cross_n = 0;
    for (std::uint64_t seed = 0; seed < 100; ++seed) {
        fixtures::RandomSpec spec;
        spec.min_branching = 2;
        spec.max_branching = 3;
        spec.seed = seed;
        auto tree = fixtures::gen_tree(spec);
        auto t = synth_hierarchical_embeddings(tree, 32, 0.8, seed);
        const auto& leaves = tree.leaves();
        for (std::size_t i = 0; i < leaves.size(); ++i) {
            for (std::size_t j = i + 1; j < leaves.size(); ++j) {
                const double c = cosine_similarity(t.at(synth_node_id(tree, leaves[i])), t.at(synth_node_id(tree, leaves[j])));
                if (tree.node(leaves[i]).parent == tree.node(leaves[j]).parent) {
                    sib_sum += c;
                    ++sib_n;
                } else if (ancestors(tree, leaves[i])[0] != ancestors(tree, leaves[j])[0]) {
                    cross_sum += c;
                    ++cross_n;
                }
            }
        }
    }
    ASSERT_GT(sib_n, 0u);
    ASSERT_GT(cross_n, 0u);
    EXPECT_GT(sib_sum / sib_n, cross_sum / cross_n);
}

TEST(Synth, LabelTableRejectsHomonyms) {
    fixtures::RandomSpec spec;
    spec.labels = fixtures::LabelStyle::local;
    auto tree = fixtures::gen_tree(spec);
    auto nodes = synth_hierarchical_embeddings(tree, 8, 1.0, 1);
    EXPECT_THROW(label_table_from_nodes(tree, nodes), domain_error);
}
