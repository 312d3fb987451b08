#pragma once

// The miniature datasets checked in under data/fixtures, generated from
// code so they can be rebuilt and compared byte for byte.

#include <cstdint>
#include <map>
#include <string>
#include <vector>

#include <json.hpp>

#include "taxalign/embeddings.hpp"
#include "taxalign/fixtures.hpp"
#include "taxalign/metrics.hpp"
#include "taxalign/taxonomy.hpp"
#include "taxalign/text.hpp"
#include "taxalign/toy_config.hpp"

namespace taxalign::fixtures {

/// Four ranks, eight leaves, four labels at the top rank.
inline TaxonomyTree tiny_taxonomy() {
    TaxonomyTree tree({"kingdom", "phylum", "class", "order"});
    const std::vector<std::vector<std::string>> leaves{
        {"Animalia", "Chordata", "Aves", "Passeriformes"},
        {"Animalia", "Chordata", "Mammalia", "Carnivora"},
        {"Plantae", "Tracheophyta", "Magnoliopsida", "Rosales"},
        {"Plantae", "Tracheophyta", "Liliopsida", "Asparagales"},
        {"Fungi", "Basidiomycota", "Agaricomycetes", "Agaricales"},
        {"Fungi", "Basidiomycota", "Tremellomycetes", "Tremellales"},
        {"Chromista", "Ochrophyta", "Phaeophyceae", "Fucales"},
        {"Chromista", "Ochrophyta", "Bacillariophyceae", "Naviculales"},
    };
    for (const auto& l : leaves) tree.insert(l);
    return tree;
}

inline constexpr std::size_t tiny_dim = 8;
inline constexpr std::uint64_t tiny_seed = 11;
inline constexpr std::size_t tiny_images = 15;

/// Image ids `tiny<k>` assigned round-robin to the leaves, with pooled
/// embeddings near their leaf label.
inline std::vector<ImageAssignment> tiny_images_of(const TaxonomyTree& tree) {
    std::vector<ImageAssignment> out;
    for (std::size_t k = 0; k < tiny_images; ++k) {
        out.push_back({"tiny" + std::to_string(k), tree.leaves()[k % tree.leaves().size()]});
    }
    return out;
}

inline EmbeddingTable tiny_image_table(const TaxonomyTree& tree, const EmbeddingTable& labels) {
    EmbeddingTable out(tiny_dim);
    Rng rng(derive_seed(tiny_seed, "tiny-images"));
    for (const auto& img : tiny_images_of(tree)) {
        auto base = labels.at(tree.node(img.leaf).label);
        std::vector<double> v(base.begin(), base.end());
        for (auto& x : v) x += 0.2 * rng.normal();
        out.add(img.image_id, v);
    }
    return out;
}

inline std::string assignments_tsv(const TaxonomyTree& tree, std::span<const ImageAssignment> images) {
    std::string out;
    for (const auto& img : images) out += img.image_id + "\t" + text::join(tree.path_of(img.leaf), "\t") + "\n";
    return out;
}

inline std::string depth1_taxonomy_tsv() { return "species\nA\nB\n"; }

inline std::string worked_taxonomy_tsv() { return "r1\tr2\tr3\tr4\tr5\tr6\nA\tB\tC\tD\tE\tF\n"; }

struct FixtureFile {
    std::string path;
    std::string generator;
    std::string content;
};

/// Token-spread probing fixture in file form: token rows `<sample>#<k>` in
/// the embedding format and a `sample_id<TAB>label<TAB>split` TSV.
inline std::pair<std::string, std::string> token_spread_files(const std::vector<TokenSample>& samples) {
    if (samples.empty()) throw domain_error("empty token fixture");
    EmbeddingTable table(samples.front().tokens.cols());
    std::string labels;
    for (const auto& s : samples) {
        for (std::size_t k = 0; k < s.tokens.rows(); ++k) table.add(s.id + "#" + std::to_string(k), s.tokens.row(k));
        labels += s.id + "\tc" + std::to_string(s.label) + "\t" + (s.train ? "train" : "test") + "\n";
    }
    return {save_embeddings(table), labels};
}

/// Every checked-in fixture, in manifest order.
inline std::vector<FixtureFile> checked_in_fixtures() {
    std::vector<FixtureFile> files;
    auto tree = tiny_taxonomy();
    auto nodes = synth_hierarchical_embeddings(tree, tiny_dim, 1.0, tiny_seed);
    auto labels = label_table_from_nodes(tree, nodes);
    auto images = tiny_image_table(tree, labels);
    files.push_back({"tiny/taxonomy.tsv", "tiny_taxonomy()", serialize_taxonomy(tree)});
    files.push_back({"tiny/label_embeds.txt", "synth_hierarchical_embeddings(dim=8, decay=1, seed=11)",
                     save_embeddings(labels)});
    files.push_back({"tiny/image_embeds.txt", "tiny_image_table(noise=0.2)", save_embeddings(images)});
    files.push_back({"tiny/images.tsv", "tiny_images_of()", assignments_tsv(tree, tiny_images_of(tree))});

    std::vector<PredictionRecord> worked{worked_record()};
    files.push_back({"metrics/worked_taxonomy.tsv", "six-rank single path A..F", worked_taxonomy_tsv()});
    files.push_back({"metrics/worked_record.jsonl", "worked_record()", records_to_jsonl(worked)});
    files.push_back({"metrics/depth1_taxonomy.tsv", "single-rank taxonomy {A, B}", depth1_taxonomy_tsv()});
    auto f1 = f1_unknown_fixture();
    files.push_back({"metrics/f1_unknown.jsonl", "f1_unknown_fixture()", records_to_jsonl(f1)});

    RandomSpec spec;
    spec.min_depth = spec.max_depth = 4;
    spec.min_branching = 2;
    spec.max_branching = 3;
    spec.seed = 5;
    auto random_tree = gen_tree(spec);
    files.push_back({"metrics/random_taxonomy.tsv", "gen_tree(depth=4, branching=2..3, seed=5)",
                     serialize_taxonomy(random_tree)});
    files.push_back({"metrics/random_records.jsonl", "gen_records(n=50, flip=0.3, seed=5)",
                     records_to_jsonl(gen_records(random_tree, 50, std::vector<double>(4, 0.3), 5, "s"))});

    auto [blob_features, blob_labels] = token_spread_files(separable_blobs(50, 3));
    files.push_back({"probe/blobs_features.txt", "separable_blobs(per_class=50, seed=3)", blob_features});
    files.push_back({"probe/blobs_labels.tsv", "separable_blobs(per_class=50, seed=3)", blob_labels});

    ToyRunConfig toy;
    files.push_back({"toy/toy.toml", "ToyRunConfig{} (reference toy protocol)", toy_config_to_toml(toy)});
    return files;
}

inline nlohmann::ordered_json fixture_manifest(const std::vector<FixtureFile>& files) {
    nlohmann::ordered_json j;
    j["prng"] = "mt19937_64";
    j["hash"] = "fnv1a64";
    auto arr = nlohmann::ordered_json::array();
    for (const auto& f : files) {
        arr.push_back({{"path", f.path}, {"generator", f.generator}, {"fnv1a64", text::hex64(fnv1a64(f.content))},
                       {"bytes", f.content.size()}});
    }
    j["files"] = std::move(arr);
    return j;
}

}  // namespace taxalign::fixtures
