#pragma once

// Four-choice, per-rank VQA items with image-similar distractors.

#include <algorithm>
#include <array>
#include <cstdint>
#include <functional>
#include <numeric>
#include <set>
#include <span>
#include <string>
#include <vector>

#include <json.hpp>

#include "taxalign/embeddings.hpp"
#include "taxalign/errors.hpp"
#include "taxalign/random.hpp"
#include "taxalign/taxonomy.hpp"

namespace taxalign {

inline constexpr std::array<char, 4> choice_letters{'A', 'B', 'C', 'D'};

struct Choice {
    char letter = 'A';
    std::string label;

    friend bool operator==(const Choice&, const Choice&) = default;
};

struct VqaItem {
    std::string item_id;
    std::string image_id;
    std::size_t rank_index = 0;  // 1-based
    std::string rank;
    std::string question;
    std::array<Choice, 4> choices;
    char answer_letter = 'A';
    std::string answer_label;
    std::vector<std::string> distractors;  // descending similarity
    std::uint64_t seed = 0;

    friend bool operator==(const VqaItem&, const VqaItem&) = default;
};

struct PromptTemplate {
    enum class Kind { letter, list };
    Kind kind = Kind::letter;
    std::string organism = "organism";
    bool no_thinking_suffix = false;
};

inline constexpr std::string_view no_thinking_instruction = "Please directly output the answer.";

/// Top-k labels of one rank most similar to the image, excluding the ground truth.
inline std::vector<std::string> select_distractors(std::span<const double> image_embedding, std::size_t rank_index,
                                                   const std::string& truth_label,
                                                   const std::set<std::string>& rank_labels,
                                                   const EmbeddingTable& label_table, std::size_t k = 3) {
    if (!label_table.contains(truth_label)) {
        throw benchmark_error("missing label embedding for '" + truth_label + "' at rank " + std::to_string(rank_index));
    }
    std::vector<Candidate> pool;
    for (const auto& label : rank_labels) {
        if (label == truth_label) continue;
        if (!label_table.contains(label)) {
            throw benchmark_error("missing label embedding for '" + label + "' at rank " + std::to_string(rank_index));
        }
        pool.push_back({label, label_table.at(label)});
    }
    if (pool.size() < k) {
        throw benchmark_error("rank " + std::to_string(rank_index) + " has only " + std::to_string(pool.size()) +
                              " incorrect labels, need " + std::to_string(k));
    }
    std::vector<std::string> out;
    for (auto& s : top_k_similar(image_embedding, pool, k)) out.push_back(std::move(s.id));
    return out;
}

struct ShuffledChoices {
    std::array<Choice, 4> choices;
    char answer_letter = 'A';
};

/// Fisher-Yates permutation of the truth plus three distractors; letters are
/// assigned by position.
inline ShuffledChoices shuffle_choices(const std::string& truth_label, std::span<const std::string> distractors,
                                       Rng& rng) {
    if (distractors.size() != 3) throw domain_error("expected exactly 3 distractors");
    std::array<std::string, 4> labels{truth_label, distractors[0], distractors[1], distractors[2]};
    std::set<std::string> unique(labels.begin(), labels.end());
    if (unique.size() != 4) throw domain_error("choice labels are not distinct");
    rng.shuffle(std::span<std::string>(labels));
    ShuffledChoices out;
    for (std::size_t i = 0; i < 4; ++i) {
        out.choices[i] = {choice_letters[i], labels[i]};
        if (labels[i] == truth_label) out.answer_letter = choice_letters[i];
    }
    return out;
}

inline std::string render_prompt(const VqaItem& item, const PromptTemplate& tmpl) {
    std::string q = "<image> Given the " + tmpl.organism +
                    " in the image, what is its taxonomic classification at the " + item.rank + " level?";
    if (tmpl.kind == PromptTemplate::Kind::letter) {
        const auto& c = item.choices;
        q += "\n";
        q += std::string(1, c[0].letter) + "." + c[0].label + " " + c[1].letter + "." + c[1].label + "\n";
        q += std::string(1, c[2].letter) + "." + c[2].label + " " + c[3].letter + "." + c[3].label + "\n";
        q += "Answer with the option letter only.";
    } else {
        q += " Please choose one from list [";
        for (std::size_t i = 0; i < 4; ++i) {
            if (i) q += ", ";
            q += item.choices[i].label;
        }
        q += "].";
    }
    if (tmpl.no_thinking_suffix) {
        q += " ";
        q += no_thinking_instruction;
    }
    return q;
}

/// Assigns each of `slots` positions a rank position (index into `weights`).
/// Counts follow the largest-remainder apportionment of the weights, so they
/// are exact when `slots` is a multiple of the weight sum and within one
/// otherwise; the order interleaves ranks by smooth weighted round-robin. The
/// seed rotates tie-breaking between ranks.
inline std::vector<std::size_t> rank_schedule(std::span<const std::uint64_t> weights, std::size_t slots,
                                              std::uint64_t seed) {
    if (weights.empty()) throw domain_error("rank schedule needs at least one weight");
    std::uint64_t total = std::accumulate(weights.begin(), weights.end(), std::uint64_t{0});
    if (total == 0) throw domain_error("rank weights sum to zero");
    const std::size_t n = weights.size();
    const std::size_t rotation = static_cast<std::size_t>(mix64(seed) % n);
    auto tie_rank = [&](std::size_t i) { return (i + n - rotation) % n; };

    std::vector<std::uint64_t> counts(n);
    std::vector<std::uint64_t> remainder(n);
    std::uint64_t assigned = 0;
    for (std::size_t i = 0; i < n; ++i) {
        unsigned __int128 prod = static_cast<unsigned __int128>(weights[i]) * slots;
        counts[i] = static_cast<std::uint64_t>(prod / total);
        remainder[i] = static_cast<std::uint64_t>(prod % total);
        assigned += counts[i];
    }
    std::vector<std::size_t> order(n);
    std::iota(order.begin(), order.end(), std::size_t{0});
    std::sort(order.begin(), order.end(), [&](std::size_t a, std::size_t b) {
        if (remainder[a] != remainder[b]) return remainder[a] > remainder[b];
        return tie_rank(a) < tie_rank(b);
    });
    for (std::size_t i = 0; assigned < slots; ++i, ++assigned) ++counts[order[i]];

    std::vector<std::int64_t> current(n, 0);
    std::vector<std::size_t> out;
    out.reserve(slots);
    for (std::size_t s = 0; s < slots; ++s) {
        std::size_t best = n;
        for (std::size_t i = 0; i < n; ++i) {
            if (counts[i] == 0) continue;
            current[i] += static_cast<std::int64_t>(counts[i]);
            if (best == n || current[i] > current[best] ||
                (current[i] == current[best] && tie_rank(i) < tie_rank(best))) {
                best = i;
            }
        }
        current[best] -= static_cast<std::int64_t>(slots);
        out.push_back(best);
    }
    return out;
}

struct ImageAssignment {
    std::string image_id;
    NodeId leaf = 0;
};

struct BuildOptions {
    /// 1-based ranks to question. Empty selects every rank with at least four
    /// labels; ranks that are too small are then skipped with a warning
    /// instead of failing.
    std::vector<std::size_t> ranks;
    /// One weight per selected rank; empty means uniform.
    std::vector<std::uint64_t> weights;
    std::size_t shots = 1;
    /// Images sharing one slot schedule of shots * sum(weights) slots.
    std::size_t group_size = 1;
    std::uint64_t seed = 0;
    PromptTemplate prompt;
    std::function<void(const std::string&)> warn;
};

/// Builds the item stream. Items are emitted group by group; within a group
/// slot s questions image s mod group_size at the scheduled rank.
inline std::vector<VqaItem> build_items(const TaxonomyTree& tree, std::span<const ImageAssignment> images,
                                        const EmbeddingTable& image_table, const EmbeddingTable& label_table,
                                        const BuildOptions& options) {
    if (options.shots == 0 || options.group_size == 0) throw domain_error("shots and group size must be positive");
    std::vector<std::size_t> ranks = options.ranks;
    std::vector<std::uint64_t> weights = options.weights;
    if (ranks.empty()) {
        if (!weights.empty() && weights.size() != tree.depth()) {
            throw domain_error("expected one weight per rank (" + std::to_string(tree.depth()) + ")");
        }
        std::vector<std::uint64_t> kept;
        for (std::size_t r = 1; r <= tree.depth(); ++r) {
            if (level_labels(tree, r).size() < 4) {
                if (options.warn) options.warn("skipping rank '" + tree.rank_name(r) + "': fewer than 4 labels");
                continue;
            }
            ranks.push_back(r);
            kept.push_back(weights.empty() ? 1 : weights[r - 1]);
        }
        weights = std::move(kept);
        if (ranks.empty()) throw benchmark_error("no rank has at least 4 labels");
    } else {
        for (auto r : ranks) tree.check_rank(r);
        if (weights.empty()) weights.assign(ranks.size(), 1);
    }
    if (weights.size() != ranks.size()) {
        throw domain_error("got " + std::to_string(weights.size()) + " weights for " + std::to_string(ranks.size()) +
                           " ranks");
    }

    std::vector<std::set<std::string>> labels_at(tree.depth() + 1);
    for (auto r : ranks) labels_at[r] = level_labels(tree, r);

    const std::uint64_t weight_sum = std::accumulate(weights.begin(), weights.end(), std::uint64_t{0});
    const std::size_t slots = options.shots * static_cast<std::size_t>(weight_sum);

    std::vector<VqaItem> items;
    for (std::size_t g = 0, group = 0; g < images.size(); g += options.group_size, ++group) {
        const std::size_t members = std::min(options.group_size, images.size() - g);
        auto schedule = rank_schedule(weights, slots, derive_seed(options.seed, group));
        for (std::size_t s = 0; s < slots; ++s) {
            const auto& img = images[g + s % members];
            const std::size_t rank = ranks[schedule[s]];
            try {
                auto path = ancestors(tree, img.leaf);
                VqaItem item;
                item.image_id = img.image_id;
                item.rank_index = rank;
                item.rank = tree.rank_name(rank);
                item.item_id = img.image_id + "@" + item.rank + "#" + std::to_string(s);
                item.answer_label = path[rank - 1];
                item.seed = derive_seed(options.seed, item.item_id);
                item.distractors = select_distractors(image_table.at(img.image_id), rank, item.answer_label,
                                                      labels_at[rank], label_table);
                Rng rng(item.seed);
                auto shuffled = shuffle_choices(item.answer_label, item.distractors, rng);
                item.choices = shuffled.choices;
                item.answer_letter = shuffled.answer_letter;
                item.question = render_prompt(item, options.prompt);
                items.push_back(std::move(item));
            } catch (const error& e) {
                throw benchmark_error("image '" + img.image_id + "': " + e.what());
            }
        }
    }
    return items;
}

inline nlohmann::ordered_json item_to_json(const VqaItem& item) {
    nlohmann::ordered_json j;
    j["item_id"] = item.item_id;
    j["image_id"] = item.image_id;
    j["rank"] = item.rank;
    j["rank_index"] = item.rank_index;
    j["question"] = item.question;
    auto choices = nlohmann::ordered_json::array();
    for (const auto& c : item.choices) {
        choices.push_back(nlohmann::ordered_json{{"letter", std::string(1, c.letter)}, {"label", c.label}});
    }
    j["choices"] = std::move(choices);
    j["answer_letter"] = std::string(1, item.answer_letter);
    j["answer_label"] = item.answer_label;
    j["distractors"] = item.distractors;
    j["seed"] = item.seed;
    return j;
}

inline VqaItem item_from_json(const nlohmann::json& j) {
    VqaItem item;
    item.item_id = j.at("item_id").get<std::string>();
    item.image_id = j.at("image_id").get<std::string>();
    item.rank = j.at("rank").get<std::string>();
    item.rank_index = j.value("rank_index", std::size_t{0});
    item.question = j.at("question").get<std::string>();
    const auto& choices = j.at("choices");
    if (choices.size() != 4) throw parse_error(0, "item '" + item.item_id + "' does not have 4 choices");
    for (std::size_t i = 0; i < 4; ++i) {
        auto letter = choices[i].at("letter").get<std::string>();
        if (letter.size() != 1) throw parse_error(0, "bad choice letter in item '" + item.item_id + "'");
        item.choices[i] = {letter[0], choices[i].at("label").get<std::string>()};
    }
    auto answer = j.at("answer_letter").get<std::string>();
    if (answer.size() != 1) throw parse_error(0, "bad answer letter in item '" + item.item_id + "'");
    item.answer_letter = answer[0];
    item.answer_label = j.at("answer_label").get<std::string>();
    item.distractors = j.at("distractors").get<std::vector<std::string>>();
    item.seed = j.at("seed").get<std::uint64_t>();
    return item;
}

inline std::string items_to_jsonl(std::span<const VqaItem> items) {
    std::string out;
    for (const auto& item : items) {
        out += item_to_json(item).dump();
        out.push_back('\n');
    }
    return out;
}

inline std::vector<VqaItem> items_from_jsonl(std::string_view doc) {
    std::vector<VqaItem> out;
    auto rows = text::lines(doc);
    for (std::size_t i = 0; i < rows.size(); ++i) {
        if (text::trim(rows[i]).empty()) continue;
        try {
            out.push_back(item_from_json(nlohmann::json::parse(rows[i])));
        } catch (const nlohmann::json::exception& e) {
            throw parse_error(i + 1, e.what());
        } catch (const parse_error& e) {
            throw parse_error(i + 1, e.what());
        }
    }
    return out;
}

/// Answer letter position 0..3 for 'A'..'D' (case-insensitive).
inline std::size_t letter_index(char letter) {
    char up = (letter >= 'a' && letter <= 'z') ? static_cast<char>(letter - 'a' + 'A') : letter;
    if (up < 'A' || up > 'D') throw domain_error(std::string("not an option letter: '") + letter + "'");
    return static_cast<std::size_t>(up - 'A');
}

}  // namespace taxalign
