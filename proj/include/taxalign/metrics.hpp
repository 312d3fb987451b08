#pragma once

// Hierarchical-consistency metrics over per-rank predictions: HCA, leaf
// accuracy, POR, S-POR, TOR and rank-level F1 with an abstention token.
//
// All aggregation is done on integer counters bucketed by sample depth, with a
// single division per metric at the end, so results do not depend on record
// order or on how records are partitioned.

#include <algorithm>
#include <cstdint>
#include <map>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include <json.hpp>

#include "taxalign/errors.hpp"
#include "taxalign/taxonomy.hpp"
#include "taxalign/text.hpp"

namespace taxalign {

inline constexpr std::string_view default_unknown_token = "Unknown";

struct PredictionRecord {
    std::string sample_id;
    std::vector<std::string> predicted;
    LabelPath truth;
    /// Free-form provenance, e.g. ranks a generator could not corrupt.
    std::string note;
};

/// Entry j is 1 iff predicted[j] equals truth[j] after trimming and NFC
/// normalisation. The unknown token never matches.
inline std::vector<std::uint8_t> correctness_vector(const PredictionRecord& record,
                                                    std::string_view unknown_token = default_unknown_token) {
    if (record.predicted.size() != record.truth.size()) {
        throw domain_error("sample '" + record.sample_id + "': " + std::to_string(record.predicted.size()) +
                           " predictions for depth " + std::to_string(record.truth.size()));
    }
    if (record.truth.empty()) throw domain_error("sample '" + record.sample_id + "' has an empty truth path");
    const std::string unknown = text::canonical_label(unknown_token);
    std::vector<std::uint8_t> out(record.truth.size(), 0);
    for (std::size_t j = 0; j < out.size(); ++j) {
        std::string p = text::canonical_label(record.predicted[j]);
        if (p == unknown) continue;
        out[j] = p == text::canonical_label(record.truth[j]) ? 1 : 0;
    }
    return out;
}

/// Length of the longest run of ones.
inline std::size_t longest_correct_run(std::span<const std::uint8_t> correct) noexcept {
    std::size_t best = 0, run = 0;
    for (auto c : correct) {
        run = c ? run + 1 : 0;
        best = std::max(best, run);
    }
    return best;
}

/// Streaming accumulator of per-sample integer statistics, bucketed by depth.
class MetricAccumulator {
public:
    struct Bucket {
        std::uint64_t samples = 0;
        std::uint64_t correct = 0;        // sum of correct ranks
        std::uint64_t longest_run = 0;    // sum of longest correct runs
        std::uint64_t adjacent_pairs = 0; // sum of adjacent correct pairs
    };

    void add(std::span<const std::uint8_t> correct, std::string_view sample_id = {}) {
        const std::size_t depth = correct.size();
        if (depth == 0) throw domain_error("sample '" + std::string(sample_id) + "' has depth 0");
        auto& b = buckets_[depth];
        ++b.samples;
        ++n_;
        bool all = true;
        for (std::size_t j = 0; j < depth; ++j) {
            b.correct += correct[j];
            all = all && correct[j];
            if (j + 1 < depth) b.adjacent_pairs += correct[j] && correct[j + 1];
            if (per_rank_total_.size() < depth) {
                per_rank_total_.resize(depth, 0);
                per_rank_correct_.resize(depth, 0);
            }
            ++per_rank_total_[j];
            per_rank_correct_[j] += correct[j];
        }
        b.longest_run += longest_correct_run(correct);
        hca_count_ += all;
        leaf_count_ += correct[depth - 1];
        if (depth == 1 && first_depth_one_.empty()) first_depth_one_ = sample_id.empty() ? "<unnamed>" : sample_id;
    }

    void add(const PredictionRecord& record, std::string_view unknown_token = default_unknown_token) {
        auto c = correctness_vector(record, unknown_token);
        add(c, record.sample_id);
    }

    [[nodiscard]] std::uint64_t size() const noexcept { return n_; }

    [[nodiscard]] double hca() const {
        require_nonempty();
        return static_cast<double>(hca_count_) / static_cast<double>(n_);
    }

    [[nodiscard]] double leaf_accuracy() const {
        require_nonempty();
        return static_cast<double>(leaf_count_) / static_cast<double>(n_);
    }

    [[nodiscard]] double por() const {
        return depth_weighted([](const Bucket& b) { return b.correct; }, 0);
    }

    [[nodiscard]] double spor() const {
        return depth_weighted([](const Bucket& b) { return b.longest_run; }, 0);
    }

    [[nodiscard]] double tor() const {
        require_nonempty();
        if (!first_depth_one_.empty()) {
            throw domain_error("TOR undefined for sample '" + first_depth_one_ +
                               "': depth 1 leaves no adjacent rank pair (divisor L-1 is zero)");
        }
        return depth_weighted([](const Bucket& b) { return b.adjacent_pairs; }, 1);
    }

    /// Accuracy at each 0-based rank position over samples deep enough to have it.
    [[nodiscard]] std::vector<double> per_rank_accuracy() const {
        std::vector<double> out(per_rank_total_.size());
        for (std::size_t j = 0; j < out.size(); ++j) {
            out[j] = static_cast<double>(per_rank_correct_[j]) / static_cast<double>(per_rank_total_[j]);
        }
        return out;
    }

    [[nodiscard]] const std::map<std::size_t, Bucket>& buckets() const noexcept { return buckets_; }

private:
    void require_nonempty() const {
        if (n_ == 0) throw domain_error("metric over an empty record set");
    }

    /// (1/N) * sum over depths L of count(L) / (L - offset).
    template <class Field>
    double depth_weighted(Field field, std::size_t offset) const {
        require_nonempty();
        double sum = 0.0;
        for (const auto& [depth, b] : buckets_) {
            sum += static_cast<double>(field(b)) / static_cast<double>(depth - offset);
        }
        return sum / static_cast<double>(n_);
    }

    std::map<std::size_t, Bucket> buckets_;
    std::vector<std::uint64_t> per_rank_total_;
    std::vector<std::uint64_t> per_rank_correct_;
    std::uint64_t n_ = 0;
    std::uint64_t hca_count_ = 0;
    std::uint64_t leaf_count_ = 0;
    std::string first_depth_one_;
};

namespace detail {

inline MetricAccumulator accumulate(std::span<const PredictionRecord> records, std::string_view unknown_token) {
    if (records.empty()) throw domain_error("metric over an empty record set");
    MetricAccumulator acc;
    for (const auto& r : records) acc.add(r, unknown_token);
    return acc;
}

}  // namespace detail

inline double hca(std::span<const PredictionRecord> records, std::string_view unknown = default_unknown_token) {
    return detail::accumulate(records, unknown).hca();
}

inline double leaf_accuracy(std::span<const PredictionRecord> records,
                            std::string_view unknown = default_unknown_token) {
    return detail::accumulate(records, unknown).leaf_accuracy();
}

inline double por(std::span<const PredictionRecord> records, std::string_view unknown = default_unknown_token) {
    return detail::accumulate(records, unknown).por();
}

inline double spor(std::span<const PredictionRecord> records, std::string_view unknown = default_unknown_token) {
    return detail::accumulate(records, unknown).spor();
}

inline double tor(std::span<const PredictionRecord> records, std::string_view unknown = default_unknown_token) {
    return detail::accumulate(records, unknown).tor();
}

/// How abstentions enter the F1 confusion counts.
enum class UnknownPolicy {
    /// An abstention is a false negative for the true label and never a false positive.
    false_negative,
    /// Abstaining samples are dropped before counting.
    drop,
};

struct LabelF1 {
    std::string label;
    std::uint64_t tp = 0, fp = 0, fn = 0, support = 0;
    double precision = 0.0, recall = 0.0, f1 = 0.0;
};

struct RankF1 {
    std::size_t rank_index = 0;
    double macro_f1 = 0.0;
    std::vector<LabelF1> per_label;  // labels present in the ground truth, sorted
    std::uint64_t abstentions = 0;
};

/// Macro-F1 at one 1-based rank, averaged over ground-truth labels.
inline RankF1 rank_f1(std::span<const PredictionRecord> records, std::size_t rank_index,
                      std::string_view unknown_token = default_unknown_token,
                      UnknownPolicy policy = UnknownPolicy::false_negative) {
    if (records.empty()) throw domain_error("F1 over an empty record set");
    if (rank_index == 0) throw domain_error("rank index is 1-based");
    const std::string unknown = text::canonical_label(unknown_token);
    std::map<std::string, LabelF1> table;
    RankF1 out;
    out.rank_index = rank_index;
    std::vector<std::pair<std::string, std::string>> pairs;  // truth, prediction
    for (const auto& r : records) {
        if (rank_index > r.truth.size() || rank_index > r.predicted.size()) {
            throw domain_error("sample '" + r.sample_id + "' has no rank " + std::to_string(rank_index));
        }
        std::string t = text::canonical_label(r.truth[rank_index - 1]);
        std::string p = text::canonical_label(r.predicted[rank_index - 1]);
        if (p == unknown) {
            ++out.abstentions;
            if (policy == UnknownPolicy::drop) continue;
        }
        table[t].label = t;
        pairs.emplace_back(std::move(t), std::move(p));
    }
    if (table.empty()) return out;
    for (const auto& [t, p] : pairs) {
        auto& row = table[t];
        ++row.support;
        if (p == t) {
            ++row.tp;
        } else {
            ++row.fn;
            if (p != unknown) {
                auto it = table.find(p);
                if (it != table.end()) ++it->second.fp;
            }
        }
    }
    double sum = 0.0;
    for (auto& [label, row] : table) {
        row.precision = row.tp + row.fp ? static_cast<double>(row.tp) / static_cast<double>(row.tp + row.fp) : 0.0;
        row.recall = row.tp + row.fn ? static_cast<double>(row.tp) / static_cast<double>(row.tp + row.fn) : 0.0;
        row.f1 = row.precision + row.recall > 0.0
                     ? 2.0 * row.precision * row.recall / (row.precision + row.recall)
                     : 0.0;
        sum += row.f1;
        out.per_label.push_back(row);
    }
    out.macro_f1 = sum / static_cast<double>(table.size());
    return out;
}

struct ReportOptions {
    std::string unknown_token{default_unknown_token};
    bool include_tor = true;
    std::vector<std::size_t> f1_ranks;
    UnknownPolicy f1_policy = UnknownPolicy::false_negative;
};

struct MetricReport {
    double hca = 0.0, acc_leaf = 0.0, por = 0.0, s_por = 0.0;
    std::optional<double> tor;
    std::vector<double> per_rank_accuracy;
    std::vector<RankF1> f1;
    std::uint64_t n = 0;
    std::map<std::size_t, std::uint64_t> depth_histogram;
    UnknownPolicy f1_policy = UnknownPolicy::false_negative;
};

inline MetricReport report(std::span<const PredictionRecord> records, const ReportOptions& options = {}) {
    auto acc = detail::accumulate(records, options.unknown_token);
    MetricReport r;
    r.n = acc.size();
    r.hca = acc.hca();
    r.acc_leaf = acc.leaf_accuracy();
    r.por = acc.por();
    r.s_por = acc.spor();
    if (options.include_tor) r.tor = acc.tor();
    r.per_rank_accuracy = acc.per_rank_accuracy();
    for (const auto& [depth, b] : acc.buckets()) r.depth_histogram[depth] = b.samples;
    for (auto rank : options.f1_ranks) r.f1.push_back(rank_f1(records, rank, options.unknown_token, options.f1_policy));
    r.f1_policy = options.f1_policy;
    return r;
}

inline nlohmann::ordered_json report_to_json(const MetricReport& r) {
    nlohmann::ordered_json j;
    j["hca"] = r.hca;
    j["acc_leaf"] = r.acc_leaf;
    j["por"] = r.por;
    j["s_por"] = r.s_por;
    j["tor"] = r.tor ? nlohmann::ordered_json(*r.tor) : nlohmann::ordered_json(nullptr);
    j["per_rank_accuracy"] = r.per_rank_accuracy;
    if (!r.f1.empty()) {
        auto arr = nlohmann::ordered_json::array();
        for (const auto& f : r.f1) {
            nlohmann::ordered_json e;
            e["rank_index"] = f.rank_index;
            e["macro_f1"] = f.macro_f1;
            e["abstentions"] = f.abstentions;
            auto labels = nlohmann::ordered_json::array();
            for (const auto& l : f.per_label) {
                labels.push_back({{"label", l.label},
                                  {"tp", l.tp},
                                  {"fp", l.fp},
                                  {"fn", l.fn},
                                  {"support", l.support},
                                  {"precision", l.precision},
                                  {"recall", l.recall},
                                  {"f1", l.f1}});
            }
            e["per_label"] = std::move(labels);
            arr.push_back(std::move(e));
        }
        j["f1"] = std::move(arr);
    }
    nlohmann::ordered_json meta;
    meta["n"] = r.n;
    nlohmann::ordered_json hist = nlohmann::ordered_json::object();
    for (const auto& [d, c] : r.depth_histogram) hist[std::to_string(d)] = c;
    meta["depth_histogram"] = std::move(hist);
    meta["f1_averaging"] = "macro";
    meta["f1_unknown_policy"] = r.f1_policy == UnknownPolicy::false_negative ? "false_negative" : "drop";
    j["metadata"] = std::move(meta);
    return j;
}

/// Plain-text table in the column order HCA | Acc_leaf | POR | S-POR | TOR,
/// values in percent.
inline std::string report_to_table(const MetricReport& r) {
    char buf[160];
    std::string out = "HCA | Acc_leaf | POR | S-POR | TOR\n";
    std::string tor = "n/a";
    if (r.tor) {
        std::snprintf(buf, sizeof buf, "%.2f", 100.0 * *r.tor);
        tor = buf;
    }
    std::snprintf(buf, sizeof buf, "%.2f | %.2f | %.2f | %.2f | %s\n", 100.0 * r.hca, 100.0 * r.acc_leaf,
                  100.0 * r.por, 100.0 * r.s_por, tor.c_str());
    out += buf;
    return out;
}

/// Predictions JSONL (path mode): {sample_id, truth: [...], predicted: [...]}.
inline std::vector<PredictionRecord> records_from_jsonl(std::string_view doc) {
    std::vector<PredictionRecord> out;
    auto rows = text::lines(doc);
    for (std::size_t i = 0; i < rows.size(); ++i) {
        if (text::trim(rows[i]).empty()) continue;
        try {
            auto j = nlohmann::json::parse(rows[i]);
            PredictionRecord r;
            r.sample_id = j.at("sample_id").is_string() ? j.at("sample_id").get<std::string>()
                                                        : j.at("sample_id").dump();
            r.truth = j.at("truth").get<std::vector<std::string>>();
            r.predicted = j.at("predicted").get<std::vector<std::string>>();
            out.push_back(std::move(r));
        } catch (const nlohmann::json::exception& e) {
            throw parse_error(i + 1, e.what());
        }
    }
    return out;
}

inline std::string records_to_jsonl(std::span<const PredictionRecord> records) {
    std::string out;
    for (const auto& r : records) {
        nlohmann::ordered_json j;
        j["sample_id"] = r.sample_id;
        j["truth"] = r.truth;
        j["predicted"] = r.predicted;
        out += j.dump();
        out.push_back('\n');
    }
    return out;
}

}  // namespace taxalign
