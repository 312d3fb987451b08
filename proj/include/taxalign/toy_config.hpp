#pragma once

// TOML round trip for toy training runs: the synthetic world under [world]
// and the trainer under [train], [student] and [alignment].

#include <cstdint>
#include <string>
#include <vector>

#include "taxalign/errors.hpp"
#include "taxalign/fixtures.hpp"
#include "taxalign/rft.hpp"
#include "taxalign/toml.hpp"

namespace taxalign {

/// Defaults reproduce the reference toy protocol: 3 ranks of branching 3,
/// questions at ranks 2 and 3 (rank 1 has only 3 labels) in ratio 1:2,
/// 2,000 alternating steps, greedy eval every 5 steps.
struct ToyRunConfig {
    fixtures::ToyWorldSpec world;
    TrainConfig train = [] {
        TrainConfig t;
        t.steps = 2000;
        t.ranks = {2, 3};
        t.ratio = {1, 2};
        t.eval_every = 5;
        return t;
    }();
};

namespace detail {

inline std::size_t get_count(const toml::Document& doc, const std::string& key, std::size_t fallback) {
    auto v = doc.get_int(key, static_cast<std::int64_t>(fallback));
    if (v < 0) throw config_error("config key '" + key + "' must be non-negative");
    return static_cast<std::size_t>(v);
}

inline std::uint64_t get_seed(const toml::Document& doc, const std::string& key, std::uint64_t fallback) {
    auto v = doc.get_int(key, static_cast<std::int64_t>(fallback));
    if (v < 0) throw config_error("config key '" + key + "' must be non-negative");
    return static_cast<std::uint64_t>(v);
}

template <class T>
std::vector<T> get_counts(const toml::Document& doc, const std::string& key) {
    std::vector<T> out;
    for (auto v : doc.get_int_array(key, {})) {
        if (v < 0) throw config_error("config key '" + key + "' must hold non-negative integers");
        out.push_back(static_cast<T>(v));
    }
    return out;
}

template <class Enum>
Enum get_enum(const toml::Document& doc, const std::string& key, Enum fallback,
              std::initializer_list<std::pair<const char*, Enum>> names) {
    if (!doc.contains(key)) return fallback;
    auto s = doc.get_string(key, "");
    for (const auto& [name, value] : names) {
        if (s == name) return value;
    }
    throw config_error("config key '" + key + "' has unknown value '" + s + "'");
}

inline std::string join_ints(const auto& values) {
    std::string out = "[";
    for (std::size_t i = 0; i < values.size(); ++i) out += (i ? ", " : "") + std::to_string(values[i]);
    return out + "]";
}

}  // namespace detail

inline const std::initializer_list<std::pair<const char*, VisualFeatureMode>> visual_mode_names{
    {"all_tokens", VisualFeatureMode::all_tokens}, {"last_token", VisualFeatureMode::last_token}};
inline const std::initializer_list<std::pair<const char*, TextFeatureMode>> text_mode_names{
    {"first_answer_token", TextFeatureMode::first_answer_token},
    {"mean_answer_tokens", TextFeatureMode::mean_answer_tokens},
    {"last_question_token", TextFeatureMode::last_question_token}};
inline const std::initializer_list<std::pair<const char*, AdvantageMode>> advantage_names{
    {"mean_std", AdvantageMode::mean_std}, {"mean_baseline", AdvantageMode::mean_baseline}};
inline const std::initializer_list<std::pair<const char*, VisualTargetMode>> target_names{
    {"per_token", VisualTargetMode::per_token}, {"pooled", VisualTargetMode::pooled}};

template <class Enum>
const char* enum_name(Enum value, std::initializer_list<std::pair<const char*, Enum>> names) {
    for (const auto& [name, v] : names) {
        if (v == value) return name;
    }
    return "?";
}

/// Missing keys keep their defaults; unknown keys are rejected.
inline ToyRunConfig toy_config_from_toml(std::string_view doc_text) {
    const auto doc = toml::parse(doc_text);
    static const std::vector<std::string> known{
        "world.depth", "world.branching", "world.teacher_dim", "world.tokens", "world.decay",
        "world.train_images_per_leaf", "world.eval_images_per_leaf", "world.image_noise", "world.token_noise",
        "world.seed", "train.steps", "train.batch_size", "train.group_size", "train.lr_policy",
        "train.lr_projector", "train.align_weight", "train.seed", "train.visual_targets", "train.advantage",
        "train.ranks", "train.ratio", "train.shots", "train.eval_every", "train.checkpoint_every",
        "train.separate_batches", "train.stop_accuracy", "train.target_accuracy", "student.width",
        "student.projector_hidden", "student.temperature", "student.observation_noise", "student.seed",
        "alignment.visual_layer", "alignment.text_layer", "alignment.visual_mode", "alignment.text_mode",
        "alignment.visual_weight", "alignment.label_weight"};
    for (const auto& [key, value] : doc.values()) {
        if (std::find(known.begin(), known.end(), key) == known.end()) throw config_error("unknown config key '" + key + "'");
    }
    ToyRunConfig c;
    auto& w = c.world;
    w.depth = detail::get_count(doc, "world.depth", w.depth);
    w.branching = detail::get_count(doc, "world.branching", w.branching);
    w.teacher_dim = detail::get_count(doc, "world.teacher_dim", w.teacher_dim);
    w.tokens = detail::get_count(doc, "world.tokens", w.tokens);
    w.decay = doc.get_double("world.decay", w.decay);
    w.train_images_per_leaf = detail::get_count(doc, "world.train_images_per_leaf", w.train_images_per_leaf);
    w.eval_images_per_leaf = detail::get_count(doc, "world.eval_images_per_leaf", w.eval_images_per_leaf);
    w.image_noise = doc.get_double("world.image_noise", w.image_noise);
    w.token_noise = doc.get_double("world.token_noise", w.token_noise);
    w.seed = detail::get_seed(doc, "world.seed", w.seed);

    auto& t = c.train;
    t.steps = detail::get_count(doc, "train.steps", t.steps);
    t.batch_size = detail::get_count(doc, "train.batch_size", t.batch_size);
    t.group_size = detail::get_count(doc, "train.group_size", t.group_size);
    t.lr_policy = doc.get_double("train.lr_policy", t.lr_policy);
    t.lr_projector = doc.get_double("train.lr_projector", t.lr_projector);
    t.align_weight = doc.get_double("train.align_weight", t.align_weight);
    t.seed = detail::get_seed(doc, "train.seed", t.seed);
    t.visual_targets = detail::get_enum(doc, "train.visual_targets", t.visual_targets, target_names);
    t.advantage = detail::get_enum(doc, "train.advantage", t.advantage, advantage_names);
    if (doc.contains("train.ranks")) t.ranks = detail::get_counts<std::size_t>(doc, "train.ranks");
    if (doc.contains("train.ratio")) t.ratio = detail::get_counts<std::uint64_t>(doc, "train.ratio");
    t.shots = detail::get_count(doc, "train.shots", t.shots);
    t.eval_every = detail::get_count(doc, "train.eval_every", t.eval_every);
    t.checkpoint_every = detail::get_count(doc, "train.checkpoint_every", t.checkpoint_every);
    t.separate_batches = doc.get_bool("train.separate_batches", t.separate_batches);
    t.stop_accuracy = doc.get_double("train.stop_accuracy", t.stop_accuracy);
    t.target_accuracy = doc.get_double("train.target_accuracy", t.target_accuracy);

    auto& s = t.student;
    s.width = detail::get_count(doc, "student.width", s.width);
    s.projector_hidden = detail::get_count(doc, "student.projector_hidden", s.projector_hidden);
    s.temperature = doc.get_double("student.temperature", s.temperature);
    s.observation_noise = doc.get_double("student.observation_noise", s.observation_noise);
    s.seed = detail::get_seed(doc, "student.seed", s.seed);
    s.teacher_dim = w.teacher_dim;
    s.tokens = w.tokens;
    s.ranks = w.depth;

    auto& a = t.alignment;
    a.visual_layer = detail::get_count(doc, "alignment.visual_layer", a.visual_layer);
    a.text_layer = detail::get_count(doc, "alignment.text_layer", a.text_layer);
    a.visual_mode = detail::get_enum(doc, "alignment.visual_mode", a.visual_mode, visual_mode_names);
    a.text_mode = detail::get_enum(doc, "alignment.text_mode", a.text_mode, text_mode_names);
    a.visual_weight = doc.get_double("alignment.visual_weight", a.visual_weight);
    a.label_weight = doc.get_double("alignment.label_weight", a.label_weight);

    if (w.depth < 1 || w.branching < 1 || w.teacher_dim == 0 || w.tokens == 0) {
        throw config_error("world depth, branching, teacher_dim and tokens must be positive");
    }
    t.validate();
    return c;
}

/// Effective configuration with every key spelled out.
inline std::string toy_config_to_toml(const ToyRunConfig& c) {
    using toml::format_double;
    using toml::quote;
    const auto& w = c.world;
    const auto& t = c.train;
    const auto& s = t.student;
    const auto& a = t.alignment;
    std::string o;
    auto line = [&o](const std::string& k, const std::string& v) { o += k + " = " + v + "\n"; };
    o += "[world]\n";
    line("depth", std::to_string(w.depth));
    line("branching", std::to_string(w.branching));
    line("teacher_dim", std::to_string(w.teacher_dim));
    line("tokens", std::to_string(w.tokens));
    line("decay", format_double(w.decay));
    line("train_images_per_leaf", std::to_string(w.train_images_per_leaf));
    line("eval_images_per_leaf", std::to_string(w.eval_images_per_leaf));
    line("image_noise", format_double(w.image_noise));
    line("token_noise", format_double(w.token_noise));
    line("seed", std::to_string(w.seed));
    o += "\n[train]\n";
    line("steps", std::to_string(t.steps));
    line("batch_size", std::to_string(t.batch_size));
    line("group_size", std::to_string(t.group_size));
    line("lr_policy", format_double(t.lr_policy));
    line("lr_projector", format_double(t.lr_projector));
    line("align_weight", format_double(t.align_weight));
    line("seed", std::to_string(t.seed));
    line("visual_targets", quote(enum_name(t.visual_targets, target_names)));
    line("advantage", quote(enum_name(t.advantage, advantage_names)));
    line("ranks", detail::join_ints(t.ranks));
    line("ratio", detail::join_ints(t.ratio));
    line("shots", std::to_string(t.shots));
    line("eval_every", std::to_string(t.eval_every));
    line("checkpoint_every", std::to_string(t.checkpoint_every));
    line("separate_batches", t.separate_batches ? "true" : "false");
    line("stop_accuracy", format_double(t.stop_accuracy));
    line("target_accuracy", format_double(t.target_accuracy));
    o += "\n[student]\n";
    line("width", std::to_string(s.width));
    line("projector_hidden", std::to_string(s.projector_hidden));
    line("temperature", format_double(s.temperature));
    line("observation_noise", format_double(s.observation_noise));
    line("seed", std::to_string(s.seed));
    o += "\n[alignment]\n";
    line("visual_layer", std::to_string(a.visual_layer));
    line("text_layer", std::to_string(a.text_layer));
    line("visual_mode", quote(enum_name(a.visual_mode, visual_mode_names)));
    line("text_mode", quote(enum_name(a.text_mode, text_mode_names)));
    line("visual_weight", format_double(a.visual_weight));
    line("label_weight", format_double(a.label_weight));
    return o;
}

}  // namespace taxalign
