#pragma once

// No-thinking reinforcement fine-tuning of a toy student, alternated with
// taxonomy-aware alignment:
//
//   for each step:
//     forward the student on a batch of items
//     update student + both projectors with the alignment loss
//     sample G answers per item, reward exact matches, and update the student
//     alone with the group-relative policy-gradient loss (projectors frozen)
//
// The student stands in for an LMM. Each image is a learnable table of N
// token vectors; an MLP encoder maps tokens to visual features (layer 1), the
// mean-pooled features plus a rank embedding form the question state (layer 1
// at the answer position), and an answer head produces the answer state
// (layer 2). Generation is a single categorical step, so the answer state is
// also the first generated token. The policy over the four options is
// softmax(cos(P_T(answer state), label embedding of option) / tau).

#include <algorithm>
#include <array>
#include <cmath>
#include <cstdint>
#include <filesystem>
#include <functional>
#include <map>
#include <numeric>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include <json.hpp>

#include "taxalign/alignment.hpp"
#include "taxalign/benchmark.hpp"
#include "taxalign/embeddings.hpp"
#include "taxalign/errors.hpp"
#include "taxalign/metrics.hpp"
#include "taxalign/nn.hpp"
#include "taxalign/random.hpp"
#include "taxalign/taxonomy.hpp"
#include "taxalign/text.hpp"
#include "taxalign/toml.hpp"

namespace taxalign {

// ---------------------------------------------------------------------------
// Rewards and advantages

/// 1 iff the trimmed, NFC-normalised output equals the ground truth. When the
/// ground truth is a single option letter the comparison ignores case.
inline double accuracy_reward(std::string_view output, std::string_view ground_truth) {
    std::string out = text::canonical_label(output);
    std::string truth = text::canonical_label(ground_truth);
    auto upper = [](char c) { return (c >= 'a' && c <= 'z') ? static_cast<char>(c - 'a' + 'A') : c; };
    if (truth.size() == 1 && upper(truth[0]) >= 'A' && upper(truth[0]) <= 'D') {
        return out.size() == 1 && upper(out[0]) == upper(truth[0]) ? 1.0 : 0.0;
    }
    return out == truth ? 1.0 : 0.0;
}

enum class AdvantageMode { mean_baseline, mean_std };

inline constexpr double advantage_std_floor = 1e-6;

inline std::vector<double> group_advantages(std::span<const double> rewards, AdvantageMode mode) {
    if (rewards.size() < 2) throw domain_error("group advantages need at least 2 rewards");
    const double n = static_cast<double>(rewards.size());
    double mean = 0.0;
    for (double r : rewards) mean += r;
    mean /= n;
    std::vector<double> out(rewards.size());
    for (std::size_t i = 0; i < out.size(); ++i) out[i] = rewards[i] - mean;
    if (mode == AdvantageMode::mean_std) {
        double var = 0.0;
        for (double a : out) var += a * a;
        const double sd = std::max(std::sqrt(var / n), advantage_std_floor);
        for (auto& a : out) a /= sd;
    }
    return out;
}

struct RolloutGroup {
    std::string item_id;
    std::vector<char> letters;
    std::vector<double> rewards;
    std::vector<double> advantages;

    /// Rewards each letter against the item's answer and normalises within the group.
    static RolloutGroup make(const VqaItem& item, std::vector<char> letters, AdvantageMode mode) {
        if (letters.size() < 2) throw domain_error("a rollout group needs G >= 2 samples");
        RolloutGroup g;
        g.item_id = item.item_id;
        for (char l : letters) g.rewards.push_back(accuracy_reward(std::string(1, l), std::string(1, item.answer_letter)));
        g.letters = std::move(letters);
        g.advantages = group_advantages(g.rewards, mode);
        return g;
    }

    [[nodiscard]] std::size_t size() const noexcept { return letters.size(); }
};

// ---------------------------------------------------------------------------
// Toy student

enum class VisualTargetMode { per_token, pooled };

/// Teacher visual targets for an image: rows `<id>#0..#n-1` when present
/// (per-token), otherwise the pooled row `<id>` repeated n times.
inline nn::Matrix teacher_image_tokens(const EmbeddingTable& images, const std::string& image_id, std::size_t n,
                                       VisualTargetMode mode = VisualTargetMode::per_token) {
    nn::Matrix out(n, images.dim());
    const bool per_token = mode == VisualTargetMode::per_token && images.contains(image_id + "#0");
    for (std::size_t k = 0; k < n; ++k) {
        std::string key = per_token ? image_id + "#" + std::to_string(k) : image_id;
        if (!images.contains(key)) throw lookup_error("missing teacher image embedding '" + key + "'");
        auto row = images.at(key);
        std::copy(row.begin(), row.end(), out.row(k).begin());
    }
    return out;
}

struct StudentConfig {
    std::size_t width = 16;        // D
    std::size_t teacher_dim = 32;  // d
    std::size_t tokens = 4;        // N
    std::size_t ranks = 3;
    /// Projector hidden width; 0 selects ceil(sqrt(D * d)).
    std::size_t projector_hidden = 0;
    double temperature = 0.1;
    /// Noise added when the student's token tables are initialised from the
    /// teacher tokens through a fixed random projection.
    double observation_noise = 0.1;
    std::uint64_t seed = 0;
};

class ToyStudent {
public:
    ToyStudent(const StudentConfig& config, const EmbeddingTable& images, std::span<const std::string> image_ids)
        : config_(config), temperature_(config.temperature) {
        if (!(config.temperature > 0.0)) throw config_error("temperature must be positive");
        if (config.width == 0 || config.teacher_dim == 0 || config.tokens == 0 || config.ranks == 0) {
            throw config_error("student widths, token count and rank count must be positive");
        }
        if (images.dim() != config.teacher_dim) {
            throw config_error("image table width " + std::to_string(images.dim()) + " differs from teacher_dim " +
                               std::to_string(config.teacher_dim));
        }
        const std::size_t D = config.width;
        const std::size_t hp = config.projector_hidden ? config.projector_hidden
                                                       : nn::default_hidden_width(D, config.teacher_dim);
        Rng init(derive_seed(config.seed, "student-init"));
        encoder = nn::Mlp(D, D, D, init);
        head = nn::Mlp(D, D, D, init);
        visual_projector = nn::Mlp(D, hp, config.teacher_dim, init);
        text_projector = nn::Mlp(D, hp, config.teacher_dim, init);
        rank_embeddings = nn::Matrix(config.ranks, D);
        for (auto& x : rank_embeddings.flat()) x = 0.1 * init.normal();

        // Student inputs: a fixed random projection of the teacher tokens plus noise.
        Rng obs(derive_seed(config.seed, "observation"));
        nn::Matrix projection(config.teacher_dim, D);
        const double scale = 1.0 / std::sqrt(static_cast<double>(config.teacher_dim));
        for (auto& x : projection.flat()) x = scale * obs.normal();
        for (const auto& id : image_ids) {
            nn::Matrix t = nn::matmul(teacher_image_tokens(images, id, config.tokens), projection);
            for (auto& x : t.flat()) x += config.observation_noise * obs.normal();
            if (!tokens.emplace(id, std::move(t)).second) throw config_error("duplicate image id '" + id + "'");
        }
    }

    nn::Mlp encoder;
    nn::Mlp head;
    nn::Mlp visual_projector;
    nn::Mlp text_projector;
    nn::Matrix rank_embeddings;
    std::map<std::string, nn::Matrix> tokens;

    [[nodiscard]] const StudentConfig& config() const noexcept { return config_; }
    [[nodiscard]] double temperature() const noexcept { return temperature_; }
    void set_temperature(double t) {
        if (!(t > 0.0)) throw config_error("temperature must be positive");
        temperature_ = t;
    }
    [[nodiscard]] std::size_t width() const noexcept { return config_.width; }
    [[nodiscard]] std::size_t token_count() const noexcept { return config_.tokens; }

    /// Encoder, head, rank table, then token tables in image-id order.
    nn::ParamList policy_parameters() {
        nn::ParamList p = encoder.parameters();
        for (auto s : head.parameters()) p.push_back(s);
        p.push_back(rank_embeddings.flat());
        for (auto& [id, t] : tokens) p.push_back(t.flat());
        return p;
    }

    nn::ParamList projector_parameters() {
        nn::ParamList p = visual_projector.parameters();
        for (auto s : text_projector.parameters()) p.push_back(s);
        return p;
    }

    [[nodiscard]] std::uint64_t projector_hash() const {
        return fnv1a64(text::hex64(visual_projector.hash()) + text::hex64(text_projector.hash()));
    }

    [[nodiscard]] std::vector<nn::NamedTensor> tensors() const {
        std::vector<nn::NamedTensor> out;
        nn::append_mlp_tensors(out, "encoder", encoder);
        nn::append_mlp_tensors(out, "head", head);
        nn::append_mlp_tensors(out, "visual_projector", visual_projector);
        nn::append_mlp_tensors(out, "text_projector", text_projector);
        out.push_back({"rank_embeddings", rank_embeddings});
        for (const auto& [id, t] : tokens) out.push_back({"tokens/" + id, t});
        return out;
    }

    [[nodiscard]] bool all_finite() const {
        auto ok = [](const nn::Mlp& m) {
            for (const auto& l : m.layers) {
                if (!l.weight.all_finite() || !l.bias.all_finite()) return false;
            }
            return true;
        };
        if (!ok(encoder) || !ok(head) || !ok(visual_projector) || !ok(text_projector)) return false;
        if (!rank_embeddings.all_finite()) return false;
        return std::all_of(tokens.begin(), tokens.end(), [](const auto& kv) { return kv.second.all_finite(); });
    }

private:
    StudentConfig config_;
    double temperature_;
};

/// Hidden states of one forward pass.
struct StudentPass {
    std::string image_id;
    std::size_t rank_index = 1;
    nn::MlpCache encoder_cache;  // input = image tokens (layer 0)
    nn::Matrix encoded;          // N x D (layer 1)
    nn::Matrix question;         // 1 x D: pooled features + rank embedding
    nn::MlpCache head_cache;
    nn::Matrix answer;           // 1 x D (layer 2)
};

inline StudentPass student_forward(const ToyStudent& student, const std::string& image_id, std::size_t rank_index) {
    auto it = student.tokens.find(image_id);
    if (it == student.tokens.end()) throw lookup_error("student has no tokens for image '" + image_id + "'");
    if (rank_index < 1 || rank_index > student.rank_embeddings.rows()) {
        throw domain_error("rank index " + std::to_string(rank_index) + " outside the student's rank table");
    }
    StudentPass pass;
    pass.image_id = image_id;
    pass.rank_index = rank_index;
    pass.encoded = nn::mlp_forward(student.encoder, it->second, &pass.encoder_cache);
    const std::size_t n = pass.encoded.rows();
    pass.question = nn::Matrix(1, student.width());
    for (std::size_t r = 0; r < n; ++r) {
        for (std::size_t c = 0; c < student.width(); ++c) pass.question(0, c) += pass.encoded(r, c);
    }
    for (std::size_t c = 0; c < student.width(); ++c) {
        pass.question(0, c) = pass.question(0, c) / static_cast<double>(n) + student.rank_embeddings(rank_index - 1, c);
    }
    pass.answer = nn::mlp_forward(student.head, pass.question, &pass.head_cache);
    return pass;
}

inline const nn::Matrix& visual_features(const StudentPass& pass, std::size_t layer) {
    switch (layer) {
        case 0: return pass.encoder_cache.input;
        case 1: return pass.encoded;
        default: throw config_error("visual features exist at layers 0 and 1, not " + std::to_string(layer));
    }
}

inline const nn::Matrix& answer_features(const StudentPass& pass, std::size_t layer) {
    switch (layer) {
        case 1: return pass.question;
        case 2: return pass.answer;
        default: throw config_error("answer-position features exist at layers 1 and 2, not " + std::to_string(layer));
    }
}

/// Gradients for every student tensor. Token gradients are kept only for
/// images that were touched.
struct StudentGrads {
    nn::MlpGrads encoder;
    nn::MlpGrads head;
    nn::MlpGrads visual_projector;
    nn::MlpGrads text_projector;
    nn::Matrix rank_embeddings;
    std::map<std::string, nn::Matrix> tokens;

    explicit StudentGrads(const ToyStudent& s)
        : encoder(s.encoder),
          head(s.head),
          visual_projector(s.visual_projector),
          text_projector(s.text_projector),
          rank_embeddings(s.rank_embeddings.rows(), s.rank_embeddings.cols()) {}

    void scale(double k) {
        encoder.scale(k);
        head.scale(k);
        visual_projector.scale(k);
        text_projector.scale(k);
        for (auto& x : rank_embeddings.flat()) x *= k;
        for (auto& [id, t] : tokens) {
            for (auto& x : t.flat()) x *= k;
        }
    }

    /// Same order as ToyStudent::policy_parameters; untouched images map to `zeros`.
    [[nodiscard]] nn::GradList policy_list(const ToyStudent& s, const std::vector<double>& zeros) const {
        nn::GradList g = encoder.as_list();
        for (auto x : head.as_list()) g.push_back(x);
        g.push_back(rank_embeddings.flat());
        for (const auto& [id, t] : s.tokens) {
            auto it = tokens.find(id);
            if (it != tokens.end()) {
                g.push_back(it->second.flat());
            } else {
                g.push_back(std::span<const double>(zeros.data(), t.size()));
            }
        }
        return g;
    }

    [[nodiscard]] nn::GradList projector_list() const {
        nn::GradList g = visual_projector.as_list();
        for (auto x : text_projector.as_list()) g.push_back(x);
        return g;
    }
};

/// Backpropagates gradients given at the student's hidden states into its
/// parameters. Empty matrices mean "no gradient at this state".
inline void student_backward(const ToyStudent& student, const StudentPass& pass, const nn::Matrix& d_tokens,
                             const nn::Matrix& d_encoded, const nn::Matrix& d_question, const nn::Matrix& d_answer,
                             StudentGrads& grads) {
    const std::size_t D = student.width();
    const std::size_t n = pass.encoded.rows();
    nn::Matrix dq(1, D);
    if (!d_question.empty()) nn::add_inplace(dq, d_question);
    if (!d_answer.empty()) {
        auto back = nn::mlp_backward(student.head, pass.head_cache, d_answer);
        grads.head.accumulate(back.grads);
        nn::add_inplace(dq, back.input_grad);
    }
    for (std::size_t c = 0; c < D; ++c) grads.rank_embeddings(pass.rank_index - 1, c) += dq(0, c);
    nn::Matrix de(n, D);
    if (!d_encoded.empty()) nn::add_inplace(de, d_encoded);
    for (std::size_t r = 0; r < n; ++r) {
        for (std::size_t c = 0; c < D; ++c) de(r, c) += dq(0, c) / static_cast<double>(n);
    }
    auto back = nn::mlp_backward(student.encoder, pass.encoder_cache, de);
    grads.encoder.accumulate(back.grads);
    if (!d_tokens.empty()) nn::add_inplace(back.input_grad, d_tokens);
    auto [it, inserted] = grads.tokens.try_emplace(pass.image_id, back.input_grad);
    if (!inserted) nn::add_inplace(it->second, back.input_grad);
}

/// Option probabilities of the student's policy for one item.
struct PolicyPass {
    nn::MlpCache projector_cache;
    nn::Matrix projected;  // 1 x d
    std::array<std::vector<double>, 4> label_vectors;
    std::array<double, 4> logits{};
    std::array<double, 4> probs{};
};

inline PolicyPass policy_forward(const ToyStudent& student, const StudentPass& pass, const VqaItem& item,
                                 const EmbeddingTable& labels) {
    PolicyPass out;
    out.projected = nn::mlp_forward(student.text_projector, pass.answer, &out.projector_cache);
    for (std::size_t i = 0; i < 4; ++i) {
        const auto& label = item.choices[i].label;
        if (!labels.contains(label)) throw lookup_error("missing label embedding for '" + label + "'");
        auto v = labels.at(label);
        out.label_vectors[i].assign(v.begin(), v.end());
        out.logits[i] = cosine_similarity(out.projected.row(0), v) / student.temperature();
        if (!std::isfinite(out.logits[i])) throw numeric_error("non-finite policy logit for item '" + item.item_id + "'");
    }
    auto p = nn::softmax(out.logits);
    std::copy(p.begin(), p.end(), out.probs.begin());
    return out;
}

/// Index of the most probable option; ties go to the earlier letter.
inline std::size_t greedy_choice(const PolicyPass& policy) {
    return static_cast<std::size_t>(std::max_element(policy.logits.begin(), policy.logits.end()) -
                                    policy.logits.begin());
}

struct PolicyGradientResult {
    double loss = 0.0;
    StudentGrads grads;
};

/// L = -(1/G) sum_i A_i log pi(letter_i). Gradients reach the encoder, head,
/// rank and token tables through the frozen text projector; projector
/// gradients are zero by construction.
inline PolicyGradientResult policy_gradient_loss(const ToyStudent& student, const VqaItem& item,
                                                 const RolloutGroup& group, const EmbeddingTable& labels) {
    if (group.size() < 2 || group.advantages.size() != group.size()) {
        throw domain_error("malformed rollout group for item '" + item.item_id + "'");
    }
    auto pass = student_forward(student, item.image_id, item.rank_index);
    auto policy = policy_forward(student, pass, item, labels);
    auto logp = nn::log_softmax(policy.logits);
    const double G = static_cast<double>(group.size());
    PolicyGradientResult out{0.0, StudentGrads(student)};
    std::array<double, 4> d_logits{};
    bool any = false;
    for (std::size_t i = 0; i < group.size(); ++i) {
        const std::size_t k = letter_index(group.letters[i]);
        const double a = group.advantages[i];
        out.loss -= a * logp[k] / G;
        if (a == 0.0) continue;
        any = true;
        for (std::size_t c = 0; c < 4; ++c) d_logits[c] -= a * ((c == k ? 1.0 : 0.0) - policy.probs[c]) / G;
    }
    if (!any) return out;
    nn::Matrix d_projected(1, policy.projected.cols());
    for (std::size_t c = 0; c < 4; ++c) {
        if (d_logits[c] == 0.0) continue;
        auto cg = nn::cosine_with_grad(policy.projected.row(0), policy.label_vectors[c]);
        for (std::size_t j = 0; j < cg.d_a.size(); ++j) d_projected(0, j) += d_logits[c] * cg.d_a[j] / student.temperature();
    }
    auto back = nn::mlp_backward(student.text_projector, policy.projector_cache, d_projected);
    student_backward(student, pass, {}, {}, {}, back.input_grad, out.grads);
    return out;
}

// ---------------------------------------------------------------------------
// Alignment on the student

/// Alignment loss for one item and its gradients accumulated into `grads`
/// (student and projectors), scaled by `scale`.
inline AlignmentResult alignment_for_item(const ToyStudent& student, const StudentPass& pass, const VqaItem& item,
                                          const EmbeddingTable& images, const EmbeddingTable& labels,
                                          const AlignmentConfig& config, VisualTargetMode targets, double scale,
                                          StudentGrads* grads) {
    AlignmentBatch batch;
    batch.visual = visual_features(pass, config.visual_layer);
    batch.answer = answer_features(pass, config.text_layer);
    batch.question = pass.question;
    batch.visual_targets = Frozen<nn::Matrix>(teacher_image_tokens(images, item.image_id, student.token_count(), targets));
    if (!labels.contains(item.answer_label)) throw lookup_error("missing label embedding for '" + item.answer_label + "'");
    auto target = labels.at(item.answer_label);
    batch.label_target = Frozen<std::vector<double>>(std::vector<double>(target.begin(), target.end()));
    auto r = combined_alignment_loss(batch, student.visual_projector, student.text_projector, config);
    if (grads) {
        for (auto* m : {&r.d_visual, &r.d_answer, &r.d_question}) {
            for (auto& x : m->flat()) x *= scale;
        }
        nn::Matrix d_tokens, d_encoded, d_question = r.d_question, d_answer;
        (config.visual_layer == 0 ? d_tokens : d_encoded) = r.d_visual;
        if (config.text_layer == 1) {
            nn::add_inplace(d_question, r.d_answer);
        } else {
            d_answer = r.d_answer;
        }
        student_backward(student, pass, d_tokens, d_encoded, d_question, d_answer, *grads);
        grads->visual_projector.accumulate(r.visual_projector, scale);
        grads->text_projector.accumulate(r.text_projector, scale);
    }
    return r;
}

// ---------------------------------------------------------------------------
// Training

struct TrainConfig {
    std::size_t steps = 1500;
    std::size_t batch_size = 8;
    std::size_t group_size = 4;  // G
    double lr_policy = 3e-3;
    double lr_projector = 3e-3;
    /// Multiplier on the alignment objective; 0 gives a pure RFT run.
    double align_weight = 1.0;
    std::uint64_t seed = 0;
    AlignmentConfig alignment;
    VisualTargetMode visual_targets = VisualTargetMode::per_token;
    AdvantageMode advantage = AdvantageMode::mean_std;
    /// Questioned ranks (1-based); empty selects every rank with >= 4 labels.
    std::vector<std::size_t> ranks;
    /// Sampling ratio over the questioned ranks; empty is uniform.
    std::vector<std::uint64_t> ratio;
    std::size_t shots = 2;
    std::size_t eval_every = 25;
    /// 0 writes only the final checkpoint.
    std::size_t checkpoint_every = 0;
    /// Draw the RFT batch separately from the alignment batch.
    bool separate_batches = false;
    /// Stop once greedy eval accuracy reaches this value (0 disables).
    double stop_accuracy = 0.0;
    /// Accuracy threshold whose first crossing is reported.
    double target_accuracy = 0.45;
    StudentConfig student;

    void validate() const {
        if (batch_size == 0) throw config_error("batch_size must be positive");
        if (group_size < 2) throw config_error("group_size (G) must be at least 2");
        if (!(lr_policy >= 0.0) || !(lr_projector >= 0.0)) throw config_error("learning rates must be non-negative");
        if (!(align_weight >= 0.0)) throw config_error("align_weight must be non-negative");
        if (shots == 0) throw config_error("shots must be positive");
        if (eval_every == 0) throw config_error("eval_every must be positive");
        if (!ratio.empty() && !ranks.empty() && ratio.size() != ranks.size()) {
            throw config_error("ratio needs one weight per rank");
        }
        alignment.validate();
    }
};

struct TrainingData {
    const TaxonomyTree* tree = nullptr;
    const EmbeddingTable* labels = nullptr;
    /// Pooled rows `<image>` (distractor selection) and optional token rows `<image>#k`.
    const EmbeddingTable* images = nullptr;
    std::vector<ImageAssignment> train;
    std::vector<ImageAssignment> eval;
};

struct StepLog {
    std::size_t step = 0;
    double loss_alignment = 0.0;
    double loss_v = 0.0;
    double loss_c = 0.0;
    double loss_rft = 0.0;
    double mean_reward = 0.0;
    double mean_visual_cosine = 0.0;
    double mean_label_cosine = 0.0;
    bool projectors_frozen = true;

    friend bool operator==(const StepLog&, const StepLog&) = default;
};

struct Optimizers {
    nn::AdamState align_policy;
    nn::AdamState align_projectors;
    nn::AdamState rft_policy;

    explicit Optimizers(const TrainConfig& c) {
        align_policy.lr = c.lr_policy;
        rft_policy.lr = c.lr_policy;
        align_projectors.lr = c.lr_projector;
    }
};

/// One alternating step over an alignment batch and an RFT batch (the same
/// batch unless configured otherwise).
inline StepLog train_step_alternating(ToyStudent& student, std::span<const VqaItem> align_batch,
                                      std::span<const VqaItem> rft_batch, const TrainingData& data,
                                      const TrainConfig& config, Optimizers& opt, Rng& rng, std::size_t step) {
    if (align_batch.empty() || rft_batch.empty()) throw domain_error("empty training batch");
    StepLog log;
    log.step = step;
    const std::vector<double> zeros(student.token_count() * student.width(), 0.0);

    // Alignment sub-step: student and both projectors.
    {
        StudentGrads grads(student);
        const bool update = config.align_weight > 0.0;
        const double scale = config.align_weight / static_cast<double>(align_batch.size());
        for (const auto& item : align_batch) {
            auto pass = student_forward(student, item.image_id, item.rank_index);
            auto r = alignment_for_item(student, pass, item, *data.images, *data.labels, config.alignment,
                                        config.visual_targets, scale, update ? &grads : nullptr);
            log.loss_v += r.loss_v;
            log.loss_c += r.loss_c;
            log.loss_alignment += config.align_weight * r.loss;
            log.mean_visual_cosine += r.mean_visual_cosine;
            log.mean_label_cosine += r.label_cosine;
        }
        const double n = static_cast<double>(align_batch.size());
        log.loss_v /= n;
        log.loss_c /= n;
        log.loss_alignment /= n;
        log.mean_visual_cosine /= n;
        log.mean_label_cosine /= n;
        if (!std::isfinite(log.loss_alignment)) throw numeric_error("non-finite alignment loss at step " + std::to_string(step));
        if (update) {
            nn::adam_step(student.policy_parameters(), grads.policy_list(student, zeros), opt.align_policy);
            nn::adam_step(student.projector_parameters(), grads.projector_list(), opt.align_projectors);
        }
    }

    // RFT sub-step: student only.
    {
        const auto frozen = student.projector_hash();
        StudentGrads grads(student);
        const double n = static_cast<double>(rft_batch.size());
        double reward_sum = 0.0;
        std::size_t reward_count = 0;
        std::vector<RolloutGroup> groups;
        for (const auto& item : rft_batch) {
            auto pass = student_forward(student, item.image_id, item.rank_index);
            auto policy = policy_forward(student, pass, item, *data.labels);
            std::vector<char> letters;
            for (std::size_t g = 0; g < config.group_size; ++g) {
                const double u = rng.uniform();
                double acc = 0.0;
                std::size_t pick = 3;
                for (std::size_t c = 0; c < 4; ++c) {
                    acc += policy.probs[c];
                    if (u < acc) {
                        pick = c;
                        break;
                    }
                }
                letters.push_back(choice_letters[pick]);
            }
            groups.push_back(RolloutGroup::make(item, std::move(letters), config.advantage));
        }
        for (std::size_t i = 0; i < rft_batch.size(); ++i) {
            auto pg = policy_gradient_loss(student, rft_batch[i], groups[i], *data.labels);
            log.loss_rft += pg.loss / n;
            pg.grads.scale(1.0 / n);
            grads.encoder.accumulate(pg.grads.encoder);
            grads.head.accumulate(pg.grads.head);
            nn::add_inplace(grads.rank_embeddings, pg.grads.rank_embeddings);
            for (auto& [id, t] : pg.grads.tokens) {
                auto [it, inserted] = grads.tokens.try_emplace(id, t);
                if (!inserted) nn::add_inplace(it->second, t);
            }
            for (double r : groups[i].rewards) {
                reward_sum += r;
                ++reward_count;
            }
        }
        log.mean_reward = reward_sum / static_cast<double>(reward_count);
        if (!std::isfinite(log.loss_rft)) throw numeric_error("non-finite RFT loss at step " + std::to_string(step));
        nn::adam_step(student.policy_parameters(), grads.policy_list(student, zeros), opt.rft_policy);
        log.projectors_frozen = student.projector_hash() == frozen;
        if (!log.projectors_frozen) throw numeric_error("projector parameters changed during the RFT sub-step");
    }
    if (!student.all_finite()) throw numeric_error("non-finite student parameters after step " + std::to_string(step));
    return log;
}

struct EvalResult {
    double accuracy = 0.0;
    std::vector<char> predicted_letters;
};

inline EvalResult evaluate_greedy(const ToyStudent& student, std::span<const VqaItem> items,
                                  const EmbeddingTable& labels) {
    EvalResult out;
    std::size_t correct = 0;
    for (const auto& item : items) {
        auto pass = student_forward(student, item.image_id, item.rank_index);
        auto policy = policy_forward(student, pass, item, labels);
        char letter = choice_letters[greedy_choice(policy)];
        out.predicted_letters.push_back(letter);
        correct += letter == item.answer_letter;
    }
    out.accuracy = items.empty() ? 0.0 : static_cast<double>(correct) / static_cast<double>(items.size());
    return out;
}

/// Mean cosine between P_V(visual features) and the teacher tokens over the given images.
inline double visual_alignment_cosine(const ToyStudent& student, std::span<const ImageAssignment> images,
                                      const EmbeddingTable& teacher, const AlignmentConfig& config,
                                      VisualTargetMode targets) {
    if (images.empty()) return 0.0;
    double sum = 0.0;
    for (const auto& img : images) {
        auto pass = student_forward(student, img.image_id, 1);
        nn::Matrix projected = nn::mlp_forward(student.visual_projector, visual_features(pass, config.visual_layer));
        auto t = teacher_image_tokens(teacher, img.image_id, student.token_count(), targets);
        double s = 0.0;
        for (std::size_t r = 0; r < projected.rows(); ++r) s += cosine_similarity(projected.row(r), t.row(r));
        sum += s / static_cast<double>(projected.rows());
    }
    return sum / static_cast<double>(images.size());
}

struct EvalPoint {
    std::size_t step = 0;
    double accuracy = 0.0;
};

struct RunResult {
    std::vector<StepLog> steps;
    std::vector<EvalPoint> eval_curve;
    double final_accuracy = 0.0;
    double train_visual_cosine = 0.0;
    double eval_visual_cosine = 0.0;
    /// First evaluated step at which accuracy reached target_accuracy.
    std::optional<std::size_t> steps_to_target;
    MetricReport report;
    std::size_t train_items = 0;
    std::size_t eval_items = 0;
    std::uint64_t checkpoint_hash = 0;
    std::size_t steps_run = 0;
};

namespace detail {

inline std::string losses_csv_header() { return "step,loss_alignment,loss_v,loss_c,loss_rft,mean_reward\n"; }

inline std::string format_row(std::initializer_list<double> values, std::size_t step) {
    std::string row = std::to_string(step);
    for (double v : values) row += "," + toml::format_double(v);
    return row + "\n";
}

}  // namespace detail

struct RunOutputs {
    std::filesystem::path dir;
    std::string config_toml;
};

inline std::vector<VqaItem> build_training_items(const TrainConfig& config, const TrainingData& data,
                                                 std::span<const ImageAssignment> images, bool eval,
                                                 const std::function<void(const std::string&)>& warn = {}) {
    BuildOptions opt;
    opt.ranks = config.ranks;
    opt.seed = derive_seed(config.seed, eval ? "eval-items" : "train-items");
    opt.prompt.no_thinking_suffix = true;
    opt.warn = warn;
    if (eval) {
        opt.shots = 1;
        opt.group_size = 1;
    } else {
        opt.weights = config.ratio;
        opt.shots = config.shots;
        const std::size_t w = config.ratio.empty()
                                  ? std::max<std::size_t>(1, config.ranks.size())
                                  : static_cast<std::size_t>(std::accumulate(config.ratio.begin(), config.ratio.end(), std::uint64_t{0}));
        opt.group_size = std::max<std::size_t>(1, w);
    }
    return build_items(*data.tree, images, *data.images, *data.labels, opt);
}

/// Greedy answers on eval items turned into path records (questioned ranks only).
inline std::vector<PredictionRecord> eval_records(std::span<const VqaItem> items, std::span<const char> letters) {
    std::map<std::string, std::map<std::size_t, std::pair<std::string, std::string>>> by_image;
    for (std::size_t i = 0; i < items.size(); ++i) {
        const auto& item = items[i];
        const auto& pred = item.choices[letter_index(letters[i])].label;
        by_image[item.image_id][item.rank_index] = {item.answer_label, pred};
    }
    std::vector<PredictionRecord> out;
    for (const auto& [image, ranks] : by_image) {
        PredictionRecord r;
        r.sample_id = image;
        for (const auto& [rank, tp] : ranks) {
            r.truth.push_back(tp.first);
            r.predicted.push_back(tp.second);
        }
        out.push_back(std::move(r));
    }
    return out;
}

/// Builds items, trains with alternating alignment/RFT steps, evaluates
/// greedily on held-out images, and optionally writes a run directory.
inline RunResult run_training(const TrainConfig& config, const TrainingData& data,
                              const std::optional<RunOutputs>& outputs = std::nullopt,
                              const std::function<void(const std::string&)>& log = {}) {
    config.validate();
    if (!data.tree || !data.labels || !data.images) throw config_error("training data is incomplete");
    namespace fs = std::filesystem;
    std::optional<fs::path> dir;
    if (outputs) {
        dir = outputs->dir;
        fs::create_directories(*dir / "checkpoints");
        fs::remove(*dir / "FAILED");
        text::write_file((*dir / "config.toml").string(), outputs->config_toml);
    }
    try {
        auto train_items = build_training_items(config, data, data.train, false, log);
        auto eval_items = build_training_items(config, data, data.eval, true);
        if (train_items.empty()) throw benchmark_error("no training items");

        std::vector<std::string> ids;
        for (const auto& a : data.train) ids.push_back(a.image_id);
        for (const auto& a : data.eval) ids.push_back(a.image_id);
        StudentConfig sc = config.student;
        sc.ranks = data.tree->depth();
        sc.teacher_dim = data.images->dim();
        sc.seed = derive_seed(config.seed, sc.seed);
        if (data.labels->dim() != sc.teacher_dim) throw config_error("label and image tables differ in width");
        ToyStudent student(sc, *data.images, ids);
        Optimizers opt(config);
        Rng rng(derive_seed(config.seed, "rollouts"));
        Rng order_rng(derive_seed(config.seed, "order"));

        RunResult result;
        result.train_items = train_items.size();
        result.eval_items = eval_items.size();

        std::vector<std::size_t> order(train_items.size());
        std::iota(order.begin(), order.end(), std::size_t{0});
        std::size_t cursor = order.size();
        auto next_batch = [&] {
            std::vector<VqaItem> batch;
            for (std::size_t i = 0; i < config.batch_size; ++i) {
                if (cursor == order.size()) {
                    order_rng.shuffle(std::span<std::size_t>(order));
                    cursor = 0;
                }
                batch.push_back(train_items[order[cursor++]]);
            }
            return batch;
        };

        std::string losses = detail::losses_csv_header();
        std::string alignment_csv = "step,loss_v,loss_c,loss_alignment,mean_cos_visual,mean_cos_label\n";
        std::string eval_csv = "step,accuracy\n";
        auto write_checkpoint = [&](std::size_t step) {
            auto bytes = nn::save_checkpoint(student.tensors());
            result.checkpoint_hash = fnv1a64(bytes);
            if (dir) text::write_file((*dir / "checkpoints" / ("step" + std::to_string(step) + ".nn01")).string(), bytes);
        };
        auto evaluate = [&](std::size_t step) {
            auto ev = evaluate_greedy(student, eval_items, *data.labels);
            result.eval_curve.push_back({step, ev.accuracy});
            eval_csv += std::to_string(step) + "," + toml::format_double(ev.accuracy) + "\n";
            if (!result.steps_to_target && ev.accuracy >= config.target_accuracy) result.steps_to_target = step;
            if (log) log("step " + std::to_string(step) + " eval accuracy " + toml::format_double(ev.accuracy));
            return ev;
        };

        evaluate(0);
        std::size_t step = 0;
        for (step = 1; step <= config.steps; ++step) {
            auto align_batch = next_batch();
            auto rft_batch = config.separate_batches ? next_batch() : align_batch;
            auto s = train_step_alternating(student, align_batch, rft_batch, data, config, opt, rng, step);
            losses += detail::format_row({s.loss_alignment, s.loss_v, s.loss_c, s.loss_rft, s.mean_reward}, step);
            alignment_csv += detail::format_row(
                {s.loss_v, s.loss_c, s.loss_alignment, s.mean_visual_cosine, s.mean_label_cosine}, step);
            result.steps.push_back(s);
            if (config.checkpoint_every && step % config.checkpoint_every == 0 && step != config.steps) write_checkpoint(step);
            if (step % config.eval_every == 0 || step == config.steps) {
                auto ev = evaluate(step);
                if (config.stop_accuracy > 0.0 && ev.accuracy >= config.stop_accuracy) {
                    ++step;
                    break;
                }
            }
        }
        result.steps_run = step - 1;
        if (result.eval_curve.back().step != result.steps_run) evaluate(result.steps_run);

        auto final_eval = evaluate_greedy(student, eval_items, *data.labels);
        result.final_accuracy = final_eval.accuracy;
        result.train_visual_cosine =
            visual_alignment_cosine(student, data.train, *data.images, config.alignment, config.visual_targets);
        result.eval_visual_cosine =
            visual_alignment_cosine(student, data.eval, *data.images, config.alignment, config.visual_targets);
        auto records = eval_records(eval_items, final_eval.predicted_letters);
        ReportOptions ro;
        ro.include_tor = !records.empty() && records.front().truth.size() >= 2;
        if (!records.empty()) result.report = report(records, ro);
        write_checkpoint(result.steps_run);

        if (dir) {
            text::write_file((*dir / "losses.csv").string(), losses);
            text::write_file((*dir / "alignment.csv").string(), alignment_csv);
            text::write_file((*dir / "eval.csv").string(), eval_csv);
            auto j = report_to_json(result.report);
            nlohmann::ordered_json run;
            run["greedy_accuracy"] = result.final_accuracy;
            run["eval_items"] = result.eval_items;
            run["train_items"] = result.train_items;
            run["steps_run"] = result.steps_run;
            run["steps_to_target"] = result.steps_to_target ? nlohmann::ordered_json(*result.steps_to_target)
                                                            : nlohmann::ordered_json(nullptr);
            run["target_accuracy"] = config.target_accuracy;
            run["train_visual_cosine"] = result.train_visual_cosine;
            run["eval_visual_cosine"] = result.eval_visual_cosine;
            run["advantage_estimator"] = config.advantage == AdvantageMode::mean_std ? "mean_std" : "mean_baseline";
            run["group_size"] = config.group_size;
            run["projector_hidden"] = student.visual_projector.hidden();
            run["initialization"] = "kaiming_uniform_fan_in";
            run["checkpoint_hash"] = text::hex64(result.checkpoint_hash);
            j["run"] = std::move(run);
            text::write_file((*dir / "eval_report.json").string(), j.dump(2) + "\n");
        }
        return result;
    } catch (const std::exception& e) {
        if (dir) text::write_file((*dir / "FAILED").string(), std::string(e.what()) + "\n");
        throw;
    }
}

}  // namespace taxalign
