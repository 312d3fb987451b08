#pragma once

// Central-difference checks of every hand-written backward pass on small
// seeded problems.

#include <algorithm>
#include <cmath>
#include <functional>
#include <map>
#include <string>
#include <vector>

#include "taxalign/alignment.hpp"
#include "taxalign/benchmark.hpp"
#include "taxalign/embeddings.hpp"
#include "taxalign/nn.hpp"
#include "taxalign/probing.hpp"
#include "taxalign/random.hpp"
#include "taxalign/rft.hpp"

namespace taxalign {

/// Central differences over every entry of `params`, perturbed in place and
/// restored afterwards.
inline std::vector<double> finite_diff_grads(const nn::ParamList& params, const std::function<double()>& f,
                                             double h = 1e-5) {
    std::vector<double> out;
    for (auto span : params) {
        for (auto& x : span) {
            const double orig = x;
            x = orig + h;
            const double up = f();
            x = orig - h;
            const double down = f();
            x = orig;
            if (!std::isfinite(up) || !std::isfinite(down)) throw numeric_error("non-finite value during finite differences");
            out.push_back((up - down) / (2.0 * h));
        }
    }
    return out;
}

inline std::vector<double> flatten(const nn::GradList& grads) {
    std::vector<double> out;
    for (auto g : grads) out.insert(out.end(), g.begin(), g.end());
    return out;
}

struct GradcheckOptions {
    std::size_t seeds = 20;
    double tol = 1e-4;
    double h = 1e-5;
    std::uint64_t base_seed = 0;
    /// Op whose analytic gradient is deliberately corrupted (test harness only).
    std::string inject_fault;
};

struct GradcheckResult {
    std::string op;
    std::size_t seeds = 0;
    double max_error = 0.0;
    bool passed = false;
};

inline const std::vector<std::string>& gradcheck_ops() {
    static const std::vector<std::string> ops{"mlp_backward",           "visual_alignment_loss",
                                              "label_alignment_loss",   "combined_alignment_loss",
                                              "policy_gradient_loss",   "probe_cross_entropy"};
    return ops;
}

namespace detail {

inline nn::Matrix random_matrix(Rng& rng, std::size_t rows, std::size_t cols, double scale = 1.0) {
    nn::Matrix m(rows, cols);
    for (auto& x : m.flat()) x = scale * rng.normal();
    return m;
}

inline std::vector<double> random_vector(Rng& rng, std::size_t n) {
    std::vector<double> v(n);
    for (auto& x : v) x = rng.normal();
    return v;
}

/// Analytic and numeric gradients for one op on one seed.
struct GradPair {
    std::vector<double> analytic;
    std::vector<double> numeric;
};

inline GradPair check_mlp(std::uint64_t seed, double h) {
    Rng rng(seed);
    const std::size_t in = 3 + rng.below(4), hidden = 3 + rng.below(5), out = 2 + rng.below(4), rows = 1 + rng.below(4);
    nn::Mlp net(in, hidden, out, rng);
    for (auto& l : net.layers) {
        for (auto& b : l.bias.flat()) b = 0.1 * rng.normal();
    }
    nn::Matrix x = random_matrix(rng, rows, in);
    nn::Matrix w = random_matrix(rng, rows, out);
    auto f = [&] {
        auto y = nn::mlp_forward(net, x);
        double s = 0.0;
        for (std::size_t i = 0; i < y.size(); ++i) s += y.flat()[i] * w.flat()[i];
        return s;
    };
    nn::MlpCache cache;
    nn::mlp_forward(net, x, &cache);
    auto back = nn::mlp_backward(net, cache, w);
    nn::GradList a = back.grads.as_list();
    a.push_back(back.input_grad.flat());
    nn::ParamList p = net.parameters();
    p.push_back(x.flat());
    return {flatten(a), finite_diff_grads(p, f, h)};
}

struct AlignmentProblem {
    AlignmentBatch batch;
    nn::Mlp pv, pt;
    AlignmentConfig config;
};

inline AlignmentProblem alignment_problem(std::uint64_t seed) {
    Rng rng(seed);
    const std::size_t D = 4 + rng.below(4), d = 3 + rng.below(5), n = 5, answers = 1 + rng.below(3);
    AlignmentProblem p;
    p.batch.visual = random_matrix(rng, n, D);
    p.batch.answer = random_matrix(rng, answers, D);
    p.batch.question = random_matrix(rng, 2, D);
    p.batch.visual_targets = Frozen<nn::Matrix>(random_matrix(rng, n, d));
    p.batch.label_target = Frozen<std::vector<double>>(random_vector(rng, d));
    p.pv = nn::Mlp(D, nn::default_hidden_width(D, d), d, rng);
    p.pt = nn::Mlp(D, nn::default_hidden_width(D, d), d, rng);
    p.config.visual_mode = seed % 2 ? VisualFeatureMode::last_token : VisualFeatureMode::all_tokens;
    p.config.text_mode = static_cast<TextFeatureMode>(seed % 3);
    p.config.visual_weight = 0.5 + rng.uniform();
    p.config.label_weight = 0.5 + rng.uniform();
    return p;
}

inline GradPair check_visual(std::uint64_t seed, double h) {
    auto p = alignment_problem(seed);
    auto f = [&] { return visual_alignment_loss(p.batch, p.pv, p.config.visual_mode).loss; };
    auto r = visual_alignment_loss(p.batch, p.pv, p.config.visual_mode);
    nn::GradList a = r.projector.as_list();
    a.push_back(r.d_visual.flat());
    nn::ParamList params = p.pv.parameters();
    params.push_back(p.batch.visual.flat());
    return {flatten(a), finite_diff_grads(params, f, h)};
}

inline GradPair check_label(std::uint64_t seed, double h) {
    auto p = alignment_problem(seed);
    auto f = [&] { return label_alignment_loss(p.batch, p.pt, p.config.text_mode).loss; };
    auto r = label_alignment_loss(p.batch, p.pt, p.config.text_mode);
    nn::GradList a = r.projector.as_list();
    a.push_back(r.d_answer.flat());
    a.push_back(r.d_question.flat());
    nn::ParamList params = p.pt.parameters();
    params.push_back(p.batch.answer.flat());
    params.push_back(p.batch.question.flat());
    return {flatten(a), finite_diff_grads(params, f, h)};
}

inline GradPair check_combined(std::uint64_t seed, double h) {
    auto p = alignment_problem(seed);
    auto f = [&] { return combined_alignment_loss(p.batch, p.pv, p.pt, p.config).loss; };
    auto r = combined_alignment_loss(p.batch, p.pv, p.pt, p.config);
    nn::GradList a = r.visual_projector.as_list();
    for (auto g : r.text_projector.as_list()) a.push_back(g);
    a.push_back(r.d_visual.flat());
    a.push_back(r.d_answer.flat());
    a.push_back(r.d_question.flat());
    nn::ParamList params = p.pv.parameters();
    for (auto s : p.pt.parameters()) params.push_back(s);
    params.push_back(p.batch.visual.flat());
    params.push_back(p.batch.answer.flat());
    params.push_back(p.batch.question.flat());
    return {flatten(a), finite_diff_grads(params, f, h)};
}

inline GradPair check_policy(std::uint64_t seed, double h) {
    Rng rng(seed);
    const std::size_t d = 6;
    EmbeddingTable images(d), labels(d);
    std::vector<std::string> ids{"i0", "i1"};
    for (const auto& id : ids) {
        images.add(id, random_vector(rng, d));
        for (int k = 0; k < 3; ++k) images.add(id + "#" + std::to_string(k), random_vector(rng, d));
    }
    VqaItem item;
    item.item_id = "i1@r2#0";
    item.image_id = "i1";
    item.rank_index = 2;
    for (std::size_t c = 0; c < 4; ++c) {
        item.choices[c] = {choice_letters[c], "L" + std::to_string(c)};
        labels.add(item.choices[c].label, random_vector(rng, d));
    }
    item.answer_letter = choice_letters[rng.below(4)];
    item.answer_label = item.choices[letter_index(item.answer_letter)].label;
    StudentConfig sc;
    sc.width = 5;
    sc.teacher_dim = d;
    sc.tokens = 3;
    sc.ranks = 2;
    sc.temperature = 0.5;
    sc.seed = seed;
    ToyStudent student(sc, images, ids);
    RolloutGroup group;
    group.item_id = item.item_id;
    for (int g = 0; g < 4; ++g) {
        group.letters.push_back(choice_letters[rng.below(4)]);
        group.rewards.push_back(static_cast<double>(rng.below(2)));
        group.advantages.push_back(rng.normal());
    }
    auto f = [&] { return policy_gradient_loss(student, item, group, labels).loss; };
    auto r = policy_gradient_loss(student, item, group, labels);
    const std::vector<double> zeros(sc.tokens * sc.width, 0.0);
    auto analytic = flatten(r.grads.policy_list(student, zeros));
    // Projector gradients are zero by construction; fold them into the check.
    auto proj = flatten(r.grads.projector_list());
    analytic.insert(analytic.end(), proj.begin(), proj.end());
    auto numeric = finite_diff_grads(student.policy_parameters(), f, h);
    numeric.resize(numeric.size() + proj.size(), 0.0);
    return {analytic, numeric};
}

inline GradPair check_probe(std::uint64_t seed, double h) {
    Rng rng(seed);
    const std::size_t n = 6 + rng.below(6), width = 2 + rng.below(5), classes = 2 + rng.below(4);
    ProbeDataset data;
    data.classes = classes;
    data.features = random_matrix(rng, n, width);
    for (std::size_t i = 0; i < n; ++i) data.labels.push_back(i % classes);
    LinearProbe probe{random_matrix(rng, width, classes, 0.5), random_matrix(rng, 1, classes, 0.5)};
    std::vector<std::size_t> rows(n);
    for (std::size_t i = 0; i < n; ++i) rows[i] = i;
    auto f = [&] { return probe_loss(probe, data, rows).loss; };
    auto r = probe_loss(probe, data, rows);
    return {flatten({r.d_weight.flat(), r.d_bias.flat()}),
            finite_diff_grads({probe.weight.flat(), probe.bias.flat()}, f, h)};
}

}  // namespace detail

inline GradcheckResult run_gradcheck(const std::string& op, const GradcheckOptions& options) {
    static const std::map<std::string, std::function<detail::GradPair(std::uint64_t, double)>> checks{
        {"mlp_backward", detail::check_mlp},
        {"visual_alignment_loss", detail::check_visual},
        {"label_alignment_loss", detail::check_label},
        {"combined_alignment_loss", detail::check_combined},
        {"policy_gradient_loss", detail::check_policy},
        {"probe_cross_entropy", detail::check_probe}};
    auto it = checks.find(op);
    if (it == checks.end()) throw config_error("unknown gradcheck op '" + op + "'");
    GradcheckResult result;
    result.op = op;
    result.seeds = options.seeds;
    for (std::size_t s = 0; s < options.seeds; ++s) {
        auto pair = it->second(derive_seed(derive_seed(options.base_seed, op), s), options.h);
        if (op == options.inject_fault && !pair.analytic.empty()) {
            for (auto& g : pair.analytic) g = 1.1 * g + 0.01;
        }
        result.max_error = std::max(result.max_error, nn::relative_error(pair.analytic, pair.numeric));
    }
    result.passed = result.max_error <= options.tol;
    return result;
}

inline std::vector<GradcheckResult> run_gradchecks(const GradcheckOptions& options) {
    std::vector<GradcheckResult> out;
    for (const auto& op : gradcheck_ops()) out.push_back(run_gradcheck(op, options));
    return out;
}

}  // namespace taxalign
