// Command-line front end: build-bench, eval, train-toy, gradcheck, probe,
// gen-fixtures.
//
// Exit codes: 0 success, 1 gradient check failure, 2 validation error,
// 3 numeric failure. Errors are reported as one line on stderr; data goes to
// files under --out only.

#include <cstdio>
#include <cstdlib>
#include <filesystem>
#include <iostream>
#include <map>
#include <optional>
#include <string>
#include <vector>

#include <CLI11.hpp>
#include <json.hpp>

#include "taxalign/benchmark.hpp"
#include "taxalign/embeddings.hpp"
#include "taxalign/errors.hpp"
#include "taxalign/fixture_files.hpp"
#include "taxalign/gradcheck.hpp"
#include "taxalign/metrics.hpp"
#include "taxalign/probing.hpp"
#include "taxalign/rft.hpp"
#include "taxalign/taxonomy.hpp"
#include "taxalign/text.hpp"
#include "taxalign/toy_config.hpp"

namespace fs = std::filesystem;
using namespace taxalign;

namespace {

constexpr int exit_validation = 2;
constexpr int exit_numeric = 3;

void log_line(const std::string& msg) { std::cerr << "taxalign: " << msg << "\n"; }

[[noreturn]] void fail_validation(const std::string& msg) { throw config_error(msg); }

std::string single_line(std::string s) {
    for (auto& c : s) {
        if (c == '\n' || c == '\r') c = ' ';
    }
    return s;
}

std::uint64_t resolve_seed(const std::optional<std::uint64_t>& flag) {
    if (flag) return *flag;
    if (const char* env = std::getenv("TAXO_ALIGN_SEED")) {
        try {
            std::size_t used = 0;
            auto v = std::stoull(env, &used);
            if (used == std::string_view(env).size()) return v;
        } catch (const std::exception&) {
        }
        fail_validation("TAXO_ALIGN_SEED is not an unsigned integer: '" + std::string(env) + "'");
    }
    return 0;
}

void require_file(const std::string& path, const std::string& flag) {
    if (path.empty()) fail_validation(flag + " is required");
    if (!fs::is_regular_file(path)) fail_validation(flag + " file not found: " + path);
}

fs::path prepare_out(const std::string& out) {
    if (out.empty()) fail_validation("--out is required");
    std::error_code ec;
    fs::create_directories(out, ec);
    if (ec || !fs::is_directory(out)) fail_validation("cannot create output directory '" + out + "'");
    return fs::path(out);
}

EmbeddingTable load_table(const std::string& path) {
    auto bytes = text::read_file(path);
    if (bytes.rfind("EMB1", 0) == 0) return load_embeddings_binary(bytes);
    return load_embeddings(bytes);
}

std::vector<std::uint64_t> parse_ratio(const std::string& s) {
    std::vector<std::uint64_t> out;
    if (s.empty()) return out;
    for (const auto& part : text::split(s, ':')) {
        try {
            std::size_t used = 0;
            auto v = std::stoull(part, &used);
            if (used != part.size() || v == 0) throw std::invalid_argument(part);
            out.push_back(v);
        } catch (const std::exception&) {
            fail_validation("invalid --ratio component '" + part + "'");
        }
    }
    return out;
}

/// Comma-separated rank names or 1-based indices.
std::vector<std::size_t> parse_ranks(const std::string& s, const TaxonomyTree& tree) {
    std::vector<std::size_t> out;
    if (s.empty()) return out;
    for (const auto& raw : text::split(s, ',')) {
        std::string part(text::trim(raw));
        std::size_t found = 0;
        for (std::size_t r = 1; r <= tree.depth(); ++r) {
            if (tree.rank_name(r) == part) found = r;
        }
        if (!found) {
            try {
                std::size_t used = 0;
                auto v = std::stoull(part, &used);
                if (used == part.size()) found = v;
            } catch (const std::exception&) {
            }
        }
        if (!found || found > tree.depth()) fail_validation("unknown rank '" + part + "'");
        out.push_back(found);
    }
    return out;
}

std::vector<ImageAssignment> load_assignments(const std::string& path, const TaxonomyTree& tree) {
    std::vector<ImageAssignment> out;
    auto rows = text::lines(text::read_file(path));
    for (std::size_t i = 0; i < rows.size(); ++i) {
        if (text::trim(rows[i]).empty()) continue;
        auto fields = text::split(rows[i], '\t');
        if (fields.size() != tree.depth() + 1) {
            throw parse_error(i + 1, "expected image id plus " + std::to_string(tree.depth()) + " labels");
        }
        std::vector<std::string> path_labels(fields.begin() + 1, fields.end());
        auto id = tree.find(std::span<const std::string>(path_labels));
        if (!id) throw lookup_error("image '" + fields[0] + "' has a path not in the taxonomy");
        out.push_back({fields[0], *id});
    }
    return out;
}

// ---------------------------------------------------------------------------

struct BuildBenchArgs {
    std::string taxonomy, image_embeds, label_embeds, images, ranks, ratio = "1:2:4:8", out, tmpl = "letter",
                                                                  organism = "organism";
    std::optional<std::uint64_t> seed;
    std::size_t shots = 1, group_size = 0;
    bool suffix = false;
};

int cmd_build_bench(const BuildBenchArgs& a) {
    require_file(a.taxonomy, "--taxonomy");
    require_file(a.image_embeds, "--image-embeds");
    require_file(a.label_embeds, "--label-embeds");
    require_file(a.images, "--images");
    auto out = prepare_out(a.out);
    auto tree = parse_taxonomy(text::read_file(a.taxonomy));
    auto images = load_table(a.image_embeds);
    auto labels = load_table(a.label_embeds);
    auto assignments = load_assignments(a.images, tree);

    BuildOptions opt;
    opt.seed = resolve_seed(a.seed);
    opt.ranks = parse_ranks(a.ranks, tree);
    opt.weights = parse_ratio(a.ratio);
    if (opt.ranks.empty() && !opt.weights.empty() && opt.weights.size() != tree.depth()) {
        fail_validation("--ratio has " + std::to_string(opt.weights.size()) + " parts but the taxonomy has " +
                        std::to_string(tree.depth()) + " ranks; pass --ranks");
    }
    opt.shots = a.shots;
    std::uint64_t weight_sum = 0;
    for (auto w : opt.weights) weight_sum += w;
    if (opt.weights.empty()) weight_sum = opt.ranks.empty() ? tree.depth() : opt.ranks.size();
    opt.group_size = a.group_size ? a.group_size : static_cast<std::size_t>(weight_sum);
    if (a.tmpl != "letter" && a.tmpl != "list") fail_validation("--template must be letter or list");
    opt.prompt.kind = a.tmpl == "letter" ? PromptTemplate::Kind::letter : PromptTemplate::Kind::list;
    opt.prompt.organism = a.organism;
    opt.prompt.no_thinking_suffix = a.suffix;
    opt.warn = log_line;

    auto items = build_items(tree, assignments, images, labels, opt);
    text::write_file((out / "items.jsonl").string(), items_to_jsonl(items));

    nlohmann::ordered_json m;
    m["seed"] = opt.seed;
    m["taxonomy_hash"] = text::hex64(fnv1a64(serialize_taxonomy(tree)));
    m["image_table_hash"] = text::hex64(images.hash());
    m["label_table_hash"] = text::hex64(labels.hash());
    m["template"] = a.tmpl;
    m["no_thinking_suffix"] = a.suffix;
    m["shots"] = opt.shots;
    m["group_size"] = opt.group_size;
    m["ratio"] = opt.weights;
    m["items"] = items.size();
    nlohmann::ordered_json counts = nlohmann::ordered_json::object();
    for (std::size_t r = 1; r <= tree.depth(); ++r) {
        std::size_t n = 0;
        for (const auto& it : items) n += it.rank_index == r;
        if (n) counts[tree.rank_name(r)] = n;
    }
    m["counts_per_rank"] = std::move(counts);
    text::write_file((out / "manifest.json").string(), m.dump(2) + "\n");
    log_line("wrote " + std::to_string(items.size()) + " items");
    return 0;
}

// ---------------------------------------------------------------------------

struct EvalArgs {
    std::string preds, taxonomy, items, out, mode = "paths", f1_ranks, unknown = "Unknown", f1_policy = "false_negative";
    bool no_tor = false;
    bool table = false;
};

int cmd_eval(const EvalArgs& a) {
    require_file(a.preds, "--preds");
    if (a.mode != "paths" && a.mode != "items") fail_validation("--mode must be paths or items");
    auto out = prepare_out(a.out);

    if (a.mode == "items") {
        require_file(a.items, "--items");
        auto items = items_from_jsonl(text::read_file(a.items));
        std::map<std::string, std::string> answers;
        auto rows = text::lines(text::read_file(a.preds));
        for (std::size_t i = 0; i < rows.size(); ++i) {
            if (text::trim(rows[i]).empty()) continue;
            try {
                auto j = nlohmann::json::parse(rows[i]);
                answers[j.at("item_id").get<std::string>()] = j.at("answer").get<std::string>();
            } catch (const nlohmann::json::exception& e) {
                throw parse_error(i + 1, e.what());
            }
        }
        struct Tally {
            std::string rank;
            std::uint64_t n = 0, correct = 0;
        };
        std::map<std::size_t, Tally> per_rank;
        std::uint64_t n = 0, correct = 0, missing = 0;
        for (const auto& item : items) {
            auto& t = per_rank[item.rank_index];
            t.rank = item.rank;
            ++t.n;
            ++n;
            auto it = answers.find(item.item_id);
            if (it == answers.end()) {
                ++missing;
                continue;
            }
            const bool ok = accuracy_reward(it->second, std::string(1, item.answer_letter)) == 1.0 ||
                            accuracy_reward(it->second, item.answer_label) == 1.0;
            t.correct += ok;
            correct += ok;
        }
        nlohmann::ordered_json j;
        j["mode"] = "items";
        j["n"] = n;
        j["accuracy"] = n ? static_cast<double>(correct) / static_cast<double>(n) : 0.0;
        j["missing"] = missing;
        auto arr = nlohmann::ordered_json::array();
        for (const auto& [r, t] : per_rank) {
            arr.push_back({{"rank_index", r},
                           {"rank", t.rank},
                           {"n", t.n},
                           {"accuracy", static_cast<double>(t.correct) / static_cast<double>(t.n)}});
        }
        j["per_rank"] = std::move(arr);
        text::write_file((out / "report.json").string(), j.dump(2) + "\n");
        return 0;
    }

    require_file(a.taxonomy, "--taxonomy");
    auto tree = parse_taxonomy(text::read_file(a.taxonomy));
    auto records = records_from_jsonl(text::read_file(a.preds));
    if (records.empty()) fail_validation("no predictions in " + a.preds);
    for (const auto& r : records) {
        std::vector<std::string> truth;
        for (const auto& l : r.truth) truth.push_back(text::canonical_label(l));
        auto verdict = validate_path(tree, truth);
        if (!verdict.valid) {
            fail_validation("sample '" + r.sample_id + "': truth path is not in the taxonomy (fails at rank " +
                            std::to_string(verdict.failing_depth) + ")");
        }
    }
    ReportOptions opt;
    opt.unknown_token = a.unknown;
    opt.include_tor = !a.no_tor;
    if (opt.include_tor && tree.depth() < 2) {
        fail_validation("TOR needs at least 2 ranks: the adjacent-pair divisor L-1 is zero for a depth-1 taxonomy");
    }
    for (auto r : parse_ranks(a.f1_ranks, tree)) opt.f1_ranks.push_back(r);
    if (a.f1_policy == "drop") {
        opt.f1_policy = UnknownPolicy::drop;
    } else if (a.f1_policy != "false_negative") {
        fail_validation("--f1-unknown must be false_negative or drop");
    }
    auto rep = report(records, opt);
    text::write_file((out / "report.json").string(), report_to_json(rep).dump(2) + "\n");
    if (a.table) text::write_file((out / "report.txt").string(), report_to_table(rep));
    return 0;
}

// ---------------------------------------------------------------------------

struct TrainArgs {
    std::string config, out;
    std::optional<std::size_t> steps;
    std::optional<double> align_weight;
    std::optional<std::uint64_t> seed;
};

int cmd_train_toy(const TrainArgs& a) {
    ToyRunConfig cfg;
    if (!a.config.empty()) {
        require_file(a.config, "--config");
        cfg = toy_config_from_toml(text::read_file(a.config));
    }
    if (a.steps) cfg.train.steps = *a.steps;
    if (a.align_weight) cfg.train.align_weight = *a.align_weight;
    if (a.seed || std::getenv("TAXO_ALIGN_SEED")) cfg.train.seed = resolve_seed(a.seed);
    cfg.train.validate();
    auto out = prepare_out(a.out);
    auto world = fixtures::make_toy_world(cfg.world);
    TrainingData data{&world.tree, &world.labels, &world.images, world.train, world.eval};
    auto result = run_training(cfg.train, data, RunOutputs{out, toy_config_to_toml(cfg)}, log_line);
    log_line("greedy accuracy " + toml::format_double(result.final_accuracy) + ", visual cosine " +
             toml::format_double(result.train_visual_cosine));
    return 0;
}

// ---------------------------------------------------------------------------

struct GradArgs {
    std::size_t seeds = 20;
    double tol = 1e-4;
    std::string inject, out;
    std::optional<std::uint64_t> seed;
};

int cmd_gradcheck(const GradArgs& a) {
    GradcheckOptions opt;
    opt.seeds = a.seeds;
    opt.tol = a.tol;
    opt.inject_fault = a.inject;
    opt.base_seed = resolve_seed(a.seed);
    if (!a.inject.empty()) {
        const auto& ops = gradcheck_ops();
        if (std::find(ops.begin(), ops.end(), a.inject) == ops.end()) fail_validation("unknown op '" + a.inject + "'");
    }
    auto results = run_gradchecks(opt);
    bool ok = true;
    nlohmann::ordered_json j = nlohmann::ordered_json::array();
    std::printf("%-26s %6s %12s %s\n", "op", "seeds", "max_rel_err", "status");
    for (const auto& r : results) {
        std::printf("%-26s %6zu %12.3e %s\n", r.op.c_str(), r.seeds, r.max_error, r.passed ? "PASS" : "FAIL");
        ok = ok && r.passed;
        j.push_back({{"op", r.op}, {"seeds", r.seeds}, {"max_relative_error", r.max_error}, {"passed", r.passed}});
    }
    if (!a.out.empty()) text::write_file((prepare_out(a.out) / "gradcheck.json").string(), j.dump(2) + "\n");
    for (const auto& r : results) {
        if (!r.passed) log_line("gradient check failed: " + r.op);
    }
    return ok ? 0 : 1;
}

// ---------------------------------------------------------------------------

struct ProbeArgs {
    std::string features, labels, pool = "mean", out;
    std::size_t batch = 512, epochs = 500;
    double lr = 1e-4;
    std::optional<std::uint64_t> seed;
};

int cmd_probe(const ProbeArgs& a) {
    require_file(a.features, "--features");
    require_file(a.labels, "--labels");
    if (a.pool != "mean" && a.pool != "last") fail_validation("--pool must be mean or last");
    auto out = prepare_out(a.out);
    auto table = load_table(a.features);
    // Group token rows `<sample>#<k>` by sample.
    std::map<std::string, std::vector<std::pair<std::size_t, std::span<const double>>>> tokens;
    for (const auto& id : table.ids()) {
        auto hash = id.rfind('#');
        std::string sample = hash == std::string::npos ? id : id.substr(0, hash);
        std::size_t k = 0;
        if (hash != std::string::npos) {
            try {
                k = std::stoull(id.substr(hash + 1));
            } catch (const std::exception&) {
                fail_validation("bad token index in feature id '" + id + "'");
            }
        }
        tokens[sample].emplace_back(k, table.at(id));
    }
    std::map<std::string, std::size_t> class_index;
    std::vector<nn::Matrix> train_x, test_x;
    std::vector<std::size_t> train_y, test_y;
    std::vector<std::string> sample_labels;
    auto rows = text::lines(text::read_file(a.labels));
    std::vector<std::vector<std::string>> parsed;
    for (std::size_t i = 0; i < rows.size(); ++i) {
        if (text::trim(rows[i]).empty()) continue;
        auto f = text::split(rows[i], '\t');
        if (f.size() != 3 || (f[2] != "train" && f[2] != "test")) {
            throw parse_error(i + 1, "expected sample_id<TAB>label<TAB>train|test");
        }
        class_index.emplace(f[1], 0);
        parsed.push_back(std::move(f));
    }
    std::size_t next = 0;
    for (auto& [label, idx] : class_index) idx = next++;
    const auto mode = a.pool == "mean" ? PoolMode::mean : PoolMode::last;
    for (const auto& f : parsed) {
        auto it = tokens.find(f[0]);
        if (it == tokens.end()) throw lookup_error("no features for sample '" + f[0] + "'");
        auto toks = it->second;
        std::sort(toks.begin(), toks.end(), [](const auto& x, const auto& y) { return x.first < y.first; });
        nn::Matrix m(toks.size(), table.dim());
        for (std::size_t r = 0; r < toks.size(); ++r) std::copy(toks[r].second.begin(), toks[r].second.end(), m.row(r).begin());
        (f[2] == "train" ? train_x : test_x).push_back(std::move(m));
        (f[2] == "train" ? train_y : test_y).push_back(class_index.at(f[1]));
    }
    if (train_x.empty() || test_x.empty()) fail_validation("probe needs both train and test samples");
    auto train = make_probe_dataset(train_x, train_y, class_index.size(), mode);
    auto test = make_probe_dataset(test_x, test_y, class_index.size(), mode);
    ProbeConfig cfg;
    cfg.batch_size = a.batch;
    cfg.lr = a.lr;
    cfg.epochs = a.epochs;
    cfg.seed = resolve_seed(a.seed);
    auto trained = train_probe(train, cfg);
    nlohmann::ordered_json j;
    j["mode"] = a.pool;
    j["accuracy"] = evaluate_probe(trained.probe, test);
    j["epochs"] = cfg.epochs;
    j["seed"] = cfg.seed;
    j["train_accuracy"] = evaluate_probe(trained.probe, train);
    j["batch_size"] = cfg.batch_size;
    j["lr"] = cfg.lr;
    j["optimizer"] = "adam";
    j["objective"] = "softmax_cross_entropy";
    j["regularization"] = "none";
    j["classes"] = class_index.size();
    j["train_samples"] = train.size();
    j["test_samples"] = test.size();
    j["initial_loss"] = trained.loss_curve.front();
    j["final_loss"] = trained.loss_curve.back();
    text::write_file((out / "probe_report.json").string(), j.dump(2) + "\n");
    return 0;
}

// ---------------------------------------------------------------------------

struct FixtureArgs {
    std::string out;
    bool token_spread = false;
};

int cmd_gen_fixtures(const FixtureArgs& a) {
    auto out = prepare_out(a.out);
    auto files = fixtures::checked_in_fixtures();
    for (const auto& f : files) {
        fs::create_directories((out / f.path).parent_path());
        text::write_file((out / f.path).string(), f.content);
    }
    text::write_file((out / "manifest.json").string(), fixtures::fixture_manifest(files).dump(2) + "\n");
    if (a.token_spread) {
        fs::create_directories(out / "probe");
        auto [features, labels] = fixtures::token_spread_files(fixtures::token_spread_dataset({}));
        text::write_file((out / "probe" / "token_spread_features.txt").string(), features);
        text::write_file((out / "probe" / "token_spread_labels.tsv").string(), labels);
    }
    return 0;
}

}  // namespace

int main(int argc, char** argv) {
    CLI::App app{"Taxonomy-aware representation alignment toolkit"};
    app.require_subcommand(1);
    app.set_help_all_flag("--help-all", "Expand all help");
    std::size_t threads = 1;
    app.add_option("--threads", threads, "Worker cap (all commands currently run on one thread)")
        ->capture_default_str();

    BuildBenchArgs bb;
    auto* build = app.add_subcommand("build-bench", "Build the 4-choice VQA item set");
    build->add_option("--taxonomy", bb.taxonomy, "Taxonomy TSV (rank header, one leaf path per row)")->required();
    build->add_option("--image-embeds", bb.image_embeds, "Image embedding table (text or EMB1 binary)")->required();
    build->add_option("--label-embeds", bb.label_embeds, "Label embedding table (text or EMB1 binary)")->required();
    build->add_option("--images", bb.images, "Image assignments TSV: image_id<TAB>label path")->required();
    build->add_option("--ranks", bb.ranks, "Comma-separated rank names or 1-based indices; empty = all ranks with >= 4 labels")
        ->capture_default_str();
    build->add_option("--ratio", bb.ratio, "Per-rank sampling ratio, colon separated")->capture_default_str();
    build->add_option("--seed", bb.seed, "Seed (falls back to TAXO_ALIGN_SEED, then 0)");
    build->add_option("--shots", bb.shots, "Slots per unit of ratio weight")->capture_default_str();
    build->add_option("--group-size", bb.group_size, "Images sharing one slot schedule; 0 = sum of ratio weights")
        ->capture_default_str();
    build->add_option("--template", bb.tmpl, "Prompt template: letter or list")->capture_default_str();
    build->add_option("--organism", bb.organism, "Organism word used in the prompt")->capture_default_str();
    build->add_flag("--no-thinking-suffix", bb.suffix, "Append the direct-answer instruction")->capture_default_str();
    build->add_option("--out", bb.out, "Output directory")->required();

    EvalArgs ev;
    auto* eval = app.add_subcommand("eval", "Score predictions with the hierarchical metric suite");
    eval->add_option("--preds", ev.preds, "Predictions JSONL")->required();
    eval->add_option("--taxonomy", ev.taxonomy, "Taxonomy TSV (paths mode)");
    eval->add_option("--items", ev.items, "Items JSONL (items mode)");
    eval->add_option("--mode", ev.mode, "paths or items")->capture_default_str();
    eval->add_option("--f1-ranks", ev.f1_ranks, "Ranks for macro-F1, comma separated")->capture_default_str();
    eval->add_option("--f1-unknown", ev.f1_policy, "Abstention policy for F1: false_negative or drop")
        ->capture_default_str();
    eval->add_option("--unknown-token", ev.unknown, "Abstention token")->capture_default_str();
    eval->add_flag("--no-tor", ev.no_tor, "Skip TOR")->capture_default_str();
    eval->add_flag("--table", ev.table, "Also write report.txt")->capture_default_str();
    eval->add_option("--out", ev.out, "Output directory")->required();

    TrainArgs tr;
    auto* train = app.add_subcommand("train-toy", "Run alternating alignment + RFT on the toy world");
    train->add_option("--config", tr.config, "TOML config; defaults reproduce the reference toy protocol");
    train->add_option("--steps", tr.steps, "Override train.steps");
    train->add_option("--align-weight", tr.align_weight, "Override train.align_weight (0 = RFT only)");
    train->add_option("--seed", tr.seed, "Override train.seed (falls back to TAXO_ALIGN_SEED)");
    train->add_option("--out", tr.out, "Run directory")->required();

    GradArgs gr;
    auto* grad = app.add_subcommand("gradcheck", "Compare analytic gradients with central differences");
    grad->add_option("--seeds", gr.seeds, "Seeds per op")->capture_default_str();
    grad->add_option("--tol", gr.tol, "Relative error tolerance")->capture_default_str();
    grad->add_option("--seed", gr.seed, "Base seed (falls back to TAXO_ALIGN_SEED, then 0)");
    grad->add_option("--inject-fault", gr.inject, "")->group("");
    grad->add_option("--out", gr.out, "Optional output directory for gradcheck.json");

    ProbeArgs pr;
    auto* probe = app.add_subcommand("probe", "Linear probe on pooled token features");
    probe->add_option("--features", pr.features, "Token features: rows <sample>#<k> in embedding format")->required();
    probe->add_option("--labels", pr.labels, "TSV: sample_id<TAB>label<TAB>train|test")->required();
    probe->add_option("--pool", pr.pool, "mean or last")->capture_default_str();
    probe->add_option("--batch-size", pr.batch, "Mini-batch size")->capture_default_str();
    probe->add_option("--lr", pr.lr, "Adam learning rate")->capture_default_str();
    probe->add_option("--epochs", pr.epochs, "Epochs")->capture_default_str();
    probe->add_option("--seed", pr.seed, "Seed (falls back to TAXO_ALIGN_SEED, then 0)");
    probe->add_option("--out", pr.out, "Output directory")->required();

    FixtureArgs fx;
    auto* gen = app.add_subcommand("gen-fixtures", "Regenerate the checked-in fixtures");
    gen->add_flag("--token-spread", fx.token_spread, "Also write the 20-class token-spread probing set (about 20 MB)")->capture_default_str();
    gen->add_option("--out", fx.out, "Output directory")->required();

    try {
        app.parse(argc, argv);
    } catch (const CLI::CallForHelp& e) {
        return app.exit(e);
    } catch (const CLI::CallForAllHelp& e) {
        return app.exit(e);
    } catch (const CLI::ParseError& e) {
        std::cerr << "taxalign: error: " << single_line(e.what()) << "\n";
        return exit_validation;
    }
    if (threads == 0) {
        std::cerr << "taxalign: error: --threads must be positive\n";
        return exit_validation;
    }

    try {
        if (*build) return cmd_build_bench(bb);
        if (*eval) return cmd_eval(ev);
        if (*train) return cmd_train_toy(tr);
        if (*grad) return cmd_gradcheck(gr);
        if (*probe) return cmd_probe(pr);
        if (*gen) return cmd_gen_fixtures(fx);
    } catch (const numeric_error& e) {
        std::cerr << "taxalign: error: numeric: " << single_line(e.what()) << "\n";
        return exit_numeric;
    } catch (const std::exception& e) {
        std::cerr << "taxalign: error: " << single_line(e.what()) << "\n";
        return exit_validation;
    }
    return 0;
}
