#pragma once

// Command-line front end. run_cli is callable in-process so the tests can
// drive it without spawning a process.

#include <CLI11.hpp>

#include <cmath>
#include <iostream>
#include <map>
#include <optional>
#include <ostream>
#include <string>
#include <vector>

#include "kdcode/kdcode.hpp"

namespace kdcode::cli {

inline constexpr int kExitOk = 0;
inline constexpr int kExitFailure = 1;
inline constexpr int kExitUsage = 2;

struct TrainFlags {
    double learning_rate = TrainConfig{}.learning_rate;
    std::size_t epochs = TrainConfig{}.epochs;
    std::size_t batch_size = 1;
    std::uint64_t seed = 0;
    double t0 = 1.0;
    double decay_rate = 1.0;
    std::string schedule = "scheduled";
    std::string composer = "linear";
    std::string code_mode = "ste";
    std::size_t dprime = 0;
    double logit_lr_scale = 1.0;
    double logit_init_std = 0.01;
    bool no_shuffle = false;

    TrainConfig resolve() const;
};

namespace detail {

inline const std::map<std::string, TemperatureSchedule::Mode> kScheduleNames{
    {"scheduled", TemperatureSchedule::Mode::scheduled}, {"constant", TemperatureSchedule::Mode::constant}};
inline const std::map<std::string, ComposerVariant> kComposerNames{{"linear", ComposerVariant::linear},
                                                                   {"lstm", ComposerVariant::lstm}};
inline const std::map<std::string, CodeMode> kCodeModeNames{
    {"ste", CodeMode::ste}, {"soft", CodeMode::soft}, {"random", CodeMode::random}};
inline const std::map<std::string, NmiNorm> kNmiNames{
    {"geometric", NmiNorm::geometric}, {"arithmetic", NmiNorm::arithmetic}, {"max", NmiNorm::max}};
inline const std::map<std::string, Similarity> kSimilarityNames{{"cosine", Similarity::cosine},
                                                                {"euclidean", Similarity::euclidean}};

template <class V>
V lookup(const std::map<std::string, V>& names, const std::string& key) {
    const auto it = names.find(key);
    if (it == names.end()) throw std::invalid_argument("unknown value '" + key + "'");
    return it->second;
}

template <class V>
CLI::IsMember member_of(const std::map<std::string, V>& names) {
    std::vector<std::string> keys;
    for (const auto& kv : names) keys.push_back(kv.first);
    return CLI::IsMember(keys);
}

}  // namespace detail

inline TrainConfig TrainFlags::resolve() const {
    TrainConfig c;
    c.learning_rate = learning_rate;
    c.epochs = epochs;
    c.batch_size = batch_size;
    c.seed = seed;
    c.schedule = {t0, decay_rate, detail::lookup(detail::kScheduleNames, schedule)};
    c.composer = detail::lookup(detail::kComposerNames, composer);
    c.code_mode = detail::lookup(detail::kCodeModeNames, code_mode);
    c.code_width = dprime;
    c.logit_lr_scale = logit_lr_scale;
    c.logit_init_std = logit_init_std;
    c.shuffle = !no_shuffle;
    return c;
}

struct Options {
    // gen-synthetic
    SyntheticSpec synthetic;
    std::string out_path, labels_out;
    // shared
    std::string input, labels, codebook, checkpoint;
    std::string codebook_out, checkpoint_out, report_out;
    std::size_t k = 50;
    std::optional<std::size_t> d;
    bool allow_collisions = false;
    TrainFlags train;
    // evaluate / inspect
    std::size_t nn_k = 10;
    std::string nmi_norm = "geometric";
    std::string similarity = "cosine";
    bool want_nmi = false;
    std::size_t min_group_size = 1;
    // param-count
    std::uint64_t n = 0, width = 0, dprime = 0;
};

/// Raised for failures that are the caller's fault but are only detectable
/// after parsing (e.g. a missing companion flag).
class UsageError : public std::runtime_error {
    using std::runtime_error::runtime_error;
};

namespace detail {

inline std::string one_line(std::string s) {
    for (char& c : s)
        if (c == '\n' || c == '\r' || c == '\t') c = ' ';
    return s;
}

inline void add_train_flags(CLI::App& cmd, TrainFlags& t, bool with_code_mode) {
    cmd.add_option("--lr", t.learning_rate, "SGD learning rate")->capture_default_str()->check(CLI::NonNegativeNumber);
    cmd.add_option("--epochs", t.epochs, "Training epochs")->capture_default_str();
    cmd.add_option("--batch-size", t.batch_size, "Symbols per SGD step")->capture_default_str()->check(CLI::PositiveNumber);
    cmd.add_option("--seed", t.seed, "Run seed")->capture_default_str();
    cmd.add_option("--t0", t.t0, "Initial temperature")->capture_default_str()->check(CLI::PositiveNumber);
    cmd.add_option("--decay-rate", t.decay_rate, "Temperature decay rate")->capture_default_str()->check(CLI::NonNegativeNumber);
    cmd.add_option("--schedule", t.schedule, "Temperature schedule")
        ->capture_default_str()
        ->check(detail::member_of(detail::kScheduleNames));
    cmd.add_option("--composer", t.composer, "Composition function")
        ->capture_default_str()
        ->check(detail::member_of(detail::kComposerNames));
    if (with_code_mode)
        cmd.add_option("--code-mode", t.code_mode, "Code path")
            ->capture_default_str()
            ->check(detail::member_of(detail::kCodeModeNames));
    cmd.add_option("--dprime", t.dprime, "Code embedding width (0: same as the input width)")->capture_default_str();
    cmd.add_option("--logit-lr-scale", t.logit_lr_scale, "Logit step as a multiple of --lr")
        ->capture_default_str()
        ->check(CLI::NonNegativeNumber);
    cmd.add_option("--logit-init-std", t.logit_init_std, "Std of the initial code logits")
        ->capture_default_str()
        ->check(CLI::NonNegativeNumber);
    cmd.add_flag("--no-shuffle", t.no_shuffle, "Visit symbols in file order");
}

/// Echoes every option that has a value as "# --flag value", defaults included.
inline void echo_config(const CLI::App& cmd, std::ostream& out) {
    out << "# kdcode " << cmd.get_name() << '\n';
    for (const CLI::Option* opt : cmd.get_options()) {
        if (opt->get_name() == "--help" || opt->get_name().empty()) continue;
        const std::string name = opt->get_name(false, true).empty() ? opt->get_name() : opt->get_name(false, true);
        std::string value;
        if (opt->get_expected_max() == 0) value = opt->count() > 0 ? "true" : "false";
        else if (opt->count() > 0) value = opt->as<std::string>();
        else value = opt->get_default_str();
        if (value.empty()) continue;
        out << "# " << name << ' ' << value << '\n';
    }
}

inline Matrix load_targets(const Options& o, EmbeddingMatrix& emb) {
    emb = load_embeddings_text(o.input);
    return emb.vectors;
}

inline std::vector<std::uint32_t> load_cluster_labels(const std::string& path, const EmbeddingMatrix& emb) {
    const auto lf = load_labels(path);
    if (lf.clusters.size() != emb.size())
        throw std::invalid_argument("labels file '" + path + "' has " + std::to_string(lf.clusters.size()) +
                                    " entries for " + std::to_string(emb.size()) + " embeddings");
    for (std::size_t i = 0; i < emb.size(); ++i)
        if (lf.names[i] != emb.labels[i])
            throw std::invalid_argument("labels file '" + path + "' line " + std::to_string(i + 1) + " names '" +
                                        lf.names[i] + "' but the embedding file has '" + emb.labels[i] + "'");
    return lf.clusters;
}

inline void require_finite(double v, const std::string& what) {
    if (!std::isfinite(v)) throw std::runtime_error(what + " is not finite");
}

}  // namespace detail

inline int cmd_gen_synthetic(const Options& o, std::ostream& out) {
    const auto data = generate_clusters(o.synthetic);
    save_embeddings_text(o.out_path, data.embeddings);
    if (!o.labels_out.empty()) save_labels(o.labels_out, data.embeddings.labels, data.cluster);
    out << "N\t" << data.embeddings.size() << "\nd\t" << data.embeddings.width() << "\nclusters\t"
        << o.synthetic.num_clusters << "\nseparation_ratio\t" << kdcode::detail::format_double(o.synthetic.separation_ratio())
        << '\n';
    return kExitOk;
}

inline int cmd_learn_codes(const Options& o, std::ostream& out) {
    EmbeddingMatrix emb;
    const Matrix targets = detail::load_targets(o, emb);
    const KdSpec spec(o.k, o.d.value_or(10), emb.size());
    TrainConfig cfg = o.train.resolve();
    cfg.allow_collisions = o.allow_collisions;
    if (!cfg.allow_collisions) spec.require_distinct_codes();
    std::optional<std::vector<std::uint32_t>> truth;
    if (!o.labels.empty()) truth = detail::load_cluster_labels(o.labels, emb);

    auto report = learn_codes(targets, spec, cfg);
    CodeBook codebook(spec, {report.codebook.codes().begin(), report.codebook.codes().end()}, emb.labels);

    RunReport rr;
    rr.add("command", "learn-codes");
    rr.add("initial_hard_loss", report.initial_hard_loss);
    out << "epoch\tloss\ttemperature\tcodes_changed\thard_loss\n";
    for (std::size_t e = 0; e < report.loss.size(); ++e) {
        out << e + 1 << '\t' << kdcode::detail::format_double(report.loss[e]) << '\t'
            << kdcode::detail::format_double(report.temperature[e]) << '\t'
            << kdcode::detail::format_double(report.codes_changed[e]) << '\t'
            << kdcode::detail::format_double(report.hard_loss[e]) << '\n';
        const std::string p = "epoch." + std::to_string(e + 1) + ".";
        rr.add(p + "loss", report.loss[e]);
        rr.add(p + "temperature", report.temperature[e]);
        rr.add(p + "codes_changed", report.codes_changed[e]);
        rr.add(p + "hard_loss", report.hard_loss[e]);
    }
    const double final_loss = report.hard_loss.empty() ? report.initial_hard_loss : report.hard_loss.back();
    detail::require_finite(final_loss, "final loss");
    rr.add("final_hard_loss", final_loss);
    out << "final_hard_loss\t" << kdcode::detail::format_double(final_loss) << '\n';
    const auto part = code_partition(codebook);
    std::size_t used = 0;
    for (auto p : part) used = std::max<std::size_t>(used, p + 1);
    rr.add("distinct_codes", std::uint64_t{used});
    out << "distinct_codes\t" << used << '\n';
    if (truth) {
        const double v = nmi(*truth, part, detail::lookup(detail::kNmiNames, o.nmi_norm));
        rr.add("nmi", v);
        rr.add("nmi_norm", o.nmi_norm);
        out << "nmi\t" << kdcode::detail::format_double(v) << '\n';
    }

    if (!o.codebook_out.empty()) save_codebook(o.codebook_out, codebook);
    if (!o.checkpoint_out.empty()) save_checkpoint(o.checkpoint_out, Checkpoint{report.state.model, report.state.logits});
    if (!o.report_out.empty()) rr.save(o.report_out);
    return kExitOk;
}

inline int cmd_retrain(const Options& o, std::ostream& out) {
    EmbeddingMatrix emb;
    const Matrix targets = detail::load_targets(o, emb);
    const CodeBook codebook = load_codebook(o.codebook);
    if (codebook.size() != emb.size())
        throw std::invalid_argument("codebook '" + o.codebook + "' has " + std::to_string(codebook.size()) +
                                    " symbols but '" + o.input + "' has " + std::to_string(emb.size()) + " embeddings");
    const auto result = retrain_code_embeddings(targets, codebook, o.train.resolve());
    detail::require_finite(result.final_loss, "final loss");
    RunReport rr;
    rr.add("command", "retrain");
    rr.add("initial_loss", result.initial_loss);
    for (std::size_t e = 0; e < result.loss.size(); ++e) {
        rr.add("epoch." + std::to_string(e + 1) + ".hard_loss", result.loss[e]);
        out << "epoch\t" << e + 1 << "\thard_loss\t" << kdcode::detail::format_double(result.loss[e]) << '\n';
    }
    rr.add("final_loss", result.final_loss);
    out << "initial_loss\t" << kdcode::detail::format_double(result.initial_loss) << "\nfinal_loss\t"
        << kdcode::detail::format_double(result.final_loss) << '\n';
    if (!o.checkpoint_out.empty()) save_checkpoint(o.checkpoint_out, Checkpoint{result.model, std::nullopt});
    if (!o.report_out.empty()) rr.save(o.report_out);
    return kExitOk;
}

inline int cmd_evaluate(const Options& o, std::ostream& out) {
    if (o.want_nmi && o.labels.empty()) throw UsageError("--nmi needs --labels");
    EmbeddingMatrix emb;
    const Matrix targets = detail::load_targets(o, emb);
    const CodeBook codebook = load_codebook(o.codebook);
    const Checkpoint ck = load_checkpoint(o.checkpoint);
    if (codebook.size() != emb.size())
        throw std::invalid_argument("codebook has " + std::to_string(codebook.size()) + " symbols but the input has " +
                                    std::to_string(emb.size()));
    const Matrix recon = reconstruct_all(ck.model, codebook);
    const double loss = reconstruction_loss(targets, codebook, ck.model);
    detail::require_finite(loss, "reconstruction loss");
    const double np = neighbor_preservation(targets, recon, o.nn_k, detail::lookup(detail::kSimilarityNames, o.similarity));
    const auto pc = param_count(codebook.spec(), ck.model.code_width(), ck.model.output_width(), ck.model.variant());

    RunReport rr;
    rr.add("command", "evaluate");
    rr.add("reconstruction_loss", loss);
    rr.add("mean_reconstruction_loss", loss / static_cast<double>(emb.size()));
    rr.add("neighbor_preservation@" + std::to_string(o.nn_k), np);
    rr.add("similarity", o.similarity);
    rr.add("code_embedding_params", pc.code_embedding_params);
    rr.add("composer_params", pc.composer_params);
    rr.add("total_params", pc.total);
    rr.add("conventional_baseline", pc.conventional_baseline);
    rr.add("rate_code_only", compression_rate(pc, false));
    rr.add("rate_with_composer", compression_rate(pc, true));
    if (!o.labels.empty()) {
        const auto truth = detail::load_cluster_labels(o.labels, emb);
        rr.add("nmi", nmi(truth, code_partition(codebook), detail::lookup(detail::kNmiNames, o.nmi_norm)));
        rr.add("nmi_norm", o.nmi_norm);
    }
    rr.write(out);
    if (!o.report_out.empty()) rr.save(o.report_out);
    return kExitOk;
}

inline int cmd_inspect(const Options& o, std::ostream& out) {
    const CodeBook codebook = load_codebook(o.codebook);
    if (!codebook.has_labels()) throw std::invalid_argument("codebook '" + o.codebook + "' has no symbol labels");
    const auto report = code_groups(codebook, codebook.labels());
    std::size_t shown = 0;
    for (const auto& g : report.groups) {
        if (g.symbols.size() < o.min_group_size) continue;
        ++shown;
        out << render_code(g.code) << '\t' << g.symbols.size() << '\t';
        for (std::size_t i = 0; i < g.labels.size(); ++i) out << (i ? " " : "") << g.labels[i];
        out << '\n';
    }
    out << "# groups\t" << report.groups.size() << "\tshown\t" << shown << '\n';
    return kExitOk;
}

inline int cmd_param_count(const Options& o, std::ostream& out) {
    const std::size_t d = o.d ? *o.d : min_code_dim(o.n, o.k);
    const auto pc = param_count(KdSpec(o.k, d, o.n), o.dprime, o.width, detail::lookup(detail::kComposerNames, o.train.composer));
    out << "K\t" << o.k << "\nD\t" << d << (o.d ? "" : "\t(min_code_dim)") << "\ncomposer\t"
        << o.train.composer << "\nconventional_baseline\t" << pc.conventional_baseline
        << "\ncode_embedding_params\t" << pc.code_embedding_params << "\ncomposer_params\t" << pc.composer_params
        << "\ntotal\t" << pc.total << "\nrate_code_only\t" << kdcode::detail::format_double(compression_rate(pc, false))
        << "\nrate_with_composer\t" << kdcode::detail::format_double(compression_rate(pc, true)) << '\n';
    return kExitOk;
}

/// Parses `args` (without the program name), runs the selected subcommand and
/// returns the process exit code. Failures print one line
/// "error\t<subcommand>\t<message>" to `err`.
inline int run_cli(const std::vector<std::string>& args, std::ostream& out, std::ostream& err) {
    CLI::App app{"KD code learning: compact discrete codes for embedding tables", "kdcode"};
    app.require_subcommand(1);
    app.fallthrough(false);
    Options o;

    auto* gen = app.add_subcommand("gen-synthetic", "Generate a clustered synthetic embedding set");
    gen->add_option("--num-points", o.synthetic.num_points, "Number of points")->capture_default_str();
    gen->add_option("--num-clusters", o.synthetic.num_clusters, "Number of clusters")->capture_default_str();
    gen->add_option("--dim", o.synthetic.dim, "Embedding width")->capture_default_str();
    gen->add_option("--center-scale", o.synthetic.center_scale, "Std of cluster centers")->capture_default_str();
    gen->add_option("--noise-sigma", o.synthetic.noise_sigma, "Std of within-cluster noise")->capture_default_str();
    gen->add_option("--seed", o.synthetic.seed, "Generator seed")->capture_default_str();
    gen->add_option("--out", o.out_path, "Embedding text file to write")->required();
    gen->add_option("--labels-out", o.labels_out, "Cluster labels file to write");

    auto* learn = app.add_subcommand("learn-codes", "Learn KD codes for an embedding file");
    learn->add_option("--input", o.input, "Embedding text file")->required();
    learn->add_option("--K", o.k, "Code cardinality")->capture_default_str()->check(CLI::Range(2, 1 << 30));
    learn->add_option("--D", o.d, "Code length")->default_str("10")->check(CLI::PositiveNumber);
    detail::add_train_flags(*learn, o.train, true);
    learn->add_flag("--allow-collisions", o.allow_collisions, "Permit K^D < N (codes act as cluster ids)");
    learn->add_option("--labels", o.labels, "Ground-truth 'label<TAB>cluster' file for NMI");
    learn->add_option("--nmi-norm", o.nmi_norm, "NMI normalization")
        ->capture_default_str()
        ->check(detail::member_of(detail::kNmiNames));
    learn->add_option("--codebook-out", o.codebook_out, "Codebook TSV to write");
    learn->add_option("--checkpoint-out", o.checkpoint_out, "Checkpoint to write");
    learn->add_option("--report-out", o.report_out, "Run report to write");

    auto* retrain = app.add_subcommand("retrain", "Re-learn code embeddings for fixed codes");
    retrain->add_option("--input", o.input, "Embedding text file")->required();
    retrain->add_option("--codebook", o.codebook, "Codebook TSV")->required();
    detail::add_train_flags(*retrain, o.train, false);
    retrain->add_option("--checkpoint-out", o.checkpoint_out, "Checkpoint to write");
    retrain->add_option("--report-out", o.report_out, "Run report to write");

    auto* eval = app.add_subcommand("evaluate", "Score a codebook and checkpoint against embeddings");
    eval->add_option("--input", o.input, "Embedding text file")->required();
    eval->add_option("--codebook", o.codebook, "Codebook TSV")->required();
    eval->add_option("--checkpoint", o.checkpoint, "Checkpoint")->required();
    eval->add_option("--labels", o.labels, "Ground-truth 'label<TAB>cluster' file");
    eval->add_flag("--nmi", o.want_nmi, "Require NMI against --labels");
    eval->add_option("--nn-k", o.nn_k, "Neighbors for neighbor preservation")->capture_default_str()->check(CLI::PositiveNumber);
    eval->add_option("--nmi-norm", o.nmi_norm, "NMI normalization")
        ->capture_default_str()
        ->check(detail::member_of(detail::kNmiNames));
    eval->add_option("--similarity", o.similarity, "Neighbor similarity")
        ->capture_default_str()
        ->check(detail::member_of(detail::kSimilarityNames));
    eval->add_option("--report-out", o.report_out, "Run report to write");

    auto* inspect = app.add_subcommand("inspect", "List symbols grouped by shared code");
    inspect->add_option("--codebook", o.codebook, "Codebook TSV")->required();
    inspect->add_option("--min-group-size", o.min_group_size, "Hide smaller groups")->capture_default_str();

    auto* pcount = app.add_subcommand("param-count", "Parameter accounting without data");
    pcount->add_option("--N", o.n, "Number of symbols")->required()->check(CLI::PositiveNumber);
    pcount->add_option("--d", o.width, "Embedding width")->required()->check(CLI::PositiveNumber);
    pcount->add_option("--K", o.k, "Code cardinality")->capture_default_str()->check(CLI::Range(2, 1 << 30));
    pcount->add_option("--D", o.d, "Code length (default: smallest D with K^D >= N)")->check(CLI::PositiveNumber);
    pcount->add_option("--dprime", o.dprime, "Code embedding width")->required()->check(CLI::PositiveNumber);
    pcount->add_option("--composer", o.train.composer, "Composition function")
        ->capture_default_str()
        ->check(detail::member_of(detail::kComposerNames));

    std::vector<std::string> reversed(args.rbegin(), args.rend());
    try {
        app.parse(reversed);
    } catch (const CLI::CallForHelp&) {
        out << app.help();
        return kExitOk;
    } catch (const CLI::CallForAllHelp&) {
        out << app.help("", CLI::AppFormatMode::All);
        return kExitOk;
    } catch (const CLI::ParseError& e) {
        err << "error\tusage\t" << detail::one_line(e.what()) << '\n';
        return kExitUsage;
    }

    CLI::App* cmd = app.get_subcommands().front();
    detail::echo_config(*cmd, out);
    try {
        if (cmd == gen) return cmd_gen_synthetic(o, out);
        if (cmd == learn) return cmd_learn_codes(o, out);
        if (cmd == retrain) return cmd_retrain(o, out);
        if (cmd == eval) return cmd_evaluate(o, out);
        if (cmd == inspect) return cmd_inspect(o, out);
        return cmd_param_count(o, out);
    } catch (const UsageError& e) {
        err << "error\t" << cmd->get_name() << '\t' << detail::one_line(e.what()) << '\n';
        return kExitUsage;
    } catch (const std::exception& e) {
        err << "error\t" << cmd->get_name() << '\t' << detail::one_line(e.what()) << '\n';
        return kExitFailure;
    }
}

}  // namespace kdcode::cli
