#include "cli.hpp"

#include "saegis/activation_io.hpp"
#include "saegis/detector.hpp"
#include "saegis/error.hpp"
#include "saegis/eval_harness.hpp"
#include "saegis/feature_ranker.hpp"
#include "saegis/parallel.hpp"
#include "saegis/sae.hpp"
#include "saegis/synthetic.hpp"

#include <CLI11.hpp>
#include <json.hpp>

#include <algorithm>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <map>
#include <sstream>

namespace saegis::cli {

namespace fs = std::filesystem;

namespace {

const std::vector<std::string> kSubcommands{"gen-synthetic", "train",    "select-features", "calibrate", "detect",
                                            "evaluate",      "sweep",    "overlap",         "experiment"};

std::size_t edit_distance(const std::string& a, const std::string& b) {
    std::vector<std::size_t> prev(b.size() + 1), cur(b.size() + 1);
    for (std::size_t j = 0; j <= b.size(); ++j) prev[j] = j;
    for (std::size_t i = 1; i <= a.size(); ++i) {
        cur[0] = i;
        for (std::size_t j = 1; j <= b.size(); ++j) {
            cur[j] = std::min({prev[j] + 1, cur[j - 1] + 1, prev[j - 1] + (a[i - 1] == b[j - 1] ? 0 : 1)});
        }
        std::swap(prev, cur);
    }
    return prev[b.size()];
}

std::string closest_subcommand(const std::string& word) {
    return *std::min_element(kSubcommands.begin(), kSubcommands.end(), [&](const auto& a, const auto& b) {
        return edit_distance(word, a) < edit_distance(word, b);
    });
}

void require_exists(const fs::path& p) {
    if (!fs::exists(p)) throw DataError("no such file or directory: " + p.string());
}

ActivationSet read_all(const std::vector<std::string>& dirs) {
    std::vector<ActivationSet> sets;
    for (const auto& d : dirs) sets.push_back(read_activation_set(d));
    return sets.size() == 1 ? std::move(sets.front()) : concat(sets);
}

// Groups dumps by layer id and concatenates the dumps of each layer.
std::vector<ActivationSet> read_by_layer(const std::vector<std::string>& dirs) {
    std::map<std::string, std::vector<ActivationSet>> grouped;
    std::vector<std::string> order;
    for (const auto& d : dirs) {
        auto set = read_activation_set(d);
        if (!grouped.count(set.layer_id)) order.push_back(set.layer_id);
        grouped[set.layer_id].push_back(std::move(set));
    }
    std::vector<ActivationSet> out;
    for (const auto& id : order) out.push_back(grouped[id].size() == 1 ? grouped[id].front() : concat(grouped[id]));
    return out;
}

void write_text(const fs::path& path, const std::string& text) {
    if (path.has_parent_path()) fs::create_directories(path.parent_path());
    std::ofstream f(path, std::ios::trunc);
    f << text;
    if (!f) throw DataError("failed writing " + path.string());
}

struct Options {
    bool quiet = false;
    unsigned threads = 0;

    // gen-synthetic
    SyntheticConfig synth;
    std::uint64_t dict_seed = 0, planted_seed = 0;
    bool mixed = false;

    // train
    std::vector<std::string> acts;
    std::size_t d_sae = 512, k = 8;
    TrainConfig train;
    std::string train_report;

    // select-features
    std::string sae;
    std::vector<std::string> clean, adv;
    std::size_t top_k = 64;

    // calibrate
    std::vector<std::string> dev, layers;
    double alpha = 0.02;

    // detect / evaluate
    std::string profile, pred;

    // sweep / experiment
    std::string spec, param, values;

    // overlap
    std::vector<std::string> rankings;

    std::string out;
    std::uint64_t seed = 0;
};

LayerDetector parse_layer_triple(const std::string& text) {
    const auto first = text.find(':');
    const auto last = text.rfind(':');
    if (first == std::string::npos || first == last) {
        throw CLI::ValidationError("--layer", "expected ID:SAE:RANKING, got '" + text + "'");
    }
    LayerDetector d;
    d.layer_id = text.substr(0, first);
    d.sae_path = text.substr(first + 1, last - first - 1);
    d.ranking_path = text.substr(last + 1);
    return d;
}

void log(const Options& o, std::ostream& err, const std::string& msg) {
    if (!o.quiet) err << msg << '\n';
}

void cmd_gen_synthetic(Options& o, const CLI::App& sub, std::ostream& err) {
    SyntheticConfig cfg = o.synth;
    cfg.seed = o.seed;
    if (sub.count("--dict-seed")) cfg.dictionary_seed = o.dict_seed;
    if (sub.count("--planted-seed")) cfg.planted_seed = o.planted_seed;
    const auto layers = generate_synthetic_layers(cfg);
    for (const auto& pair : layers) {
        const fs::path base = cfg.num_layers > 1 ? fs::path(o.out) / pair.clean.layer_id : fs::path(o.out);
        if (o.mixed) {
            std::vector<ActivationSet> parts;
            if (!pair.clean.samples.empty()) parts.push_back(pair.clean);
            if (!pair.adversarial.samples.empty()) parts.push_back(pair.adversarial);
            if (parts.empty()) throw DataError("empty set");
            write_activation_set(concat(parts), base);
        } else {
            if (!pair.clean.samples.empty()) write_activation_set(pair.clean, base / "clean");
            if (!pair.adversarial.samples.empty()) write_activation_set(pair.adversarial, base / "adversarial");
            if (pair.clean.samples.empty() && pair.adversarial.samples.empty()) throw DataError("empty set");
        }
        log(o, err, "wrote layer " + pair.clean.layer_id + " to " + base.string());
    }
}

void cmd_train(Options& o, std::ostream& err) {
    for (const auto& a : o.acts) require_exists(a);
    const ActivationSet data = read_all(o.acts);
    TrainConfig cfg = o.train;
    cfg.seed = o.seed;
    cfg.on_eval = [&](std::size_t step, double loss) {
        std::ostringstream msg;
        msg << "step " << step << "/" << cfg.steps << " held-out loss " << loss;
        log(o, err, msg.str());
    };
    const SaeModel init = init_model(data.dim, o.d_sae, o.k, o.seed);
    auto [model, report] = train(init, data, cfg);
    save_model(model, o.out);
    if (!o.train_report.empty()) {
        nlohmann::json j;
        j["initial_held_out_loss"] = report.initial_held_out_loss;
        j["final_held_out_loss"] = report.final_held_out_loss;
        j["dead_features"] = report.dead_features;
        j["train_tokens"] = report.train_tokens;
        j["held_out_tokens"] = report.held_out_tokens;
        j["held_out_curve"] = report.held_out_curve;
        j["train_loss"] = report.train_loss;
        write_text(o.train_report, j.dump(2) + "\n");
    }
    log(o, err, "dead features: " + std::to_string(report.dead_features) + "/" + std::to_string(model.d_sae));
}

void cmd_select(Options& o, std::ostream& err) {
    require_exists(o.sae);
    for (const auto& p : o.clean) require_exists(p);
    for (const auto& p : o.adv) require_exists(p);
    const SaeModel model = load_model(o.sae);
    const auto ranking = rank_features(read_all(o.clean), read_all(o.adv), model, o.top_k);
    save_ranking(ranking, o.out);
    log(o, err, "selected " + std::to_string(ranking.K) + " features for layer " + ranking.layer_id);
}

void cmd_calibrate(Options& o, std::ostream& err) {
    std::vector<LayerDetector> layers;
    for (const auto& text : o.layers) {
        auto d = parse_layer_triple(text);
        require_exists(d.sae_path);
        require_exists(d.ranking_path);
        d.model = load_model(d.sae_path);
        d.ranking = load_ranking(d.ranking_path);
        layers.push_back(std::move(d));
    }
    for (const auto& p : o.dev) require_exists(p);
    const auto profile = calibrate_ensemble(std::move(layers), read_by_layer(o.dev), o.alpha);
    save_profile(profile, o.out);
    std::ostringstream msg;
    msg << "tau = " << *profile.tau << " from " << profile.calibration_size << " clean samples";
    log(o, err, msg.str());
}

void cmd_detect(Options& o, std::ostream& err) {
    require_exists(o.profile);
    for (const auto& p : o.acts) require_exists(p);
    const auto profile = load_profile(o.profile);
    const auto sets = read_by_layer(o.acts);
    const auto predictions = detect(profile, sets);

    // Histogram labels come from the first layer's dumps, after classification.
    std::map<std::string, Label> labels;
    for (const auto& s : sets.front().samples) labels[s.id] = s.label;
    std::vector<double> scores;
    std::vector<Label> hist_labels;
    std::size_t flagged = 0;
    for (const auto& p : predictions) {
        scores.push_back(p.score);
        hist_labels.push_back(labels[p.sample_id]);
        if (p.verdict == Label::adversarial) ++flagged;
    }
    save_predictions(predictions, *profile.tau, make_histogram(scores, hist_labels), o.out);
    log(o, err, "flagged " + std::to_string(flagged) + "/" + std::to_string(predictions.size()) + " inputs");
}

void cmd_evaluate(Options& o, std::ostream& err) {
    require_exists(o.pred);
    for (const auto& p : o.acts) require_exists(p);
    double tau = 0.0;
    const auto predictions = load_predictions(o.pred, &tau);
    std::map<std::string, Label> labels;
    for (const auto& dir : o.acts) {
        for (const auto& s : read_activation_set(dir).samples) {
            if (!labels.emplace(s.id, s.label).second && labels[s.id] != s.label) {
                throw DataError("sample '" + s.id + "' has conflicting labels");
            }
        }
    }
    auto report = compute_metrics(predictions, labels);
    report.threshold = tau;
    save_report(report, o.out);
    log(o, err, "P=" + format_percent(report.precision) + " R=" + format_percent(report.recall) +
                    " F1=" + format_percent(report.f1));
}

std::vector<std::string> split_csv(const std::string& text) {
    std::vector<std::string> out;
    std::stringstream ss(text);
    std::string item;
    while (std::getline(ss, item, ',')) {
        if (!item.empty()) out.push_back(item);
    }
    return out;
}

void cmd_sweep(Options& o, const CLI::App& sub, std::ostream& err) {
    require_exists(o.spec);
    auto spec = load_experiment_spec(o.spec);
    if (sub.count("--seed")) spec.seed = o.seed;
    const auto values = split_csv(o.values);
    const auto rows = sweep(spec, o.param, values);
    write_text(o.out, sweep_csv(rows));
    log(o, err, "wrote " + std::to_string(rows.size()) + " rows to " + o.out);
}

void cmd_experiment(Options& o, const CLI::App& sub, std::ostream& err) {
    require_exists(o.spec);
    auto spec = load_experiment_spec(o.spec);
    if (sub.count("--seed")) spec.seed = o.seed;
    const auto result = run_experiment(spec);
    write_experiment(result, o.out);
    log(o, err, spec.name + ": P=" + format_percent(result.report.precision) + " R=" +
                    format_percent(result.report.recall) + " F1=" + format_percent(result.report.f1));
}

void cmd_overlap(Options& o, std::ostream& err) {
    std::vector<FeatureRanking> rankings;
    for (const auto& p : o.rankings) {
        require_exists(p);
        rankings.push_back(load_ranking(p));
    }
    const auto report = ranking_overlap(rankings);
    save_overlap(report, o.out);
    log(o, err, "intersection of all selections: " + std::to_string(report.intersection_all));
}

} // namespace

int run(const std::vector<std::string>& args, std::ostream& out, std::ostream& err) {
    CLI::App app{"saegis: sparse-autoencoder feature detector for adversarial inputs"};
    app.name("saegis");
    app.require_subcommand(1);
    app.fallthrough();
    Options o;
    app.add_flag("--quiet", o.quiet, "Suppress progress messages");
    app.add_option("--threads", o.threads, "Worker thread cap (default: all cores)");

    auto* gen = app.add_subcommand("gen-synthetic", "Generate a planted-feature benchmark");
    gen->add_option("--out", o.out, "Output directory")->required();
    gen->add_option("--dim", o.synth.dim, "Hidden width")->required();
    gen->add_option("--clean", o.synth.num_clean, "Clean samples")->required();
    gen->add_option("--adv", o.synth.num_adversarial, "Adversarial samples")->required();
    gen->add_option("--dict", o.synth.dictionary_size, "Dictionary atoms")->required();
    gen->add_option("--planted", o.synth.planted_attack_atoms, "Atoms reserved for attacks")->required();
    gen->add_option("--strength", o.synth.attack_strength, "Attack coefficient multiplier")->required();
    gen->add_option("--noise", o.synth.noise_sigma, "Gaussian noise sigma")->required();
    gen->add_option("--seed", o.seed, "Sample seed")->required();
    gen->add_option("--dict-seed", o.dict_seed, "Seed of the non-planted atoms (default: --seed)");
    gen->add_option("--planted-seed", o.planted_seed, "Seed of the planted atoms (default: dictionary seed)");
    gen->add_option("--sparsity", o.synth.code_sparsity, "Active clean atoms per token")->capture_default_str();
    gen->add_option("--attack-atoms", o.synth.attack_atoms_per_sample, "Planted atoms per adversarial sample")
        ->capture_default_str();
    gen->add_option("--min-tokens", o.synth.min_tokens, "Minimum tokens per sample")->capture_default_str();
    gen->add_option("--max-tokens", o.synth.max_tokens, "Maximum tokens per sample")->capture_default_str();
    gen->add_option("--layers", o.synth.num_layers, "Layer views sharing latent codes")->capture_default_str();
    gen->add_option("--layer-id", o.synth.layer_id, "Layer id (suffixed -L<i> when --layers > 1)")
        ->capture_default_str();
    gen->add_option("--id-prefix", o.synth.id_prefix, "Prefix for sample ids");
    gen->add_flag("--mixed", o.mixed, "Write clean and adversarial samples into one dump");

    auto* tr = app.add_subcommand("train", "Train a top-k sparse autoencoder on token activations");
    tr->add_option("--acts", o.acts, "Activation dump directory (repeatable)")->required();
    tr->add_option("--d-sae", o.d_sae, "Latent width")->required();
    tr->add_option("--k", o.k, "Top-k sparsity")->required();
    tr->add_option("--steps", o.train.steps, "Optimizer steps")->required();
    tr->add_option("--lr", o.train.learning_rate, "Learning rate")->required();
    tr->add_option("--batch", o.train.batch_size, "Batch size in tokens")->required();
    tr->add_option("--seed", o.seed, "Seed")->required();
    tr->add_option("--out", o.out, "Model file")->required();
    tr->add_option("--held-out", o.train.held_out_fraction, "Held-out token fraction")->capture_default_str();
    tr->add_option("--eval-every", o.train.eval_every, "Held-out evaluation period")->capture_default_str();
    tr->add_option("--report", o.train_report, "Optional training report JSON");

    auto* sel = app.add_subcommand("select-features", "Rank features by attack relevance and keep the top K");
    sel->add_option("--sae", o.sae, "Model file")->required();
    sel->add_option("--clean", o.clean, "Clean dump (repeatable)")->required();
    sel->add_option("--adv", o.adv, "Adversarial dump (repeatable)")->required();
    sel->add_option("--top-k", o.top_k, "Number of features to keep")->required();
    sel->add_option("--out", o.out, "ranking.json")->required();

    auto* cal = app.add_subcommand("calibrate", "Calibrate the clean-only threshold");
    cal->add_option("--dev", o.dev, "Clean development dump (repeatable, one per layer)")->required();
    cal->add_option("--alpha", o.alpha, "Target false-positive rate")->required();
    cal->add_option("--layer", o.layers, "ID:SAE:RANKING (repeat for an ensemble)")->required();
    cal->add_option("--out", o.out, "profile.json")->required();

    auto* det = app.add_subcommand("detect", "Classify inputs with a calibrated profile");
    det->add_option("--profile", o.profile, "profile.json")->required();
    det->add_option("--acts", o.acts, "Activation dump (repeatable; grouped by layer)")->required();
    det->add_option("--out", o.out, "predictions.json")->required();

    auto* ev = app.add_subcommand("evaluate", "Score predictions against dump labels");
    ev->add_option("--pred", o.pred, "predictions.json")->required();
    ev->add_option("--acts", o.acts, "Labeled dump (repeatable)")->required();
    ev->add_option("--out", o.out, "report.json")->required();

    auto* sw = app.add_subcommand("sweep", "Run an experiment once per parameter value");
    sw->add_option("--spec", o.spec, "Experiment spec JSON")->required();
    sw->add_option("--param", o.param, "K, alpha, adversarial_sample_count or layer")->required();
    sw->add_option("--values", o.values, "Comma-separated values")->required();
    sw->add_option("--out", o.out, "sweep.csv")->required();
    sw->add_option("--seed", o.seed, "Override the spec seed");

    auto* ex = app.add_subcommand("experiment", "Run one experiment spec end to end");
    ex->add_option("--spec", o.spec, "Experiment spec JSON")->required();
    ex->add_option("--out", o.out, "Output directory")->required();
    ex->add_option("--seed", o.seed, "Override the spec seed");

    auto* ov = app.add_subcommand("overlap", "Overlap of selected feature sets");
    ov->add_option("--ranking", o.rankings, "ranking.json (repeatable)")->required();
    ov->add_option("--out", o.out, "Output JSON")->required();

    if (!args.empty() && !args.front().empty() && args.front()[0] != '-' &&
        std::find(kSubcommands.begin(), kSubcommands.end(), args.front()) == kSubcommands.end()) {
        err << "saegis: unknown subcommand '" << args.front() << "'; did you mean '"
            << closest_subcommand(args.front()) << "'?\nRun 'saegis --help' for usage.\n";
        return kUsage;
    }

    try {
        std::vector<std::string> reversed(args.rbegin(), args.rend());
        app.parse(reversed);
    } catch (const CLI::CallForHelp&) {
        out << app.help();
        return kOk;
    } catch (const CLI::CallForAllHelp&) {
        out << app.help("", CLI::AppFormatMode::All);
        return kOk;
    } catch (const CLI::ParseError& e) {
        err << "saegis: " << e.what() << "\nRun 'saegis --help' for usage.\n";
        return kUsage;
    }

    set_thread_count(o.threads);
    try {
        if (*gen) cmd_gen_synthetic(o, *gen, err);
        else if (*tr) cmd_train(o, err);
        else if (*sel) cmd_select(o, err);
        else if (*cal) cmd_calibrate(o, err);
        else if (*det) cmd_detect(o, err);
        else if (*ev) cmd_evaluate(o, err);
        else if (*sw) cmd_sweep(o, *sw, err);
        else if (*ex) cmd_experiment(o, *ex, err);
        else if (*ov) cmd_overlap(o, err);
    } catch (const CLI::ValidationError& e) {
        err << "saegis: " << e.what() << '\n';
        return kUsage;
    } catch (const DataError& e) {
        err << "saegis: " << e.what() << '\n';
        return kData;
    } catch (const NumericError& e) {
        err << "saegis: numeric failure: " << e.what() << '\n';
        return kNumeric;
    } catch (const std::exception& e) {
        err << "saegis: internal error: " << e.what() << '\n';
        return kNumeric;
    }
    return kOk;
}

int main(int argc, char** argv) {
    std::vector<std::string> args(argv + 1, argv + argc);
    return run(args, std::cout, std::cerr);
}

} // namespace saegis::cli
