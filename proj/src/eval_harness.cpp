#include "saegis/eval_harness.hpp"

#include "saegis/error.hpp"
#include "saegis/feature_ranker.hpp"

#include <algorithm>
#include <array>
#include <cmath>
#include <cstdio>
#include <fstream>
#include <numeric>
#include <random>
#include <set>
#include <sstream>
#include <unordered_set>

#include <json.hpp>

namespace saegis {

namespace fs = std::filesystem;
using json = nlohmann::json;

namespace {

template <typename F>
auto stage(const std::string& name, F&& fn) -> decltype(fn()) {
    try {
        return fn();
    } catch (const NumericError& e) {
        throw NumericError(name + ": " + e.what());
    } catch (const DataError& e) {
        throw DataError(name + ": " + e.what());
    }
}

std::optional<double> ratio(std::size_t num, std::size_t den) {
    if (den == 0) return std::nullopt;
    return 100.0 * static_cast<double>(num) / static_cast<double>(den);
}

json optional_json(const std::optional<double>& v) { return v ? json(*v) : json(nullptr); }

std::string fixed(double v, const char* fmt = "%.6f") {
    char buf[64];
    std::snprintf(buf, sizeof buf, fmt, v);
    return buf;
}

ActivationSet subsample(const ActivationSet& set, const std::vector<std::string>& keep_ids) {
    const std::unordered_set<std::string> keep(keep_ids.begin(), keep_ids.end());
    ActivationSet out;
    out.layer_id = set.layer_id;
    out.dim = set.dim;
    for (const auto& s : set.samples) {
        if (keep.count(s.id)) out.samples.push_back(s);
    }
    if (out.samples.size() != keep.size()) {
        throw DataError("layer '" + set.layer_id + "' lacks some subsampled adversarial ids");
    }
    return out;
}

std::vector<std::string> choose_ids(const ActivationSet& set, std::size_t n, std::uint64_t seed) {
    if (n == 0 || n > set.samples.size()) {
        throw DataError("adversarial_sample_count=" + std::to_string(n) + " outside [1, " +
                        std::to_string(set.samples.size()) + "]");
    }
    std::vector<std::size_t> idx(set.samples.size());
    std::iota(idx.begin(), idx.end(), std::size_t{0});
    std::mt19937_64 rng(seed);
    std::shuffle(idx.begin(), idx.end(), rng);
    idx.resize(n);
    std::sort(idx.begin(), idx.end());
    std::vector<std::string> ids;
    for (auto i : idx) ids.push_back(set.samples[i].id);
    return ids;
}

fs::path resolve(const fs::path& p, const fs::path& base_dir) {
    if (p.is_absolute() || fs::exists(p)) return p;
    return base_dir / p;
}

std::vector<fs::path> path_list(const json& j, const char* key, const fs::path& base) {
    if (!j.contains(key)) throw DataError(std::string("experiment spec: missing field '") + key + "'");
    std::vector<fs::path> out;
    const auto& v = j.at(key);
    if (v.is_string()) {
        out.push_back(resolve(v.get<std::string>(), base));
    } else if (v.is_array()) {
        for (const auto& e : v) out.push_back(resolve(e.get<std::string>(), base));
    } else {
        throw DataError(std::string("experiment spec: '") + key + "' must be a path or a list of paths");
    }
    return out;
}

bool is_ensemble(Method m) { return m == Method::saegis_ensemble || m == Method::dense_ensemble; }
bool is_dense(Method m) { return m == Method::dense || m == Method::dense_ensemble; }

} // namespace

EvalReport compute_metrics(std::span<const Prediction> predictions, const std::map<std::string, Label>& labels) {
    EvalReport r;
    std::unordered_set<std::string> seen;
    for (const auto& p : predictions) {
        if (!seen.insert(p.sample_id).second) throw DataError("compute_metrics: duplicate id '" + p.sample_id + "'");
        const auto it = labels.find(p.sample_id);
        if (it == labels.end()) throw DataError("compute_metrics: unknown id '" + p.sample_id + "'");
        const Label truth = it->second;
        if (truth == Label::unknown) throw DataError("compute_metrics: sample '" + p.sample_id + "' has no label");
        const bool flagged = p.verdict == Label::adversarial;
        const bool attacked = truth == Label::adversarial;
        if (flagged && attacked) ++r.tp;
        else if (flagged) ++r.fp;
        else if (attacked) ++r.fn;
        else ++r.tn;
        r.scores.push_back({p.sample_id, p.score, truth, p.verdict});
    }
    if (seen.size() != labels.size()) {
        for (const auto& [id, label] : labels) {
            if (!seen.count(id)) throw DataError("compute_metrics: no prediction for id '" + id + "'");
        }
    }
    r.precision = ratio(r.tp, r.tp + r.fp);
    r.recall = ratio(r.tp, r.tp + r.fn);
    if (r.precision && r.recall && *r.precision + *r.recall > 0.0) {
        r.f1 = 2.0 * *r.precision * *r.recall / (*r.precision + *r.recall);
    } else if (r.recall) {
        // No flagged samples or no true positives: F1 is 0 whenever positives exist.
        r.f1 = 0.0;
    }
    return r;
}

std::string format_percent(std::optional<double> value) {
    if (!value) return "NA";
    const double truncated = std::floor(*value * 10.0 + 1e-9) / 10.0;
    return fixed(truncated, "%.1f");
}

double auroc(std::span<const double> clean_scores, std::span<const double> adversarial_scores) {
    if (clean_scores.empty() || adversarial_scores.empty()) throw DataError("auroc: empty score list");
    double wins = 0.0;
    for (double a : adversarial_scores) {
        for (double c : clean_scores) {
            if (a > c) wins += 1.0;
            else if (a == c) wins += 0.5;
        }
    }
    return wins / (static_cast<double>(clean_scores.size()) * static_cast<double>(adversarial_scores.size()));
}

Method parse_method(const std::string& name) {
    if (name == "saegis") return Method::saegis;
    if (name == "saegis_ensemble") return Method::saegis_ensemble;
    if (name == "dense") return Method::dense;
    if (name == "dense_ensemble") return Method::dense_ensemble;
    throw DataError("unknown method '" + name + "'");
}

std::string to_string(Method m) {
    switch (m) {
    case Method::saegis: return "saegis";
    case Method::saegis_ensemble: return "saegis_ensemble";
    case Method::dense: return "dense";
    case Method::dense_ensemble: return "dense_ensemble";
    }
    return "saegis";
}

ExperimentSpec load_experiment_spec(const fs::path& path) {
    std::ifstream f(path);
    if (!f) throw DataError("cannot open " + path.string());
    const fs::path base = path.parent_path();
    ExperimentSpec s;
    try {
        const json j = json::parse(f);
        s.name = j.value("name", path.stem().string());
        s.method = parse_method(j.value("method", std::string("saegis")));
        for (const auto& l : j.at("layers")) {
            ExperimentSpec::Layer layer;
            layer.layer_id = l.at("layer_id").get<std::string>();
            if (l.contains("sae")) layer.sae = resolve(l.at("sae").get<std::string>(), base);
            s.layers.push_back(std::move(layer));
        }
        s.train_clean = path_list(j, "train_clean", base);
        s.train_adversarial = path_list(j, "train_adversarial", base);
        s.dev_clean = path_list(j, "dev_clean", base);
        s.test_clean = path_list(j, "test_clean", base);
        s.test_adversarial = path_list(j, "test_adversarial", base);
        s.K = j.value("K", s.K);
        s.alpha = j.value("alpha", s.alpha);
        s.seed = j.value("seed", s.seed);
        if (j.contains("layer")) s.layer = j.at("layer").get<std::string>();
        if (j.contains("adversarial_sample_count")) {
            s.adversarial_sample_count = j.at("adversarial_sample_count").get<std::size_t>();
        }
    } catch (const json::exception& e) {
        throw DataError(path.string() + ": " + e.what());
    }

    const std::size_t L = s.layers.size();
    if (L == 0) throw DataError(path.string() + ": no layers");
    for (const auto* list : {&s.train_clean, &s.train_adversarial, &s.dev_clean, &s.test_clean, &s.test_adversarial}) {
        if (list->size() != L) throw DataError(path.string() + ": every path list needs one entry per layer");
    }
    if (!(s.alpha >= 0.0 && s.alpha < 1.0)) throw DataError(path.string() + ": alpha must be in [0, 1)");
    return s;
}

PipelineOptions pipeline_options(const ExperimentSpec& spec) {
    return {spec.method, spec.K, spec.alpha, spec.seed, spec.layer, spec.adversarial_sample_count};
}

std::vector<LayerData> load_experiment_data(const ExperimentSpec& spec) {
    return stage("load", [&] {
        std::vector<LayerData> out;
        for (std::size_t l = 0; l < spec.layers.size(); ++l) {
            LayerData d;
            d.layer_id = spec.layers[l].layer_id;
            if (!is_dense(spec.method)) {
                if (spec.layers[l].sae.empty()) throw DataError("layer '" + d.layer_id + "' has no SAE model");
                d.model = load_model(spec.layers[l].sae);
            }
            d.train_clean = read_activation_set(spec.train_clean[l]);
            d.train_adversarial = read_activation_set(spec.train_adversarial[l]);
            d.dev_clean = read_activation_set(spec.dev_clean[l]);
            d.test_clean = read_activation_set(spec.test_clean[l]);
            d.test_adversarial = read_activation_set(spec.test_adversarial[l]);
            for (const auto* set : {&d.train_clean, &d.train_adversarial, &d.dev_clean, &d.test_clean,
                                    &d.test_adversarial}) {
                if (set->layer_id != d.layer_id) {
                    throw DataError("dump for layer '" + set->layer_id + "' listed under layer '" + d.layer_id + "'");
                }
            }
            out.push_back(std::move(d));
        }
        return out;
    });
}

ExperimentResult run_pipeline(std::span<const LayerData> all_layers, const PipelineOptions& opt) {
    if (all_layers.empty()) throw DataError("run_pipeline: no layers");

    std::vector<const LayerData*> layers;
    if (is_ensemble(opt.method)) {
        for (const auto& l : all_layers) layers.push_back(&l);
    } else {
        const std::string want = opt.layer.value_or(all_layers.front().layer_id);
        for (const auto& l : all_layers) {
            if (l.layer_id == want) layers.push_back(&l);
        }
        if (layers.size() != 1) throw DataError("run_pipeline: layer '" + want + "' not found exactly once");
    }

    // Adversarial training subset, chosen once and applied to every layer by id.
    std::optional<std::vector<std::string>> keep_ids;
    if (opt.adversarial_sample_count) {
        keep_ids = stage("subsample", [&] {
            return choose_ids(layers.front()->train_adversarial, *opt.adversarial_sample_count, opt.seed);
        });
    }
    auto train_adv = [&](const LayerData& d) {
        return keep_ids ? subsample(d.train_adversarial, *keep_ids) : d.train_adversarial;
    };

    // Test labels are split off here; every scoring stage sees unlabeled views.
    std::map<std::string, Label> truth;
    std::vector<ActivationSet> test_views;
    stage("prepare-test", [&] {
        for (const auto* d : layers) {
            const std::array<ActivationSet, 2> parts{d->test_clean, d->test_adversarial};
            ActivationSet joined = concat(parts);
            if (d == layers.front()) {
                for (const auto& s : joined.samples) truth[s.id] = s.label;
            }
            test_views.push_back(strip_labels(joined));
        }
    });

    ExperimentResult result;
    double tau = 0.0;
    if (is_dense(opt.method)) {
        DenseProfile profile;
        stage("fit", [&] {
            for (const auto* d : layers) profile.layers.push_back(dense_fit(d->train_clean, train_adv(*d)));
        });
        result.predictions = stage("classify", [&] { return dense_detect(profile, test_views); });
    } else {
        std::vector<LayerDetector> detectors;
        stage("rank", [&] {
            for (const auto* d : layers) {
                if (!d->model) throw DataError("layer '" + d->layer_id + "' has no SAE model");
                LayerDetector det;
                det.layer_id = d->layer_id;
                det.model = *d->model;
                det.ranking = rank_features(d->train_clean, train_adv(*d), det.model, opt.K);
                result.rankings.push_back(det.ranking);
                detectors.push_back(std::move(det));
            }
        });
        const DetectorProfile profile = stage("calibrate", [&] {
            std::vector<ActivationSet> dev;
            for (const auto* d : layers) dev.push_back(d->dev_clean);
            return calibrate_ensemble(std::move(detectors), dev, opt.alpha);
        });
        tau = *profile.tau;
        result.predictions = stage("classify", [&] { return detect(profile, test_views); });
    }

    result.report = stage("metrics", [&] { return compute_metrics(result.predictions, truth); });
    result.report.threshold = tau;

    std::vector<double> scores;
    std::vector<Label> labels;
    for (const auto& row : result.report.scores) {
        scores.push_back(row.score);
        labels.push_back(row.label);
    }
    result.histogram = make_histogram(scores, labels);
    return result;
}

ExperimentResult run_experiment(const ExperimentSpec& spec) {
    const auto data = load_experiment_data(spec);
    return run_pipeline(data, pipeline_options(spec));
}

void save_report(const EvalReport& r, const fs::path& path) {
    json j;
    j["tp"] = r.tp;
    j["fp"] = r.fp;
    j["tn"] = r.tn;
    j["fn"] = r.fn;
    j["precision"] = optional_json(r.precision);
    j["recall"] = optional_json(r.recall);
    j["f1"] = optional_json(r.f1);
    j["precision_defined"] = r.precision.has_value();
    j["display"] = {{"precision", format_percent(r.precision)},
                    {"recall", format_percent(r.recall)},
                    {"f1", format_percent(r.f1)}};
    j["threshold"] = r.threshold;
    j["scores"] = json::array();
    for (const auto& row : r.scores) {
        j["scores"].push_back({{"id", row.id},
                               {"score", row.score},
                               {"label", std::string(to_string(row.label))},
                               {"verdict", std::string(to_string(row.verdict))}});
    }
    std::ofstream f(path, std::ios::trunc);
    f << j.dump(2) << '\n';
    if (!f) throw DataError("failed writing " + path.string());
}

void write_experiment(const ExperimentResult& result, const fs::path& dir) {
    fs::create_directories(dir);
    save_report(result.report, dir / "report.json");
    save_predictions(result.predictions, result.report.threshold, result.histogram, dir / "predictions.json");
    json h = {{"edges", result.histogram.edges}, {"counts", result.histogram.counts}};
    std::ofstream f(dir / "histogram.json", std::ios::trunc);
    f << h.dump(2) << '\n';
    if (!f) throw DataError("failed writing " + (dir / "histogram.json").string());
}

std::vector<SweepRow> sweep(std::span<const LayerData> layers, PipelineOptions base, const std::string& parameter,
                            std::span<const std::string> values) {
    static const std::set<std::string> known{"K", "alpha", "adversarial_sample_count", "layer"};
    if (!known.count(parameter)) {
        throw DataError("sweep: invalid parameter '" + parameter +
                        "' (expected K, alpha, adversarial_sample_count or layer)");
    }
    if (values.empty()) throw DataError("sweep: no values");

    std::vector<SweepRow> rows;
    for (const auto& v : values) {
        PipelineOptions opt = base;
        try {
            if (parameter == "K") opt.K = std::stoul(v);
            else if (parameter == "alpha") opt.alpha = std::stod(v);
            else if (parameter == "adversarial_sample_count") opt.adversarial_sample_count = std::stoul(v);
            else opt.layer = v;
        } catch (const std::logic_error&) {
            throw DataError("sweep: cannot parse value '" + v + "' for " + parameter);
        }
        if (parameter == "layer") {
            if (opt.method == Method::saegis_ensemble) opt.method = Method::saegis;
            if (opt.method == Method::dense_ensemble) opt.method = Method::dense;
        }
        rows.push_back({parameter, v, run_pipeline(layers, opt).report});
    }
    return rows;
}

std::vector<SweepRow> sweep(const ExperimentSpec& spec, const std::string& parameter,
                            std::span<const std::string> values) {
    const auto data = load_experiment_data(spec);
    return sweep(data, pipeline_options(spec), parameter, values);
}

std::string sweep_csv(std::span<const SweepRow> rows) {
    std::ostringstream out;
    out << "parameter,value,precision,recall,f1,tau\n";
    auto cell = [](const std::optional<double>& v) { return v ? fixed(*v) : std::string("NA"); };
    for (const auto& r : rows) {
        out << r.parameter << ',' << r.value << ',' << cell(r.report.precision) << ',' << cell(r.report.recall) << ','
            << cell(r.report.f1) << ',' << fixed(r.report.threshold, "%.9g") << '\n';
    }
    return out.str();
}

} // namespace saegis
