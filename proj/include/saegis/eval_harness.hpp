#pragma once

#include "saegis/activation_io.hpp"
#include "saegis/detector.hpp"
#include "saegis/sae.hpp"

#include <cstdint>
#include <filesystem>
#include <map>
#include <optional>
#include <span>
#include <string>
#include <vector>

namespace saegis {

/// Confusion counts and metrics with adversarial as the positive class. Percentages
/// are kept at full precision; an empty optional marks an undefined ratio (0/0).
struct EvalReport {
    std::size_t tp = 0, fp = 0, tn = 0, fn = 0;
    std::optional<double> precision;
    std::optional<double> recall;
    std::optional<double> f1;
    double threshold = 0.0;

    struct Row {
        std::string id;
        double score = 0.0;
        Label label = Label::unknown;
        Label verdict = Label::clean;
    };
    std::vector<Row> scores;
};

/// Joins predictions with ground-truth labels (clean/adversarial) one-to-one.
EvalReport compute_metrics(std::span<const Prediction> predictions, const std::map<std::string, Label>& labels);

/// Percentage truncated (not rounded) to one decimal, the way result tables print it.
/// Undefined values print as "NA".
std::string format_percent(std::optional<double> value);

/// Probability that a random adversarial score exceeds a random clean one (ties count 1/2).
double auroc(std::span<const double> clean_scores, std::span<const double> adversarial_scores);

enum class Method { saegis, saegis_ensemble, dense, dense_ensemble };

Method parse_method(const std::string& name);
std::string to_string(Method m);

/// One experiment configuration. Each path list has one entry per layer. The in-domain,
/// cross-domain and cross-attack settings differ only in which dumps are named here.
struct ExperimentSpec {
    struct Layer {
        std::string layer_id;
        std::filesystem::path sae; ///< unused by dense methods
    };

    std::string name;
    Method method = Method::saegis;
    std::vector<Layer> layers;
    std::vector<std::filesystem::path> train_clean, train_adversarial, dev_clean, test_clean, test_adversarial;
    std::size_t K = 64;
    double alpha = 0.02;
    std::uint64_t seed = 0;
    /// Single-layer methods use this layer (default: the first one).
    std::optional<std::string> layer;
    /// Keeps a seeded random subset of this many adversarial training samples.
    std::optional<std::size_t> adversarial_sample_count;
};

ExperimentSpec load_experiment_spec(const std::filesystem::path& path);

/// Activation data and models for one layer, already in memory.
struct LayerData {
    std::string layer_id;
    std::optional<SaeModel> model;
    ActivationSet train_clean, train_adversarial, dev_clean, test_clean, test_adversarial;
};

struct PipelineOptions {
    Method method = Method::saegis;
    std::size_t K = 64;
    double alpha = 0.02;
    std::uint64_t seed = 0;
    std::optional<std::string> layer;
    std::optional<std::size_t> adversarial_sample_count;
};

struct ExperimentResult {
    EvalReport report;
    std::vector<Prediction> predictions;
    ScoreHistogram histogram;
    std::vector<FeatureRanking> rankings; ///< empty for dense methods
};

/// rank -> calibrate -> classify -> metrics. Test labels are removed before scoring and
/// only re-joined in compute_metrics.
ExperimentResult run_pipeline(std::span<const LayerData> layers, const PipelineOptions& options);

std::vector<LayerData> load_experiment_data(const ExperimentSpec& spec);
PipelineOptions pipeline_options(const ExperimentSpec& spec);

/// Loads every dump and model named by the spec and runs the pipeline. Errors carry the
/// failing stage name.
ExperimentResult run_experiment(const ExperimentSpec& spec);

/// Writes report.json, predictions.json and histogram.json into `dir`.
void write_experiment(const ExperimentResult& result, const std::filesystem::path& dir);

void save_report(const EvalReport& report, const std::filesystem::path& path);

struct SweepRow {
    std::string parameter;
    std::string value;
    EvalReport report;
};

/// One run per value with everything else fixed. `parameter` is one of
/// K, alpha, adversarial_sample_count, layer.
std::vector<SweepRow> sweep(const ExperimentSpec& spec, const std::string& parameter,
                            std::span<const std::string> values);
std::vector<SweepRow> sweep(std::span<const LayerData> layers, PipelineOptions base, const std::string& parameter,
                            std::span<const std::string> values);

/// CSV with header parameter,value,precision,recall,f1,tau.
std::string sweep_csv(std::span<const SweepRow> rows);

} // namespace saegis
