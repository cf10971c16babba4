#pragma once

#include "saegis/activation_io.hpp"
#include "saegis/feature_ranker.hpp"
#include "saegis/sae.hpp"

#include <filesystem>
#include <map>
#include <optional>
#include <span>
#include <string>
#include <vector>

namespace saegis {

/// One SAE insertion point: its model and attack-relevant features.
struct LayerDetector {
    std::string layer_id;
    std::filesystem::path sae_path;
    std::filesystem::path ranking_path;
    SaeModel model;
    FeatureRanking ranking;
};

enum class DetectorMode { single, ensemble };

struct DetectorProfile {
    DetectorMode mode = DetectorMode::single;
    std::vector<LayerDetector> layers;
    double alpha = 0.02;
    std::optional<double> tau; ///< empty until calibrated
    std::size_t calibration_size = 0;
};

struct Prediction {
    std::string sample_id;
    double score = 0.0;
    Label verdict = Label::clean;
};

/// Token-averaged number of selected features that fire: range [0, K].
double activation_count(const SaeModel& model, const FeatureRanking& ranking, const SampleRecord& sample);
double activation_count(std::span<const SparseCode> token_codes, const FeatureRanking& ranking);

/// Nearest-rank (1 - alpha)-quantile: the ceil((1 - alpha) n)-th smallest count.
/// Together with the strict `score > tau` rule, at most alpha of the counts exceed it.
double calibrate_threshold(std::span<const double> counts, double alpha);

/// Uniform average over layers. Summation runs over the sorted values, so the result
/// does not depend on layer order.
double ensemble_count(std::span<const double> per_layer_counts, std::size_t expected_layers);
double ensemble_count(std::span<const double> per_layer_counts);

/// Scores inputs given one activation set per profile layer (matched by layer_id).
/// Samples are matched across layers by id and returned in the order of the first layer.
std::vector<std::pair<std::string, double>> score_inputs(const DetectorProfile& profile,
                                                         std::span<const ActivationSet> per_layer);

/// Builds a calibrated profile from clean development data only. Refuses any sample
/// labeled adversarial. One layer yields single mode, more yield ensemble mode.
DetectorProfile calibrate_ensemble(std::vector<LayerDetector> layers, std::span<const ActivationSet> dev_clean,
                                   double alpha);

/// Verdict is adversarial iff score > tau. Throws if the profile is not calibrated.
Prediction classify(const DetectorProfile& profile, std::string sample_id, double score);

std::vector<Prediction> detect(const DetectorProfile& profile, std::span<const ActivationSet> per_layer);

/// Dense cosine-similarity baseline for one layer: token-mean pooled, then sample-mean.
struct DenseLayerProfile {
    std::string layer_id;
    std::vector<double> mu_clean;
    std::vector<double> mu_adversarial;
};

struct DenseProfile {
    std::vector<DenseLayerProfile> layers;
};

DenseLayerProfile dense_fit(const ActivationSet& clean, const ActivationSet& adversarial);

/// cos(e, mu_adversarial) - cos(e, mu_clean) for the token-mean embedding e.
double dense_margin(const DenseLayerProfile& layer, const SampleRecord& sample);

/// Averages the margin over layers; adversarial iff the mean margin is > 0 (ties are clean).
Prediction dense_classify(const DenseProfile& profile, std::span<const SampleRecord* const> per_layer_sample);

std::vector<Prediction> dense_detect(const DenseProfile& profile, std::span<const ActivationSet> per_layer);

/// Token-mean reconstruction MSE of a sample.
double reconstruction_anomaly(const SaeModel& model, const SampleRecord& sample);

/// Equal-width histogram of scores, split by label.
struct ScoreHistogram {
    std::vector<double> edges;                              ///< bins + 1 edges
    std::map<std::string, std::vector<std::size_t>> counts; ///< label -> per-bin counts
};

ScoreHistogram make_histogram(std::span<const double> scores, std::span<const Label> labels, std::size_t bins = 20);

/// profile.json: mode, alpha, tau, calibration_size, layers[{layer_id, sae_path, ranking_path}].
void save_profile(const DetectorProfile& profile, const std::filesystem::path& path);
/// Loads the profile and every referenced model and ranking. Relative paths are tried
/// against the working directory first, then against the profile's directory.
DetectorProfile load_profile(const std::filesystem::path& path);

/// predictions.json: {"tau", "predictions": [{id, score, verdict}], "histogram"}.
void save_predictions(std::span<const Prediction> predictions, double tau, const ScoreHistogram& histogram,
                      const std::filesystem::path& path);
std::vector<Prediction> load_predictions(const std::filesystem::path& path, double* tau = nullptr);

} // namespace saegis
