#pragma once

#include "saegis/activation_io.hpp"
#include "saegis/sae.hpp"

#include <cstdint>
#include <filesystem>
#include <span>
#include <string>
#include <vector>

namespace saegis {

/// Attack-relevance scores of every SAE feature and the top-K selection.
struct FeatureRanking {
    std::string layer_id;
    std::size_t d_sae = 0;
    std::size_t K = 0;
    /// Selected feature indices, descending by score, ties by ascending index.
    std::vector<std::uint32_t> selected;
    /// Scores of the selected features, aligned with `selected`.
    std::vector<double> selected_scores;
    /// Full per-feature score vector (d_sae entries), or empty when not available.
    std::vector<double> attack_scores;
    std::size_t clean_count = 0;
    std::size_t adversarial_count = 0;
};

/// Sparse codes of every token row of a sample.
std::vector<SparseCode> encode_sample(const SaeModel& model, const SampleRecord& sample);

/// Peak activation times ln(1 + number of tokens where the feature fires).
double feature_score(std::span<const SparseCode> token_codes, std::uint32_t feature);

/// feature_score for every feature at once (d_sae entries).
std::vector<double> feature_scores(std::span<const SparseCode> token_codes, std::size_t d_sae);

/// Mean per-sample feature score on the adversarial set minus the mean on the clean set.
std::vector<double> attack_relevance(const ActivationSet& clean, const ActivationSet& adversarial,
                                     const SaeModel& model);

/// Orders features by descending score (ties by ascending index) and keeps the first K.
FeatureRanking select_top_features(std::span<const double> attack_scores, std::size_t K);

/// attack_relevance followed by select_top_features, with provenance filled in.
FeatureRanking rank_features(const ActivationSet& clean, const ActivationSet& adversarial, const SaeModel& model,
                             std::size_t K);

struct OverlapReport {
    struct Pair {
        std::size_t a = 0;
        std::size_t b = 0;
        std::size_t count = 0;
    };
    struct Region {
        std::vector<std::size_t> members; ///< rankings containing the features of this region
        std::size_t count = 0;
    };

    std::vector<std::string> layer_ids;
    std::vector<std::size_t> sizes;
    std::vector<Pair> pairwise;
    std::size_t intersection_all = 0;
    /// Exclusive Venn regions, ordered by membership bitmask.
    std::vector<Region> regions;
};

/// Pairwise and full intersections of the selected sets, plus exclusive Venn regions.
/// Needs 2..16 rankings sharing d_sae.
OverlapReport ranking_overlap(std::span<const FeatureRanking> rankings);

void save_overlap(const OverlapReport& report, const std::filesystem::path& path);

void save_ranking(const FeatureRanking& ranking, const std::filesystem::path& path);
FeatureRanking load_ranking(const std::filesystem::path& path);

} // namespace saegis
