#include "saegis/feature_ranker.hpp"

#include "saegis/error.hpp"
#include "saegis/parallel.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <numeric>
#include <unordered_set>

#include <json.hpp>

namespace saegis {

using json = nlohmann::json;

std::vector<SparseCode> encode_sample(const SaeModel& model, const SampleRecord& sample) {
    if (sample.values.size() != sample.num_tokens * model.d_model) {
        throw DataError("dimension mismatch: sample '" + sample.id + "' does not have width " +
                        std::to_string(model.d_model));
    }
    std::vector<SparseCode> codes;
    codes.reserve(sample.num_tokens);
    for (std::size_t t = 0; t < sample.num_tokens; ++t) codes.push_back(encode<float>(model, sample.row(t, model.d_model)));
    return codes;
}

double feature_score(std::span<const SparseCode> token_codes, std::uint32_t feature) {
    if (token_codes.empty()) throw DataError("feature_score: no tokens");
    double peak = 0.0;
    std::size_t fired = 0;
    for (const auto& code : token_codes) {
        if (feature >= code.d_sae) throw DataError("feature_score: feature index out of range");
        const auto it = std::lower_bound(code.indices.begin(), code.indices.end(), feature);
        if (it == code.indices.end() || *it != feature) continue;
        const double a = code.values[static_cast<std::size_t>(it - code.indices.begin())];
        if (a > 0.0) {
            ++fired;
            peak = std::max(peak, a);
        }
    }
    return fired == 0 ? 0.0 : peak * std::log(1.0 + static_cast<double>(fired));
}

std::vector<double> feature_scores(std::span<const SparseCode> token_codes, std::size_t d_sae) {
    if (token_codes.empty()) throw DataError("feature_score: no tokens");
    std::vector<double> peak(d_sae, 0.0);
    std::vector<std::size_t> fired(d_sae, 0);
    for (const auto& code : token_codes) {
        if (code.d_sae != d_sae) throw DataError("feature_score: code width mismatch");
        for (std::size_t j = 0; j < code.indices.size(); ++j) {
            const double a = code.values[j];
            if (a > 0.0) {
                const auto i = code.indices[j];
                ++fired[i];
                peak[i] = std::max(peak[i], a);
            }
        }
    }
    std::vector<double> scores(d_sae, 0.0);
    for (std::size_t i = 0; i < d_sae; ++i) {
        if (fired[i] > 0) scores[i] = peak[i] * std::log(1.0 + static_cast<double>(fired[i]));
    }
    return scores;
}

namespace {

// Per-feature mean of sample-level scores, summed in sample order.
std::vector<double> mean_scores(const ActivationSet& set, const SaeModel& model) {
    if (set.samples.empty()) throw DataError("attack_relevance: empty set");
    if (set.dim != model.d_model) {
        throw DataError("attack_relevance: set '" + set.layer_id + "' has dim " + std::to_string(set.dim) +
                        ", model expects " + std::to_string(model.d_model));
    }
    std::vector<std::vector<double>> per_sample(set.samples.size());
    parallel_for(set.samples.size(), [&](std::size_t i) {
        per_sample[i] = feature_scores(encode_sample(model, set.samples[i]), model.d_sae);
    });
    std::vector<double> mean(model.d_sae, 0.0);
    for (const auto& scores : per_sample) {
        for (std::size_t f = 0; f < mean.size(); ++f) mean[f] += scores[f];
    }
    const double n = static_cast<double>(set.samples.size());
    for (auto& m : mean) m /= n;
    return mean;
}

} // namespace

std::vector<double> attack_relevance(const ActivationSet& clean, const ActivationSet& adversarial,
                                     const SaeModel& model) {
    const auto adv = mean_scores(adversarial, model);
    const auto cln = mean_scores(clean, model);
    std::vector<double> out(model.d_sae);
    for (std::size_t i = 0; i < out.size(); ++i) out[i] = adv[i] - cln[i];
    return out;
}

FeatureRanking select_top_features(std::span<const double> attack_scores, std::size_t K) {
    if (K > attack_scores.size()) {
        throw DataError("select_top_features: K=" + std::to_string(K) + " exceeds d_sae=" +
                        std::to_string(attack_scores.size()));
    }
    for (double s : attack_scores) {
        if (std::isnan(s)) throw NumericError("select_top_features: NaN attack score");
    }
    std::vector<std::uint32_t> order(attack_scores.size());
    std::iota(order.begin(), order.end(), 0u);
    std::stable_sort(order.begin(), order.end(),
                     [&](std::uint32_t a, std::uint32_t b) { return attack_scores[a] > attack_scores[b]; });
    order.resize(K);

    FeatureRanking r;
    r.d_sae = attack_scores.size();
    r.K = K;
    r.selected = std::move(order);
    for (auto i : r.selected) r.selected_scores.push_back(attack_scores[i]);
    r.attack_scores.assign(attack_scores.begin(), attack_scores.end());
    return r;
}

FeatureRanking rank_features(const ActivationSet& clean, const ActivationSet& adversarial, const SaeModel& model,
                             std::size_t K) {
    auto r = select_top_features(attack_relevance(clean, adversarial, model), K);
    r.layer_id = adversarial.layer_id;
    r.clean_count = clean.samples.size();
    r.adversarial_count = adversarial.samples.size();
    return r;
}

OverlapReport ranking_overlap(std::span<const FeatureRanking> rankings) {
    const std::size_t n = rankings.size();
    if (n < 2) throw DataError("ranking_overlap: need at least two rankings");
    if (n > 16) throw DataError("ranking_overlap: at most 16 rankings supported");

    OverlapReport rep;
    const std::size_t d_sae = rankings.front().d_sae;
    std::vector<std::uint32_t> membership(d_sae, 0);
    for (std::size_t r = 0; r < n; ++r) {
        if (rankings[r].d_sae != d_sae) throw DataError("ranking_overlap: mismatched d_sae");
        rep.layer_ids.push_back(rankings[r].layer_id);
        rep.sizes.push_back(rankings[r].selected.size());
        for (auto f : rankings[r].selected) {
            if (f >= d_sae) throw DataError("ranking_overlap: selected index out of range");
            membership[f] |= 1u << r;
        }
    }

    for (std::size_t a = 0; a < n; ++a) {
        for (std::size_t b = a + 1; b < n; ++b) {
            const std::uint32_t both = (1u << a) | (1u << b);
            const auto c = std::count_if(membership.begin(), membership.end(),
                                         [both](std::uint32_t m) { return (m & both) == both; });
            rep.pairwise.push_back({a, b, static_cast<std::size_t>(c)});
        }
    }
    const std::uint32_t all = (1u << n) - 1;
    rep.intersection_all = static_cast<std::size_t>(
        std::count_if(membership.begin(), membership.end(), [all](std::uint32_t m) { return m == all; }));

    std::vector<std::size_t> region_counts(std::size_t{1} << n, 0);
    for (auto m : membership) {
        if (m != 0) ++region_counts[m];
    }
    for (std::uint32_t mask = 1; mask < region_counts.size(); ++mask) {
        OverlapReport::Region region;
        for (std::size_t r = 0; r < n; ++r) {
            if (mask & (1u << r)) region.members.push_back(r);
        }
        region.count = region_counts[mask];
        rep.regions.push_back(std::move(region));
    }
    return rep;
}

void save_overlap(const OverlapReport& report, const std::filesystem::path& path) {
    json j;
    j["layer_ids"] = report.layer_ids;
    j["sizes"] = report.sizes;
    j["pairwise"] = json::array();
    for (const auto& p : report.pairwise) j["pairwise"].push_back({{"a", p.a}, {"b", p.b}, {"count", p.count}});
    j["intersection_all"] = report.intersection_all;
    j["regions"] = json::array();
    for (const auto& r : report.regions) j["regions"].push_back({{"members", r.members}, {"count", r.count}});
    std::ofstream f(path, std::ios::trunc);
    f << j.dump(2) << '\n';
    if (!f) throw DataError("failed writing " + path.string());
}

void save_ranking(const FeatureRanking& ranking, const std::filesystem::path& path) {
    json j;
    j["layer_id"] = ranking.layer_id;
    j["d_sae"] = ranking.d_sae;
    j["K"] = ranking.K;
    j["selected"] = ranking.selected;
    j["attack_scores_selected"] = ranking.selected_scores;
    if (!ranking.attack_scores.empty()) j["attack_scores_full"] = ranking.attack_scores;
    j["clean_count"] = ranking.clean_count;
    j["adversarial_count"] = ranking.adversarial_count;
    std::ofstream f(path, std::ios::trunc);
    f << j.dump(2) << '\n';
    if (!f) throw DataError("failed writing " + path.string());
}

FeatureRanking load_ranking(const std::filesystem::path& path) {
    std::ifstream f(path);
    if (!f) throw DataError("cannot open " + path.string());
    const std::string where = path.string();
    FeatureRanking r;
    try {
        const json j = json::parse(f);
        for (const char* key : {"layer_id", "d_sae", "K", "selected", "attack_scores_selected"}) {
            if (!j.contains(key)) throw DataError(where + ": schema error, missing field '" + key + "'");
        }
        r.layer_id = j.at("layer_id").get<std::string>();
        r.d_sae = j.at("d_sae").get<std::size_t>();
        r.K = j.at("K").get<std::size_t>();
        r.selected = j.at("selected").get<std::vector<std::uint32_t>>();
        r.selected_scores = j.at("attack_scores_selected").get<std::vector<double>>();
        if (j.contains("attack_scores_full")) r.attack_scores = j.at("attack_scores_full").get<std::vector<double>>();
        r.clean_count = j.value("clean_count", std::size_t{0});
        r.adversarial_count = j.value("adversarial_count", std::size_t{0});
    } catch (const json::exception& e) {
        throw DataError(where + ": schema error: " + e.what());
    }

    if (r.selected.size() != r.K) {
        throw DataError(where + ": K=" + std::to_string(r.K) + " but 'selected' has " +
                        std::to_string(r.selected.size()) + " entries");
    }
    if (r.K > r.d_sae) throw DataError(where + ": K exceeds d_sae");
    if (r.selected_scores.size() != r.K) throw DataError(where + ": attack_scores_selected length != K");
    if (!r.attack_scores.empty() && r.attack_scores.size() != r.d_sae) {
        throw DataError(where + ": attack_scores_full length != d_sae");
    }
    std::unordered_set<std::uint32_t> seen;
    for (auto i : r.selected) {
        if (i >= r.d_sae) throw DataError(where + ": selected index out of range");
        if (!seen.insert(i).second) throw DataError(where + ": duplicate selected index");
    }
    return r;
}

} // namespace saegis
