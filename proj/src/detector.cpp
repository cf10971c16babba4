#include "saegis/detector.hpp"

#include "saegis/error.hpp"
#include "saegis/parallel.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <unordered_map>

#include <json.hpp>

namespace saegis {

namespace fs = std::filesystem;
using json = nlohmann::json;

namespace {

std::vector<char> selection_mask(const FeatureRanking& ranking) {
    std::vector<char> mask(ranking.d_sae, 0);
    for (auto i : ranking.selected) {
        if (i >= ranking.d_sae) throw DataError("ranking: selected index out of range");
        mask[i] = 1;
    }
    return mask;
}

double count_with_mask(std::span<const SparseCode> codes, const std::vector<char>& mask) {
    if (codes.empty()) throw DataError("activation_count: no tokens");
    std::size_t total = 0;
    for (const auto& code : codes) {
        if (code.d_sae != mask.size()) throw DataError("activation_count: code width != ranking d_sae");
        for (std::size_t j = 0; j < code.indices.size(); ++j) {
            if (code.values[j] > 0.0f && mask[code.indices[j]]) ++total;
        }
    }
    return static_cast<double>(total) / static_cast<double>(codes.size());
}

const ActivationSet& set_for_layer(std::span<const ActivationSet> sets, const std::string& layer_id) {
    const ActivationSet* found = nullptr;
    for (const auto& s : sets) {
        if (s.layer_id == layer_id) {
            if (found) throw DataError("more than one activation set for layer '" + layer_id + "'");
            found = &s;
        }
    }
    if (!found) throw DataError("no activation set for layer '" + layer_id + "'");
    return *found;
}

// For each layer, the index of every first-layer sample id.
std::vector<std::vector<std::size_t>> align_samples(std::span<const ActivationSet* const> sets) {
    const auto& first = *sets.front();
    std::vector<std::vector<std::size_t>> index(sets.size());
    for (std::size_t l = 0; l < sets.size(); ++l) {
        const auto& set = *sets[l];
        if (set.samples.size() != first.samples.size()) {
            throw DataError("layer '" + set.layer_id + "' has " + std::to_string(set.samples.size()) +
                            " samples, layer '" + first.layer_id + "' has " + std::to_string(first.samples.size()));
        }
        std::unordered_map<std::string, std::size_t> pos;
        for (std::size_t i = 0; i < set.samples.size(); ++i) pos.emplace(set.samples[i].id, i);
        for (const auto& s : first.samples) {
            auto it = pos.find(s.id);
            if (it == pos.end()) throw DataError("sample '" + s.id + "' missing from layer '" + set.layer_id + "'");
            index[l].push_back(it->second);
        }
    }
    return index;
}

std::vector<double> pooled_embedding(const SampleRecord& sample, std::size_t dim) {
    if (sample.num_tokens == 0 || sample.values.size() != sample.num_tokens * dim) {
        throw DataError("dimension mismatch: sample '" + sample.id + "'");
    }
    std::vector<double> e(dim, 0.0);
    for (std::size_t t = 0; t < sample.num_tokens; ++t) {
        const auto row = sample.row(t, dim);
        for (std::size_t d = 0; d < dim; ++d) e[d] += row[d];
    }
    for (auto& v : e) v /= static_cast<double>(sample.num_tokens);
    return e;
}

std::vector<double> mean_embedding(const ActivationSet& set) {
    if (set.samples.empty()) throw DataError("dense_fit: empty set");
    std::vector<double> mu(set.dim, 0.0);
    for (const auto& s : set.samples) {
        const auto e = pooled_embedding(s, set.dim);
        for (std::size_t d = 0; d < set.dim; ++d) mu[d] += e[d];
    }
    for (auto& v : mu) v /= static_cast<double>(set.samples.size());
    return mu;
}

double norm(const std::vector<double>& v) {
    double s = 0.0;
    for (double x : v) s += x * x;
    return std::sqrt(s);
}

double cosine(const std::vector<double>& a, const std::vector<double>& b, double norm_a) {
    double dot = 0.0;
    for (std::size_t i = 0; i < a.size(); ++i) dot += a[i] * b[i];
    return dot / (norm_a * norm(b));
}

fs::path resolve(const fs::path& p, const fs::path& base_dir) {
    if (p.is_absolute() || fs::exists(p)) return p;
    const fs::path alt = base_dir / p;
    return fs::exists(alt) ? alt : p;
}

std::string mode_name(DetectorMode m) { return m == DetectorMode::single ? "single" : "ensemble"; }

} // namespace

double activation_count(std::span<const SparseCode> token_codes, const FeatureRanking& ranking) {
    return count_with_mask(token_codes, selection_mask(ranking));
}

double activation_count(const SaeModel& model, const FeatureRanking& ranking, const SampleRecord& sample) {
    if (ranking.d_sae != model.d_sae) throw DataError("activation_count: ranking d_sae != model d_sae");
    return activation_count(encode_sample(model, sample), ranking);
}

double calibrate_threshold(std::span<const double> counts, double alpha) {
    if (counts.empty()) throw DataError("calibrate_threshold: empty counts");
    if (!(alpha >= 0.0 && alpha < 1.0)) throw DataError("calibrate_threshold: alpha must be in [0, 1)");
    for (double c : counts) {
        if (!std::isfinite(c)) throw NumericError("calibrate_threshold: non-finite count");
    }
    std::vector<double> sorted(counts.begin(), counts.end());
    std::sort(sorted.begin(), sorted.end());
    const double n = static_cast<double>(sorted.size());
    // The 1e-9 slack keeps (1 - 0.02) * 100 at rank 98 despite binary rounding.
    auto rank = static_cast<std::size_t>(std::ceil((1.0 - alpha) * n - 1e-9));
    rank = std::clamp<std::size_t>(rank, 1, sorted.size());
    return sorted[rank - 1];
}

double ensemble_count(std::span<const double> per_layer_counts, std::size_t expected_layers) {
    if (per_layer_counts.size() != expected_layers) {
        throw DataError("ensemble_count: got " + std::to_string(per_layer_counts.size()) + " counts for " +
                        std::to_string(expected_layers) + " layers");
    }
    return ensemble_count(per_layer_counts);
}

double ensemble_count(std::span<const double> per_layer_counts) {
    if (per_layer_counts.empty()) throw DataError("ensemble_count: no layers");
    std::vector<double> sorted(per_layer_counts.begin(), per_layer_counts.end());
    std::sort(sorted.begin(), sorted.end());
    double sum = 0.0;
    for (double c : sorted) sum += c;
    return sum / static_cast<double>(sorted.size());
}

std::vector<std::pair<std::string, double>> score_inputs(const DetectorProfile& profile,
                                                         std::span<const ActivationSet> per_layer) {
    if (profile.layers.empty()) throw DataError("detector profile has no layers");
    std::vector<const ActivationSet*> sets;
    for (const auto& layer : profile.layers) {
        if (layer.ranking.layer_id != layer.layer_id) {
            throw DataError("ranking layer '" + layer.ranking.layer_id + "' != profile layer '" + layer.layer_id + "'");
        }
        if (layer.ranking.d_sae != layer.model.d_sae) {
            throw DataError("layer '" + layer.layer_id + "': ranking d_sae != model d_sae");
        }
        const auto& set = set_for_layer(per_layer, layer.layer_id);
        if (set.dim != layer.model.d_model) {
            throw DataError("layer '" + layer.layer_id + "': activations have dim " + std::to_string(set.dim) +
                            ", SAE expects " + std::to_string(layer.model.d_model));
        }
        sets.push_back(&set);
    }
    const auto index = align_samples(sets);
    const std::size_t n = sets.front()->samples.size();
    const std::size_t L = sets.size();

    std::vector<std::vector<char>> masks;
    for (const auto& layer : profile.layers) masks.push_back(selection_mask(layer.ranking));

    std::vector<double> counts(n * L);
    parallel_for(n * L, [&](std::size_t job) {
        const std::size_t i = job / L;
        const std::size_t l = job % L;
        const auto& sample = sets[l]->samples[index[l][i]];
        counts[job] = count_with_mask(encode_sample(profile.layers[l].model, sample), masks[l]);
    });

    std::vector<std::pair<std::string, double>> out;
    out.reserve(n);
    for (std::size_t i = 0; i < n; ++i) {
        const std::span<const double> per(counts.data() + i * L, L);
        out.emplace_back(sets.front()->samples[i].id, ensemble_count(per, L));
    }
    return out;
}

DetectorProfile calibrate_ensemble(std::vector<LayerDetector> layers, std::span<const ActivationSet> dev_clean,
                                   double alpha) {
    if (layers.empty()) throw DataError("calibrate: no layers");
    for (const auto& set : dev_clean) {
        for (const auto& s : set.samples) {
            if (s.label == Label::adversarial) {
                throw DataError("calibrate: dev sample '" + s.id + "' is labeled adversarial; calibration uses clean data only");
            }
        }
    }
    DetectorProfile profile;
    profile.mode = layers.size() == 1 ? DetectorMode::single : DetectorMode::ensemble;
    profile.alpha = alpha;
    profile.layers = std::move(layers);

    const auto scored = score_inputs(profile, dev_clean);
    std::vector<double> counts;
    counts.reserve(scored.size());
    for (const auto& [id, c] : scored) counts.push_back(c);
    profile.tau = calibrate_threshold(counts, alpha);
    profile.calibration_size = counts.size();
    return profile;
}

Prediction classify(const DetectorProfile& profile, std::string sample_id, double score) {
    if (!profile.tau) throw DataError("classify: profile is not calibrated");
    return {std::move(sample_id), score, score > *profile.tau ? Label::adversarial : Label::clean};
}

std::vector<Prediction> detect(const DetectorProfile& profile, std::span<const ActivationSet> per_layer) {
    if (!profile.tau) throw DataError("detect: profile is not calibrated");
    std::vector<Prediction> out;
    for (auto& [id, score] : score_inputs(profile, per_layer)) out.push_back(classify(profile, id, score));
    return out;
}

DenseLayerProfile dense_fit(const ActivationSet& clean, const ActivationSet& adversarial) {
    if (clean.dim != adversarial.dim) throw DataError("dense_fit: clean and adversarial dims differ");
    DenseLayerProfile p;
    p.layer_id = clean.layer_id;
    p.mu_clean = mean_embedding(clean);
    p.mu_adversarial = mean_embedding(adversarial);
    if (norm(p.mu_clean) == 0.0 || norm(p.mu_adversarial) == 0.0) {
        throw NumericError("dense_fit: zero-norm reference embedding");
    }
    return p;
}

double dense_margin(const DenseLayerProfile& layer, const SampleRecord& sample) {
    const auto e = pooled_embedding(sample, layer.mu_clean.size());
    const double ne = norm(e);
    if (ne == 0.0) throw NumericError("dense_classify: zero-norm embedding for sample '" + sample.id + "'");
    return cosine(e, layer.mu_adversarial, ne) - cosine(e, layer.mu_clean, ne);
}

Prediction dense_classify(const DenseProfile& profile, std::span<const SampleRecord* const> per_layer_sample) {
    if (profile.layers.empty()) throw DataError("dense_classify: profile has no layers");
    if (per_layer_sample.size() != profile.layers.size()) throw DataError("dense_classify: one sample per layer expected");
    std::vector<double> margins;
    for (std::size_t l = 0; l < profile.layers.size(); ++l) {
        margins.push_back(dense_margin(profile.layers[l], *per_layer_sample[l]));
    }
    const double m = ensemble_count(margins);
    return {per_layer_sample.front()->id, m, m > 0.0 ? Label::adversarial : Label::clean};
}

std::vector<Prediction> dense_detect(const DenseProfile& profile, std::span<const ActivationSet> per_layer) {
    std::vector<const ActivationSet*> sets;
    for (const auto& layer : profile.layers) {
        const auto& set = set_for_layer(per_layer, layer.layer_id);
        if (set.dim != layer.mu_clean.size()) throw DataError("dense_detect: dim mismatch on layer '" + layer.layer_id + "'");
        sets.push_back(&set);
    }
    if (sets.empty()) throw DataError("dense_detect: profile has no layers");
    const auto index = align_samples(sets);
    std::vector<Prediction> out;
    std::vector<const SampleRecord*> row(sets.size());
    for (std::size_t i = 0; i < sets.front()->samples.size(); ++i) {
        for (std::size_t l = 0; l < sets.size(); ++l) row[l] = &sets[l]->samples[index[l][i]];
        out.push_back(dense_classify(profile, row));
    }
    return out;
}

double reconstruction_anomaly(const SaeModel& model, const SampleRecord& sample) {
    return reconstruction_loss(model, sample);
}

ScoreHistogram make_histogram(std::span<const double> scores, std::span<const Label> labels, std::size_t bins) {
    if (scores.size() != labels.size()) throw DataError("histogram: scores and labels differ in length");
    if (bins == 0) throw DataError("histogram: need at least one bin");
    ScoreHistogram h;
    double lo = 0.0, hi = 1.0;
    if (!scores.empty()) {
        lo = *std::min_element(scores.begin(), scores.end());
        hi = *std::max_element(scores.begin(), scores.end());
        if (hi <= lo) hi = lo + 1.0;
    }
    const double width = (hi - lo) / static_cast<double>(bins);
    for (std::size_t b = 0; b <= bins; ++b) h.edges.push_back(b == bins ? hi : lo + width * static_cast<double>(b));
    for (std::size_t i = 0; i < scores.size(); ++i) {
        auto& row = h.counts[std::string(to_string(labels[i]))];
        row.resize(bins, 0);
        auto b = static_cast<std::size_t>((scores[i] - lo) / width);
        ++row[std::min(b, bins - 1)];
    }
    return h;
}

void save_profile(const DetectorProfile& profile, const fs::path& path) {
    if (!profile.tau) throw DataError("save_profile: profile is not calibrated");
    json j;
    j["mode"] = mode_name(profile.mode);
    j["alpha"] = profile.alpha;
    j["tau"] = *profile.tau;
    j["calibration_size"] = profile.calibration_size;
    j["layers"] = json::array();
    for (const auto& l : profile.layers) {
        j["layers"].push_back({{"layer_id", l.layer_id},
                               {"sae_path", l.sae_path.generic_string()},
                               {"ranking_path", l.ranking_path.generic_string()}});
    }
    std::ofstream f(path, std::ios::trunc);
    f << j.dump(2) << '\n';
    if (!f) throw DataError("failed writing " + path.string());
}

DetectorProfile load_profile(const fs::path& path) {
    std::ifstream f(path);
    if (!f) throw DataError("cannot open " + path.string());
    DetectorProfile p;
    const fs::path base = path.parent_path();
    try {
        const json j = json::parse(f);
        const auto mode = j.at("mode").get<std::string>();
        if (mode == "single") p.mode = DetectorMode::single;
        else if (mode == "ensemble") p.mode = DetectorMode::ensemble;
        else throw DataError(path.string() + ": unknown mode '" + mode + "'");
        p.alpha = j.at("alpha").get<double>();
        p.tau = j.at("tau").get<double>();
        p.calibration_size = j.at("calibration_size").get<std::size_t>();
        for (const auto& l : j.at("layers")) {
            LayerDetector layer;
            layer.layer_id = l.at("layer_id").get<std::string>();
            layer.sae_path = l.at("sae_path").get<std::string>();
            layer.ranking_path = l.at("ranking_path").get<std::string>();
            layer.model = load_model(resolve(layer.sae_path, base));
            layer.ranking = load_ranking(resolve(layer.ranking_path, base));
            p.layers.push_back(std::move(layer));
        }
    } catch (const json::exception& e) {
        throw DataError(path.string() + ": " + e.what());
    }
    if (p.layers.empty()) throw DataError(path.string() + ": no layers");
    if (p.mode == DetectorMode::single && p.layers.size() != 1) {
        throw DataError(path.string() + ": single mode needs exactly one layer");
    }
    if (!std::isfinite(*p.tau)) throw DataError(path.string() + ": tau must be finite");
    return p;
}

void save_predictions(std::span<const Prediction> predictions, double tau, const ScoreHistogram& histogram,
                      const fs::path& path) {
    json j;
    j["tau"] = tau;
    j["predictions"] = json::array();
    for (const auto& p : predictions) {
        j["predictions"].push_back(
            {{"id", p.sample_id}, {"score", p.score}, {"verdict", std::string(to_string(p.verdict))}});
    }
    j["histogram"] = {{"edges", histogram.edges}, {"counts", histogram.counts}};
    std::ofstream f(path, std::ios::trunc);
    f << j.dump(2) << '\n';
    if (!f) throw DataError("failed writing " + path.string());
}

std::vector<Prediction> load_predictions(const fs::path& path, double* tau) {
    std::ifstream f(path);
    if (!f) throw DataError("cannot open " + path.string());
    std::vector<Prediction> out;
    try {
        const json j = json::parse(f);
        if (tau) *tau = j.at("tau").get<double>();
        for (const auto& p : j.at("predictions")) {
            out.push_back({p.at("id").get<std::string>(), p.at("score").get<double>(),
                           parse_label(p.at("verdict").get<std::string>())});
        }
    } catch (const json::exception& e) {
        throw DataError(path.string() + ": " + e.what());
    }
    return out;
}

} // namespace saegis
