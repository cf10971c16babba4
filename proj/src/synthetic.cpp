#include "saegis/synthetic.hpp"

#include "saegis/error.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <numeric>
#include <random>

namespace saegis {

namespace {

// Independent generator streams derived from one user seed.
enum Stream : std::uint64_t { kCommonAtoms = 1, kPlantedAtoms = 2, kCodes = 3, kNoise = 4 };

std::mt19937_64 make_rng(std::uint64_t seed, Stream stream, std::uint64_t sub = 0) {
    std::seed_seq seq{static_cast<std::uint32_t>(seed), static_cast<std::uint32_t>(seed >> 32),
                      static_cast<std::uint32_t>(stream), static_cast<std::uint32_t>(sub),
                      static_cast<std::uint32_t>(sub >> 32)};
    return std::mt19937_64(seq);
}

void fill_unit_atoms(std::mt19937_64& rng, std::size_t dim, float* out, std::size_t count) {
    std::normal_distribution<double> normal(0.0, 1.0);
    std::vector<double> v(dim);
    for (std::size_t a = 0; a < count; ++a) {
        double norm2 = 0.0;
        do {
            norm2 = 0.0;
            for (auto& x : v) {
                x = normal(rng);
                norm2 += x * x;
            }
        } while (norm2 == 0.0);
        const double inv = 1.0 / std::sqrt(norm2);
        for (std::size_t d = 0; d < dim; ++d) out[a * dim + d] = static_cast<float>(v[d] * inv);
    }
}

// Picks `count` distinct values from [0, n) by partial Fisher-Yates.
std::vector<std::size_t> choose_distinct(std::mt19937_64& rng, std::size_t n, std::size_t count,
                                         std::vector<std::size_t>& scratch) {
    scratch.resize(n);
    std::iota(scratch.begin(), scratch.end(), std::size_t{0});
    for (std::size_t i = 0; i < count; ++i) {
        std::uniform_int_distribution<std::size_t> pick(i, n - 1);
        std::swap(scratch[i], scratch[pick(rng)]);
    }
    return {scratch.begin(), scratch.begin() + static_cast<std::ptrdiff_t>(count)};
}

struct LatentToken {
    std::vector<std::size_t> atoms;
    std::vector<double> coefs;
};

struct LatentSample {
    std::string id;
    Label label;
    std::vector<LatentToken> tokens;
};

std::string format_id(const std::string& prefix, const char* kind, std::size_t i) {
    char buf[32];
    std::snprintf(buf, sizeof buf, "%s-%05zu", kind, i);
    return prefix + buf;
}

std::vector<LatentSample> draw_latents(const SyntheticConfig& cfg) {
    auto rng = make_rng(cfg.seed, kCodes);
    const std::size_t common = cfg.dictionary_size - cfg.planted_attack_atoms;
    const std::size_t attack_atoms = std::min(cfg.attack_atoms_per_sample, cfg.planted_attack_atoms);
    std::uniform_int_distribution<std::size_t> token_count(cfg.min_tokens, cfg.max_tokens);
    std::uniform_real_distribution<double> magnitude(0.5, 1.5);
    std::vector<std::size_t> scratch;

    std::vector<LatentSample> out;
    out.reserve(cfg.num_clean + cfg.num_adversarial);
    const std::size_t total = cfg.num_clean + cfg.num_adversarial;
    for (std::size_t i = 0; i < total; ++i) {
        const bool adversarial = i >= cfg.num_clean;
        LatentSample s;
        s.label = adversarial ? Label::adversarial : Label::clean;
        s.id = adversarial ? format_id(cfg.id_prefix, "adv", i - cfg.num_clean)
                           : format_id(cfg.id_prefix, "clean", i);
        const std::size_t n_tokens = token_count(rng);

        std::vector<std::size_t> planted;
        if (adversarial) {
            planted = choose_distinct(rng, cfg.planted_attack_atoms, attack_atoms, scratch);
            for (auto& p : planted) p += common;
        }
        s.tokens.resize(n_tokens);
        for (auto& tok : s.tokens) {
            tok.atoms = choose_distinct(rng, common, cfg.code_sparsity, scratch);
            for (std::size_t j = 0; j < tok.atoms.size(); ++j) tok.coefs.push_back(magnitude(rng));
            for (std::size_t p : planted) {
                tok.atoms.push_back(p);
                tok.coefs.push_back(cfg.attack_strength * magnitude(rng));
            }
        }
        out.push_back(std::move(s));
    }
    return out;
}

SyntheticPair render_layer(const SyntheticConfig& cfg, const std::vector<LatentSample>& latents,
                           std::size_t layer) {
    const std::vector<float> atoms = synthetic_dictionary(cfg, layer);
    auto rng = make_rng(cfg.seed, kNoise, layer);
    std::normal_distribution<double> noise(0.0, 1.0);
    const std::size_t dim = cfg.dim;

    SyntheticPair pair;
    pair.clean.layer_id = pair.adversarial.layer_id = synthetic_layer_id(cfg, layer);
    pair.clean.dim = pair.adversarial.dim = dim;

    std::vector<double> row(dim);
    for (const auto& latent : latents) {
        SampleRecord rec;
        rec.id = latent.id;
        rec.label = latent.label;
        rec.num_tokens = latent.tokens.size();
        rec.values.reserve(rec.num_tokens * dim);
        for (const auto& tok : latent.tokens) {
            std::fill(row.begin(), row.end(), 0.0);
            for (std::size_t j = 0; j < tok.atoms.size(); ++j) {
                const float* atom = atoms.data() + tok.atoms[j] * dim;
                for (std::size_t d = 0; d < dim; ++d) row[d] += tok.coefs[j] * atom[d];
            }
            for (std::size_t d = 0; d < dim; ++d) {
                rec.values.push_back(static_cast<float>(row[d] + cfg.noise_sigma * noise(rng)));
            }
        }
        (latent.label == Label::adversarial ? pair.adversarial : pair.clean).samples.push_back(std::move(rec));
    }
    return pair;
}

} // namespace

void validate(const SyntheticConfig& cfg) {
    if (cfg.dim == 0) throw DataError("synthetic: dim must be positive");
    if (cfg.min_tokens == 0 || cfg.min_tokens > cfg.max_tokens) {
        throw DataError("synthetic: token range must satisfy 1 <= min <= max");
    }
    if (cfg.planted_attack_atoms >= cfg.dictionary_size) {
        throw DataError("synthetic: planted_attack_atoms must be < dictionary_size");
    }
    if (cfg.code_sparsity == 0 || cfg.code_sparsity > cfg.dictionary_size - cfg.planted_attack_atoms) {
        throw DataError("synthetic: infeasible sparsity (code_sparsity must be in [1, dictionary_size - planted])");
    }
    if (!(cfg.attack_strength >= 0.0) || !std::isfinite(cfg.attack_strength)) {
        throw DataError("synthetic: attack_strength must be finite and >= 0");
    }
    if (!(cfg.noise_sigma >= 0.0) || !std::isfinite(cfg.noise_sigma)) {
        throw DataError("synthetic: noise_sigma must be finite and >= 0");
    }
    if (cfg.num_adversarial > 0 && (cfg.planted_attack_atoms == 0 || cfg.attack_atoms_per_sample == 0)) {
        throw DataError("synthetic: adversarial samples need at least one planted atom");
    }
    if (cfg.num_layers == 0) throw DataError("synthetic: num_layers must be positive");
}

std::string synthetic_layer_id(const SyntheticConfig& cfg, std::size_t layer) {
    if (cfg.num_layers <= 1) return cfg.layer_id;
    return cfg.layer_id + "-L" + std::to_string(layer);
}

std::vector<float> synthetic_dictionary(const SyntheticConfig& cfg, std::size_t layer) {
    validate(cfg);
    const std::uint64_t dict_seed = cfg.dictionary_seed.value_or(cfg.seed);
    const std::uint64_t planted_seed = cfg.planted_seed.value_or(dict_seed);
    const std::size_t common = cfg.dictionary_size - cfg.planted_attack_atoms;

    std::vector<float> atoms(cfg.dictionary_size * cfg.dim);
    auto common_rng = make_rng(dict_seed, kCommonAtoms, layer);
    fill_unit_atoms(common_rng, cfg.dim, atoms.data(), common);
    auto planted_rng = make_rng(planted_seed, kPlantedAtoms, layer);
    fill_unit_atoms(planted_rng, cfg.dim, atoms.data() + common * cfg.dim, cfg.planted_attack_atoms);
    return atoms;
}

std::vector<SyntheticPair> generate_synthetic_layers(const SyntheticConfig& cfg) {
    validate(cfg);
    const auto latents = draw_latents(cfg);
    std::vector<SyntheticPair> layers;
    layers.reserve(cfg.num_layers);
    for (std::size_t l = 0; l < cfg.num_layers; ++l) layers.push_back(render_layer(cfg, latents, l));
    return layers;
}

SyntheticPair generate_synthetic(const SyntheticConfig& cfg) {
    validate(cfg);
    return render_layer(cfg, draw_latents(cfg), 0);
}

} // namespace saegis
