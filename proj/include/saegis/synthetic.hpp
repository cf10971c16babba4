#pragma once

#include "saegis/activation_io.hpp"

#include <cstdint>
#include <optional>
#include <string>
#include <vector>

namespace saegis {

/// Generative model for the desk-scale benchmark. Every token is a sparse positive
/// combination of unit-norm dictionary atoms plus isotropic Gaussian noise. The last
/// `planted_attack_atoms` atoms never appear in clean tokens; adversarial samples add
/// energy on a per-sample subset of them.
struct SyntheticConfig {
    std::size_t dim = 64;
    std::size_t num_clean = 800;
    std::size_t num_adversarial = 100;
    std::size_t min_tokens = 16;
    std::size_t max_tokens = 32;
    std::size_t dictionary_size = 256;
    std::size_t code_sparsity = 4;
    std::size_t planted_attack_atoms = 16;
    /// Planted atoms switched on per adversarial sample (clamped to planted_attack_atoms).
    std::size_t attack_atoms_per_sample = 4;
    double attack_strength = 3.0;
    double noise_sigma = 0.05;
    std::uint64_t seed = 0;
    /// Seed of the non-planted atoms. Defaults to `seed`.
    std::optional<std::uint64_t> dictionary_seed;
    /// Seed of the planted atoms. Defaults to the dictionary seed.
    std::optional<std::uint64_t> planted_seed;
    /// Number of layer views sharing the same latent codes (one dictionary per layer).
    std::size_t num_layers = 1;
    std::string layer_id = "synthetic";
    /// Prepended to every sample id, e.g. "dev-" gives "dev-clean-00000".
    std::string id_prefix;
};

/// Throws DataError when the configuration is infeasible.
void validate(const SyntheticConfig& cfg);

struct SyntheticPair {
    ActivationSet clean;
    ActivationSet adversarial;
};

/// Single-layer benchmark data (layer 0 of generate_synthetic_layers).
SyntheticPair generate_synthetic(const SyntheticConfig& cfg);

/// One pair per layer. Samples with the same id share token count and latent code
/// across layers; dictionaries and noise are layer-specific.
std::vector<SyntheticPair> generate_synthetic_layers(const SyntheticConfig& cfg);

/// Layer id used for layer `layer` of a `cfg.num_layers`-layer benchmark.
std::string synthetic_layer_id(const SyntheticConfig& cfg, std::size_t layer);

/// Row-major (dictionary_size x dim) atom matrix of one layer. Rows
/// [dictionary_size - planted_attack_atoms, dictionary_size) are the planted atoms.
std::vector<float> synthetic_dictionary(const SyntheticConfig& cfg, std::size_t layer = 0);

} // namespace saegis
