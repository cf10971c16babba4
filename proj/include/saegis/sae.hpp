#pragma once

#include "saegis/activation_io.hpp"

#include <Eigen/Dense>

#include <cstdint>
#include <filesystem>
#include <functional>
#include <span>
#include <utility>
#include <vector>

namespace saegis {

/// Rectified top-k sparse autoencoder.
///
///   encode(x) = TopK(ReLU(W_enc (x - b_dec) + b_enc))
///   decode(z) = W_dec z + b_dec
///
/// Matrices are row-major so they serialize without transposition. The scalar type
/// is a template parameter only so gradients can be checked in double precision;
/// models are stored and trained as BasicSae<float>.
template <typename T>
struct BasicSae {
    using Matrix = Eigen::Matrix<T, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
    using Vector = Eigen::Matrix<T, Eigen::Dynamic, 1>;

    std::size_t d_model = 0;
    std::size_t d_sae = 0;
    std::size_t k = 0;
    Matrix w_enc; ///< d_sae x d_model
    Vector b_enc; ///< d_sae
    Matrix w_dec; ///< d_model x d_sae
    Vector b_dec; ///< d_model

    template <typename U>
    BasicSae<U> cast() const {
        BasicSae<U> out;
        out.d_model = d_model;
        out.d_sae = d_sae;
        out.k = k;
        out.w_enc = w_enc.template cast<U>();
        out.b_enc = b_enc.template cast<U>();
        out.w_dec = w_dec.template cast<U>();
        out.b_dec = b_dec.template cast<U>();
        return out;
    }

    friend bool operator==(const BasicSae& a, const BasicSae& b) {
        return a.d_model == b.d_model && a.d_sae == b.d_sae && a.k == b.k && a.w_enc == b.w_enc &&
               a.b_enc == b.b_enc && a.w_dec == b.w_dec && a.b_dec == b.b_dec;
    }
};

using SaeModel = BasicSae<float>;

/// Throws DataError if shapes disagree, k > d_sae, or any parameter is non-finite.
template <typename T>
void validate(const BasicSae<T>& model);

/// Decoder columns are random unit vectors, the encoder is their transpose, biases are zero.
SaeModel init_model(std::size_t d_model, std::size_t d_sae, std::size_t k, std::uint64_t seed);

/// Sparse latent code. Indices strictly increasing, values strictly positive.
template <typename T>
struct BasicSparseCode {
    std::vector<std::uint32_t> indices;
    std::vector<T> values;
    std::size_t d_sae = 0;
};

using SparseCode = BasicSparseCode<float>;

/// Keeps the k largest strictly positive entries of `pre` (ties go to the lower index).
template <typename T>
BasicSparseCode<T> top_k_rectified(std::span<const T> pre, std::size_t k);

template <typename T>
BasicSparseCode<T> encode(const BasicSae<T>& model, std::span<const T> x);

template <typename T>
std::vector<T> decode(const BasicSae<T>& model, const BasicSparseCode<T>& code);

/// Mean over the batch of ||x - decode(encode(x))||^2 / d_model.
template <typename T>
double reconstruction_loss(const BasicSae<T>& model, std::span<const std::span<const T>> batch);

/// Loss over every token row of a sample (equivalently a batch of its rows).
double reconstruction_loss(const SaeModel& model, const SampleRecord& sample);

template <typename T>
struct SaeGradient {
    typename BasicSae<T>::Matrix w_enc;
    typename BasicSae<T>::Vector b_enc;
    typename BasicSae<T>::Matrix w_dec;
    typename BasicSae<T>::Vector b_dec;

    void reset(const BasicSae<T>& shape);
};

/// Reconstruction loss and its gradient w.r.t. all parameters. The top-k support is
/// treated as fixed at the evaluation point (straight-through on the selection mask).
/// Per-sample contributions are accumulated in batch order.
template <typename T>
T loss_and_gradient(const BasicSae<T>& model, std::span<const std::span<const T>> batch, SaeGradient<T>& grad);

struct TrainConfig {
    std::size_t steps = 3000;
    std::size_t batch_size = 16;
    double learning_rate = 1e-3;
    double beta1 = 0.9;
    double beta2 = 0.999;
    double epsilon = 1e-8;
    std::uint64_t seed = 0;
    std::size_t eval_every = 500;
    double held_out_fraction = 0.1;
    /// Called after every optimizer step with the 1-based step index and the updated model.
    std::function<void(std::size_t, const SaeModel&)> on_step;
    /// Called at every evaluation point with the step index and held-out loss.
    std::function<void(std::size_t, double)> on_eval;
};

struct TrainReport {
    std::vector<double> train_loss;                          ///< batch loss at each step
    std::vector<std::pair<std::size_t, double>> held_out_curve; ///< (step, held-out loss)
    double initial_held_out_loss = 0.0;
    double final_held_out_loss = 0.0;
    std::size_t dead_features = 0; ///< never active on held-out tokens after training
    std::size_t train_tokens = 0;
    std::size_t held_out_tokens = 0;
};

/// Trains on individual token rows with Adam, renormalizing decoder columns after every
/// update. Deterministic given cfg.seed. Throws NumericError on a non-finite loss.
std::pair<SaeModel, TrainReport> train(const SaeModel& model, const ActivationSet& data, const TrainConfig& cfg);

/// Binary model file: "SAEW", u32 version, u32 d_model, u32 d_sae, u32 k, then f32le
/// W_enc, b_enc, W_dec, b_dec.
void save_model(const SaeModel& model, const std::filesystem::path& path);
SaeModel load_model(const std::filesystem::path& path);

} // namespace saegis
