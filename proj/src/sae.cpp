#include "saegis/sae.hpp"

#include "saegis/error.hpp"

#include <algorithm>
#include <bit>
#include <cmath>
#include <cstring>
#include <fstream>
#include <numeric>
#include <random>
#include <string>

namespace saegis {

namespace {

template <typename T>
void check_input(const BasicSae<T>& model, std::size_t size) {
    if (size != model.d_model) {
        throw DataError("dimension mismatch: input has " + std::to_string(size) + " entries, model expects " +
                        std::to_string(model.d_model));
    }
}

template <typename T>
using ConstVecMap = Eigen::Map<const Eigen::Matrix<T, Eigen::Dynamic, 1>>;

template <typename T>
typename BasicSae<T>::Vector preactivations(const BasicSae<T>& model, std::span<const T> x) {
    ConstVecMap<T> xv(x.data(), static_cast<Eigen::Index>(x.size()));
    return model.w_enc * (xv - model.b_dec) + model.b_enc;
}

template <typename T>
typename BasicSae<T>::Vector reconstruct(const BasicSae<T>& model, const BasicSparseCode<T>& code) {
    typename BasicSae<T>::Vector out = model.b_dec;
    for (std::size_t j = 0; j < code.indices.size(); ++j) {
        out.noalias() += code.values[j] * model.w_dec.col(code.indices[j]);
    }
    return out;
}

} // namespace

template <typename T>
void validate(const BasicSae<T>& model) {
    const auto dm = static_cast<Eigen::Index>(model.d_model);
    const auto ds = static_cast<Eigen::Index>(model.d_sae);
    if (model.d_model == 0 || model.d_sae == 0) throw DataError("sae: widths must be positive");
    if (model.k == 0 || model.k > model.d_sae) throw DataError("sae: k must be in [1, d_sae]");
    if (model.w_enc.rows() != ds || model.w_enc.cols() != dm || model.b_enc.size() != ds ||
        model.w_dec.rows() != dm || model.w_dec.cols() != ds || model.b_dec.size() != dm) {
        throw DataError("sae: parameter shapes disagree with d_model/d_sae");
    }
    if (!model.w_enc.allFinite() || !model.b_enc.allFinite() || !model.w_dec.allFinite() ||
        !model.b_dec.allFinite()) {
        throw DataError("sae: non-finite parameters");
    }
}

SaeModel init_model(std::size_t d_model, std::size_t d_sae, std::size_t k, std::uint64_t seed) {
    if (d_model == 0 || d_sae == 0) throw DataError("sae: widths must be positive");
    if (k == 0 || k > d_sae) throw DataError("sae: k must be in [1, d_sae]");
    std::mt19937_64 rng(seed);
    std::normal_distribution<double> normal(0.0, 1.0);

    SaeModel m;
    m.d_model = d_model;
    m.d_sae = d_sae;
    m.k = k;
    m.w_dec.resize(static_cast<Eigen::Index>(d_model), static_cast<Eigen::Index>(d_sae));
    std::vector<double> col(d_model);
    for (std::size_t j = 0; j < d_sae; ++j) {
        double norm2 = 0.0;
        while (norm2 == 0.0) {
            for (auto& v : col) {
                v = normal(rng);
                norm2 += v * v;
            }
        }
        const double inv = 1.0 / std::sqrt(norm2);
        for (std::size_t i = 0; i < d_model; ++i) {
            m.w_dec(static_cast<Eigen::Index>(i), static_cast<Eigen::Index>(j)) = static_cast<float>(col[i] * inv);
        }
    }
    m.w_enc = m.w_dec.transpose();
    m.b_enc = SaeModel::Vector::Zero(static_cast<Eigen::Index>(d_sae));
    m.b_dec = SaeModel::Vector::Zero(static_cast<Eigen::Index>(d_model));
    return m;
}

template <typename T>
BasicSparseCode<T> top_k_rectified(std::span<const T> pre, std::size_t k) {
    std::vector<std::uint32_t> positive;
    positive.reserve(pre.size());
    for (std::size_t i = 0; i < pre.size(); ++i) {
        if (pre[i] > T(0)) positive.push_back(static_cast<std::uint32_t>(i));
    }
    auto larger = [&](std::uint32_t a, std::uint32_t b) {
        return pre[a] > pre[b] || (pre[a] == pre[b] && a < b);
    };
    if (positive.size() > k) {
        std::nth_element(positive.begin(), positive.begin() + static_cast<std::ptrdiff_t>(k), positive.end(), larger);
        positive.resize(k);
    }
    std::sort(positive.begin(), positive.end());

    BasicSparseCode<T> code;
    code.d_sae = pre.size();
    code.indices = std::move(positive);
    code.values.reserve(code.indices.size());
    for (auto i : code.indices) code.values.push_back(pre[i]);
    return code;
}

template <typename T>
BasicSparseCode<T> encode(const BasicSae<T>& model, std::span<const T> x) {
    check_input(model, x.size());
    const auto pre = preactivations(model, x);
    return top_k_rectified<T>(std::span<const T>(pre.data(), static_cast<std::size_t>(pre.size())), model.k);
}

template <typename T>
std::vector<T> decode(const BasicSae<T>& model, const BasicSparseCode<T>& code) {
    if (code.d_sae != model.d_sae) {
        throw DataError("dimension mismatch: code has d_sae " + std::to_string(code.d_sae) + ", model has " +
                        std::to_string(model.d_sae));
    }
    if (code.indices.size() != code.values.size()) throw DataError("sparse code: index/value length mismatch");
    for (auto i : code.indices) {
        if (i >= model.d_sae) throw DataError("sparse code: index out of range");
    }
    const auto out = reconstruct(model, code);
    return {out.data(), out.data() + out.size()};
}

template <typename T>
double reconstruction_loss(const BasicSae<T>& model, std::span<const std::span<const T>> batch) {
    if (batch.empty()) throw DataError("reconstruction_loss: empty batch");
    double total = 0.0;
    for (const auto& x : batch) {
        const auto code = encode(model, x);
        const auto xhat = reconstruct(model, code);
        ConstVecMap<T> xv(x.data(), static_cast<Eigen::Index>(x.size()));
        total += static_cast<double>((xv - xhat).squaredNorm()) / static_cast<double>(model.d_model);
    }
    return total / static_cast<double>(batch.size());
}

double reconstruction_loss(const SaeModel& model, const SampleRecord& sample) {
    std::vector<std::span<const float>> rows;
    rows.reserve(sample.num_tokens);
    for (std::size_t t = 0; t < sample.num_tokens; ++t) rows.push_back(sample.row(t, model.d_model));
    if (sample.values.size() != sample.num_tokens * model.d_model) {
        throw DataError("dimension mismatch: sample '" + sample.id + "' does not match model width");
    }
    return reconstruction_loss<float>(model, rows);
}

template <typename T>
void SaeGradient<T>::reset(const BasicSae<T>& shape) {
    w_enc.setZero(shape.w_enc.rows(), shape.w_enc.cols());
    b_enc.setZero(shape.b_enc.size());
    w_dec.setZero(shape.w_dec.rows(), shape.w_dec.cols());
    b_dec.setZero(shape.b_dec.size());
}

template <typename T>
T loss_and_gradient(const BasicSae<T>& model, std::span<const std::span<const T>> batch, SaeGradient<T>& grad) {
    if (batch.empty()) throw DataError("loss_and_gradient: empty batch");
    grad.reset(model);
    const T inv_bd = T(1) / (static_cast<T>(batch.size()) * static_cast<T>(model.d_model));
    T loss = 0;

    typename BasicSae<T>::Vector centered;
    for (const auto& x : batch) {
        check_input(model, x.size());
        ConstVecMap<T> xv(x.data(), static_cast<Eigen::Index>(x.size()));
        centered = xv - model.b_dec;
        const typename BasicSae<T>::Vector pre = model.w_enc * centered + model.b_enc;
        const auto code =
            top_k_rectified<T>(std::span<const T>(pre.data(), static_cast<std::size_t>(pre.size())), model.k);
        const typename BasicSae<T>::Vector err = reconstruct(model, code) - xv;
        loss += err.squaredNorm() * inv_bd;

        // dL/dxhat; flows into b_dec directly and back through the selected latents.
        const typename BasicSae<T>::Vector g = (T(2) * inv_bd) * err;
        grad.b_dec += g;
        for (std::size_t s = 0; s < code.indices.size(); ++s) {
            const auto j = static_cast<Eigen::Index>(code.indices[s]);
            grad.w_dec.col(j) += code.values[s] * g;
            const T h = model.w_dec.col(j).dot(g);
            grad.w_enc.row(j) += h * centered.transpose();
            grad.b_enc(j) += h;
            grad.b_dec -= h * model.w_enc.row(j).transpose();
        }
    }
    return loss;
}

namespace {

struct Adam {
    double beta1, beta2, epsilon, lr;
    std::size_t t = 0;

    template <typename Param>
    struct Moments {
        Param m, v;
    };

    template <typename Param, typename Grad>
    void step(Param& param, const Grad& grad, Moments<Param>& mom) const {
        const float b1 = static_cast<float>(beta1);
        const float b2 = static_cast<float>(beta2);
        mom.m = b1 * mom.m + (1.0f - b1) * grad;
        mom.v = b2 * mom.v + (1.0f - b2) * grad.cwiseProduct(grad);
        const float c1 = static_cast<float>(1.0 - std::pow(beta1, static_cast<double>(t)));
        const float c2 = static_cast<float>(1.0 - std::pow(beta2, static_cast<double>(t)));
        const float step_size = static_cast<float>(lr) / c1;
        param.array() -= step_size * mom.m.array() /
                         ((mom.v.array() / c2).sqrt() + static_cast<float>(epsilon));
    }
};

void normalize_decoder(SaeModel& model) {
    for (Eigen::Index j = 0; j < model.w_dec.cols(); ++j) {
        const float norm = model.w_dec.col(j).norm();
        if (norm > 0.0f) model.w_dec.col(j) /= norm;
    }
}

std::size_t count_dead(const SaeModel& model, const std::vector<std::span<const float>>& rows) {
    std::vector<char> alive(model.d_sae, 0);
    for (const auto& x : rows) {
        for (auto i : encode<float>(model, x).indices) alive[i] = 1;
    }
    return static_cast<std::size_t>(std::count(alive.begin(), alive.end(), 0));
}

} // namespace

std::pair<SaeModel, TrainReport> train(const SaeModel& initial, const ActivationSet& data, const TrainConfig& cfg) {
    validate(initial);
    if (data.dim != initial.d_model) {
        throw DataError("train: data dim " + std::to_string(data.dim) + " != model d_model " +
                        std::to_string(initial.d_model));
    }
    if (!(cfg.learning_rate > 0.0)) throw DataError("train: learning_rate must be positive");
    if (!(cfg.held_out_fraction > 0.0 && cfg.held_out_fraction < 1.0)) {
        throw DataError("train: held_out_fraction must be in (0, 1)");
    }
    if (cfg.batch_size == 0) throw DataError("train: batch_size must be positive");

    std::vector<std::span<const float>> rows;
    rows.reserve(data.total_tokens());
    for (const auto& s : data.samples) {
        if (s.values.size() != s.num_tokens * data.dim) throw DataError("train: malformed sample '" + s.id + "'");
        for (std::size_t t = 0; t < s.num_tokens; ++t) rows.push_back(s.row(t, data.dim));
    }

    std::mt19937_64 rng(cfg.seed);
    std::shuffle(rows.begin(), rows.end(), rng);
    const std::size_t held =
        std::max<std::size_t>(1, static_cast<std::size_t>(cfg.held_out_fraction * static_cast<double>(rows.size())));
    if (rows.size() < held + cfg.batch_size) {
        throw DataError("train: need at least one batch of " + std::to_string(cfg.batch_size) +
                        " training tokens plus a held-out split; have " + std::to_string(rows.size()) + " tokens");
    }
    const std::vector<std::span<const float>> held_out(rows.begin(), rows.begin() + static_cast<std::ptrdiff_t>(held));
    std::vector<std::span<const float>> pool(rows.begin() + static_cast<std::ptrdiff_t>(held), rows.end());

    TrainReport report;
    report.train_tokens = pool.size();
    report.held_out_tokens = held_out.size();
    report.train_loss.reserve(cfg.steps);

    SaeModel model = initial;
    auto evaluate = [&](std::size_t step) {
        const double loss = reconstruction_loss<float>(model, held_out);
        report.held_out_curve.emplace_back(step, loss);
        if (cfg.on_eval) cfg.on_eval(step, loss);
        return loss;
    };
    report.initial_held_out_loss = evaluate(0);

    Adam adam{cfg.beta1, cfg.beta2, cfg.epsilon, cfg.learning_rate};
    Adam::Moments<SaeModel::Matrix> m_w_enc{SaeModel::Matrix::Zero(model.w_enc.rows(), model.w_enc.cols()),
                                            SaeModel::Matrix::Zero(model.w_enc.rows(), model.w_enc.cols())};
    Adam::Moments<SaeModel::Vector> m_b_enc{SaeModel::Vector::Zero(model.b_enc.size()),
                                            SaeModel::Vector::Zero(model.b_enc.size())};
    Adam::Moments<SaeModel::Matrix> m_w_dec{SaeModel::Matrix::Zero(model.w_dec.rows(), model.w_dec.cols()),
                                            SaeModel::Matrix::Zero(model.w_dec.rows(), model.w_dec.cols())};
    Adam::Moments<SaeModel::Vector> m_b_dec{SaeModel::Vector::Zero(model.b_dec.size()),
                                            SaeModel::Vector::Zero(model.b_dec.size())};

    SaeGradient<float> grad;
    std::size_t cursor = pool.size(); // forces a shuffle before the first batch
    for (std::size_t step = 1; step <= cfg.steps; ++step) {
        if (cursor + cfg.batch_size > pool.size()) {
            std::shuffle(pool.begin(), pool.end(), rng);
            cursor = 0;
        }
        const std::span<const std::span<const float>> batch(pool.data() + cursor, cfg.batch_size);
        cursor += cfg.batch_size;

        const float loss = loss_and_gradient<float>(model, batch, grad);
        if (!std::isfinite(loss)) {
            throw NumericError("train: non-finite loss at step " + std::to_string(step));
        }
        report.train_loss.push_back(loss);

        adam.t = step;
        adam.step(model.w_enc, grad.w_enc, m_w_enc);
        adam.step(model.b_enc, grad.b_enc, m_b_enc);
        adam.step(model.w_dec, grad.w_dec, m_w_dec);
        adam.step(model.b_dec, grad.b_dec, m_b_dec);
        normalize_decoder(model);

        if (cfg.on_step) cfg.on_step(step, model);
        if (cfg.eval_every > 0 && step % cfg.eval_every == 0 && step != cfg.steps) evaluate(step);
    }

    report.final_held_out_loss = cfg.steps == 0 ? report.initial_held_out_loss : evaluate(cfg.steps);
    if (!std::isfinite(report.final_held_out_loss)) {
        throw NumericError("train: non-finite held-out loss after step " + std::to_string(cfg.steps));
    }
    report.dead_features = count_dead(model, held_out);
    return {std::move(model), std::move(report)};
}

namespace {

constexpr char kModelMagic[4] = {'S', 'A', 'E', 'W'};
constexpr std::uint32_t kModelVersion = 1;

std::uint32_t le32(std::uint32_t v) {
    if constexpr (std::endian::native == std::endian::big) {
        v = ((v & 0xFF) << 24) | ((v & 0xFF00) << 8) | ((v >> 8) & 0xFF00) | (v >> 24);
    }
    return v;
}

void put_u32(std::string& out, std::uint32_t v) {
    v = le32(v);
    out.append(reinterpret_cast<const char*>(&v), 4);
}

void put_floats(std::string& out, const float* data, std::size_t n) {
    for (std::size_t i = 0; i < n; ++i) put_u32(out, std::bit_cast<std::uint32_t>(data[i]));
}

class Reader {
public:
    Reader(const std::string& buf, std::string where) : buf_(buf), where_(std::move(where)) {}

    std::uint32_t u32() {
        need(4);
        std::uint32_t v;
        std::memcpy(&v, buf_.data() + pos_, 4);
        pos_ += 4;
        return le32(v);
    }

    void floats(float* out, std::size_t n) {
        need(n * 4);
        for (std::size_t i = 0; i < n; ++i) out[i] = std::bit_cast<float>(u32());
    }

    std::size_t remaining() const { return buf_.size() - pos_; }

private:
    void need(std::size_t n) const {
        if (pos_ + n > buf_.size()) {
            throw DataError(where_ + ": shape mismatch, file holds " + std::to_string(buf_.size()) +
                            " bytes but the header implies more");
        }
    }

    const std::string& buf_;
    std::string where_;
    std::size_t pos_ = 0;
};

} // namespace

void save_model(const SaeModel& model, const std::filesystem::path& path) {
    validate(model);
    std::string out;
    out.append(kModelMagic, 4);
    put_u32(out, kModelVersion);
    put_u32(out, static_cast<std::uint32_t>(model.d_model));
    put_u32(out, static_cast<std::uint32_t>(model.d_sae));
    put_u32(out, static_cast<std::uint32_t>(model.k));
    put_floats(out, model.w_enc.data(), static_cast<std::size_t>(model.w_enc.size()));
    put_floats(out, model.b_enc.data(), static_cast<std::size_t>(model.b_enc.size()));
    put_floats(out, model.w_dec.data(), static_cast<std::size_t>(model.w_dec.size()));
    put_floats(out, model.b_dec.data(), static_cast<std::size_t>(model.b_dec.size()));

    if (path.has_parent_path()) std::filesystem::create_directories(path.parent_path());
    std::ofstream f(path, std::ios::binary | std::ios::trunc);
    f.write(out.data(), static_cast<std::streamsize>(out.size()));
    if (!f) throw DataError("failed writing " + path.string());
}

SaeModel load_model(const std::filesystem::path& path) {
    std::ifstream f(path, std::ios::binary);
    if (!f) throw DataError("cannot open " + path.string());
    const std::string buf((std::istreambuf_iterator<char>(f)), std::istreambuf_iterator<char>());
    const std::string where = path.string();
    if (buf.size() < 4 || std::memcmp(buf.data(), kModelMagic, 4) != 0) throw DataError(where + ": bad magic");

    const std::string body = buf.substr(4);
    Reader r(body, where);
    if (r.u32() != kModelVersion) throw DataError(where + ": unsupported version");
    SaeModel m;
    m.d_model = r.u32();
    m.d_sae = r.u32();
    m.k = r.u32();
    if (m.d_model == 0 || m.d_sae == 0 || m.k == 0 || m.k > m.d_sae) {
        throw DataError(where + ": invalid header (d_model, d_sae, k)");
    }
    const std::size_t expected = 4 * (2 * m.d_model * m.d_sae + m.d_sae + m.d_model);
    if (r.remaining() != expected) {
        throw DataError(where + ": shape mismatch, header implies " + std::to_string(expected) +
                        " parameter bytes but file holds " + std::to_string(r.remaining()));
    }
    const auto dm = static_cast<Eigen::Index>(m.d_model);
    const auto ds = static_cast<Eigen::Index>(m.d_sae);
    m.w_enc.resize(ds, dm);
    m.b_enc.resize(ds);
    m.w_dec.resize(dm, ds);
    m.b_dec.resize(dm);
    r.floats(m.w_enc.data(), static_cast<std::size_t>(m.w_enc.size()));
    r.floats(m.b_enc.data(), static_cast<std::size_t>(m.b_enc.size()));
    r.floats(m.w_dec.data(), static_cast<std::size_t>(m.w_dec.size()));
    r.floats(m.b_dec.data(), static_cast<std::size_t>(m.b_dec.size()));
    validate(m);
    return m;
}

#define SAEGIS_INSTANTIATE(T)                                                                              \
    template void validate<T>(const BasicSae<T>&);                                                         \
    template BasicSparseCode<T> top_k_rectified<T>(std::span<const T>, std::size_t);                       \
    template BasicSparseCode<T> encode<T>(const BasicSae<T>&, std::span<const T>);                         \
    template std::vector<T> decode<T>(const BasicSae<T>&, const BasicSparseCode<T>&);                      \
    template double reconstruction_loss<T>(const BasicSae<T>&, std::span<const std::span<const T>>);       \
    template struct SaeGradient<T>;                                                                        \
    template T loss_and_gradient<T>(const BasicSae<T>&, std::span<const std::span<const T>>, SaeGradient<T>&);

SAEGIS_INSTANTIATE(float)
SAEGIS_INSTANTIATE(double)

#undef SAEGIS_INSTANTIATE

} // namespace saegis
