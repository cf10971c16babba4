#include "saegis/activation_io.hpp"

#include "saegis/error.hpp"

#include <bit>
#include <cmath>
#include <cstring>
#include <fstream>
#include <unordered_set>

#include <json.hpp>

namespace saegis {

namespace fs = std::filesystem;
using json = nlohmann::json;

namespace {

constexpr const char* kMagic = "SAEG";
constexpr int kVersion = 1;
constexpr const char* kDtype = "f32le";

std::uint32_t to_little_endian(std::uint32_t v) {
    if constexpr (std::endian::native == std::endian::big) {
        v = ((v & 0xFF) << 24) | ((v & 0xFF00) << 8) | ((v >> 8) & 0xFF00) | (v >> 24);
    }
    return v;
}

void encode_f32le(std::span<const float> src, std::vector<char>& out) {
    const std::size_t base = out.size();
    out.resize(base + src.size() * 4);
    for (std::size_t i = 0; i < src.size(); ++i) {
        std::uint32_t bits = to_little_endian(std::bit_cast<std::uint32_t>(src[i]));
        std::memcpy(out.data() + base + i * 4, &bits, 4);
    }
}

void decode_f32le(const char* src, std::size_t count, std::vector<float>& out) {
    out.resize(count);
    for (std::size_t i = 0; i < count; ++i) {
        std::uint32_t bits;
        std::memcpy(&bits, src + i * 4, 4);
        out[i] = std::bit_cast<float>(to_little_endian(bits));
    }
}

template <typename T>
T require_field(const json& j, const char* key, const std::string& where) {
    if (!j.contains(key)) {
        throw DataError(where + ": missing field '" + key + "'");
    }
    try {
        return j.at(key).get<T>();
    } catch (const json::exception& e) {
        throw DataError(where + ": bad field '" + key + "': " + e.what());
    }
}

} // namespace

std::string_view to_string(Label label) {
    switch (label) {
    case Label::clean: return "clean";
    case Label::adversarial: return "adversarial";
    case Label::unknown: return "unknown";
    }
    return "unknown";
}

Label parse_label(std::string_view text) {
    if (text == "clean") return Label::clean;
    if (text == "adversarial") return Label::adversarial;
    if (text == "unknown") return Label::unknown;
    throw DataError("unknown label '" + std::string(text) + "'");
}

std::size_t ActivationSet::total_tokens() const {
    std::size_t n = 0;
    for (const auto& s : samples) n += s.num_tokens;
    return n;
}

void validate(const ActivationSet& set) {
    if (set.dim == 0) throw DataError("activation set '" + set.layer_id + "': dim must be positive");
    std::unordered_set<std::string> ids;
    for (const auto& s : set.samples) {
        if (!ids.insert(s.id).second) throw DataError("duplicate sample id '" + s.id + "'");
        if (s.num_tokens == 0) throw DataError("sample '" + s.id + "' has no tokens");
        if (s.values.size() != s.num_tokens * set.dim) {
            throw DataError("sample '" + s.id + "': matrix has " + std::to_string(s.values.size()) +
                            " values, expected " + std::to_string(s.num_tokens) + "x" +
                            std::to_string(set.dim));
        }
        for (float v : s.values) {
            if (!std::isfinite(v)) throw DataError("sample '" + s.id + "' contains a non-finite value");
        }
    }
}

void write_activation_set(const ActivationSet& set, const fs::path& dir) {
    if (set.samples.empty()) throw DataError("empty set");
    validate(set);

    json manifest;
    manifest["magic"] = kMagic;
    manifest["version"] = kVersion;
    manifest["layer_id"] = set.layer_id;
    manifest["dim"] = set.dim;
    manifest["dtype"] = kDtype;
    manifest["samples"] = json::array();

    std::vector<char> payload;
    payload.reserve(set.total_tokens() * set.dim * 4);
    for (const auto& s : set.samples) {
        const std::size_t offset = payload.size();
        encode_f32le(s.values, payload);
        manifest["samples"].push_back({{"id", s.id},
                                       {"label", std::string(to_string(s.label))},
                                       {"num_tokens", s.num_tokens},
                                       {"offset", offset},
                                       {"byte_len", payload.size() - offset}});
    }

    std::error_code ec;
    fs::create_directories(dir, ec);
    if (ec) throw DataError("cannot create directory " + dir.string() + ": " + ec.message());

    std::ofstream data(dir / "data.bin", std::ios::binary | std::ios::trunc);
    data.write(payload.data(), static_cast<std::streamsize>(payload.size()));
    if (!data) throw DataError("failed writing " + (dir / "data.bin").string());

    std::ofstream meta(dir / "manifest.json", std::ios::trunc);
    meta << manifest.dump(2) << '\n';
    if (!meta) throw DataError("failed writing " + (dir / "manifest.json").string());
}

ActivationSet read_activation_set(const fs::path& dir) {
    const fs::path manifest_path = dir / "manifest.json";
    const fs::path data_path = dir / "data.bin";

    std::ifstream meta(manifest_path);
    if (!meta) throw DataError("cannot open " + manifest_path.string());
    json manifest;
    try {
        manifest = json::parse(meta);
    } catch (const json::exception& e) {
        throw DataError(manifest_path.string() + ": " + e.what());
    }

    const std::string where = manifest_path.string();
    if (require_field<std::string>(manifest, "magic", where) != kMagic) {
        throw DataError(where + ": bad magic");
    }
    if (require_field<int>(manifest, "version", where) != kVersion) {
        throw DataError(where + ": unsupported version");
    }
    if (require_field<std::string>(manifest, "dtype", where) != kDtype) {
        throw DataError(where + ": unsupported dtype");
    }

    ActivationSet set;
    set.layer_id = require_field<std::string>(manifest, "layer_id", where);
    const auto dim = require_field<long long>(manifest, "dim", where);
    if (dim <= 0) throw DataError(where + ": dim must be positive");
    set.dim = static_cast<std::size_t>(dim);

    std::ifstream data(data_path, std::ios::binary);
    if (!data) throw DataError("cannot open " + data_path.string());
    std::vector<char> payload((std::istreambuf_iterator<char>(data)), std::istreambuf_iterator<char>());

    const json& samples = manifest.contains("samples") ? manifest["samples"] : json();
    if (!samples.is_array()) throw DataError(where + ": 'samples' must be an array");

    std::size_t expected_offset = 0;
    for (const auto& entry : samples) {
        SampleRecord s;
        s.id = require_field<std::string>(entry, "id", where);
        const std::string sample_where = where + " sample '" + s.id + "'";
        s.label = parse_label(require_field<std::string>(entry, "label", sample_where));
        const auto num_tokens = require_field<long long>(entry, "num_tokens", sample_where);
        const auto offset = require_field<long long>(entry, "offset", sample_where);
        const auto byte_len = require_field<long long>(entry, "byte_len", sample_where);
        if (num_tokens <= 0) throw DataError(sample_where + ": num_tokens must be positive");
        s.num_tokens = static_cast<std::size_t>(num_tokens);
        const std::size_t expected_len = s.num_tokens * set.dim * 4;
        if (byte_len < 0 || static_cast<std::size_t>(byte_len) != expected_len) {
            throw DataError(sample_where + ": byte_len " + std::to_string(byte_len) +
                            " disagrees with num_tokens*dim*4 = " + std::to_string(expected_len));
        }
        if (offset < 0 || static_cast<std::size_t>(offset) != expected_offset) {
            throw DataError(sample_where + ": offset " + std::to_string(offset) + " expected " +
                            std::to_string(expected_offset));
        }
        if (expected_offset + expected_len > payload.size()) {
            throw DataError(sample_where + ": data.bin truncated (" + std::to_string(payload.size()) +
                            " bytes, need " + std::to_string(expected_offset + expected_len) + ")");
        }
        decode_f32le(payload.data() + expected_offset, s.num_tokens * set.dim, s.values);
        expected_offset += expected_len;
        set.samples.push_back(std::move(s));
    }
    if (expected_offset != payload.size()) {
        throw DataError(data_path.string() + ": " + std::to_string(payload.size() - expected_offset) +
                        " trailing bytes not described by the manifest");
    }
    validate(set);
    return set;
}

ActivationSet strip_labels(const ActivationSet& set) {
    ActivationSet out = set;
    for (auto& s : out.samples) s.label = Label::unknown;
    return out;
}

ActivationSet concat(std::span<const ActivationSet> sets) {
    if (sets.empty()) throw DataError("concat: no sets given");
    ActivationSet out;
    out.layer_id = sets.front().layer_id;
    out.dim = sets.front().dim;
    std::unordered_set<std::string> ids;
    for (const auto& set : sets) {
        if (set.dim != out.dim || set.layer_id != out.layer_id) {
            throw DataError("concat: sets disagree on layer ('" + out.layer_id + "' vs '" + set.layer_id +
                            "') or dim");
        }
        for (const auto& s : set.samples) {
            if (!ids.insert(s.id).second) throw DataError("concat: duplicate sample id '" + s.id + "'");
            out.samples.push_back(s);
        }
    }
    return out;
}

} // namespace saegis
