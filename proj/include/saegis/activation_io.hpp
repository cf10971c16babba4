#pragma once

#include <cstddef>
#include <cstdint>
#include <filesystem>
#include <span>
#include <string>
#include <string_view>
#include <vector>

namespace saegis {

enum class Label { clean, adversarial, unknown };

std::string_view to_string(Label label);
/// Throws DataError for anything other than "clean", "adversarial" or "unknown".
Label parse_label(std::string_view text);

/// Image-token activations of one input: a row-major (num_tokens x dim) f32 matrix.
struct SampleRecord {
    std::string id;
    Label label = Label::unknown;
    std::size_t num_tokens = 0;
    std::vector<float> values;

    std::span<const float> row(std::size_t t, std::size_t dim) const {
        return {values.data() + t * dim, dim};
    }
};

/// Labeled activations captured at one layer location.
struct ActivationSet {
    std::string layer_id;
    std::size_t dim = 0;
    std::vector<SampleRecord> samples;

    std::size_t total_tokens() const;
};

/// Checks every ActivationSet invariant (matrix shapes, finiteness, unique ids,
/// at least one token per sample). Throws DataError naming the offending sample.
void validate(const ActivationSet& set);

/// Writes `manifest.json` and `data.bin` into `dir`, creating it if needed.
/// Refuses empty sets and non-finite payloads.
void write_activation_set(const ActivationSet& set, const std::filesystem::path& dir);

/// Reads a dump written by write_activation_set (or by an external extractor),
/// validating the manifest against the payload size.
ActivationSet read_activation_set(const std::filesystem::path& dir);

/// Copy of `set` with every label replaced by Label::unknown.
ActivationSet strip_labels(const ActivationSet& set);

/// Concatenates sets that share layer_id and dim. Sample ids must stay unique.
ActivationSet concat(std::span<const ActivationSet> sets);

} // namespace saegis
