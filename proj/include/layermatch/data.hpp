#pragma once

#include "layermatch/matrix.hpp"
#include "layermatch/netcore.hpp"

#include <cstdint>
#include <filesystem>
#include <optional>
#include <span>
#include <string>
#include <string_view>
#include <vector>

namespace layermatch {

/// One sample. `true_label` is always kept for diagnostics; `label` is empty for unlabeled data.
struct Example {
    std::vector<double> features;
    std::optional<int> label;
    int true_label = 0;
};

enum class Generator { two_moons, gaussian_blobs, circles, idx_file };

std::string_view to_string(Generator g);
Generator parse_generator(std::string_view name);

struct DatasetSpec {
    Generator generator = Generator::two_moons;
    std::size_t n_samples = 2008;
    double noise_sigma = 0.1;
    std::size_t num_classes = 2;
    std::uint64_t seed = 0;
    std::size_t labels_per_class = 4;
    // Only read when generator == idx_file.
    std::filesystem::path idx_images;
    std::filesystem::path idx_labels;

    void validate() const;
};

struct AugmentationSpec {
    double weak_jitter_sigma = 0.05;
    double strong_jitter_sigma = 0.25;
    double strong_mask_prob = 0.2;

    void validate() const;
};

/// Deterministic for a fixed spec; class counts differ by at most one.
std::vector<Example> generate(const DatasetSpec& spec);

struct SplitResult {
    std::vector<Example> labeled;
    std::vector<Example> unlabeled; // labels masked
};

/// Takes `labels_per_class` examples of every class (chosen by `seed`) as the labeled set.
SplitResult split(const std::vector<Example>& examples, std::size_t labels_per_class, std::uint64_t seed);

/// x + N(0, weak_sigma^2) per coordinate.
std::vector<double> weak_augment(std::span<const double> x, const AugmentationSpec& spec, Rng& rng);
/// x + N(0, strong_sigma^2), then each coordinate zeroed with probability strong_mask_prob.
std::vector<double> strong_augment(std::span<const double> x, const AugmentationSpec& spec, Rng& rng);

/// Row-wise versions; rows are processed in order so draws are reproducible.
Matrix weak_augment(const Matrix& x, const AugmentationSpec& spec, Rng& rng);
Matrix strong_augment(const Matrix& x, const AugmentationSpec& spec, Rng& rng);

/// Parses an IDX image/label file pair; pixels scaled to [0, 1].
std::vector<Example> load_idx(const std::filesystem::path& images_path, const std::filesystem::path& labels_path);
std::vector<Example> parse_idx(std::string_view image_bytes, std::string_view label_bytes);

/// Dataset cache with header `f0,...,fk,label,true_label`; an absent label is an empty field.
void write_examples_csv(const std::filesystem::path& path, const std::vector<Example>& examples);
std::vector<Example> read_examples_csv(const std::filesystem::path& path);

// Learner-facing views. Unlabeled pools carry no labels at all; the ground truth
// for unlabeled data lives in a separate DiagnosticLabels object that only
// metrics code receives.

struct LabeledPool {
    Matrix inputs;
    std::vector<int> labels;

    std::size_t size() const noexcept { return labels.size(); }
};

struct UnlabeledPool {
    Matrix inputs;

    std::size_t size() const noexcept { return inputs.rows(); }
};

struct DiagnosticLabels {
    std::vector<int> true_labels;
};

/// Throws ArgumentError if any example lacks a label.
LabeledPool make_labeled_pool(const std::vector<Example>& examples);
UnlabeledPool make_unlabeled_pool(const std::vector<Example>& examples);
DiagnosticLabels make_diagnostic_labels(const std::vector<Example>& examples);

struct LabeledBatch {
    Matrix inputs;
    std::vector<int> labels;
};

struct UnlabeledBatch {
    Matrix inputs;
    /// Row positions in the source UnlabeledPool (for diagnostic lookups).
    std::vector<std::size_t> pool_indices;
};

/// Endless deterministic stream of (labeled, unlabeled) batches. Each pool is walked
/// in a fresh random permutation per epoch; batches may straddle epoch boundaries.
class BatchSampler {
public:
    BatchSampler(LabeledPool labeled, UnlabeledPool unlabeled, std::size_t batch_labeled,
                 std::size_t batch_unlabeled, std::uint64_t seed);

    std::pair<LabeledBatch, UnlabeledBatch> next();

private:
    struct Cursor {
        std::vector<std::size_t> order;
        std::size_t pos = 0;
        Rng rng;

        std::vector<std::size_t> take(std::size_t count);
    };

    LabeledPool labeled_;
    UnlabeledPool unlabeled_;
    std::size_t batch_labeled_;
    std::size_t batch_unlabeled_;
    Cursor labeled_cursor_;
    Cursor unlabeled_cursor_;
};

} // namespace layermatch
