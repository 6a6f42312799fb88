#include "layermatch/data.hpp"

#include "layermatch/errors.hpp"

#include <fmt/format.h>

#include <algorithm>
#include <charconv>
#include <cmath>
#include <fstream>
#include <map>
#include <numbers>
#include <sstream>

namespace layermatch {

namespace {

std::vector<std::size_t> class_counts(std::size_t n, std::size_t num_classes) {
    std::vector<std::size_t> counts(num_classes, n / num_classes);
    for (std::size_t c = 0; c < n % num_classes; ++c) ++counts[c];
    return counts;
}

void add_noise(std::vector<double>& x, double sigma, Rng& rng) {
    if (sigma <= 0.0) return;
    std::normal_distribution<double> noise(0.0, sigma);
    for (double& v : x) v += noise(rng);
}

std::vector<Example> synthesize(const DatasetSpec& spec) {
    Rng rng(spec.seed);
    std::uniform_real_distribution<double> unit(0.0, 1.0);
    const auto counts = class_counts(spec.n_samples, spec.num_classes);
    std::vector<Example> out;
    out.reserve(spec.n_samples);

    for (std::size_t c = 0; c < spec.num_classes; ++c) {
        const int label = static_cast<int>(c);
        for (std::size_t i = 0; i < counts[c]; ++i) {
            std::vector<double> x(2);
            switch (spec.generator) {
            case Generator::two_moons: {
                const double t = std::numbers::pi * unit(rng);
                if (c == 0) {
                    x = {std::cos(t), std::sin(t)};
                } else {
                    x = {1.0 - std::cos(t), 0.5 - std::sin(t)};
                }
                break;
            }
            case Generator::gaussian_blobs: {
                const double angle = 2.0 * std::numbers::pi * static_cast<double>(c) /
                                     static_cast<double>(spec.num_classes);
                x = {2.5 * std::cos(angle), 2.5 * std::sin(angle)};
                break;
            }
            case Generator::circles: {
                const double radius = 0.5 * static_cast<double>(c + 1);
                const double t = 2.0 * std::numbers::pi * unit(rng);
                x = {radius * std::cos(t), radius * std::sin(t)};
                break;
            }
            case Generator::idx_file: break;
            }
            add_noise(x, spec.noise_sigma, rng);
            out.push_back({std::move(x), label, label});
        }
    }
    std::shuffle(out.begin(), out.end(), rng);
    return out;
}

std::uint32_t read_be32(std::string_view bytes, std::size_t offset, std::string_view what) {
    if (bytes.size() < offset + 4) throw FormatError(fmt::format("{}: truncated header", what));
    std::uint32_t v = 0;
    for (std::size_t i = 0; i < 4; ++i) v = (v << 8) | static_cast<unsigned char>(bytes[offset + i]);
    return v;
}

std::string slurp(const std::filesystem::path& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw Error(fmt::format("cannot open {}", path.string()));
    return {std::istreambuf_iterator<char>(in), std::istreambuf_iterator<char>()};
}

std::vector<std::string_view> split_fields(std::string_view line) {
    std::vector<std::string_view> fields;
    std::size_t start = 0;
    while (true) {
        const auto comma = line.find(',', start);
        fields.push_back(line.substr(start, comma - start));
        if (comma == std::string_view::npos) break;
        start = comma + 1;
    }
    return fields;
}

template <typename T>
T parse_number(std::string_view field, std::size_t line_no) {
    T value{};
    const auto [ptr, ec] = std::from_chars(field.data(), field.data() + field.size(), value);
    if (ec != std::errc() || ptr != field.data() + field.size()) {
        throw FormatError(fmt::format("csv line {}: cannot parse '{}'", line_no, field));
    }
    return value;
}

} // namespace

std::string_view to_string(Generator g) {
    switch (g) {
    case Generator::two_moons: return "two_moons";
    case Generator::gaussian_blobs: return "gaussian_blobs";
    case Generator::circles: return "circles";
    case Generator::idx_file: return "idx_file";
    }
    return "two_moons";
}

Generator parse_generator(std::string_view name) {
    if (name == "two_moons") return Generator::two_moons;
    if (name == "gaussian_blobs") return Generator::gaussian_blobs;
    if (name == "circles") return Generator::circles;
    if (name == "idx_file") return Generator::idx_file;
    throw ArgumentError(fmt::format("unknown generator '{}'", name));
}

void DatasetSpec::validate() const {
    if (num_classes < 2) throw ArgumentError("dataset: num_classes must be at least 2");
    if (!(noise_sigma >= 0.0) || !std::isfinite(noise_sigma)) throw ArgumentError("dataset: noise_sigma must be >= 0");
    if (generator == Generator::two_moons && num_classes != 2) {
        throw ArgumentError("dataset: two_moons has exactly 2 classes");
    }
    if (generator != Generator::idx_file && labels_per_class * num_classes > n_samples) {
        throw ArgumentError(fmt::format("dataset: {} labels per class x {} classes exceeds {} samples",
                                        labels_per_class, num_classes, n_samples));
    }
}

void AugmentationSpec::validate() const {
    if (!(weak_jitter_sigma >= 0.0)) throw ArgumentError("augmentation: weak_jitter_sigma must be >= 0");
    if (!(strong_jitter_sigma >= weak_jitter_sigma)) {
        throw ArgumentError("augmentation: strong_jitter_sigma must be >= weak_jitter_sigma");
    }
    if (!(strong_mask_prob >= 0.0 && strong_mask_prob <= 1.0)) {
        throw ArgumentError("augmentation: strong_mask_prob must lie in [0, 1]");
    }
}

std::vector<Example> generate(const DatasetSpec& spec) {
    spec.validate();
    if (spec.generator == Generator::idx_file) return load_idx(spec.idx_images, spec.idx_labels);
    return synthesize(spec);
}

SplitResult split(const std::vector<Example>& examples, std::size_t labels_per_class, std::uint64_t seed) {
    std::map<int, std::vector<std::size_t>> by_class;
    for (std::size_t i = 0; i < examples.size(); ++i) by_class[examples[i].true_label].push_back(i);

    Rng rng(seed);
    std::vector<bool> chosen(examples.size(), false);
    SplitResult result;
    for (auto& [label, members] : by_class) {
        if (members.size() < labels_per_class) {
            throw ArgumentError(fmt::format("split: class {} has {} members, {} requested", label, members.size(),
                                            labels_per_class));
        }
        std::shuffle(members.begin(), members.end(), rng);
        for (std::size_t i = 0; i < labels_per_class; ++i) {
            chosen[members[i]] = true;
            Example e = examples[members[i]];
            e.label = e.true_label;
            result.labeled.push_back(std::move(e));
        }
    }
    for (std::size_t i = 0; i < examples.size(); ++i) {
        if (chosen[i]) continue;
        Example e = examples[i];
        e.label.reset();
        result.unlabeled.push_back(std::move(e));
    }
    return result;
}

std::vector<double> weak_augment(std::span<const double> x, const AugmentationSpec& spec, Rng& rng) {
    std::vector<double> out(x.begin(), x.end());
    add_noise(out, spec.weak_jitter_sigma, rng);
    return out;
}

std::vector<double> strong_augment(std::span<const double> x, const AugmentationSpec& spec, Rng& rng) {
    std::vector<double> out(x.begin(), x.end());
    add_noise(out, spec.strong_jitter_sigma, rng);
    if (spec.strong_mask_prob > 0.0) {
        std::bernoulli_distribution drop(spec.strong_mask_prob);
        for (double& v : out) {
            if (drop(rng)) v = 0.0;
        }
    }
    return out;
}

Matrix weak_augment(const Matrix& x, const AugmentationSpec& spec, Rng& rng) {
    Matrix out = x;
    for (std::size_t r = 0; r < x.rows(); ++r) {
        const auto row = weak_augment(x.row(r), spec, rng);
        std::copy(row.begin(), row.end(), out.row(r).begin());
    }
    return out;
}

Matrix strong_augment(const Matrix& x, const AugmentationSpec& spec, Rng& rng) {
    Matrix out = x;
    for (std::size_t r = 0; r < x.rows(); ++r) {
        const auto row = strong_augment(x.row(r), spec, rng);
        std::copy(row.begin(), row.end(), out.row(r).begin());
    }
    return out;
}

std::vector<Example> parse_idx(std::string_view image_bytes, std::string_view label_bytes) {
    const std::uint32_t image_magic = read_be32(image_bytes, 0, "idx images");
    if (image_magic != 0x00000803u) {
        throw FormatError(fmt::format("idx images: bad magic 0x{:08x}", image_magic));
    }
    const std::uint32_t label_magic = read_be32(label_bytes, 0, "idx labels");
    if (label_magic != 0x00000801u) {
        throw FormatError(fmt::format("idx labels: bad magic 0x{:08x}", label_magic));
    }
    const std::size_t n_images = read_be32(image_bytes, 4, "idx images");
    const std::size_t rows = read_be32(image_bytes, 8, "idx images");
    const std::size_t cols = read_be32(image_bytes, 12, "idx images");
    const std::size_t n_labels = read_be32(label_bytes, 4, "idx labels");
    if (n_images != n_labels) {
        throw FormatError(fmt::format("idx: {} images but {} labels", n_images, n_labels));
    }
    const std::size_t pixels = rows * cols;
    if (pixels != 0 && (image_bytes.size() - 16) / pixels < n_images) {
        throw FormatError("idx images: file truncated");
    }
    if (label_bytes.size() - 8 < n_labels) throw FormatError("idx labels: file truncated");

    std::vector<Example> out(n_images);
    for (std::size_t i = 0; i < n_images; ++i) {
        auto& e = out[i];
        e.features.resize(pixels);
        for (std::size_t p = 0; p < pixels; ++p) {
            e.features[p] = static_cast<unsigned char>(image_bytes[16 + i * pixels + p]) / 255.0;
        }
        e.true_label = static_cast<unsigned char>(label_bytes[8 + i]);
        e.label = e.true_label;
    }
    return out;
}

std::vector<Example> load_idx(const std::filesystem::path& images_path, const std::filesystem::path& labels_path) {
    return parse_idx(slurp(images_path), slurp(labels_path));
}

void write_examples_csv(const std::filesystem::path& path, const std::vector<Example>& examples) {
    std::ofstream out(path, std::ios::trunc);
    if (!out) throw Error(fmt::format("cannot open {} for writing", path.string()));
    const std::size_t dim = examples.empty() ? 0 : examples.front().features.size();
    for (std::size_t k = 0; k < dim; ++k) out << 'f' << k << ',';
    out << "label,true_label\n";
    for (const auto& e : examples) {
        if (e.features.size() != dim) throw ShapeError("write_examples_csv: ragged feature lengths");
        for (double v : e.features) out << fmt::format("{}", v) << ',';
        if (e.label) out << *e.label;
        out << ',' << e.true_label << '\n';
    }
}

std::vector<Example> read_examples_csv(const std::filesystem::path& path) {
    std::ifstream in(path);
    if (!in) throw Error(fmt::format("cannot open {}", path.string()));
    std::string line;
    if (!std::getline(in, line)) throw FormatError("csv: missing header");
    const auto header = split_fields(line);
    if (header.size() < 2 || header[header.size() - 2] != "label" || header.back() != "true_label") {
        throw FormatError("csv: header must end with label,true_label");
    }
    const std::size_t dim = header.size() - 2;
    std::vector<Example> out;
    std::size_t line_no = 1;
    while (std::getline(in, line)) {
        ++line_no;
        if (line.empty()) continue;
        const auto fields = split_fields(line);
        if (fields.size() != dim + 2) throw FormatError(fmt::format("csv line {}: expected {} fields", line_no, dim + 2));
        Example e;
        for (std::size_t k = 0; k < dim; ++k) e.features.push_back(parse_number<double>(fields[k], line_no));
        if (!fields[dim].empty()) e.label = parse_number<int>(fields[dim], line_no);
        e.true_label = parse_number<int>(fields[dim + 1], line_no);
        out.push_back(std::move(e));
    }
    return out;
}

LabeledPool make_labeled_pool(const std::vector<Example>& examples) {
    LabeledPool pool;
    const std::size_t dim = examples.empty() ? 0 : examples.front().features.size();
    pool.inputs = Matrix(examples.size(), dim);
    for (std::size_t i = 0; i < examples.size(); ++i) {
        const auto& e = examples[i];
        if (!e.label) throw ArgumentError("labeled pool: example without a label");
        if (e.features.size() != dim) throw ShapeError("labeled pool: ragged feature lengths");
        std::copy(e.features.begin(), e.features.end(), pool.inputs.row(i).begin());
        pool.labels.push_back(*e.label);
    }
    return pool;
}

UnlabeledPool make_unlabeled_pool(const std::vector<Example>& examples) {
    UnlabeledPool pool;
    const std::size_t dim = examples.empty() ? 0 : examples.front().features.size();
    pool.inputs = Matrix(examples.size(), dim);
    for (std::size_t i = 0; i < examples.size(); ++i) {
        if (examples[i].features.size() != dim) throw ShapeError("unlabeled pool: ragged feature lengths");
        std::copy(examples[i].features.begin(), examples[i].features.end(), pool.inputs.row(i).begin());
    }
    return pool;
}

DiagnosticLabels make_diagnostic_labels(const std::vector<Example>& examples) {
    DiagnosticLabels d;
    d.true_labels.reserve(examples.size());
    for (const auto& e : examples) d.true_labels.push_back(e.true_label);
    return d;
}

std::vector<std::size_t> BatchSampler::Cursor::take(std::size_t count) {
    std::vector<std::size_t> picked;
    picked.reserve(count);
    while (picked.size() < count) {
        if (pos == order.size()) {
            std::shuffle(order.begin(), order.end(), rng);
            pos = 0;
        }
        picked.push_back(order[pos++]);
    }
    return picked;
}

BatchSampler::BatchSampler(LabeledPool labeled, UnlabeledPool unlabeled, std::size_t batch_labeled,
                           std::size_t batch_unlabeled, std::uint64_t seed)
    : labeled_(std::move(labeled)),
      unlabeled_(std::move(unlabeled)),
      batch_labeled_(batch_labeled),
      batch_unlabeled_(batch_unlabeled) {
    if (batch_labeled_ > 0 && labeled_.size() == 0) {
        throw ArgumentError("batch sampler: labeled batch size > 0 but labeled set is empty");
    }
    if (batch_unlabeled_ > 0 && unlabeled_.size() == 0) {
        throw ArgumentError("batch sampler: unlabeled batch size > 0 but unlabeled set is empty");
    }
    std::seed_seq labeled_seq{seed, std::uint64_t{0x4c}};
    std::seed_seq unlabeled_seq{seed, std::uint64_t{0x55}};
    labeled_cursor_.rng.seed(labeled_seq);
    unlabeled_cursor_.rng.seed(unlabeled_seq);
    for (std::size_t i = 0; i < labeled_.size(); ++i) labeled_cursor_.order.push_back(i);
    for (std::size_t i = 0; i < unlabeled_.size(); ++i) unlabeled_cursor_.order.push_back(i);
    // Force a shuffle before the first batch.
    labeled_cursor_.pos = labeled_cursor_.order.size();
    unlabeled_cursor_.pos = unlabeled_cursor_.order.size();
}

std::pair<LabeledBatch, UnlabeledBatch> BatchSampler::next() {
    LabeledBatch lb;
    const auto li = labeled_cursor_.take(batch_labeled_);
    lb.inputs = labeled_.inputs.gather_rows(li);
    lb.labels.reserve(li.size());
    for (std::size_t i : li) lb.labels.push_back(labeled_.labels[i]);

    UnlabeledBatch ub;
    ub.pool_indices = unlabeled_cursor_.take(batch_unlabeled_);
    ub.inputs = unlabeled_.inputs.gather_rows(ub.pool_indices);
    return {std::move(lb), std::move(ub)};
}

} // namespace layermatch
