#pragma once

#include "layermatch/data.hpp"
#include "layermatch/trainer.hpp"

#include <cstdint>
#include <filesystem>
#include <map>
#include <string>
#include <string_view>
#include <utility>
#include <vector>

namespace layermatch {

/// One swept key and the values it takes, e.g. `sweep.avg_period = 1, 2048, 204800`.
struct SweepAxis {
    std::string key;
    std::vector<std::string> values;
};

struct ExperimentPlan {
    TrainConfig base;
    DatasetSpec dataset;
    std::uint64_t data_seed = 0;
    std::size_t n_test = 1000;
    std::filesystem::path idx_test_images;
    std::filesystem::path idx_test_labels;

    std::vector<Method> methods;
    std::vector<std::uint64_t> seeds;
    std::vector<SweepAxis> sweeps;
    std::filesystem::path output_dir = "runs";
};

/// Flat `key = value` text, `#` starts a comment. Unknown keys, malformed values
/// and out-of-range values throw ConfigError naming the key. `overrides` are applied
/// after the file, in key order.
ExperimentPlan parse_config_text(std::string_view text, const std::map<std::string, std::string>& overrides = {});
ExperimentPlan parse_config_file(const std::filesystem::path& path,
                                 const std::map<std::string, std::string>& overrides = {});

/// Sets one key on a plan. Used by the parser and for sweep points.
void apply_setting(ExperimentPlan& plan, std::string_view key, std::string_view value);

/// Every key with its resolved value, one `key = value` per line, in documented order.
std::string dump_plan(const ExperimentPlan& plan);

/// Names of all accepted keys, in documented order.
std::vector<std::string> config_keys();

/// A single run of the matrix.
struct Cell {
    Method method = Method::layermatch;
    std::uint64_t seed = 0;
    std::vector<std::pair<std::string, std::string>> sweep_point;

    /// Directory-safe identifier, e.g. `layermatch__avg_period-2048__seed0`.
    std::string name() const;
    /// Sweep part only (`avg_period=2048`), empty without sweeps.
    std::string variant() const;
};

/// methods x seeds x sweep points, nested in that order (method outermost, last sweep axis innermost).
std::vector<Cell> enumerate_cells(const ExperimentPlan& plan);

/// The plan with the cell's method, seed and sweep values applied.
ExperimentPlan resolve_cell(const ExperimentPlan& plan, const Cell& cell);

/// Generates / loads the dataset, splits it with `split_seed`, and builds the test set.
TrainingData build_training_data(const ExperimentPlan& plan, std::uint64_t split_seed);

} // namespace layermatch
