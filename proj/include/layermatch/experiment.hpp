#pragma once

#include "layermatch/config.hpp"
#include "layermatch/theoryverify.hpp"
#include "layermatch/trainer.hpp"

#include <cstddef>
#include <filesystem>
#include <functional>
#include <optional>
#include <span>
#include <string>
#include <string_view>
#include <vector>

namespace layermatch {

struct CellOutcome {
    Cell cell;
    bool ok = false;
    bool skipped = false;
    double final_accuracy = 0.0;
    std::string error;
};

struct SummaryRow {
    std::string method;
    std::string variant;
    std::vector<double> accuracies;
    double mean = 0.0;
    std::optional<double> two_sigma;
};

struct Summary {
    std::vector<SummaryRow> rows;
};

struct MatrixResult {
    std::vector<CellOutcome> outcomes;
    Summary summary;
    std::size_t failed = 0;
};

/// Per-cell output directory: `<output_dir>/<cell name>`.
std::filesystem::path cell_directory(const ExperimentPlan& plan, const Cell& cell);

/// Trains one cell and writes metrics.csv, resolved.conf and checkpoint.lmck
/// (checkpoint last, so its presence marks completion).
CellOutcome run_cell(const ExperimentPlan& plan, const Cell& cell);

/// Runs every cell on up to `jobs` threads. Cells with an existing checkpoint are
/// not retrained; their accuracy is read back from metrics.csv. Writes runs.csv and
/// summary.{csv,json,txt} under output_dir.
MatrixResult run_matrix(const ExperimentPlan& plan, std::size_t jobs,
                        const std::function<void(const CellOutcome&)>& progress = {});

/// Groups successful outcomes by (method, variant) in first-seen order.
Summary summarize(std::span<const CellOutcome> outcomes);
SummaryRow summary_row(std::string method, std::string variant, std::vector<double> accuracies);

/// Rendering of a summary as "csv", "json" or "text". Throws ArgumentError on an
/// unknown format or an empty summary.
std::string render_report(const Summary& summary, std::string_view format);

struct Theorem42Run {
    std::vector<Theorem42Point> points;
    TrendResult trend;
    double final_accuracy = 0.0;
};

enum class TraceWeights { evaluation, live };

/// Trains one cell, recording a model at every evaluation point (the evaluation network by
/// default, or the raw SGD iterate), and monitors the consistency bound on the unlabeled inputs.
Theorem42Run theorem42_run(const ExperimentPlan& plan, const Cell& cell, double epsilon, std::size_t window = 3,
                           TraceWeights weights = TraceWeights::evaluation);

std::string runs_csv(std::span<const CellOutcome> outcomes);
/// Reads `<dir>/runs.csv` back into outcomes.
std::vector<CellOutcome> read_runs_csv(const std::filesystem::path& dir);

} // namespace layermatch
