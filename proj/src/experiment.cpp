#include "layermatch/experiment.hpp"

#include "layermatch/checkpoint.hpp"
#include "layermatch/errors.hpp"

#include <fmt/format.h>
#include <json.hpp>

#include <algorithm>
#include <array>
#include <atomic>
#include <charconv>
#include <cmath>
#include <fstream>
#include <mutex>
#include <sstream>
#include <thread>

namespace layermatch {

namespace {

void write_text(const std::filesystem::path& path, const std::string& text) {
    std::ofstream out(path, std::ios::binary | std::ios::trunc);
    if (!out) throw Error(fmt::format("cannot open {} for writing", path.string()));
    out << text;
    if (!out) throw Error(fmt::format("write failed: {}", path.string()));
}

std::string read_text(const std::filesystem::path& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw Error(fmt::format("cannot open {}", path.string()));
    std::stringstream buffer;
    buffer << in.rdbuf();
    return buffer.str();
}

std::vector<std::string> split_fields(const std::string& line) {
    std::vector<std::string> fields;
    std::stringstream ss(line);
    std::string field;
    while (std::getline(ss, field, ',')) fields.push_back(field);
    if (!line.empty() && line.back() == ',') fields.emplace_back();
    return fields;
}

double parse_double(const std::string& s, std::string_view what) {
    double v = 0.0;
    const auto [ptr, ec] = std::from_chars(s.data(), s.data() + s.size(), v);
    if (ec != std::errc() || ptr != s.data() + s.size()) throw FormatError(fmt::format("{}: bad number '{}'", what, s));
    return v;
}

// Final test accuracy of a completed cell, taken from the last metrics row.
double final_accuracy_from_metrics(const std::filesystem::path& path) {
    std::stringstream in(read_text(path));
    std::string line;
    std::string last;
    std::getline(in, line);
    while (std::getline(in, line)) {
        if (!line.empty()) last = line;
    }
    const auto fields = split_fields(last);
    if (fields.size() < 5) throw FormatError(fmt::format("{}: no metrics rows", path.string()));
    return parse_double(fields[4], path.string());
}

std::string sanitize(std::string s) {
    std::replace_if(s.begin(), s.end(), [](char c) { return c == ',' || c == '\n' || c == '\r'; }, ' ');
    return s;
}

std::string percent(double v) { return fmt::format("{:.2f}", 100.0 * v); }

std::string accuracy_cell(const SummaryRow& row) {
    if (!row.two_sigma) return percent(row.mean);
    return fmt::format("{} ± {}", percent(row.mean), percent(*row.two_sigma));
}

} // namespace

std::filesystem::path cell_directory(const ExperimentPlan& plan, const Cell& cell) {
    return plan.output_dir / cell.name();
}

CellOutcome run_cell(const ExperimentPlan& plan, const Cell& cell) {
    CellOutcome outcome;
    outcome.cell = cell;
    try {
        const ExperimentPlan resolved = resolve_cell(plan, cell);
        const auto dir = cell_directory(plan, cell);
        std::filesystem::create_directories(dir);
        const TrainingData data = build_training_data(resolved, cell.seed);
        const RunResult result = run(resolved.base, data);
        write_text(dir / "resolved.conf", dump_plan(resolved));
        write_metrics_csv(dir / "metrics.csv", result.metrics);
        const auto matrices = result.state.checkpoint_matrices();
        const auto partial = dir / "checkpoint.lmck.partial";
        write_checkpoint(partial, matrices);
        std::filesystem::rename(partial, dir / "checkpoint.lmck");
        outcome.final_accuracy = result.metrics.empty() ? 0.0 : result.metrics.back().test_accuracy;
        outcome.ok = true;
    } catch (const std::exception& e) {
        outcome.error = e.what();
    }
    return outcome;
}

MatrixResult run_matrix(const ExperimentPlan& plan, std::size_t jobs,
                        const std::function<void(const CellOutcome&)>& progress) {
    if (jobs == 0) throw ArgumentError("jobs must be at least 1");
    const std::vector<Cell> cells = enumerate_cells(plan);
    std::filesystem::create_directories(plan.output_dir);

    std::vector<CellOutcome> outcomes(cells.size());
    std::atomic<std::size_t> next{0};
    std::mutex progress_mutex;

    auto worker = [&] {
        for (std::size_t i = next++; i < cells.size(); i = next++) {
            const auto dir = cell_directory(plan, cells[i]);
            CellOutcome outcome;
            outcome.cell = cells[i];
            if (std::filesystem::exists(dir / "checkpoint.lmck")) {
                try {
                    outcome.final_accuracy = final_accuracy_from_metrics(dir / "metrics.csv");
                    outcome.ok = true;
                    outcome.skipped = true;
                } catch (const std::exception& e) {
                    outcome.error = e.what();
                }
            } else {
                outcome = run_cell(plan, cells[i]);
            }
            outcomes[i] = outcome;
            if (progress) {
                std::lock_guard lock(progress_mutex);
                progress(outcome);
            }
        }
    };

    const std::size_t n_threads = std::min(jobs, std::max<std::size_t>(cells.size(), 1));
    {
        std::vector<std::jthread> threads;
        for (std::size_t t = 1; t < n_threads; ++t) threads.emplace_back(worker);
        worker();
    }

    MatrixResult result;
    result.outcomes = std::move(outcomes);
    result.failed = static_cast<std::size_t>(
        std::count_if(result.outcomes.begin(), result.outcomes.end(), [](const CellOutcome& o) { return !o.ok; }));
    result.summary = summarize(result.outcomes);

    write_text(plan.output_dir / "runs.csv", runs_csv(result.outcomes));
    if (!result.summary.rows.empty()) {
        write_text(plan.output_dir / "summary.csv", render_report(result.summary, "csv"));
        write_text(plan.output_dir / "summary.json", render_report(result.summary, "json"));
        write_text(plan.output_dir / "summary.txt", render_report(result.summary, "text"));
    }
    return result;
}

SummaryRow summary_row(std::string method, std::string variant, std::vector<double> accuracies) {
    SummaryRow row;
    row.method = std::move(method);
    row.variant = std::move(variant);
    row.accuracies = std::move(accuracies);
    const auto n = static_cast<double>(row.accuracies.size());
    if (row.accuracies.empty()) return row;
    double sum = 0.0;
    for (double a : row.accuracies) sum += a;
    row.mean = sum / n;
    if (row.accuracies.size() >= 2) {
        double ss = 0.0;
        for (double a : row.accuracies) ss += (a - row.mean) * (a - row.mean);
        row.two_sigma = 2.0 * std::sqrt(ss / (n - 1.0));
    }
    return row;
}

Summary summarize(std::span<const CellOutcome> outcomes) {
    std::vector<std::pair<std::string, std::string>> order;
    std::vector<std::vector<double>> groups;
    for (const auto& o : outcomes) {
        if (!o.ok) continue;
        std::pair<std::string, std::string> key{std::string(to_string(o.cell.method)), o.cell.variant()};
        auto it = std::find(order.begin(), order.end(), key);
        if (it == order.end()) {
            order.push_back(key);
            groups.emplace_back();
            it = order.end() - 1;
        }
        groups[static_cast<std::size_t>(it - order.begin())].push_back(o.final_accuracy);
    }
    Summary summary;
    for (std::size_t i = 0; i < order.size(); ++i) {
        summary.rows.push_back(summary_row(order[i].first, order[i].second, groups[i]));
    }
    return summary;
}

std::string render_report(const Summary& summary, std::string_view format) {
    if (format != "csv" && format != "json" && format != "text") {
        throw ArgumentError(fmt::format("unknown report format '{}' (expected csv, json or text)", format));
    }
    if (summary.rows.empty()) throw ArgumentError("report: summary is empty");

    if (format == "csv") {
        std::string out = "method,variant,seeds,mean_acc,two_sigma,accuracy\n";
        for (const auto& row : summary.rows) {
            out += fmt::format("{},{},{},{},{},{}\n", row.method, row.variant, row.accuracies.size(), percent(row.mean),
                               row.two_sigma ? percent(*row.two_sigma) : "", accuracy_cell(row));
        }
        return out;
    }

    if (format == "json") {
        nlohmann::ordered_json rows = nlohmann::ordered_json::array();
        for (const auto& row : summary.rows) {
            nlohmann::ordered_json j;
            j["method"] = row.method;
            j["variant"] = row.variant;
            j["seeds"] = row.accuracies.size();
            j["mean_acc"] = percent(row.mean);
            j["two_sigma"] = row.two_sigma ? nlohmann::ordered_json(percent(*row.two_sigma)) : nlohmann::ordered_json();
            j["accuracy"] = accuracy_cell(row);
            rows.push_back(std::move(j));
        }
        return rows.dump(2) + "\n";
    }

    std::vector<std::array<std::string, 4>> table{{"method", "variant", "seeds", "top-1 (%)"}};
    for (const auto& row : summary.rows) {
        table.push_back({row.method, row.variant.empty() ? "-" : row.variant, std::to_string(row.accuracies.size()),
                         accuracy_cell(row)});
    }
    std::array<std::size_t, 4> width{};
    auto display_width = [](const std::string& s) {
        // "±" is two bytes, one column.
        std::size_t w = 0;
        for (unsigned char c : s) w += (c & 0xC0) != 0x80;
        return w;
    };
    for (const auto& r : table) {
        for (std::size_t c = 0; c < 4; ++c) width[c] = std::max(width[c], display_width(r[c]));
    }
    std::string out;
    for (std::size_t i = 0; i < table.size(); ++i) {
        for (std::size_t c = 0; c < 4; ++c) {
            out += table[i][c] + std::string(width[c] - display_width(table[i][c]) + (c < 3 ? 2 : 0), ' ');
        }
        while (!out.empty() && out.back() == ' ') out.pop_back();
        out += '\n';
        if (i == 0) {
            std::size_t total = 0;
            for (std::size_t c = 0; c < 4; ++c) total += width[c] + (c < 3 ? 2 : 0);
            out += std::string(total, '-') + '\n';
        }
    }
    return out;
}

Theorem42Run theorem42_run(const ExperimentPlan& plan, const Cell& cell, double epsilon, std::size_t window,
                           TraceWeights weights) {
    const ExperimentPlan resolved = resolve_cell(plan, cell);
    const TrainingData data = build_training_data(resolved, cell.seed);
    std::vector<TraceCheckpoint> trace;
    RunHooks hooks;
    hooks.on_eval = [&](std::size_t iteration, const ModelState& state) {
        trace.push_back({iteration, weights == TraceWeights::live
                                        ? state.live
                                        : state.evaluation_network(resolved.base.eval_with_beta_bar)});
    };
    const RunResult result = run(resolved.base, data, hooks);
    Theorem42Run out;
    out.points = theorem42_monitor(trace, data.unlabeled.inputs, epsilon);
    out.trend = theorem42_trend(out.points, window);
    out.final_accuracy = result.metrics.empty() ? 0.0 : result.metrics.back().test_accuracy;
    return out;
}

std::string runs_csv(std::span<const CellOutcome> outcomes) {
    std::string out = "method,variant,seed,status,final_test_acc,error\n";
    for (const auto& o : outcomes) {
        out += fmt::format("{},{},{},{},{},{}\n", to_string(o.cell.method), o.cell.variant(), o.cell.seed,
                           o.ok ? "ok" : "failed", o.ok ? fmt::format("{}", o.final_accuracy) : "", sanitize(o.error));
    }
    return out;
}

std::vector<CellOutcome> read_runs_csv(const std::filesystem::path& dir) {
    std::stringstream in(read_text(dir / "runs.csv"));
    std::string line;
    if (!std::getline(in, line) || line != "method,variant,seed,status,final_test_acc,error") {
        throw FormatError(fmt::format("{}: unexpected header", (dir / "runs.csv").string()));
    }
    std::vector<CellOutcome> outcomes;
    while (std::getline(in, line)) {
        if (line.empty()) continue;
        auto fields = split_fields(line);
        if (fields.size() != 6) throw FormatError(fmt::format("runs.csv: malformed row '{}'", line));
        CellOutcome o;
        o.cell.method = parse_method(fields[0]);
        if (!fields[1].empty()) {
            std::stringstream vs(fields[1]);
            std::string item;
            while (std::getline(vs, item, ';')) {
                const auto eq = item.find('=');
                if (eq == std::string::npos) throw FormatError(fmt::format("runs.csv: bad variant '{}'", fields[1]));
                o.cell.sweep_point.emplace_back(item.substr(0, eq), item.substr(eq + 1));
            }
        }
        const auto [ptr, ec] = std::from_chars(fields[2].data(), fields[2].data() + fields[2].size(), o.cell.seed);
        if (ec != std::errc() || ptr != fields[2].data() + fields[2].size()) {
            throw FormatError(fmt::format("runs.csv: bad seed '{}'", fields[2]));
        }
        o.ok = fields[3] == "ok";
        if (o.ok) o.final_accuracy = parse_double(fields[4], "runs.csv accuracy");
        o.error = fields[5];
        outcomes.push_back(std::move(o));
    }
    return outcomes;
}

} // namespace layermatch
