#include "cli.hpp"

#include "layermatch/checkpoint.hpp"
#include "layermatch/config.hpp"
#include "layermatch/errors.hpp"
#include "layermatch/experiment.hpp"
#include "layermatch/theoryverify.hpp"

#include <CLI11.hpp>
#include <fmt/format.h>

#include <cmath>
#include <cstdlib>
#include <fstream>
#include <map>
#include <optional>

namespace layermatch::cli {

namespace {

std::map<std::string, std::string> parse_sets(const std::vector<std::string>& sets) {
    std::map<std::string, std::string> out;
    for (const auto& item : sets) {
        const auto eq = item.find('=');
        if (eq == std::string::npos) throw ArgumentError(fmt::format("--set expects key=value, got '{}'", item));
        out[item.substr(0, eq)] = item.substr(eq + 1);
    }
    return out;
}

// Precedence, lowest first: config file, LAYERMATCH_SEED, --set, dedicated flags.
ExperimentPlan load_plan(const std::string& path, std::map<std::string, std::string> overrides) {
    if (const char* env = std::getenv("LAYERMATCH_SEED"); env && *env && !overrides.count("seed")) {
        overrides["seed"] = env;
    }
    return parse_config_file(path, overrides);
}

void write_file(const std::filesystem::path& path, const std::string& text) {
    std::ofstream out(path, std::ios::binary | std::ios::trunc);
    if (!out) throw Error(fmt::format("cannot open {} for writing", path.string()));
    out << text;
}

struct TrainArgs {
    std::string config;
    std::optional<std::string> method;
    std::optional<std::uint64_t> seed;
    std::optional<std::string> out;
    std::vector<std::string> sets;
    bool dump = false;
};

int cmd_train(const TrainArgs& a, std::ostream& out) {
    auto overrides = parse_sets(a.sets);
    if (a.method) overrides["method"] = *a.method;
    if (a.seed) overrides["seed"] = std::to_string(*a.seed);
    ExperimentPlan plan = load_plan(a.config, overrides);
    if (a.dump) {
        out << dump_plan(plan);
        return 0;
    }
    const Cell cell{plan.base.method, plan.base.seed, {}};
    const ExperimentPlan resolved = resolve_cell(plan, cell);
    const std::filesystem::path dir = a.out ? std::filesystem::path(*a.out) : plan.output_dir / cell.name();
    std::filesystem::create_directories(dir);
    const TrainingData data = build_training_data(resolved, cell.seed);
    const RunResult result = run(resolved.base, data);
    write_file(dir / "resolved.conf", dump_plan(resolved));
    write_metrics_csv(dir / "metrics.csv", result.metrics);
    write_checkpoint(dir / "checkpoint.lmck", result.state.checkpoint_matrices());
    const double acc = result.metrics.empty() ? 0.0 : result.metrics.back().test_accuracy;
    out << fmt::format("{} seed {}: test accuracy {:.2f}% -> {}\n", to_string(cell.method), cell.seed, 100.0 * acc,
                       dir.string());
    return 0;
}

int cmd_matrix(const std::string& config, std::size_t jobs, const std::optional<std::string>& out_dir,
               const std::vector<std::string>& sets, std::ostream& out, std::ostream& err) {
    auto overrides = parse_sets(sets);
    if (out_dir) overrides["output_dir"] = *out_dir;
    const ExperimentPlan plan = load_plan(config, overrides);
    const MatrixResult result = run_matrix(plan, jobs, [&](const CellOutcome& o) {
        if (o.ok) {
            err << fmt::format("[{}] {} {:.2f}%\n", o.skipped ? "skip" : "done", o.cell.name(), 100.0 * o.final_accuracy);
        } else {
            err << fmt::format("[fail] {}: {}\n", o.cell.name(), o.error);
        }
    });
    if (!result.summary.rows.empty()) out << render_report(result.summary, "text");
    if (result.failed > 0) {
        err << fmt::format("{} of {} cells failed\n", result.failed, result.outcomes.size());
        return 1;
    }
    return 0;
}

struct VerifyArgs {
    std::string check;
    std::string format = "text";
    std::optional<std::string> out;
    std::uint64_t seed = 0;
    std::size_t coords = 100;
    double tolerance = 1e-4;
    std::size_t trials = 100;
    std::vector<double> spacings{0.1, 0.05, 0.01};
    std::string config;
    std::vector<std::string> sets;
    double epsilon = 0.05;
    std::size_t window = 3;
    std::string trace = "eval";
};

std::vector<VerificationRow> verify_rows(const VerifyArgs& a) {
    std::vector<VerificationRow> rows;
    if (a.check == "gradcheck") {
        const auto surfaces = objective_surfaces(a.seed);
        const auto report = gradcheck_suite(surfaces, a.coords, a.tolerance, a.seed);
        for (const auto& s : report.surfaces) {
            rows.push_back({"gradcheck", s.name + ".worst_rel_error", s.worst_relative_error, a.tolerance, s.pass});
        }
    } else if (a.check == "chainrule") {
        const double dev = chain_rule_random_trials(a.trials, a.seed);
        rows.push_back({"chainrule", fmt::format("max_abs_deviation.{}_models", a.trials), dev, 1e-10, dev < 1e-10});
    } else if (a.check == "lemma41") {
        // P(x) = sigmoid(x) on [-5, 5]; the integral of |P'| is sigmoid(5) - sigmoid(-5).
        FeatureExtractor fx;
        fx.layers.push_back({Matrix::identity(1), Matrix(1, 1), Activation::identity});
        const std::vector<double> beta{1.0};
        const Network model = binary_network(fx, beta, 0.0);
        const GridSpec grid{{-5.0}, {5.0}, 2};
        const auto result = lemma41_convergence(model, grid, a.spacings);
        const double exact = 1.0 / (1.0 + std::exp(-5.0)) - 1.0 / (1.0 + std::exp(5.0));
        rows.push_back({"lemma41", "integral_estimate", result.front().integral_estimate, exact,
                        std::abs(result.front().integral_estimate - exact) < 1e-6});
        for (std::size_t i = 0; i < result.size(); ++i) {
            const double err = std::abs(result[i].discrete_sum - exact);
            rows.push_back({"lemma41", fmt::format("abs_error.h={}", result[i].h), err, 1e-3,
                            result[i].h > 0.01 + 1e-12 || err < 1e-3});
            if (i > 0 && std::abs(result[i].h * 2.0 - result[i - 1].h) < 1e-12) {
                const double factor = std::abs(result[i - 1].discrete_sum - exact) / err;
                rows.push_back({"lemma41", fmt::format("reduction_factor.h={}", result[i].h), factor, 1.4,
                                factor >= 1.4 && factor <= 2.6});
            }
        }
    } else if (a.check == "theorem42") {
        if (a.config.empty()) throw ArgumentError("verify --check theorem42 requires --config");
        const ExperimentPlan plan = load_plan(a.config, parse_sets(a.sets));
        const Cell cell{plan.base.method, plan.base.seed, {}};
        const auto weights = a.trace == "live" ? TraceWeights::live : TraceWeights::evaluation;
        const auto run = theorem42_run(plan, cell, a.epsilon, a.window, weights);
        for (const auto& p : run.points) {
            rows.push_back({"theorem42", fmt::format("fraction.t={}", p.iteration), p.fraction, a.epsilon, true});
        }
        rows.push_back({"theorem42", "smoothed_last_minus_first", run.trend.last - run.trend.first, 0.0,
                        run.trend.non_decreasing});
    } else {
        throw ArgumentError(fmt::format("unknown check '{}'", a.check));
    }
    return rows;
}

int cmd_verify(const VerifyArgs& a, std::ostream& out) {
    const auto rows = verify_rows(a);
    std::string text;
    if (a.format == "csv") text = verification_csv(rows);
    else if (a.format == "text") text = verification_text(rows);
    else throw ArgumentError(fmt::format("unknown format '{}' (expected text or csv)", a.format));
    if (a.out) write_file(*a.out, text);
    else out << text;
    bool pass = true;
    for (const auto& r : rows) pass = pass && r.pass;
    return pass ? 0 : 1;
}

int cmd_report(const std::string& in, const std::string& format, std::ostream& out) {
    const auto outcomes = read_runs_csv(in);
    out << render_report(summarize(outcomes), format);
    return 0;
}

} // namespace

int run(const std::vector<std::string>& args, std::ostream& out, std::ostream& err) {
    CLI::App app{"Semi-supervised training with gradient routing and an averaged classifier head"};
    app.name(args.empty() ? "layermatch" : args.front());
    app.require_subcommand(1);

    TrainArgs train;
    auto* train_cmd = app.add_subcommand("train", "Train one configuration");
    train_cmd->add_option("--config", train.config, "Config file")->required()->check(CLI::ExistingFile);
    train_cmd->add_option("--method", train.method, "supervised_only | pseudo_label | fixmatch | layermatch");
    train_cmd->add_option("--seed", train.seed, "Run seed");
    train_cmd->add_option("--out", train.out, "Output directory (default <output_dir>/<cell name>)");
    train_cmd->add_option("--set", train.sets, "Override a config key (key=value), repeatable");
    train_cmd->add_flag("--dump-config", train.dump, "Print the resolved configuration and exit");

    std::string matrix_config;
    std::size_t jobs = 1;
    std::optional<std::string> matrix_out;
    std::vector<std::string> matrix_sets;
    auto* matrix_cmd = app.add_subcommand("matrix", "Run every method x seed x sweep cell of a plan");
    matrix_cmd->add_option("--config", matrix_config, "Config file")->required()->check(CLI::ExistingFile);
    matrix_cmd->add_option("--jobs", jobs, "Concurrent cells")->check(CLI::PositiveNumber);
    matrix_cmd->add_option("--out", matrix_out, "Output directory (overrides output_dir)");
    matrix_cmd->add_option("--set", matrix_sets, "Override a config key (key=value), repeatable");

    VerifyArgs verify;
    auto* verify_cmd = app.add_subcommand("verify", "Numerical verification checks");
    verify_cmd->add_option("--check", verify.check, "Check to run")
        ->required()
        ->check(CLI::IsMember({"gradcheck", "lemma41", "theorem42", "chainrule"}));
    verify_cmd->add_option("--format", verify.format, "text | csv");
    verify_cmd->add_option("--out", verify.out, "Write the report to a file");
    verify_cmd->add_option("--seed", verify.seed, "Seed for random models and coordinates");
    verify_cmd->add_option("--coords", verify.coords, "gradcheck: coordinates per surface");
    verify_cmd->add_option("--tol", verify.tolerance, "gradcheck: relative error tolerance");
    verify_cmd->add_option("--trials", verify.trials, "chainrule: number of random models");
    verify_cmd->add_option("--spacings", verify.spacings, "lemma41: grid spacings")->delimiter(',');
    verify_cmd->add_option("--config", verify.config, "theorem42: training config");
    verify_cmd->add_option("--set", verify.sets, "theorem42: config override (key=value)");
    verify_cmd->add_option("--epsilon", verify.epsilon, "theorem42: bound");
    verify_cmd->add_option("--window", verify.window, "theorem42: smoothing window");
    verify_cmd->add_option("--trace", verify.trace, "theorem42: eval (evaluation network) | live (SGD iterate)")
        ->check(CLI::IsMember({"eval", "live"}));

    std::string report_in;
    std::string report_format = "text";
    auto* report_cmd = app.add_subcommand("report", "Summarize a matrix output directory");
    report_cmd->add_option("--in", report_in, "Matrix output directory")->required()->check(CLI::ExistingDirectory);
    report_cmd->add_option("--format", report_format, "csv | json | text");

    std::vector<const char*> argv;
    for (const auto& a : args) argv.push_back(a.c_str());
    try {
        app.parse(static_cast<int>(argv.size()), argv.data());
    } catch (const CLI::ParseError& e) {
        return app.exit(e, out, err);
    }

    try {
        if (*train_cmd) return cmd_train(train, out);
        if (*matrix_cmd) return cmd_matrix(matrix_config, jobs, matrix_out, matrix_sets, out, err);
        if (*verify_cmd) return cmd_verify(verify, out);
        if (*report_cmd) return cmd_report(report_in, report_format, out);
    } catch (const ConfigError& e) {
        err << "config error: " << e.what() << '\n';
        return 2;
    } catch (const std::exception& e) {
        err << "error: " << e.what() << '\n';
        return 1;
    }
    return 1;
}

} // namespace layermatch::cli
