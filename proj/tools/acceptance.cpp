#include "layermatch/config.hpp"
#include "layermatch/errors.hpp"
#include "layermatch/experiment.hpp"
#include "layermatch/sslcore.hpp"
#include "layermatch/theoryverify.hpp"
#include "layermatch/trainer.hpp"

#include <CLI11.hpp>
#include <fmt/format.h>

#include <chrono>
#include <cmath>
#include <filesystem>
#include <fstream>
#include <functional>
#include <iostream>
#include <map>
#include <random>
#include <sstream>

namespace fs = std::filesystem;
using namespace layermatch;

namespace {

struct Outcome {
    bool pass = false;
    std::string detail;
};

using Clock = std::chrono::steady_clock;

double seconds_since(Clock::time_point start) {
    return std::chrono::duration<double>(Clock::now() - start).count();
}

std::string read_bytes(const fs::path& path) {
    std::ifstream in(path, std::ios::binary);
    std::stringstream ss;
    ss << in.rdbuf();
    return ss.str();
}

Matrix gaussian(std::size_t rows, std::size_t cols, Rng& rng) {
    std::normal_distribution<double> normal;
    Matrix m(rows, cols);
    for (auto& v : m.values()) v = normal(rng);
    return m;
}

GradientSet random_grads(const Network& net, Rng& rng) {
    GradientSet g = GradientSet::zeros_like(net);
    for (Matrix* m : gradient_matrices(g)) *m = gaussian(m->rows(), m->cols(), rng);
    return g;
}

bool is_zero(const Matrix& m) {
    for (double v : m.values()) {
        if (v != 0.0) return false;
    }
    return true;
}

PseudoBatch flip_labels(PseudoBatch p) {
    const std::size_t classes = p.pseudo_labels.cols();
    for (std::size_t r = 0; r < p.size(); ++r) {
        const std::size_t label = p.label_of(r);
        p.pseudo_labels(r, label) = 0.0;
        p.pseudo_labels(r, (label + 1) % classes) = 1.0;
    }
    return p;
}

std::vector<Matrix> beta_trajectory(const TrainConfig& config, const TrainingData& data, bool flip, bool freeze) {
    std::vector<Matrix> trace;
    RunHooks hooks;
    hooks.freeze_features = freeze;
    if (flip) hooks.transform_pseudo = [](PseudoBatch& p) { p = flip_labels(std::move(p)); };
    hooks.on_step = [&](std::size_t, const ModelState& s) {
        trace.push_back(s.live.classifier.weight);
        trace.push_back(s.live.classifier.bias);
    };
    run(config, data, hooks);
    return trace;
}

Outcome gradient_exactness() {
    const auto start = Clock::now();
    const auto surfaces = objective_surfaces(0);
    const GradcheckReport report = gradcheck_suite(surfaces, 100, 1e-4, 0);
    const double elapsed = seconds_since(start);
    bool pass = report.pass && elapsed < 30.0;
    double worst = 0.0;
    double largest_diff = 0.0;
    std::size_t fewest = static_cast<std::size_t>(-1);
    for (const auto& s : report.surfaces) {
        worst = std::max(worst, s.worst_relative_error);
        largest_diff = std::max(largest_diff, s.max_abs_difference);
        const bool named = s.name == "L_s" || s.name == "L_u" || s.name == "L_ac" || s.name == "objective";
        if (named) {
            fewest = std::min(fewest, s.coordinates);
            pass = pass && s.coordinates >= 100;
        }
    }
    return {pass, fmt::format("{} surfaces, >= {} coords each, worst rel err {:.3g}, max |analytic - numeric| {:.3g}, "
                              "{:.2f} s",
                              report.surfaces.size(), fewest, worst, largest_diff, elapsed)};
}

Outcome grad_relu_exactness() {
    Rng rng(2024);
    std::uniform_int_distribution<std::size_t> width(1, 8);
    std::uniform_int_distribution<std::size_t> depth(0, 3);
    std::uniform_real_distribution<double> weight(0.0, 5.0);
    std::size_t violations = 0;
    for (int trial = 0; trial < 1000; ++trial) {
        std::vector<std::size_t> hidden(depth(rng));
        for (auto& h : hidden) h = width(rng);
        const Network net = make_network(width(rng), hidden, width(rng), width(rng) + 1, Activation::relu, rng);
        GradientSet s = random_grads(net, rng);
        s.classifier.weight.fill(0.0);
        s.classifier.bias.fill(0.0);
        const GradientSet u = random_grads(net, rng);
        const auto ac = random_grads(net, rng).features;
        const GradientSet routed = grad_relu_route(s, u, ac, LossWeights{weight(rng), weight(rng)});
        if (!is_zero(routed.classifier.weight) || !is_zero(routed.classifier.bias)) ++violations;
    }
    return {violations == 0, fmt::format("1000 random shapes, {} non-zero routed classifier gradients", violations)};
}

Outcome beta_isolation(const ExperimentPlan& desk) {
    Rng rng(7);
    std::size_t step_mismatches = 0;
    for (int trial = 0; trial < 50; ++trial) {
        const Network net = make_network(2, std::vector<std::size_t>{16, 16}, 8, 3, Activation::relu, rng);
        const LabeledBatch labeled{gaussian(8, 2, rng), {0, 1, 2, 0, 1, 2, 0, 1}};
        PseudoBatch pseudo;
        pseudo.inputs = gaussian(32, 2, rng);
        std::vector<int> labels(32);
        for (std::size_t i = 0; i < labels.size(); ++i) labels[i] = static_cast<int>(i % 3);
        pseudo.pseudo_labels = one_hot(labels, 3);
        pseudo.confidences.assign(32, 0.99);
        AvgClusteringState avg{net.classifier, 2048, 0.999, 5e-4, 1};
        Rng la(trial), ua(trial + 1000), lb(trial), ub(trial + 1000);
        const AugmentationSpec aug;
        const ObjectiveResult a = layermatch_objective(net, labeled, pseudo, avg, ObjectiveOptions{}, aug, la, ua);
        const ObjectiveResult b =
            layermatch_objective(net, labeled, flip_labels(pseudo), avg, ObjectiveOptions{}, aug, lb, ub);
        if (a.routed.classifier.weight != b.routed.classifier.weight ||
            a.routed.classifier.bias != b.routed.classifier.bias) {
            ++step_mismatches;
        }
    }

    Cell cell{Method::layermatch, 0, {}};
    ExperimentPlan plan = resolve_cell(desk, cell);
    plan.base.iterations = 1000;
    plan.base.tau = 0.7;
    const TrainingData data = build_training_data(plan, cell.seed);

    TrainConfig decoupled = plan.base;
    decoupled.w_u = 0.0;
    decoupled.ac_theta_coupling = false;
    const bool run_identical =
        beta_trajectory(decoupled, data, false, false) == beta_trajectory(decoupled, data, true, false);
    const bool frozen_identical =
        beta_trajectory(plan.base, data, false, true) == beta_trajectory(plan.base, data, true, true);

    return {step_mismatches == 0 && run_identical && frozen_identical,
            fmt::format("single-step mismatches {}/50; 1000-step beta trajectory identical: Theta path off {}, "
                        "features frozen {}",
                        step_mismatches, run_identical ? "yes" : "no", frozen_identical ? "yes" : "no")};
}

Outcome avg_clustering_update() {
    Rng rng(11);
    std::uniform_real_distribution<double> unit(0.0, 1.0);
    bool resets_exact = true;
    double worst = 0.0;
    std::size_t resets = 0, blends = 0;
    for (std::size_t period : {std::size_t{1}, std::size_t{2048}, std::size_t{204800}}) {
        AvgClusteringState state{Classifier{gaussian(3, 8, rng), gaussian(3, 1, rng)}, period, 0.999, 5e-4, 0};
        const std::size_t steps = std::min<std::size_t>(2 * period + 3, 4200);
        for (std::size_t i = 0; i < steps; ++i) {
            if (period == 204800 && i == 100) state.iteration_t = 204800 - 2;
            const Classifier live{gaussian(3, 8, rng), gaussian(3, 1, rng)};
            const ParamGrad grad{gaussian(3, 8, rng), gaussian(3, 1, rng)};
            const AvgClusteringState before = state;
            state.momentum_m = unit(rng);
            state.step_alpha = 1e-3 * (0.5 + unit(rng));
            const double m = state.momentum_m;
            const double alpha = state.step_alpha;
            state = update_avg_classifier(std::move(state), live, grad);
            if (before.iteration_t % period == 0) {
                ++resets;
                resets_exact = resets_exact && state.beta_bar.weight == live.weight && state.beta_bar.bias == live.bias;
                continue;
            }
            ++blends;
            auto check = [&](const Matrix& prev, const Matrix& next, const Matrix& g) {
                for (std::size_t k = 0; k < prev.size(); ++k) {
                    const double b = prev.values()[k];
                    const double expected = m * b + (1.0 - m) * (b - alpha * g.values()[k]);
                    const double err = std::abs(next.values()[k] - expected) / std::max(std::abs(expected), 1e-300);
                    worst = std::max(worst, err);
                }
            };
            check(before.beta_bar.weight, state.beta_bar.weight, grad.weight);
            check(before.beta_bar.bias, state.beta_bar.bias, grad.bias);
        }
    }
    return {resets_exact && worst < 1e-12 && resets >= 6,
            fmt::format("N in {{1, 2048, 204800}}: {} exact resets, {} blends, worst rel err {:.3g}", resets, blends,
                        worst)};
}

Outcome chain_rule() {
    const auto start = Clock::now();
    const double dev = chain_rule_random_trials(100, 0);
    const double elapsed = seconds_since(start);
    return {dev < 1e-10 && elapsed < 10.0,
            fmt::format("max deviation {:.3g} over 100 random binary models, {:.2f} s", dev, elapsed)};
}

Outcome lemma41() {
    FeatureExtractor fx;
    fx.layers.push_back({Matrix::identity(1), Matrix(1, 1), Activation::identity});
    const std::vector<double> beta{1.0};
    const Network model = binary_network(fx, beta, 0.0);
    const std::vector<double> spacings{0.1, 0.05, 0.01};
    const auto rows = lemma41_convergence(model, GridSpec{{-5.0}, {5.0}, 2}, spacings);
    const double exact = 1.0 / (1.0 + std::exp(-5.0)) - 1.0 / (1.0 + std::exp(5.0));
    const double err_fine = std::abs(rows[2].discrete_sum - exact);
    const double factor = std::abs(rows[0].discrete_sum - exact) / std::abs(rows[1].discrete_sum - exact);
    return {err_fine < 1e-3 && factor >= 1.4 && factor <= 2.6,
            fmt::format("integral {:.6f}, |sum - integral| at h=0.01 = {:.3g}, reduction 0.1->0.05 = {:.3f}", exact,
                        err_fine, factor)};
}

struct DeskRun {
    fs::path dir;
    MatrixResult result;
    double seconds = 0.0;
};

DeskRun run_desk(const ExperimentPlan& desk, const fs::path& dir, std::size_t jobs) {
    fs::remove_all(dir);
    ExperimentPlan plan = desk;
    plan.output_dir = dir;
    const auto start = Clock::now();
    DeskRun out{dir, run_matrix(plan, jobs), 0.0};
    out.seconds = seconds_since(start);
    return out;
}

Outcome comparative(const DeskRun& desk) {
    std::map<std::string, double> mean;
    for (const auto& row : desk.result.summary.rows) mean[row.method] = row.mean;
    const double sup = mean["supervised_only"];
    const double fm = mean["fixmatch"];
    const double lm = mean["layermatch"];
    const bool pass = desk.result.failed == 0 && lm >= fm && fm >= sup && (lm - sup) >= 0.02 && desk.seconds < 600.0;
    return {pass, fmt::format("mean acc: supervised_only {:.2f}%, fixmatch {:.2f}%, layermatch {:.2f}% "
                              "(layermatch - supervised_only = {:.2f} pts), {:.1f} s",
                              100 * sup, 100 * fm, 100 * lm, 100 * (lm - sup), desk.seconds)};
}

Outcome theorem42(const ExperimentPlan& desk) {
    bool pass = true;
    std::string parts;
    for (std::uint64_t seed : desk.seeds) {
        const Theorem42Run r = theorem42_run(desk, Cell{Method::layermatch, seed, {}}, 0.05, 3);
        pass = pass && r.trend.non_decreasing;
        parts += fmt::format("{}seed {}: {:.3f} -> {:.3f}", parts.empty() ? "" : "; ", seed, r.trend.first,
                             r.trend.last);
    }
    return {pass, "smoothed satisfied fraction (eps 0.05), " + parts};
}

Outcome gamma_upsilon(const ExperimentPlan& desk) {
    const Cell cell{Method::layermatch, 0, {}};
    const ExperimentPlan plan = resolve_cell(desk, cell);
    const TrainingData data = build_training_data(plan, cell.seed);
    const RunResult trained = run(plan.base, data);
    const Network& model = trained.state.pseudo_label_source();
    const std::vector<double> taus{0.5, 0.7, 0.9, 0.95, 0.99};
    bool monotone = true;
    double prev = 2.0;
    std::string parts;
    for (double tau : taus) {
        const GammaUpsilon g = compute_gamma_upsilon(model, data.unlabeled, data.unlabeled_truth, tau);
        monotone = monotone && g.gamma <= prev;
        prev = g.gamma;
        parts += fmt::format(" {}:{:.4f}", tau, g.gamma);
    }
    const double at_half = compute_gamma_upsilon(model, data.unlabeled, data.unlabeled_truth, 0.5).gamma;
    return {monotone && at_half == 1.0, fmt::format("gamma(tau){}; gamma(0.5) = {}", parts, at_half)};
}

Outcome determinism(const DeskRun& first, const ExperimentPlan& desk, const fs::path& dir) {
    const DeskRun second = run_desk(desk, dir, 3);
    std::size_t compared = 0, differing = 0;
    for (const auto& entry : fs::recursive_directory_iterator(first.dir)) {
        const auto name = entry.path().filename();
        if (name != "metrics.csv" && name != "checkpoint.lmck") continue;
        const fs::path other = second.dir / fs::relative(entry.path(), first.dir);
        ++compared;
        if (!fs::exists(other) || read_bytes(entry.path()) != read_bytes(other)) ++differing;
    }
    return {compared == 2 * first.result.outcomes.size() && differing == 0 && second.result.failed == 0,
            fmt::format("{} metrics/checkpoint files compared across reruns (jobs 1 vs 3), {} differ", compared,
                        differing)};
}

} // namespace

int main(int argc, char** argv) {
    CLI::App app{"Acceptance criteria"};
    std::string config = LAYERMATCH_DESK_CONFIG;
    std::string work = (fs::temp_directory_path() / "layermatch_acceptance").string();
    app.add_option("--config", config, "Desk-scale comparative config");
    app.add_option("--work", work, "Scratch directory for matrix runs");
    CLI11_PARSE(app, argc, argv);

    std::size_t failures = 0;
    auto report = [&](int id, const char* title, const std::function<Outcome()>& body) {
        Outcome o;
        try {
            o = body();
        } catch (const std::exception& e) {
            o = {false, fmt::format("error: {}", e.what())};
        }
        if (!o.pass) ++failures;
        std::cout << fmt::format("{} {:>2} {}: {}", o.pass ? "PASS" : "FAIL", id, title, o.detail) << std::endl;
    };

    ExperimentPlan desk;
    try {
        desk = parse_config_file(config);
    } catch (const std::exception& e) {
        std::cerr << "cannot load " << config << ": " << e.what() << '\n';
        return 2;
    }
    const fs::path root(work);

    report(1, "gradient exactness", gradient_exactness);
    report(2, "grad-relu bit-exactness", grad_relu_exactness);
    report(3, "beta isolation", [&] { return beta_isolation(desk); });
    report(4, "avg-clustering update", avg_clustering_update);
    report(5, "chain-rule identity", chain_rule);
    report(6, "gradient-mass convergence", lemma41);
    DeskRun first;
    report(7, "desk-scale comparative run", [&] {
        first = run_desk(desk, root / "first", 1);
        return comparative(first);
    });
    report(8, "satisfied-fraction trend", [&] { return theorem42(desk); });
    report(9, "gamma/upsilon instrumentation", [&] { return gamma_upsilon(desk); });
    report(10, "full-pipeline determinism", [&] { return determinism(first, desk, root / "second"); });

    fs::remove_all(root);
    return failures == 0 ? 0 : 1;
}
