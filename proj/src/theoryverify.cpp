#include "layermatch/theoryverify.hpp"

#include "layermatch/data.hpp"
#include "layermatch/errors.hpp"
#include "layermatch/sslcore.hpp"

#include <fmt/format.h>

#include <algorithm>
#include <cmath>
#include <memory>
#include <numeric>
#include <utility>

namespace layermatch {

namespace {

constexpr std::size_t kChunkRows = 4096;

double sigmoid(double z) {
    if (z >= 0.0) return 1.0 / (1.0 + std::exp(-z));
    const double e = std::exp(z);
    return e / (1.0 + e);
}

void require_binary(const Network& net, std::string_view what) {
    if (net.num_classes() != 2) {
        throw ArgumentError(fmt::format("{}: expected a binary (2-class) head, got {} classes", what, net.num_classes()));
    }
}

// Sum over rows of ||grad_x P||_1 weighted per row.
double weighted_l1_sum(const BinaryProbe& probe, const Matrix& points, std::span<const double> weights) {
    double total = 0.0;
    for (std::size_t start = 0; start < points.rows(); start += kChunkRows) {
        const std::size_t count = std::min(kChunkRows, points.rows() - start);
        std::vector<std::size_t> rows(count);
        std::iota(rows.begin(), rows.end(), start);
        const Matrix grads = probe_input_gradients(probe, points.gather_rows(rows));
        for (std::size_t r = 0; r < count; ++r) {
            double norm = 0.0;
            for (double g : grads.row(r)) norm += std::abs(g);
            total += weights[start + r] * norm;
        }
    }
    return total;
}

// Tensor-product grid with `intervals[d] + 1` vertices per axis; weights are the products of per-axis weights.
void tensor_grid(const GridSpec& grid, std::span<const std::size_t> intervals, bool trapezoid, Matrix& points,
                 std::vector<double>& weights) {
    const std::size_t d = grid.dim();
    std::size_t total = 1;
    for (std::size_t k = 0; k < d; ++k) total *= intervals[k] + 1;
    points = Matrix(total, d);
    weights.assign(total, 1.0);
    for (std::size_t idx = 0; idx < total; ++idx) {
        std::size_t rest = idx;
        for (std::size_t k = 0; k < d; ++k) {
            const std::size_t n = intervals[k];
            const std::size_t i = rest % (n + 1);
            rest /= n + 1;
            const double h = (grid.upper[k] - grid.lower[k]) / static_cast<double>(n);
            points(idx, k) = i == n ? grid.upper[k] : grid.lower[k] + static_cast<double>(i) * h;
            const bool end = i == 0 || i == n;
            weights[idx] *= trapezoid && end ? 0.5 * h : h;
        }
    }
}

} // namespace

void GridSpec::validate() const {
    if (lower.empty() || lower.size() != upper.size()) {
        throw ArgumentError("grid: lower and upper must be non-empty and of equal length");
    }
    for (std::size_t k = 0; k < lower.size(); ++k) {
        if (!(lower[k] < upper[k])) throw ArgumentError(fmt::format("grid: lower >= upper in dimension {}", k));
    }
    if (points_per_dim < 2) throw ArgumentError("grid: points_per_dim must be at least 2");
}

BinaryProbe binary_probe(const Network& net) {
    require_binary(net, "binary_probe");
    const auto& w = net.classifier.weight;
    BinaryProbe probe{net.features, std::vector<double>(w.cols()), net.classifier.bias(0, 0) - net.classifier.bias(1, 0)};
    for (std::size_t j = 0; j < w.cols(); ++j) probe.beta[j] = w(0, j) - w(1, j);
    return probe;
}

BinaryProbe ovr_probe(const Network& net, std::size_t class_index) {
    if (class_index >= net.num_classes()) {
        throw ArgumentError(fmt::format("ovr_probe: class {} out of range ({} classes)", class_index, net.num_classes()));
    }
    const auto row = net.classifier.weight.row(class_index);
    return BinaryProbe{net.features, std::vector<double>(row.begin(), row.end()), net.classifier.bias(class_index, 0)};
}

Network binary_network(const FeatureExtractor& features, std::span<const double> beta, double bias) {
    if (beta.size() != features.out_dim()) throw ShapeError("binary_network: beta length does not match features");
    Network net;
    net.features = features;
    net.classifier.weight = Matrix(2, beta.size());
    net.classifier.bias = Matrix(2, 1);
    for (std::size_t j = 0; j < beta.size(); ++j) net.classifier.weight(0, j) = beta[j];
    net.classifier.bias(0, 0) = bias;
    return net;
}

std::vector<double> probe_probabilities(const BinaryProbe& probe, const Matrix& inputs) {
    const Matrix feats = forward_features(probe.features, inputs);
    if (feats.cols() != probe.beta.size()) throw ShapeError("probe: beta length does not match features");
    std::vector<double> p(feats.rows());
    for (std::size_t r = 0; r < feats.rows(); ++r) {
        double z = probe.bias;
        for (std::size_t j = 0; j < feats.cols(); ++j) z += probe.beta[j] * feats(r, j);
        p[r] = sigmoid(z);
    }
    return p;
}

Matrix probe_input_gradients(const BinaryProbe& probe, const Matrix& inputs) {
    ForwardCache cache;
    const Matrix feats = forward_features(probe.features, inputs, &cache);
    if (feats.cols() != probe.beta.size()) throw ShapeError("probe: beta length does not match features");
    Matrix feature_grad(feats.rows(), feats.cols());
    for (std::size_t r = 0; r < feats.rows(); ++r) {
        double z = probe.bias;
        for (std::size_t j = 0; j < feats.cols(); ++j) z += probe.beta[j] * feats(r, j);
        const double p = sigmoid(z);
        for (std::size_t j = 0; j < feats.cols(); ++j) feature_grad(r, j) = p * (1.0 - p) * probe.beta[j];
    }
    Matrix input_grad;
    backward_features(probe.features, cache, feature_grad, &input_grad);
    return input_grad;
}

double chain_rule_identity_check(const Network& binary_model, std::span<const double> x) {
    require_binary(binary_model, "chain_rule_identity_check");
    const Matrix row(1, x.size(), std::vector<double>(x.begin(), x.end()));
    const Matrix direct = grad_wrt_input(binary_model, row, 0);

    const BinaryProbe probe = binary_probe(binary_model);
    const double p = probe_probabilities(probe, row)[0];
    const Matrix jac = input_jacobian(binary_model.features, x);
    double deviation = 0.0;
    for (std::size_t i = 0; i < x.size(); ++i) {
        double rhs = 0.0;
        for (std::size_t j = 0; j < jac.rows(); ++j) rhs += probe.beta[j] * jac(j, i);
        rhs *= p * (1.0 - p);
        deviation = std::max(deviation, std::abs(direct(0, i) - rhs));
    }
    return deviation;
}

double chain_rule_random_trials(std::size_t trials, std::uint64_t seed) {
    Rng rng(seed);
    std::uniform_int_distribution<std::size_t> dim(1, 4), width(1, 6), depth(0, 2), act(0, 2);
    std::uniform_real_distribution<double> bias(-0.5, 0.5);
    std::normal_distribution<double> normal(0.0, 1.0);
    constexpr Activation kActivations[] = {Activation::tanh, Activation::relu, Activation::identity};
    double worst = 0.0;
    for (std::size_t t = 0; t < trials; ++t) {
        std::vector<std::size_t> hidden(depth(rng));
        for (auto& h : hidden) h = width(rng);
        const std::size_t in_dim = dim(rng);
        Network net = make_network(in_dim, hidden, width(rng), 2, kActivations[act(rng)], rng);
        for (auto& layer : net.features.layers) {
            for (auto& b : layer.bias.values()) b = bias(rng);
        }
        for (auto& b : net.classifier.bias.values()) b = bias(rng);
        std::vector<double> x(in_dim);
        for (auto& v : x) v = normal(rng);
        worst = std::max(worst, chain_rule_identity_check(net, x));
    }
    return worst;
}

std::vector<Lemma41Row> lemma41_convergence(const Network& binary_model, const GridSpec& grid,
                                            std::span<const double> spacings) {
    require_binary(binary_model, "lemma41_convergence");
    grid.validate();
    const std::size_t d = grid.dim();
    if (d > 2) throw ArgumentError(fmt::format("lemma41_convergence: dimension {} > 2 is not supported", d));
    if (d != binary_model.in_dim()) {
        throw ArgumentError(fmt::format("lemma41_convergence: grid has {} dimensions, model expects {}", d,
                                        binary_model.in_dim()));
    }
    if (spacings.empty()) throw ArgumentError("lemma41_convergence: no spacings given");

    std::vector<std::vector<std::size_t>> intervals;
    std::vector<std::size_t> finest(d, 0);
    for (double h : spacings) {
        if (!(h > 0.0)) throw ArgumentError(fmt::format("lemma41_convergence: spacing {} must be positive", h));
        std::vector<std::size_t> n(d);
        for (std::size_t k = 0; k < d; ++k) {
            const double len = grid.upper[k] - grid.lower[k];
            const double count = std::round(len / h);
            if (count < 1.0 || std::abs(count * h - len) > 1e-9 * len) {
                throw ArgumentError(fmt::format("lemma41_convergence: spacing {} does not divide side {}", h, len));
            }
            n[k] = static_cast<std::size_t>(count);
            finest[k] = std::max(finest[k], n[k]);
        }
        intervals.push_back(std::move(n));
    }

    const BinaryProbe probe = binary_probe(binary_model);
    std::vector<std::size_t> quad(d);
    for (std::size_t k = 0; k < d; ++k) quad[k] = std::max(10 * finest[k], grid.points_per_dim - 1);
    Matrix points;
    std::vector<double> weights;
    tensor_grid(grid, quad, true, points, weights);
    const double integral = weighted_l1_sum(probe, points, weights);

    std::vector<Lemma41Row> rows;
    for (std::size_t s = 0; s < spacings.size(); ++s) {
        tensor_grid(grid, intervals[s], false, points, weights);
        // Every vertex carries the full cell volume h^d.
        const double volume = std::pow(spacings[s], static_cast<double>(d));
        std::fill(weights.begin(), weights.end(), volume);
        rows.push_back({spacings[s], weighted_l1_sum(probe, points, weights), integral});
    }
    return rows;
}

std::vector<Theorem42Point> theorem42_monitor(std::span<const TraceCheckpoint> trace, const Matrix& probe_set,
                                              double epsilon) {
    if (probe_set.rows() == 0) throw ArgumentError("theorem42_monitor: empty probe set");
    std::vector<Theorem42Point> out;
    for (const auto& checkpoint : trace) {
        const BinaryProbe probe = ovr_probe(checkpoint.model, 0);
        const Matrix grads = probe_input_gradients(probe, probe_set);
        std::size_t satisfied = 0;
        for (std::size_t r = 0; r < grads.rows(); ++r) {
            double norm = 0.0;
            for (double g : grads.row(r)) norm += std::abs(g);
            if (norm <= epsilon) ++satisfied;
        }
        out.push_back({checkpoint.iteration, static_cast<double>(satisfied) / static_cast<double>(grads.rows())});
    }
    return out;
}

std::vector<double> smooth_trailing(std::span<const double> values, std::size_t window) {
    if (window == 0) throw ArgumentError("smooth_trailing: window must be at least 1");
    std::vector<double> out(values.size());
    for (std::size_t i = 0; i < values.size(); ++i) {
        const std::size_t first = i + 1 >= window ? i + 1 - window : 0;
        double sum = 0.0;
        for (std::size_t j = first; j <= i; ++j) sum += values[j];
        out[i] = sum / static_cast<double>(i - first + 1);
    }
    return out;
}

TrendResult theorem42_trend(std::span<const Theorem42Point> points, std::size_t window) {
    if (points.empty()) throw ArgumentError("theorem42_trend: empty trace");
    std::vector<double> fractions;
    for (const auto& p : points) fractions.push_back(p.fraction);
    const auto smoothed = smooth_trailing(fractions, window);
    return {smoothed.front(), smoothed.back(), smoothed.back() >= smoothed.front()};
}

double gradcheck_error(double analytic, double numeric) {
    const double diff = std::abs(analytic - numeric);
    if (diff <= 1e-10) return 0.0;
    return diff / std::max(std::abs(analytic), std::abs(numeric));
}

GradcheckReport gradcheck_suite(std::span<const Surface> surfaces, std::size_t n_coords, double tolerance,
                                std::uint64_t seed, double step) {
    if (!(tolerance > 0.0)) throw ArgumentError("gradcheck_suite: tolerance must be positive");
    if (!(step > 0.0)) throw ArgumentError("gradcheck_suite: step must be positive");
    GradcheckReport report;
    report.tolerance = tolerance;
    report.pass = true;
    Rng rng(seed);
    for (const auto& surface : surfaces) {
        const std::vector<double> analytic = surface.gradient(surface.point);
        if (analytic.size() != surface.point.size()) {
            throw ShapeError(fmt::format("gradcheck: surface {} gradient has wrong length", surface.name));
        }
        std::vector<std::size_t> coords(surface.point.size());
        std::iota(coords.begin(), coords.end(), 0);
        if (n_coords < coords.size()) {
            std::shuffle(coords.begin(), coords.end(), rng);
            coords.resize(n_coords);
            std::sort(coords.begin(), coords.end());
        }
        SurfaceCheck check{surface.name, coords.size()};
        std::vector<double> x = surface.point;
        for (std::size_t i : coords) {
            const double original = x[i];
            x[i] = original + step;
            const double plus = surface.value(x);
            x[i] = original - step;
            const double minus = surface.value(x);
            x[i] = original;
            const double numeric = (plus - minus) / (2.0 * step);
            const double err = gradcheck_error(analytic[i], numeric);
            check.max_abs_difference = std::max(check.max_abs_difference, std::abs(analytic[i] - numeric));
            if (err >= check.worst_relative_error) {
                check.worst_relative_error = err;
                check.worst_index = i;
                check.analytic = analytic[i];
                check.numeric = numeric;
            }
        }
        check.pass = check.worst_relative_error < tolerance;
        report.pass = report.pass && check.pass;
        report.surfaces.push_back(std::move(check));
    }
    return report;
}

std::vector<double> flatten(std::span<const Matrix* const> matrices) {
    std::vector<double> out;
    for (const Matrix* m : matrices) out.insert(out.end(), m->values().begin(), m->values().end());
    return out;
}

void unflatten(std::span<const double> values, std::span<Matrix* const> matrices) {
    std::size_t total = 0;
    for (const Matrix* m : matrices) total += m->values().size();
    if (total != values.size()) throw ShapeError("unflatten: length does not match matrices");
    std::size_t offset = 0;
    for (Matrix* m : matrices) {
        auto v = m->values();
        std::copy_n(values.begin() + static_cast<std::ptrdiff_t>(offset), v.size(), v.begin());
        offset += v.size();
    }
}

std::vector<Surface> objective_surfaces(std::uint64_t seed) {
    struct Fixture {
        Network net;
        Classifier beta_bar;
        LabeledBatch labeled;
        PseudoBatch pseudo;
        AugmentationSpec aug;
        Rng labeled_rng;
        Rng unlabeled_rng;
    };

    Rng rng(seed);
    std::normal_distribution<double> normal(0.0, 1.0);
    std::uniform_real_distribution<double> jitter(-0.3, 0.3);
    const std::size_t in_dim = 2;
    const std::size_t classes = 3;
    const std::vector<std::size_t> hidden{16, 12};

    auto fx = std::make_shared<Fixture>();
    fx->net = make_network(in_dim, hidden, 8, classes, Activation::tanh, rng);
    for (Matrix* m : parameter_matrices(fx->net)) {
        for (auto& v : m->values()) v += jitter(rng);
    }
    fx->beta_bar = fx->net.classifier;
    for (auto& v : fx->beta_bar.weight.values()) v += jitter(rng);
    for (auto& v : fx->beta_bar.bias.values()) v += jitter(rng);

    std::uniform_int_distribution<int> label(0, static_cast<int>(classes) - 1);
    fx->labeled.inputs = Matrix(6, in_dim);
    for (auto& v : fx->labeled.inputs.values()) v = normal(rng);
    for (std::size_t i = 0; i < 6; ++i) fx->labeled.labels.push_back(label(rng));

    const std::size_t n_pseudo = 8;
    fx->pseudo.inputs = Matrix(n_pseudo, in_dim);
    for (auto& v : fx->pseudo.inputs.values()) v = normal(rng);
    std::vector<int> pseudo_labels;
    for (std::size_t i = 0; i < n_pseudo; ++i) {
        pseudo_labels.push_back(label(rng));
        fx->pseudo.confidences.push_back(0.97);
        fx->pseudo.source_rows.push_back(i);
    }
    fx->pseudo.pseudo_labels = one_hot(pseudo_labels, classes);
    fx->labeled_rng = Rng(rng());
    fx->unlabeled_rng = Rng(rng());

    const std::size_t n_all = parameter_count(fx->net);
    const std::size_t n_beta = fx->net.classifier.weight.values().size() + fx->net.classifier.bias.values().size();
    const std::size_t n_theta = n_all - n_beta;

    auto with_params = [fx](std::span<const double> p) {
        Network net = fx->net;
        auto mats = parameter_matrices(net);
        unflatten(p, mats);
        return net;
    };
    auto objective = [fx](const Network& net, bool grad_relu) {
        ObjectiveOptions options;
        options.grad_relu = grad_relu;
        AvgClusteringState avg;
        avg.beta_bar = fx->beta_bar;
        avg.iteration_t = 1;
        Rng lr = fx->labeled_rng;
        Rng ur = fx->unlabeled_rng;
        return layermatch_objective(net, fx->labeled, fx->pseudo, avg, options, fx->aug, lr, ur);
    };
    const std::vector<double> all_params = flatten(parameter_matrices(std::as_const(fx->net)));

    std::vector<Surface> surfaces;

    surfaces.push_back({"L_s",
                        [=](std::span<const double> p) {
                            Rng r = fx->labeled_rng;
                            return supervised_loss(with_params(p), fx->labeled, fx->aug, r).loss;
                        },
                        [=](std::span<const double> p) {
                            Rng r = fx->labeled_rng;
                            const auto res = supervised_loss(with_params(p), fx->labeled, fx->aug, r);
                            return flatten(gradient_matrices(res.grads));
                        },
                        all_params});

    surfaces.push_back({"L_u",
                        [=](std::span<const double> p) {
                            Rng r = fx->unlabeled_rng;
                            return unsupervised_loss(with_params(p), fx->pseudo, fx->aug, r).loss;
                        },
                        [=](std::span<const double> p) {
                            Rng r = fx->unlabeled_rng;
                            const auto res = unsupervised_loss(with_params(p), fx->pseudo, fx->aug, r);
                            return flatten(gradient_matrices(res.grads));
                        },
                        all_params});

    // L_ac over (Theta, beta_bar).
    auto split_ac = [fx](std::span<const double> p) {
        Network net = fx->net;
        Classifier bar = fx->beta_bar;
        std::vector<Matrix*> mats;
        for (auto& layer : net.features.layers) {
            mats.push_back(&layer.weight);
            mats.push_back(&layer.bias);
        }
        mats.push_back(&bar.weight);
        mats.push_back(&bar.bias);
        unflatten(p, mats);
        return std::pair{net.features, bar};
    };
    std::vector<double> ac_point(all_params.begin(), all_params.begin() + static_cast<std::ptrdiff_t>(n_theta));
    for (double v : fx->beta_bar.weight.values()) ac_point.push_back(v);
    for (double v : fx->beta_bar.bias.values()) ac_point.push_back(v);
    surfaces.push_back({"L_ac",
                        [=](std::span<const double> p) {
                            const auto [features, bar] = split_ac(p);
                            Rng r = fx->unlabeled_rng;
                            return avg_clustering_loss(features, bar, fx->pseudo, fx->aug, r).loss;
                        },
                        [=](std::span<const double> p) {
                            const auto [features, bar] = split_ac(p);
                            Rng r = fx->unlabeled_rng;
                            const auto res = avg_clustering_loss(features, bar, fx->pseudo, fx->aug, r);
                            std::vector<const Matrix*> mats;
                            for (const auto& g : res.theta) {
                                mats.push_back(&g.weight);
                                mats.push_back(&g.bias);
                            }
                            mats.push_back(&res.beta_bar.weight);
                            mats.push_back(&res.beta_bar.bias);
                            return flatten(mats);
                        },
                        ac_point});

    surfaces.push_back({"objective",
                        [=](std::span<const double> p) { return objective(with_params(p), false).total; },
                        [=](std::span<const double> p) {
                            const auto res = objective(with_params(p), false);
                            return flatten(gradient_matrices(res.routed));
                        },
                        all_params});

    // Routed objective: feature coordinates follow the full objective, classifier coordinates follow L_s.
    const std::vector<double> theta_point(all_params.begin(), all_params.begin() + static_cast<std::ptrdiff_t>(n_theta));
    const std::vector<double> beta_point(all_params.begin() + static_cast<std::ptrdiff_t>(n_theta), all_params.end());
    auto join = [](std::span<const double> a, std::span<const double> b) {
        std::vector<double> out(a.begin(), a.end());
        out.insert(out.end(), b.begin(), b.end());
        return out;
    };
    surfaces.push_back({"objective_routed_features",
                        [=](std::span<const double> p) { return objective(with_params(join(p, beta_point)), true).total; },
                        [=](std::span<const double> p) {
                            const auto res = objective(with_params(join(p, beta_point)), true);
                            auto g = flatten(gradient_matrices(res.routed));
                            g.resize(n_theta);
                            return g;
                        },
                        theta_point});
    surfaces.push_back({"objective_routed_classifier",
                        [=](std::span<const double> p) { return objective(with_params(join(theta_point, p)), true).loss_s; },
                        [=](std::span<const double> p) {
                            const auto res = objective(with_params(join(theta_point, p)), true);
                            auto g = flatten(gradient_matrices(res.routed));
                            return std::vector<double>(g.begin() + static_cast<std::ptrdiff_t>(n_theta), g.end());
                        },
                        beta_point});
    return surfaces;
}

std::string verification_csv(std::span<const VerificationRow> rows) {
    std::string out = "check,quantity,value,threshold,pass\n";
    for (const auto& r : rows) {
        out += fmt::format("{},{},{:.12g},{:.12g},{}\n", r.check, r.quantity, r.value, r.threshold, r.pass ? "true" : "false");
    }
    return out;
}

std::string verification_text(std::span<const VerificationRow> rows) {
    std::size_t w_check = 5, w_quantity = 8;
    for (const auto& r : rows) {
        w_check = std::max(w_check, r.check.size());
        w_quantity = std::max(w_quantity, r.quantity.size());
    }
    std::string out = fmt::format("{:<{}}  {:<{}}  {:>14}  {:>14}  {}\n", "check", w_check, "quantity", w_quantity,
                                  "value", "threshold", "result");
    for (const auto& r : rows) {
        out += fmt::format("{:<{}}  {:<{}}  {:>14.6g}  {:>14.6g}  {}\n", r.check, w_check, r.quantity, w_quantity,
                           r.value, r.threshold, r.pass ? "PASS" : "FAIL");
    }
    return out;
}

} // namespace layermatch
