#pragma once

#include "layermatch/netcore.hpp"

#include <cstddef>
#include <cstdint>
#include <functional>
#include <span>
#include <string>
#include <vector>

namespace layermatch {

/// Axis-aligned box with a vertex count per dimension.
struct GridSpec {
    std::vector<double> lower;
    std::vector<double> upper;
    std::size_t points_per_dim = 2;

    std::size_t dim() const noexcept { return lower.size(); }
    /// Throws ArgumentError unless lower < upper per dimension and points_per_dim >= 2.
    void validate() const;
};

/// P(x) = sigma(beta . M(x) + bias) over a feature stack.
struct BinaryProbe {
    FeatureExtractor features;
    std::vector<double> beta;
    double bias = 0.0;
};

/// The probability of class 0 of a two-class softmax head is a sigmoid with
/// beta = w_0 - w_1 and bias = b_0 - b_1. Throws ArgumentError for other heads.
BinaryProbe binary_probe(const Network& net);
/// One-vs-rest probe: the class row of the classifier taken as beta, features reused.
BinaryProbe ovr_probe(const Network& net, std::size_t class_index = 0);
/// Two-class network whose class-0 probability is sigma(beta . M + bias).
Network binary_network(const FeatureExtractor& features, std::span<const double> beta, double bias);

/// P at every row of `inputs`.
std::vector<double> probe_probabilities(const BinaryProbe& probe, const Matrix& inputs);
/// grad_x P at every row of `inputs`, as P(1 - P) * beta^T * dM/dx (batched reverse mode).
Matrix probe_input_gradients(const BinaryProbe& probe, const Matrix& inputs);

/// Max |coordinate| deviation between grad_wrt_input (class 0) and P(1-P) beta^T J_M(x),
/// J_M from forward-mode propagation. Throws ArgumentError unless the head has two classes.
double chain_rule_identity_check(const Network& binary_model, std::span<const double> x);

/// Largest deviation over `trials` random two-class networks (mixed depths and activations) and inputs.
double chain_rule_random_trials(std::size_t trials, std::uint64_t seed);

struct Lemma41Row {
    double h = 0.0;
    double discrete_sum = 0.0;
    double integral_estimate = 0.0;
};

/// For each spacing h: h^d times the sum of ||grad_x P||_1 over every vertex of the h-grid on
/// the box, next to a composite-trapezoid estimate of the integral of ||grad_x P||_1 at ten times
/// the finest grid resolution (at least points_per_dim vertices per axis). Each h must divide
/// every box side. Throws ArgumentError for a non-binary model, dimension above 2, or a
/// dimension that disagrees with the model.
std::vector<Lemma41Row> lemma41_convergence(const Network& binary_model, const GridSpec& grid,
                                            std::span<const double> spacings);

struct TraceCheckpoint {
    std::size_t iteration = 0;
    Network model;
};

struct Theorem42Point {
    std::size_t iteration = 0;
    double fraction = 0.0;
};

/// Per checkpoint, the fraction of probe rows with P(1-P) ||beta^T dM/dx||_1 <= epsilon
/// under the class-0 one-vs-rest probe. Throws ArgumentError on an empty probe set.
std::vector<Theorem42Point> theorem42_monitor(std::span<const TraceCheckpoint> trace, const Matrix& probe_set,
                                              double epsilon);

/// Trailing moving average with the given window (shorter at the start).
std::vector<double> smooth_trailing(std::span<const double> values, std::size_t window);

struct TrendResult {
    double first = 0.0;
    double last = 0.0;
    bool non_decreasing = false;
};

/// Compares the smoothed fraction at the last checkpoint with the first.
TrendResult theorem42_trend(std::span<const Theorem42Point> points, std::size_t window = 3);

/// A differentiable scalar function of a flat parameter vector.
struct Surface {
    std::string name;
    std::function<double(std::span<const double>)> value;
    std::function<std::vector<double>(std::span<const double>)> gradient;
    std::vector<double> point;
};

struct SurfaceCheck {
    std::string name;
    std::size_t coordinates = 0;
    double worst_relative_error = 0.0;
    std::size_t worst_index = 0;
    double analytic = 0.0;
    double numeric = 0.0;
    double max_abs_difference = 0.0;
    bool pass = false;
};

struct GradcheckReport {
    double tolerance = 0.0;
    std::vector<SurfaceCheck> surfaces;
    bool pass = false;
};

/// Error of one coordinate: 0 when |a - n| <= 1e-10, else |a - n| / max(|a|, |n|).
double gradcheck_error(double analytic, double numeric);

/// Central differences (step `step`) against the analytic gradient on `n_coords` coordinates per
/// surface, sampled without replacement (all coordinates when fewer exist).
/// Throws ArgumentError when tolerance <= 0.
GradcheckReport gradcheck_suite(std::span<const Surface> surfaces, std::size_t n_coords, double tolerance,
                                std::uint64_t seed = 0, double step = 1e-5);

std::vector<double> flatten(std::span<const Matrix* const> matrices);
void unflatten(std::span<const double> values, std::span<Matrix* const> matrices);

/// Loss surfaces of the training objective at a random state of a small tanh network:
/// L_s, L_u, L_ac (features and beta-bar), the unrouted objective over all parameters, and the
/// routed objective split into its feature coordinates (against the full objective) and its
/// classifier coordinates (against L_s).
std::vector<Surface> objective_surfaces(std::uint64_t seed);

struct VerificationRow {
    std::string check;
    std::string quantity;
    double value = 0.0;
    double threshold = 0.0;
    bool pass = false;
};

/// `check,quantity,value,threshold,pass` with a header line.
std::string verification_csv(std::span<const VerificationRow> rows);
/// Aligned plain-text table of the same rows.
std::string verification_text(std::span<const VerificationRow> rows);

} // namespace layermatch
