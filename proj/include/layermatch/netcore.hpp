#pragma once

#include "layermatch/matrix.hpp"

#include <cstdint>
#include <random>
#include <span>
#include <string_view>
#include <vector>

namespace layermatch {

/// Engine used everywhere randomness is needed. Seeded explicitly; never global.
using Rng = std::mt19937_64;

enum class Activation { relu, tanh, identity };

std::string_view to_string(Activation a);
/// Parses "relu" / "tanh" / "identity"; throws ArgumentError otherwise.
Activation parse_activation(std::string_view name);

/// Affine map followed by an elementwise activation.
/// weight is (out_dim x in_dim), bias is (out_dim x 1).
struct DenseLayer {
    Matrix weight;
    Matrix bias;
    Activation activation = Activation::identity;

    std::size_t in_dim() const noexcept { return weight.cols(); }
    std::size_t out_dim() const noexcept { return weight.rows(); }
};

/// The feature extraction stack (every parameter below the linear head).
struct FeatureExtractor {
    std::vector<DenseLayer> layers;

    std::size_t in_dim() const;
    std::size_t out_dim() const;
    /// Throws ShapeError when layers do not chain or the stack is empty.
    void validate() const;
};

/// Linear classification head: logits = features * weight^T + bias^T.
struct Classifier {
    Matrix weight; // num_classes x feature_dim
    Matrix bias;   // num_classes x 1

    std::size_t num_classes() const noexcept { return weight.rows(); }
    std::size_t feature_dim() const noexcept { return weight.cols(); }
};

struct Network {
    FeatureExtractor features;
    Classifier classifier;

    std::size_t in_dim() const { return features.in_dim(); }
    std::size_t num_classes() const noexcept { return classifier.num_classes(); }
    void validate() const;
};

struct ParamGrad {
    Matrix weight;
    Matrix bias;
};

/// Gradients split by parameter group. Shapes mirror FeatureExtractor / Classifier.
struct GradientSet {
    std::vector<ParamGrad> features;
    ParamGrad classifier;

    static GradientSet zeros_like(const Network& net);
    static GradientSet zeros_like(const FeatureExtractor& fx, const Classifier& clf);

    /// this += scale * other (all groups). Throws ShapeError on mismatch.
    GradientSet& add_scaled(const GradientSet& other, double scale);
    void require_compatible(const GradientSet& other, std::string_view what) const;
};

/// Per-layer values recorded by forward_features and consumed by the backward routines.
struct ForwardCache {
    std::vector<Matrix> layer_inputs;
    std::vector<Matrix> pre_activations;
    Matrix output;

    bool empty() const noexcept { return layer_inputs.empty(); }
    void clear();
};

/// Glorot-uniform weights, zero biases.
Network make_network(std::size_t in_dim, std::span<const std::size_t> hidden_dims, std::size_t feature_dim,
                     std::size_t num_classes, Activation activation, Rng& rng);

/// Runs the feature stack on a batch (one example per row). Fills `cache` when given.
Matrix forward_features(const FeatureExtractor& params, const Matrix& inputs, ForwardCache* cache = nullptr);

Matrix compute_logits(const Classifier& clf, const Matrix& features);

/// Row-wise softmax with max subtraction. Throws NumericError on non-finite logits.
Matrix softmax_rows(const Matrix& logits);

Matrix forward_probs(const Classifier& clf, const Matrix& features);

/// Convenience: full network forward to class probabilities.
Matrix predict_probs(const Network& net, const Matrix& inputs);

/// Reverse pass. `logit_grad` is dL/dlogits for the batch that produced `cache`.
GradientSet backward(const FeatureExtractor& fx, const Classifier& clf, const ForwardCache& cache,
                     const Matrix& logit_grad);

/// Reverse pass through the feature stack only. When `input_grad` is non-null it receives dL/dinputs.
std::vector<ParamGrad> backward_features(const FeatureExtractor& fx, const ForwardCache& cache,
                                         const Matrix& feature_grad, Matrix* input_grad = nullptr);

/// d p_class / d x for a single input row.
Matrix grad_wrt_input(const Network& net, const Matrix& x, std::size_t class_index);

/// Jacobian dM/dx (feature_dim x in_dim) at one input, by forward-mode propagation.
Matrix input_jacobian(const FeatureExtractor& fx, std::span<const double> x);

/// Parameter matrices in canonical order: per layer (weight, bias), then classifier (weight, bias).
std::vector<Matrix*> parameter_matrices(Network& net);
std::vector<const Matrix*> parameter_matrices(const Network& net);
std::vector<Matrix*> gradient_matrices(GradientSet& grads);
std::vector<const Matrix*> gradient_matrices(const GradientSet& grads);

std::size_t parameter_count(const Network& net);

} // namespace layermatch
