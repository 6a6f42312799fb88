#include "layermatch/netcore.hpp"

#include "layermatch/errors.hpp"

#include <fmt/format.h>

#include <algorithm>
#include <cmath>

namespace layermatch {

namespace {

double activate(Activation a, double z) {
    switch (a) {
    case Activation::relu: return z > 0.0 ? z : 0.0;
    case Activation::tanh: return std::tanh(z);
    case Activation::identity: return z;
    }
    return z;
}

double activation_slope(Activation a, double z) {
    switch (a) {
    case Activation::relu: return z > 0.0 ? 1.0 : 0.0;
    case Activation::tanh: {
        const double t = std::tanh(z);
        return 1.0 - t * t;
    }
    case Activation::identity: return 1.0;
    }
    return 1.0;
}

Matrix column_sums(const Matrix& m) {
    Matrix out(m.cols(), 1);
    for (std::size_t r = 0; r < m.rows(); ++r)
        for (std::size_t c = 0; c < m.cols(); ++c) out(c, 0) += m(r, c);
    return out;
}

// rows of `inputs` times weight^T plus bias.
Matrix affine(const Matrix& inputs, const Matrix& weight, const Matrix& bias) {
    Matrix z = matmul_transposed(inputs, weight);
    for (std::size_t r = 0; r < z.rows(); ++r)
        for (std::size_t c = 0; c < z.cols(); ++c) z(r, c) += bias(c, 0);
    return z;
}

void glorot_uniform(Matrix& w, Rng& rng) {
    const double limit = std::sqrt(6.0 / static_cast<double>(w.rows() + w.cols()));
    std::uniform_real_distribution<double> dist(-limit, limit);
    for (double& v : w.values()) v = dist(rng);
}

} // namespace

std::string_view to_string(Activation a) {
    switch (a) {
    case Activation::relu: return "relu";
    case Activation::tanh: return "tanh";
    case Activation::identity: return "identity";
    }
    return "identity";
}

Activation parse_activation(std::string_view name) {
    if (name == "relu") return Activation::relu;
    if (name == "tanh") return Activation::tanh;
    if (name == "identity") return Activation::identity;
    throw ArgumentError(fmt::format("unknown activation '{}'", name));
}

std::size_t FeatureExtractor::in_dim() const {
    if (layers.empty()) throw ShapeError("feature extractor has no layers");
    return layers.front().in_dim();
}

std::size_t FeatureExtractor::out_dim() const {
    if (layers.empty()) throw ShapeError("feature extractor has no layers");
    return layers.back().out_dim();
}

void FeatureExtractor::validate() const {
    if (layers.empty()) throw ShapeError("feature extractor has no layers");
    for (std::size_t k = 0; k < layers.size(); ++k) {
        const auto& layer = layers[k];
        if (layer.bias.rows() != layer.out_dim() || layer.bias.cols() != 1) {
            throw ShapeError(fmt::format("layer {}: bias is {}x{}, expected {}x1", k, layer.bias.rows(),
                                         layer.bias.cols(), layer.out_dim()));
        }
        if (k + 1 < layers.size() && layers[k + 1].in_dim() != layer.out_dim()) {
            throw ShapeError(fmt::format("layer {}: input dim {} does not match layer {} output dim {}", k + 1,
                                         layers[k + 1].in_dim(), k, layer.out_dim()));
        }
    }
}

void Network::validate() const {
    features.validate();
    if (classifier.feature_dim() != features.out_dim()) {
        throw ShapeError(fmt::format("classifier expects {} features, extractor produces {}",
                                     classifier.feature_dim(), features.out_dim()));
    }
    if (classifier.bias.rows() != classifier.num_classes() || classifier.bias.cols() != 1) {
        throw ShapeError("classifier bias shape does not match class count");
    }
}

GradientSet GradientSet::zeros_like(const FeatureExtractor& fx, const Classifier& clf) {
    GradientSet g;
    g.features.reserve(fx.layers.size());
    for (const auto& layer : fx.layers) {
        g.features.push_back({Matrix::zeros_like(layer.weight), Matrix::zeros_like(layer.bias)});
    }
    g.classifier = {Matrix::zeros_like(clf.weight), Matrix::zeros_like(clf.bias)};
    return g;
}

GradientSet GradientSet::zeros_like(const Network& net) { return zeros_like(net.features, net.classifier); }

void GradientSet::require_compatible(const GradientSet& other, std::string_view what) const {
    if (features.size() != other.features.size()) {
        throw ShapeError(fmt::format("{}: {} feature layers vs {}", what, features.size(), other.features.size()));
    }
    for (std::size_t k = 0; k < features.size(); ++k) {
        require_same_shape(features[k].weight, other.features[k].weight, what);
        require_same_shape(features[k].bias, other.features[k].bias, what);
    }
    require_same_shape(classifier.weight, other.classifier.weight, what);
    require_same_shape(classifier.bias, other.classifier.bias, what);
}

GradientSet& GradientSet::add_scaled(const GradientSet& other, double scale) {
    require_compatible(other, "GradientSet::add_scaled");
    for (std::size_t k = 0; k < features.size(); ++k) {
        features[k].weight.add_scaled(other.features[k].weight, scale);
        features[k].bias.add_scaled(other.features[k].bias, scale);
    }
    classifier.weight.add_scaled(other.classifier.weight, scale);
    classifier.bias.add_scaled(other.classifier.bias, scale);
    return *this;
}

void ForwardCache::clear() {
    layer_inputs.clear();
    pre_activations.clear();
    output = Matrix();
}

Network make_network(std::size_t in_dim, std::span<const std::size_t> hidden_dims, std::size_t feature_dim,
                     std::size_t num_classes, Activation activation, Rng& rng) {
    if (in_dim == 0 || feature_dim == 0 || num_classes < 2) {
        throw ArgumentError("make_network: dimensions must be positive and num_classes >= 2");
    }
    Network net;
    std::size_t prev = in_dim;
    auto push = [&](std::size_t out) {
        DenseLayer layer{Matrix(out, prev), Matrix(out, 1), activation};
        glorot_uniform(layer.weight, rng);
        net.features.layers.push_back(std::move(layer));
        prev = out;
    };
    for (std::size_t h : hidden_dims) push(h);
    push(feature_dim);
    net.classifier.weight = Matrix(num_classes, feature_dim);
    net.classifier.bias = Matrix(num_classes, 1);
    glorot_uniform(net.classifier.weight, rng);
    return net;
}

Matrix forward_features(const FeatureExtractor& params, const Matrix& inputs, ForwardCache* cache) {
    if (params.layers.empty()) throw ShapeError("forward_features: feature extractor has no layers");
    if (cache) cache->clear();
    Matrix a = inputs;
    for (std::size_t k = 0; k < params.layers.size(); ++k) {
        const auto& layer = params.layers[k];
        if (a.cols() != layer.in_dim()) {
            throw ShapeError(fmt::format("forward_features: layer {} expects {} inputs, got {}", k, layer.in_dim(),
                                         a.cols()));
        }
        Matrix z = affine(a, layer.weight, layer.bias);
        Matrix out(z.rows(), z.cols());
        for (std::size_t i = 0; i < z.size(); ++i) out.values()[i] = activate(layer.activation, z.values()[i]);
        if (cache) {
            cache->layer_inputs.push_back(std::move(a));
            cache->pre_activations.push_back(std::move(z));
        }
        a = std::move(out);
    }
    if (cache) cache->output = a;
    return a;
}

Matrix compute_logits(const Classifier& clf, const Matrix& features) {
    if (features.cols() != clf.feature_dim()) {
        throw ShapeError(fmt::format("classifier expects {} features, got {}", clf.feature_dim(), features.cols()));
    }
    return affine(features, clf.weight, clf.bias);
}

Matrix softmax_rows(const Matrix& logits) {
    if (!logits.all_finite()) throw NumericError("softmax: non-finite logits");
    Matrix probs(logits.rows(), logits.cols());
    for (std::size_t r = 0; r < logits.rows(); ++r) {
        auto in = logits.row(r);
        auto out = probs.row(r);
        const double peak = *std::max_element(in.begin(), in.end());
        double total = 0.0;
        for (std::size_t c = 0; c < in.size(); ++c) {
            out[c] = std::exp(in[c] - peak);
            total += out[c];
        }
        for (double& v : out) v /= total;
    }
    return probs;
}

Matrix forward_probs(const Classifier& clf, const Matrix& features) {
    return softmax_rows(compute_logits(clf, features));
}

Matrix predict_probs(const Network& net, const Matrix& inputs) {
    return forward_probs(net.classifier, forward_features(net.features, inputs));
}

std::vector<ParamGrad> backward_features(const FeatureExtractor& fx, const ForwardCache& cache,
                                         const Matrix& feature_grad, Matrix* input_grad) {
    if (cache.empty()) throw StateError("backward: no forward cache recorded");
    if (cache.layer_inputs.size() != fx.layers.size() || cache.pre_activations.size() != fx.layers.size()) {
        throw StateError(fmt::format("backward: cache holds {} layers, extractor has {}", cache.layer_inputs.size(),
                                     fx.layers.size()));
    }
    for (std::size_t k = 0; k < fx.layers.size(); ++k) {
        if (cache.layer_inputs[k].cols() != fx.layers[k].in_dim() ||
            cache.pre_activations[k].cols() != fx.layers[k].out_dim()) {
            throw StateError(fmt::format("backward: cache for layer {} is stale (shape mismatch)", k));
        }
    }
    if (!feature_grad.same_shape(cache.output)) {
        throw ShapeError("backward: upstream gradient does not match cached output shape");
    }

    std::vector<ParamGrad> grads(fx.layers.size());
    Matrix upstream = feature_grad;
    for (std::size_t k = fx.layers.size(); k-- > 0;) {
        const auto& layer = fx.layers[k];
        const Matrix& z = cache.pre_activations[k];
        Matrix dz(z.rows(), z.cols());
        for (std::size_t i = 0; i < z.size(); ++i) {
            dz.values()[i] = upstream.values()[i] * activation_slope(layer.activation, z.values()[i]);
        }
        grads[k].weight = transposed_matmul(dz, cache.layer_inputs[k]);
        grads[k].bias = column_sums(dz);
        if (k > 0 || input_grad) upstream = matmul(dz, layer.weight);
    }
    if (input_grad) *input_grad = std::move(upstream);
    return grads;
}

GradientSet backward(const FeatureExtractor& fx, const Classifier& clf, const ForwardCache& cache,
                     const Matrix& logit_grad) {
    if (cache.empty()) throw StateError("backward: no forward cache recorded");
    if (logit_grad.rows() != cache.output.rows() || logit_grad.cols() != clf.num_classes()) {
        throw ShapeError(fmt::format("backward: logit gradient is {}x{}, expected {}x{}", logit_grad.rows(),
                                     logit_grad.cols(), cache.output.rows(), clf.num_classes()));
    }
    if (cache.output.cols() != clf.feature_dim()) {
        throw StateError("backward: cached features do not match classifier width");
    }
    GradientSet g;
    g.classifier.weight = transposed_matmul(logit_grad, cache.output);
    g.classifier.bias = column_sums(logit_grad);
    const Matrix feature_grad = matmul(logit_grad, clf.weight);
    g.features = backward_features(fx, cache, feature_grad);
    return g;
}

Matrix grad_wrt_input(const Network& net, const Matrix& x, std::size_t class_index) {
    if (x.rows() != 1) throw ArgumentError("grad_wrt_input: expected a single input row");
    if (class_index >= net.num_classes()) {
        throw ArgumentError(fmt::format("grad_wrt_input: class {} out of range (num_classes={})", class_index,
                                        net.num_classes()));
    }
    ForwardCache cache;
    const Matrix feats = forward_features(net.features, x, &cache);
    const Matrix probs = forward_probs(net.classifier, feats);
    // d p_c / d logit_j = p_c (delta_cj - p_j)
    Matrix dlogits(1, net.num_classes());
    const double pc = probs(0, class_index);
    for (std::size_t j = 0; j < net.num_classes(); ++j) {
        dlogits(0, j) = pc * ((j == class_index ? 1.0 : 0.0) - probs(0, j));
    }
    Matrix input_grad;
    backward_features(net.features, cache, matmul(dlogits, net.classifier.weight), &input_grad);
    return input_grad;
}

Matrix input_jacobian(const FeatureExtractor& fx, std::span<const double> x) {
    fx.validate();
    if (x.size() != fx.in_dim()) throw ShapeError("input_jacobian: input length does not match extractor");
    Matrix a(1, x.size(), std::vector<double>(x.begin(), x.end()));
    Matrix jac = Matrix::identity(x.size());
    for (const auto& layer : fx.layers) {
        const Matrix z = affine(a, layer.weight, layer.bias);
        Matrix next_jac = matmul(layer.weight, jac);
        Matrix next_a(1, z.cols());
        for (std::size_t i = 0; i < z.cols(); ++i) {
            const double slope = activation_slope(layer.activation, z(0, i));
            for (double& v : next_jac.row(i)) v *= slope;
            next_a(0, i) = activate(layer.activation, z(0, i));
        }
        a = std::move(next_a);
        jac = std::move(next_jac);
    }
    return jac;
}

std::vector<Matrix*> parameter_matrices(Network& net) {
    std::vector<Matrix*> out;
    for (auto& layer : net.features.layers) {
        out.push_back(&layer.weight);
        out.push_back(&layer.bias);
    }
    out.push_back(&net.classifier.weight);
    out.push_back(&net.classifier.bias);
    return out;
}

std::vector<const Matrix*> parameter_matrices(const Network& net) {
    std::vector<const Matrix*> out;
    for (const auto& layer : net.features.layers) {
        out.push_back(&layer.weight);
        out.push_back(&layer.bias);
    }
    out.push_back(&net.classifier.weight);
    out.push_back(&net.classifier.bias);
    return out;
}

std::vector<Matrix*> gradient_matrices(GradientSet& grads) {
    std::vector<Matrix*> out;
    for (auto& g : grads.features) {
        out.push_back(&g.weight);
        out.push_back(&g.bias);
    }
    out.push_back(&grads.classifier.weight);
    out.push_back(&grads.classifier.bias);
    return out;
}

std::vector<const Matrix*> gradient_matrices(const GradientSet& grads) {
    std::vector<const Matrix*> out;
    for (const auto& g : grads.features) {
        out.push_back(&g.weight);
        out.push_back(&g.bias);
    }
    out.push_back(&grads.classifier.weight);
    out.push_back(&grads.classifier.bias);
    return out;
}

std::size_t parameter_count(const Network& net) {
    std::size_t n = 0;
    for (const Matrix* m : parameter_matrices(net)) n += m->size();
    return n;
}

} // namespace layermatch
