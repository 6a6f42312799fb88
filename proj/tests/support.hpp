#pragma once

#include "layermatch/netcore.hpp"

#include <cmath>
#include <functional>
#include <random>
#include <vector>

namespace testsupport {

using layermatch::Matrix;
using layermatch::Network;
using layermatch::Rng;

inline double rel_error(double analytic, double numeric) {
    const double diff = std::abs(analytic - numeric);
    if (diff <= 1e-10) return 0.0;
    return diff / std::max(std::abs(analytic), std::abs(numeric));
}

inline double central_difference(const std::function<double()>& f, double& coordinate, double step = 1e-5) {
    const double saved = coordinate;
    coordinate = saved + step;
    const double plus = f();
    coordinate = saved - step;
    const double minus = f();
    coordinate = saved;
    return (plus - minus) / (2.0 * step);
}

inline Matrix random_matrix(std::size_t rows, std::size_t cols, Rng& rng, double scale = 1.0) {
    std::normal_distribution<double> normal(0.0, scale);
    Matrix m(rows, cols);
    for (auto& v : m.values()) v = normal(rng);
    return m;
}

/// make_network plus random biases so no coordinate sits at a symmetric point.
inline Network random_network(std::size_t in_dim, std::vector<std::size_t> hidden, std::size_t feat,
                              std::size_t classes, layermatch::Activation act, Rng& rng) {
    Network net = layermatch::make_network(in_dim, hidden, feat, classes, act, rng);
    std::uniform_real_distribution<double> u(-0.5, 0.5);
    for (auto& layer : net.features.layers) {
        for (auto& b : layer.bias.values()) b = u(rng);
    }
    for (auto& b : net.classifier.bias.values()) b = u(rng);
    return net;
}

/// Mean cross-entropy of softmax(logits) against integer labels, computed directly.
inline double reference_cross_entropy(const Network& net, const Matrix& x, const std::vector<int>& labels) {
    const Matrix feats = layermatch::forward_features(net.features, x);
    double total = 0.0;
    for (std::size_t r = 0; r < x.rows(); ++r) {
        std::vector<double> z(net.num_classes());
        double zmax = -1e300;
        for (std::size_t c = 0; c < z.size(); ++c) {
            z[c] = net.classifier.bias(c, 0);
            for (std::size_t j = 0; j < feats.cols(); ++j) z[c] += net.classifier.weight(c, j) * feats(r, j);
            zmax = std::max(zmax, z[c]);
        }
        double sum = 0.0;
        for (double v : z) sum += std::exp(v - zmax);
        total += -(z[static_cast<std::size_t>(labels[r])] - zmax - std::log(sum));
    }
    return total / static_cast<double>(x.rows());
}

} // namespace testsupport
