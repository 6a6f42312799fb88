#include "layermatch/sslcore.hpp"

#include "layermatch/errors.hpp"

#include <fmt/format.h>

#include <algorithm>
#include <cmath>
#include <numeric>

namespace layermatch {

namespace {

void require_compatible(const Classifier& a, const Classifier& b, std::string_view what) {
    require_same_shape(a.weight, b.weight, what);
    require_same_shape(a.bias, b.bias, what);
}

std::vector<ParamGrad> zero_feature_grads(const FeatureExtractor& fx) {
    std::vector<ParamGrad> out;
    for (const auto& layer : fx.layers) {
        out.push_back({Matrix::zeros_like(layer.weight), Matrix::zeros_like(layer.bias)});
    }
    return out;
}

void accumulate_features(GradientSet& into, const GradientSet& grads_u, std::span<const ParamGrad> ac_theta,
                         const LossWeights& weights) {
    // A zero weight contributes nothing at all, so the result stays bit-identical to L_s alone.
    if (weights.w_u != 0.0) {
        for (std::size_t k = 0; k < into.features.size(); ++k) {
            into.features[k].weight.add_scaled(grads_u.features[k].weight, weights.w_u);
            into.features[k].bias.add_scaled(grads_u.features[k].bias, weights.w_u);
        }
    }
    if (weights.w_ac != 0.0 && !ac_theta.empty()) {
        for (std::size_t k = 0; k < into.features.size(); ++k) {
            into.features[k].weight.add_scaled(ac_theta[k].weight, weights.w_ac);
            into.features[k].bias.add_scaled(ac_theta[k].bias, weights.w_ac);
        }
    }
}

void check_route_inputs(const GradientSet& grads_s, const GradientSet& grads_u, std::span<const ParamGrad> ac_theta) {
    grads_s.require_compatible(grads_u, "grad_relu_route");
    if (ac_theta.empty()) return;
    if (ac_theta.size() != grads_s.features.size()) {
        throw ShapeError(fmt::format("grad_relu_route: {} L_ac layers vs {} feature layers", ac_theta.size(),
                                     grads_s.features.size()));
    }
    for (std::size_t k = 0; k < ac_theta.size(); ++k) {
        require_same_shape(ac_theta[k].weight, grads_s.features[k].weight, "grad_relu_route");
        require_same_shape(ac_theta[k].bias, grads_s.features[k].bias, "grad_relu_route");
    }
}

} // namespace

std::string_view to_string(ThresholdKind k) { return k == ThresholdKind::fixed ? "fixed" : "adaptive"; }

ThresholdKind parse_threshold_kind(std::string_view name) {
    if (name == "fixed") return ThresholdKind::fixed;
    if (name == "adaptive") return ThresholdKind::adaptive;
    throw ArgumentError(fmt::format("unknown threshold kind '{}'", name));
}

ThresholdPolicy ThresholdPolicy::fixed(double tau, std::size_t num_classes) {
    ThresholdPolicy p;
    p.kind = ThresholdKind::fixed;
    p.current_tau = tau;
    p.num_classes = num_classes;
    p.validate();
    return p;
}

ThresholdPolicy ThresholdPolicy::adaptive(double initial_tau, double momentum, std::size_t num_classes) {
    ThresholdPolicy p;
    p.kind = ThresholdKind::adaptive;
    p.current_tau = initial_tau;
    p.ema_momentum = momentum;
    p.num_classes = num_classes;
    p.validate();
    return p;
}

void ThresholdPolicy::validate() const {
    if (num_classes < 2) throw ArgumentError("threshold: num_classes must be >= 2");
    const double floor = 1.0 / static_cast<double>(num_classes);
    if (!(current_tau > floor && current_tau < 1.0)) {
        throw ArgumentError(fmt::format("threshold: tau {} outside ({}, 1)", current_tau, floor));
    }
    if (kind == ThresholdKind::adaptive && !(ema_momentum >= 0.0 && ema_momentum <= 1.0)) {
        throw ArgumentError("threshold: ema_momentum must lie in [0, 1]");
    }
}

std::size_t PseudoBatch::label_of(std::size_t row) const {
    auto r = pseudo_labels.row(row);
    return static_cast<std::size_t>(std::max_element(r.begin(), r.end()) - r.begin());
}

PseudoBatch select_from_probs(const Matrix& inputs, const Matrix& probs, double tau) {
    if (inputs.rows() != probs.rows()) throw ShapeError("select_from_probs: inputs and probs row counts differ");
    std::vector<std::size_t> admitted;
    std::vector<std::size_t> labels;
    PseudoBatch out;
    for (std::size_t r = 0; r < probs.rows(); ++r) {
        auto row = probs.row(r);
        const auto best = static_cast<std::size_t>(std::max_element(row.begin(), row.end()) - row.begin());
        if (row[best] >= tau) {
            admitted.push_back(r);
            labels.push_back(best);
            out.confidences.push_back(row[best]);
        }
    }
    out.inputs = inputs.gather_rows(admitted);
    out.pseudo_labels = Matrix(admitted.size(), probs.cols());
    for (std::size_t i = 0; i < admitted.size(); ++i) out.pseudo_labels(i, labels[i]) = 1.0;
    out.source_rows = std::move(admitted);
    return out;
}

PseudoBatch select_pseudo_labels(const Network& model, const UnlabeledBatch& batch, const ThresholdPolicy& policy,
                                 const AugmentationSpec& aug, Rng& rng, std::vector<double>* batch_confidences) {
    const Matrix weak = weak_augment(batch.inputs, aug, rng);
    const Matrix probs = predict_probs(model, weak);
    if (batch_confidences) {
        batch_confidences->clear();
        for (std::size_t r = 0; r < probs.rows(); ++r) {
            auto row = probs.row(r);
            batch_confidences->push_back(*std::max_element(row.begin(), row.end()));
        }
    }
    return select_from_probs(batch.inputs, probs, policy.current_tau);
}

Matrix one_hot(std::span<const int> labels, std::size_t num_classes) {
    Matrix out(labels.size(), num_classes);
    for (std::size_t i = 0; i < labels.size(); ++i) {
        if (labels[i] < 0 || static_cast<std::size_t>(labels[i]) >= num_classes) {
            throw ArgumentError(fmt::format("label {} out of range for {} classes", labels[i], num_classes));
        }
        out(i, static_cast<std::size_t>(labels[i])) = 1.0;
    }
    return out;
}

LossResult cross_entropy(const FeatureExtractor& fx, const Classifier& head, const Matrix& inputs,
                         const Matrix& targets) {
    if (inputs.rows() == 0) throw ArgumentError("cross_entropy: empty batch");
    if (targets.rows() != inputs.rows() || targets.cols() != head.num_classes()) {
        throw ShapeError("cross_entropy: targets do not match batch and class count");
    }
    ForwardCache cache;
    const Matrix feats = forward_features(fx, inputs, &cache);
    const Matrix probs = forward_probs(head, feats);
    const double inv_batch = 1.0 / static_cast<double>(inputs.rows());

    double total = 0.0;
    Matrix dlogits(probs.rows(), probs.cols());
    for (std::size_t r = 0; r < probs.rows(); ++r) {
        // Targets are one-hot; the clamp is flat below the floor, so clamped rows carry no gradient.
        double row_loss = 0.0;
        bool clamped = false;
        for (std::size_t c = 0; c < probs.cols(); ++c) {
            const double t = targets(r, c);
            if (t == 0.0) continue;
            const double p = probs(r, c);
            if (p < kProbabilityFloor) clamped = true;
            row_loss -= t * std::log(std::max(p, kProbabilityFloor));
        }
        total += row_loss;
        if (clamped) continue;
        for (std::size_t c = 0; c < probs.cols(); ++c) dlogits(r, c) = (probs(r, c) - targets(r, c)) * inv_batch;
    }
    const double loss = total * inv_batch;
    if (!std::isfinite(loss)) throw NumericError("cross_entropy: non-finite loss");
    return {loss, backward(fx, head, cache, dlogits)};
}

LossResult supervised_loss(const Network& model, const LabeledBatch& batch, const AugmentationSpec& aug, Rng& rng) {
    if (batch.inputs.rows() == 0) throw ArgumentError("supervised_loss: labeled batch must not be empty");
    const Matrix weak = weak_augment(batch.inputs, aug, rng);
    return cross_entropy(model.features, model.classifier, weak, one_hot(batch.labels, model.num_classes()));
}

Matrix augmented_inputs(const PseudoBatch& pseudo, AugmentView view, const AugmentationSpec& aug, Rng& rng) {
    return view == AugmentView::strong ? strong_augment(pseudo.inputs, aug, rng) : weak_augment(pseudo.inputs, aug, rng);
}

LossResult unsupervised_loss_on(const Network& model, const PseudoBatch& pseudo, const Matrix& view_inputs) {
    if (pseudo.empty()) return {0.0, GradientSet::zeros_like(model)};
    return cross_entropy(model.features, model.classifier, view_inputs, pseudo.pseudo_labels);
}

LossResult unsupervised_loss(const Network& model, const PseudoBatch& pseudo, const AugmentationSpec& aug, Rng& rng,
                             AugmentView view) {
    if (pseudo.empty()) return {0.0, GradientSet::zeros_like(model)};
    return unsupervised_loss_on(model, pseudo, augmented_inputs(pseudo, view, aug, rng));
}

AvgClusteringLoss avg_clustering_loss_on(const FeatureExtractor& fx, const Classifier& beta_bar,
                                         const PseudoBatch& pseudo, const Matrix& view_inputs) {
    if (beta_bar.feature_dim() != fx.out_dim()) {
        throw ShapeError("avg_clustering_loss: beta_bar width does not match feature extractor");
    }
    if (pseudo.empty()) {
        return {0.0, zero_feature_grads(fx), {Matrix::zeros_like(beta_bar.weight), Matrix::zeros_like(beta_bar.bias)}};
    }
    LossResult r = cross_entropy(fx, beta_bar, view_inputs, pseudo.pseudo_labels);
    return {r.loss, std::move(r.grads.features), std::move(r.grads.classifier)};
}

AvgClusteringLoss avg_clustering_loss(const FeatureExtractor& fx, const Classifier& beta_bar,
                                      const PseudoBatch& pseudo, const AugmentationSpec& aug, Rng& rng) {
    if (pseudo.empty()) return avg_clustering_loss_on(fx, beta_bar, pseudo, Matrix());
    return avg_clustering_loss_on(fx, beta_bar, pseudo, strong_augment(pseudo.inputs, aug, rng));
}

GradientSet grad_relu_route(const GradientSet& grads_s, const GradientSet& grads_u,
                            std::span<const ParamGrad> ac_theta, const LossWeights& weights) {
    check_route_inputs(grads_s, grads_u, ac_theta);
    GradientSet out = grads_s;
    accumulate_features(out, grads_u, ac_theta, weights);
    // out.classifier is grads_s.classifier untouched: unsupervised terms never reach beta.
    return out;
}

GradientSet sum_gradients(const GradientSet& grads_s, const GradientSet& grads_u,
                          std::span<const ParamGrad> ac_theta, const LossWeights& weights) {
    check_route_inputs(grads_s, grads_u, ac_theta);
    GradientSet out = grads_s;
    accumulate_features(out, grads_u, ac_theta, weights);
    if (weights.w_u != 0.0) {
        out.classifier.weight.add_scaled(grads_u.classifier.weight, weights.w_u);
        out.classifier.bias.add_scaled(grads_u.classifier.bias, weights.w_u);
    }
    return out;
}

AvgClusteringState update_avg_classifier(AvgClusteringState state, const Classifier& live_beta,
                                         const ParamGrad& grads_wrt_beta_bar) {
    if (state.period_N == 0) throw ArgumentError("update_avg_classifier: period N must be positive");
    require_compatible(state.beta_bar, live_beta, "update_avg_classifier");
    require_same_shape(grads_wrt_beta_bar.weight, state.beta_bar.weight, "update_avg_classifier");
    require_same_shape(grads_wrt_beta_bar.bias, state.beta_bar.bias, "update_avg_classifier");

    if (state.iteration_t % state.period_N == 0) {
        state.beta_bar = live_beta;
    } else {
        const double m = state.momentum_m;
        const double alpha = state.step_alpha;
        auto blend = [&](Matrix& bar, const Matrix& grad) {
            auto b = bar.values();
            auto g = grad.values();
            for (std::size_t i = 0; i < b.size(); ++i) {
                const double tilde = b[i] - alpha * g[i];
                b[i] += (1.0 - m) * (tilde - b[i]);
            }
        };
        blend(state.beta_bar.weight, grads_wrt_beta_bar.weight);
        blend(state.beta_bar.bias, grads_wrt_beta_bar.bias);
    }
    ++state.iteration_t;
    return state;
}

ThresholdPolicy update_adaptive_threshold(ThresholdPolicy policy, std::span<const double> unlabeled_confidences) {
    if (policy.kind != ThresholdKind::adaptive) {
        throw StateError("update_adaptive_threshold: policy is fixed");
    }
    if (unlabeled_confidences.empty()) return policy;
    const double mean = std::accumulate(unlabeled_confidences.begin(), unlabeled_confidences.end(), 0.0) /
                        static_cast<double>(unlabeled_confidences.size());
    const double m = policy.ema_momentum;
    const double next = m * policy.current_tau + (1.0 - m) * mean;
    const double lo = 1.0 / static_cast<double>(policy.num_classes) + 1e-6;
    const double hi = 1.0 - 1e-6;
    policy.current_tau = std::clamp(next, lo, hi);
    return policy;
}

ObjectiveResult layermatch_objective(const Network& model, const LabeledBatch& labeled, PseudoBatch pseudo,
                                     AvgClusteringState avg_state, const ObjectiveOptions& options,
                                     const AugmentationSpec& aug, Rng& labeled_rng, Rng& unlabeled_rng) {
    ObjectiveResult out;
    LossResult sup = supervised_loss(model, labeled, aug, labeled_rng);

    LossResult unsup{0.0, GradientSet::zeros_like(model)};
    AvgClusteringLoss ac{0.0, {}, {}};
    if (!pseudo.empty()) {
        const Matrix view_u = strong_augment(pseudo.inputs, aug, unlabeled_rng);
        unsup = unsupervised_loss_on(model, pseudo, view_u);
        if (options.avg_clustering) {
            const Matrix view_ac = options.share_strong_aug ? view_u : strong_augment(pseudo.inputs, aug, unlabeled_rng);
            ac = avg_clustering_loss_on(model.features, avg_state.beta_bar, pseudo, view_ac);
        }
    }
    if (options.avg_clustering && pseudo.empty()) {
        ac = avg_clustering_loss_on(model.features, avg_state.beta_bar, pseudo, Matrix());
    }

    std::span<const ParamGrad> ac_theta;
    if (options.avg_clustering && options.ac_theta_coupling) ac_theta = ac.theta;

    out.routed = options.grad_relu ? grad_relu_route(sup.grads, unsup.grads, ac_theta, options.weights)
                                   : sum_gradients(sup.grads, unsup.grads, ac_theta, options.weights);
    if (options.avg_clustering) {
        avg_state = update_avg_classifier(std::move(avg_state), model.classifier, ac.beta_bar);
    }

    out.loss_s = sup.loss;
    out.loss_u = unsup.loss;
    out.loss_ac = ac.loss;
    out.total = sup.loss + options.weights.w_u * unsup.loss + options.weights.w_ac * ac.loss;
    out.grads_s = std::move(sup.grads);
    out.avg_state = std::move(avg_state);
    out.pseudo = std::move(pseudo);
    return out;
}

ObjectiveResult overall_objective(const Network& model, const Network& pseudo_source, const LabeledBatch& labeled,
                                  const UnlabeledBatch& unlabeled, const ThresholdPolicy& policy,
                                  AvgClusteringState avg_state, const ObjectiveOptions& options,
                                  const AugmentationSpec& aug, Rng& labeled_rng, Rng& unlabeled_rng,
                                  std::vector<double>* batch_confidences) {
    PseudoBatch pseudo = select_pseudo_labels(pseudo_source, unlabeled, policy, aug, unlabeled_rng, batch_confidences);
    return layermatch_objective(model, labeled, std::move(pseudo), std::move(avg_state), options, aug, labeled_rng,
                                unlabeled_rng);
}

} // namespace layermatch
