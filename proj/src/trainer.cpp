#include "layermatch/trainer.hpp"

#include "layermatch/errors.hpp"

#include <fmt/format.h>

#include <algorithm>
#include <cmath>
#include <fstream>
#include <numbers>

namespace layermatch {

namespace {

void require_unit_interval(double v, const char* key, bool allow_one = false) {
    const bool ok = v >= 0.0 && (allow_one ? v <= 1.0 : v < 1.0);
    if (!ok) {
        throw ConfigError(key, fmt::format("{} = {} is out of range ({})", key, v, allow_one ? "[0, 1]" : "[0, 1)"));
    }
}

void require_positive(double v, const char* key) {
    if (!(v > 0.0) || !std::isfinite(v)) throw ConfigError(key, fmt::format("{} = {} must be positive", key, v));
}

void require_non_negative(double v, const char* key) {
    if (!(v >= 0.0) || !std::isfinite(v)) throw ConfigError(key, fmt::format("{} = {} must be >= 0", key, v));
}

std::vector<Matrix*> classifier_params(Network& net) { return {&net.classifier.weight, &net.classifier.bias}; }

std::vector<const Matrix*> classifier_grads(const GradientSet& g) { return {&g.classifier.weight, &g.classifier.bias}; }

// Splits one seed into independent streams for the different consumers of randomness.
Rng stream(std::uint64_t seed, std::uint64_t tag) {
    std::seed_seq seq{seed, tag};
    return Rng(seq);
}

constexpr std::uint64_t kInitStream = 1;
constexpr std::uint64_t kSamplerStream = 2;
constexpr std::uint64_t kLabeledAugStream = 3;
constexpr std::uint64_t kUnlabeledAugStream = 4;

void check_finite(double v, std::string_view name) {
    if (!std::isfinite(v)) {
        throw NumericError(fmt::format("{} is not finite ({})", name, v));
    }
}

std::string format_optional(const std::optional<double>& v) { return v ? fmt::format("{}", *v) : std::string(); }

} // namespace

std::string_view to_string(Method m) {
    switch (m) {
    case Method::supervised_only: return "supervised_only";
    case Method::pseudo_label: return "pseudo_label";
    case Method::fixmatch: return "fixmatch";
    case Method::layermatch: return "layermatch";
    }
    return "layermatch";
}

Method parse_method(std::string_view name) {
    if (name == "supervised_only") return Method::supervised_only;
    if (name == "pseudo_label") return Method::pseudo_label;
    if (name == "fixmatch") return Method::fixmatch;
    if (name == "layermatch") return Method::layermatch;
    throw ArgumentError(fmt::format("unknown method '{}'", name));
}

void TrainConfig::validate() const {
    require_positive(lr, "lr");
    require_unit_interval(sgd_momentum, "sgd_momentum");
    require_non_negative(weight_decay, "weight_decay");
    if (batch_labeled == 0) throw ConfigError("batch_labeled", "batch_labeled must be at least 1");
    if (tau <= 0.0 || tau >= 1.0 || !std::isfinite(tau)) {
        throw ConfigError("tau", fmt::format("tau = {} is out of range (0, 1)", tau));
    }
    require_unit_interval(tau_momentum, "tau_momentum");
    require_non_negative(w_u, "w_u");
    require_non_negative(w_ac, "w_ac");
    if (avg_period == 0) throw ConfigError("avg_period", "avg_period must be at least 1");
    require_unit_interval(avg_momentum, "avg_momentum", /*allow_one=*/true);
    require_positive(avg_step, "avg_step");
    require_unit_interval(model_ema_momentum, "model_ema_momentum");
    require_unit_interval(prediction_ema_momentum, "prediction_ema_momentum");
    if (eval_every == 0) throw ConfigError("eval_every", "eval_every must be at least 1");
    if (feature_dim == 0) throw ConfigError("feature_dim", "feature_dim must be at least 1");
    for (std::size_t h : hidden_dims) {
        if (h == 0) throw ConfigError("hidden_dims", "hidden layer widths must be positive");
    }
    require_non_negative(aug.weak_jitter_sigma, "weak_sigma");
    if (!(aug.strong_jitter_sigma >= aug.weak_jitter_sigma)) {
        throw ConfigError("strong_sigma", "strong_sigma must be >= weak_sigma");
    }
    require_unit_interval(aug.strong_mask_prob, "strong_mask_prob", /*allow_one=*/true);
}

std::vector<const Matrix*> ModelState::checkpoint_matrices() const {
    auto out = parameter_matrices(live);
    out.push_back(&avg.beta_bar.weight);
    out.push_back(&avg.beta_bar.bias);
    if (model_ema) {
        auto extra = parameter_matrices(*model_ema);
        out.insert(out.end(), extra.begin(), extra.end());
    }
    if (prediction_ema) {
        auto extra = parameter_matrices(*prediction_ema);
        out.insert(out.end(), extra.begin(), extra.end());
    }
    return out;
}

void ModelState::assign_checkpoint(const std::vector<Matrix>& matrices) {
    std::vector<Matrix*> slots = parameter_matrices(live);
    slots.push_back(&avg.beta_bar.weight);
    slots.push_back(&avg.beta_bar.bias);
    if (model_ema) {
        auto extra = parameter_matrices(*model_ema);
        slots.insert(slots.end(), extra.begin(), extra.end());
    }
    if (prediction_ema) {
        auto extra = parameter_matrices(*prediction_ema);
        slots.insert(slots.end(), extra.begin(), extra.end());
    }
    if (slots.size() != matrices.size()) {
        throw FormatError(fmt::format("checkpoint holds {} matrices, model layout needs {}", matrices.size(),
                                      slots.size()));
    }
    for (std::size_t i = 0; i < slots.size(); ++i) {
        if (!slots[i]->same_shape(matrices[i])) {
            throw FormatError(fmt::format("checkpoint matrix {} is {}x{}, expected {}x{}", i, matrices[i].rows(),
                                          matrices[i].cols(), slots[i]->rows(), slots[i]->cols()));
        }
    }
    for (std::size_t i = 0; i < slots.size(); ++i) *slots[i] = matrices[i];
}

Network ModelState::evaluation_network(bool with_beta_bar) const {
    Network net = model_ema ? *model_ema : live;
    if (with_beta_bar) net.classifier = avg.beta_bar;
    return net;
}

const Network& ModelState::pseudo_label_source() const { return prediction_ema ? *prediction_ema : live; }

ModelState initial_state(const TrainConfig& config, std::size_t in_dim, std::size_t num_classes) {
    Rng rng = stream(config.seed, kInitStream);
    ModelState state;
    state.live = make_network(in_dim, config.hidden_dims, config.feature_dim, num_classes, config.activation, rng);
    state.avg.beta_bar = state.live.classifier;
    state.avg.period_N = config.avg_period;
    state.avg.momentum_m = config.avg_momentum;
    state.avg.step_alpha = config.avg_step;
    if (config.model_ema_momentum > 0.0) state.model_ema = state.live;
    if (config.pseudo_from_ema) state.prediction_ema = state.live;
    return state;
}

double cosine_lr(std::size_t k, std::size_t total, double eta0) {
    if (k > total) throw ArgumentError(fmt::format("cosine_lr: k = {} exceeds K = {}", k, total));
    if (total == 0) return eta0;
    return eta0 * std::cos(7.0 * std::numbers::pi * static_cast<double>(k) / (16.0 * static_cast<double>(total)));
}

void sgd_step(std::span<Matrix* const> params, std::span<const Matrix* const> grads, SgdState& state, double lr,
              double momentum, double weight_decay) {
    if (params.size() != grads.size()) {
        throw ShapeError(fmt::format("sgd_step: {} parameters vs {} gradients", params.size(), grads.size()));
    }
    for (std::size_t i = 0; i < params.size(); ++i) require_same_shape(*params[i], *grads[i], "sgd_step");
    if (state.velocity.empty()) {
        for (const Matrix* p : params) state.velocity.push_back(Matrix::zeros_like(*p));
    }
    if (state.velocity.size() != params.size()) throw ShapeError("sgd_step: optimizer state does not match parameters");
    for (std::size_t i = 0; i < params.size(); ++i) {
        require_same_shape(*params[i], state.velocity[i], "sgd_step velocity");
        auto p = params[i]->values();
        auto g = grads[i]->values();
        auto v = state.velocity[i].values();
        for (std::size_t j = 0; j < p.size(); ++j) {
            v[j] = momentum * v[j] + (g[j] + weight_decay * p[j]);
            p[j] -= lr * v[j];
        }
    }
}

void update_model_ema(Network& ema, const Network& live, double momentum) {
    auto dst = parameter_matrices(ema);
    auto src = parameter_matrices(live);
    if (dst.size() != src.size()) throw ShapeError("update_model_ema: layer counts differ");
    for (std::size_t i = 0; i < dst.size(); ++i) require_same_shape(*dst[i], *src[i], "update_model_ema");
    for (std::size_t i = 0; i < dst.size(); ++i) {
        auto e = dst[i]->values();
        auto l = src[i]->values();
        for (std::size_t j = 0; j < e.size(); ++j) e[j] = momentum * e[j] + (1.0 - momentum) * l[j];
    }
}

double evaluate(const Network& model, const LabeledPool& test_set) {
    if (test_set.size() == 0) throw ArgumentError("evaluate: empty test set");
    const Matrix probs = predict_probs(model, test_set.inputs);
    std::size_t hits = 0;
    for (std::size_t r = 0; r < probs.rows(); ++r) {
        auto row = probs.row(r);
        const auto best = std::max_element(row.begin(), row.end()) - row.begin();
        if (best == test_set.labels[r]) ++hits;
    }
    return static_cast<double>(hits) / static_cast<double>(test_set.size());
}

GammaUpsilon gamma_upsilon_from_counts(std::size_t total, std::size_t admitted, std::size_t correct) {
    GammaUpsilon out;
    out.admitted = admitted;
    out.correct = correct;
    out.gamma = total == 0 ? 0.0 : static_cast<double>(admitted) / static_cast<double>(total);
    if (admitted > 0) out.upsilon = static_cast<double>(correct) / static_cast<double>(admitted);
    return out;
}

GammaUpsilon compute_gamma_upsilon(const Network& model, const UnlabeledPool& unlabeled,
                                   const DiagnosticLabels& truth, double tau) {
    if (truth.true_labels.size() != unlabeled.size()) {
        throw ArgumentError("compute_gamma_upsilon: diagnostic labels do not cover the unlabeled set");
    }
    if (unlabeled.size() == 0) return {};
    const PseudoBatch admitted = select_from_probs(unlabeled.inputs, predict_probs(model, unlabeled.inputs), tau);
    std::size_t correct = 0;
    for (std::size_t i = 0; i < admitted.size(); ++i) {
        const int truth_label = truth.true_labels[admitted.source_rows[i]];
        if (static_cast<int>(admitted.label_of(i)) == truth_label) ++correct;
    }
    return gamma_upsilon_from_counts(unlabeled.size(), admitted.size(), correct);
}

RunResult run(const TrainConfig& config, const TrainingData& data, const RunHooks& hooks) {
    config.validate();
    config.aug.validate();
    if (data.labeled.size() == 0) throw ArgumentError("run: labeled set is empty");
    if (data.num_classes < 2) throw ArgumentError("run: need at least 2 classes");
    const std::size_t classes = data.num_classes;

    RunResult result;
    result.state = initial_state(config, data.labeled.inputs.cols(), classes);
    ModelState& state = result.state;
    const std::size_t K = config.iterations;
    if (K == 0) return result;

    const bool uses_unlabeled = config.method != Method::supervised_only;
    BatchSampler sampler(data.labeled, data.unlabeled, config.batch_labeled,
                         uses_unlabeled ? config.batch_unlabeled : 0, stream(config.seed, kSamplerStream)());
    Rng labeled_rng = stream(config.seed, kLabeledAugStream);
    Rng unlabeled_rng = stream(config.seed, kUnlabeledAugStream);

    ThresholdPolicy policy = (config.threshold == ThresholdKind::adaptive && config.method != Method::fixmatch)
                                 ? ThresholdPolicy::adaptive(config.tau, config.tau_momentum, classes)
                                 : ThresholdPolicy::fixed(config.tau, classes);
    const LossWeights weights{config.w_u, config.w_ac};
    ObjectiveOptions options;
    options.weights = weights;
    options.grad_relu = config.grad_relu;
    options.avg_clustering = config.avg_clustering;
    options.share_strong_aug = config.share_strong_aug;
    options.ac_theta_coupling = config.ac_theta_coupling;

    SgdState sgd;
    double last_s = 0.0, last_u = 0.0, last_ac = 0.0;
    std::vector<double> batch_confidences;

    for (std::size_t k = 0; k < K; ++k) {
        const double lr = cosine_lr(k, K, config.lr);
        auto [labeled, unlabeled] = sampler.next();

        GradientSet grads;
        double loss_u = 0.0, loss_ac = 0.0, loss_s = 0.0;
        try {
            if (config.method == Method::supervised_only) {
                LossResult sup = supervised_loss(state.live, labeled, config.aug, labeled_rng);
                loss_s = sup.loss;
                grads = std::move(sup.grads);
            } else {
                PseudoBatch pseudo = select_pseudo_labels(state.pseudo_label_source(), unlabeled, policy, config.aug,
                                                          unlabeled_rng, &batch_confidences);
                if (hooks.transform_pseudo) hooks.transform_pseudo(pseudo);
                if (config.method == Method::layermatch) {
                    ObjectiveResult obj =
                        layermatch_objective(state.live, labeled, std::move(pseudo), std::move(state.avg), options,
                                             config.aug, labeled_rng, unlabeled_rng);
                    state.avg = std::move(obj.avg_state);
                    grads = std::move(obj.routed);
                    loss_s = obj.loss_s;
                    loss_u = obj.loss_u;
                    loss_ac = obj.loss_ac;
                } else {
                    LossResult sup = supervised_loss(state.live, labeled, config.aug, labeled_rng);
                    const AugmentView view =
                        config.method == Method::pseudo_label ? AugmentView::weak : AugmentView::strong;
                    LossResult unsup = unsupervised_loss(state.live, pseudo, config.aug, unlabeled_rng, view);
                    loss_s = sup.loss;
                    loss_u = unsup.loss;
                    grads = sum_gradients(sup.grads, unsup.grads, {}, {config.w_u, 0.0});
                }
                if (policy.kind == ThresholdKind::adaptive) {
                    policy = update_adaptive_threshold(policy, batch_confidences);
                }
            }
            check_finite(loss_s, "loss_s");
            check_finite(loss_u, "loss_u");
            check_finite(loss_ac, "loss_ac");
        } catch (const NumericError& e) {
            throw NumericError(fmt::format("iteration {}: {}", k + 1, e.what()));
        }

        if (hooks.freeze_features) {
            sgd_step(classifier_params(state.live), classifier_grads(grads), sgd, lr, config.sgd_momentum,
                     config.weight_decay);
        } else {
            sgd_step(parameter_matrices(state.live), gradient_matrices(std::as_const(grads)), sgd, lr,
                     config.sgd_momentum, config.weight_decay);
        }
        if (state.model_ema) update_model_ema(*state.model_ema, state.live, config.model_ema_momentum);
        if (state.prediction_ema) update_model_ema(*state.prediction_ema, state.live, config.prediction_ema_momentum);
        last_s = loss_s;
        last_u = loss_u;
        last_ac = loss_ac;
        if (hooks.on_step) hooks.on_step(k + 1, state);

        const std::size_t done = k + 1;
        if (done % config.eval_every == 0 || done == K) {
            MetricsRecord rec;
            rec.iteration = done;
            rec.loss_s = last_s;
            rec.loss_u = last_u;
            rec.loss_ac = last_ac;
            rec.test_accuracy = data.test.size() > 0
                                    ? evaluate(state.evaluation_network(config.eval_with_beta_bar), data.test)
                                    : 0.0;
            if (data.unlabeled.size() > 0 && data.unlabeled_truth.true_labels.size() == data.unlabeled.size()) {
                const GammaUpsilon gu = compute_gamma_upsilon(state.pseudo_label_source(), data.unlabeled,
                                                              data.unlabeled_truth, policy.current_tau);
                rec.gamma = gu.gamma;
                rec.upsilon = gu.upsilon;
            }
            rec.tau = policy.current_tau;
            rec.lr = lr;
            result.metrics.push_back(rec);
            if (hooks.on_eval) hooks.on_eval(done, state);
        }
    }
    return result;
}

std::string metrics_csv(std::span<const MetricsRecord> records) {
    std::string out = "iteration,loss_s,loss_u,loss_ac,test_acc,gamma,upsilon,tau,lr\n";
    for (const auto& r : records) {
        out += fmt::format("{},{},{},{},{},{},{},{},{}\n", r.iteration, r.loss_s, r.loss_u, r.loss_ac,
                           r.test_accuracy, r.gamma, format_optional(r.upsilon), r.tau, r.lr);
    }
    return out;
}

void write_metrics_csv(const std::filesystem::path& path, std::span<const MetricsRecord> records) {
    std::ofstream out(path, std::ios::trunc | std::ios::binary);
    if (!out) throw Error(fmt::format("cannot open {} for writing", path.string()));
    out << metrics_csv(records);
}

} // namespace layermatch
