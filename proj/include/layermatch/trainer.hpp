#pragma once

#include "layermatch/data.hpp"
#include "layermatch/netcore.hpp"
#include "layermatch/sslcore.hpp"

#include <cstdint>
#include <filesystem>
#include <functional>
#include <optional>
#include <span>
#include <string>
#include <string_view>
#include <vector>

namespace layermatch {

enum class Method { supervised_only, pseudo_label, fixmatch, layermatch };

std::string_view to_string(Method m);
Method parse_method(std::string_view name);

struct TrainConfig {
    Method method = Method::layermatch;
    std::uint64_t seed = 0;

    // Architecture.
    std::vector<std::size_t> hidden_dims{32, 32};
    std::size_t feature_dim = 16;
    Activation activation = Activation::relu;

    // Optimization.
    std::size_t iterations = 5000;
    double lr = 0.03;
    double sgd_momentum = 0.9;
    double weight_decay = 5e-4;
    std::size_t batch_labeled = 8;
    std::size_t batch_unlabeled = 64;

    // Pseudo-labeling.
    ThresholdKind threshold = ThresholdKind::fixed;
    double tau = 0.95;
    double tau_momentum = 0.999;
    double w_u = 1.0;
    double w_ac = 1.0;

    // Avg-Clustering.
    std::size_t avg_period = 2048;
    double avg_momentum = 0.999;
    double avg_step = 5e-4;

    // Averages.
    double model_ema_momentum = 0.999;
    double prediction_ema_momentum = 0.999;
    bool pseudo_from_ema = false;

    // LayerMatch switches (ablations).
    bool grad_relu = true;
    bool avg_clustering = true;
    bool share_strong_aug = false;
    bool ac_theta_coupling = true;
    bool eval_with_beta_bar = false;

    std::size_t eval_every = 500;
    AugmentationSpec aug;

    /// Throws ConfigError naming the first offending field.
    void validate() const;
};

/// Everything that changes during training.
struct ModelState {
    Network live;
    AvgClusteringState avg;
    std::optional<Network> model_ema;
    std::optional<Network> prediction_ema;

    /// Matrices in checkpoint order: live params, beta_bar (weight, bias), model EMA params, prediction EMA params.
    std::vector<const Matrix*> checkpoint_matrices() const;
    /// Inverse of checkpoint_matrices; shapes must match this state's layout.
    void assign_checkpoint(const std::vector<Matrix>& matrices);

    /// Network used for test accuracy (model EMA when enabled, else live).
    Network evaluation_network(bool with_beta_bar = false) const;
    /// Network that produces pseudo-labels (prediction EMA when enabled, else live).
    const Network& pseudo_label_source() const;
};

ModelState initial_state(const TrainConfig& config, std::size_t in_dim, std::size_t num_classes);

struct MetricsRecord {
    std::size_t iteration = 0;
    double loss_s = 0.0;
    double loss_u = 0.0;
    double loss_ac = 0.0;
    double test_accuracy = 0.0;
    double gamma = 0.0;
    std::optional<double> upsilon;
    double tau = 0.0;
    double lr = 0.0;
};

struct TrainingData {
    std::size_t num_classes = 2;
    LabeledPool labeled;
    UnlabeledPool unlabeled;
    DiagnosticLabels unlabeled_truth;
    LabeledPool test;
};

/// Optional instrumentation. None of these are reachable from a config file.
struct RunHooks {
    /// Applied to every selected pseudo batch before the losses see it.
    std::function<void(PseudoBatch&)> transform_pseudo;
    /// Called after every optimizer step with the 1-based iteration count.
    std::function<void(std::size_t, const ModelState&)> on_step;
    /// Called at every evaluation point.
    std::function<void(std::size_t, const ModelState&)> on_eval;
    /// Skip feature-extractor updates (only the classifier trains).
    bool freeze_features = false;
};

struct RunResult {
    ModelState state;
    std::vector<MetricsRecord> metrics;
};

/// eta0 * cos(7 pi k / (16 K)). Throws ArgumentError when k > K.
double cosine_lr(std::size_t k, std::size_t total, double eta0);

struct SgdState {
    std::vector<Matrix> velocity;
};

/// v <- momentum * v + (grad + weight_decay * param); param <- param - lr * v.
/// Velocity buffers are created on first use.
void sgd_step(std::span<Matrix* const> params, std::span<const Matrix* const> grads, SgdState& state, double lr,
              double momentum, double weight_decay);

/// ema <- momentum * ema + (1 - momentum) * live, coordinate-wise.
void update_model_ema(Network& ema, const Network& live, double momentum);

/// Fraction of argmax predictions equal to the labels (ties go to the lowest class).
double evaluate(const Network& model, const LabeledPool& test_set);

struct GammaUpsilon {
    double gamma = 0.0;
    std::optional<double> upsilon;
    std::size_t admitted = 0;
    std::size_t correct = 0;
};

GammaUpsilon gamma_upsilon_from_counts(std::size_t total, std::size_t admitted, std::size_t correct);

/// Admission statistics over the whole unlabeled set (no augmentation).
GammaUpsilon compute_gamma_upsilon(const Network& model, const UnlabeledPool& unlabeled,
                                   const DiagnosticLabels& truth, double tau);

/// Trains `config.iterations` steps. Deterministic per config and data.
RunResult run(const TrainConfig& config, const TrainingData& data, const RunHooks& hooks = {});

std::string metrics_csv(std::span<const MetricsRecord> records);
void write_metrics_csv(const std::filesystem::path& path, std::span<const MetricsRecord> records);

} // namespace layermatch
