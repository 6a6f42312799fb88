#pragma once

#include "layermatch/data.hpp"
#include "layermatch/matrix.hpp"
#include "layermatch/netcore.hpp"

#include <cstddef>
#include <span>
#include <string_view>
#include <vector>

namespace layermatch {

/// Lower clamp applied to probabilities inside every log.
inline constexpr double kProbabilityFloor = 1e-12;

enum class ThresholdKind { fixed, adaptive };

std::string_view to_string(ThresholdKind k);
ThresholdKind parse_threshold_kind(std::string_view name);

/// Confidence threshold for pseudo-label admission. `current_tau` is the live
/// threshold for both kinds; only the adaptive kind ever moves it.
struct ThresholdPolicy {
    ThresholdKind kind = ThresholdKind::fixed;
    double ema_momentum = 0.999;
    double current_tau = 0.95;
    std::size_t num_classes = 2;

    static ThresholdPolicy fixed(double tau, std::size_t num_classes);
    static ThresholdPolicy adaptive(double initial_tau, double momentum, std::size_t num_classes);

    void validate() const;
};

/// The admitted set D_tau for one unlabeled batch.
struct PseudoBatch {
    Matrix inputs;                        // original (un-augmented) unlabeled rows
    Matrix pseudo_labels;                 // one-hot rows
    std::vector<double> confidences;      // max class probability that admitted each row
    std::vector<std::size_t> source_rows; // row index within the unlabeled batch
    std::vector<int> true_labels;         // diagnostics only; filled by metrics code, never by selection

    std::size_t size() const noexcept { return confidences.size(); }
    bool empty() const noexcept { return confidences.empty(); }
    std::size_t label_of(std::size_t row) const;
};

struct LossWeights {
    double w_u = 1.0;
    double w_ac = 1.0;
};

struct LossResult {
    double loss = 0.0;
    GradientSet grads;
};

/// L_ac output: Theta-gradients for the main optimizer and beta-bar gradients for the EMA head.
struct AvgClusteringLoss {
    double loss = 0.0;
    std::vector<ParamGrad> theta;
    ParamGrad beta_bar;
};

/// EMA classifier used only inside the Avg-Clustering loss.
struct AvgClusteringState {
    Classifier beta_bar;
    std::size_t period_N = 2048;
    double momentum_m = 0.999;
    double step_alpha = 5e-4;
    std::size_t iteration_t = 0;
};

enum class AugmentView { weak, strong };

/// Admission rule on precomputed probabilities: row i enters iff max_c p_ic >= tau.
/// Ties in the argmax resolve to the lowest class index.
PseudoBatch select_from_probs(const Matrix& inputs, const Matrix& probs, double tau);

/// Predicts on weakly augmented copies of the batch and applies the threshold.
/// When `batch_confidences` is given it receives the max probability of every row (admitted or not).
PseudoBatch select_pseudo_labels(const Network& model, const UnlabeledBatch& batch, const ThresholdPolicy& policy,
                                 const AugmentationSpec& aug, Rng& rng,
                                 std::vector<double>* batch_confidences = nullptr);

/// Mean cross-entropy of `head` over `inputs` against one-hot `targets`, with gradients.
/// The returned GradientSet's classifier part is w.r.t. `head`.
LossResult cross_entropy(const FeatureExtractor& fx, const Classifier& head, const Matrix& inputs,
                         const Matrix& targets);

Matrix one_hot(std::span<const int> labels, std::size_t num_classes);

/// Labeled loss on weakly augmented inputs. Throws ArgumentError on an empty batch.
LossResult supervised_loss(const Network& model, const LabeledBatch& batch, const AugmentationSpec& aug, Rng& rng);

/// Draws an augmented copy of the pseudo batch inputs.
Matrix augmented_inputs(const PseudoBatch& pseudo, AugmentView view, const AugmentationSpec& aug, Rng& rng);

/// Pseudo-label loss. Empty batch gives (0, zero gradients) and consumes no randomness.
LossResult unsupervised_loss(const Network& model, const PseudoBatch& pseudo, const AugmentationSpec& aug, Rng& rng,
                             AugmentView view = AugmentView::strong);
LossResult unsupervised_loss_on(const Network& model, const PseudoBatch& pseudo, const Matrix& view_inputs);

/// Same functional form as the pseudo-label loss, evaluated through the beta-bar head.
AvgClusteringLoss avg_clustering_loss(const FeatureExtractor& fx, const Classifier& beta_bar,
                                      const PseudoBatch& pseudo, const AugmentationSpec& aug, Rng& rng);
AvgClusteringLoss avg_clustering_loss_on(const FeatureExtractor& fx, const Classifier& beta_bar,
                                         const PseudoBatch& pseudo, const Matrix& view_inputs);

/// Grad-ReLU: feature gradients sum every loss; classifier gradients come from L_s alone.
/// `ac_theta` may be empty (no Avg-Clustering term).
GradientSet grad_relu_route(const GradientSet& grads_s, const GradientSet& grads_u,
                            std::span<const ParamGrad> ac_theta, const LossWeights& weights);

/// Plain weighted sum without routing (baselines and the Grad-ReLU-off ablation).
GradientSet sum_gradients(const GradientSet& grads_s, const GradientSet& grads_u,
                          std::span<const ParamGrad> ac_theta, const LossWeights& weights);

/// beta_bar <- beta when t mod N == 0, else
///   beta_tilde = beta_bar - alpha * grad
///   beta_bar   = m * beta_bar + (1 - m) * beta_tilde
/// then t advances by one.
AvgClusteringState update_avg_classifier(AvgClusteringState state, const Classifier& live_beta,
                                         const ParamGrad& grads_wrt_beta_bar);

/// current_tau <- m * current_tau + (1 - m) * mean(confidences), clamped into (1/C, 1).
ThresholdPolicy update_adaptive_threshold(ThresholdPolicy policy, std::span<const double> unlabeled_confidences);

struct ObjectiveOptions {
    LossWeights weights;
    bool grad_relu = true;
    bool avg_clustering = true;
    /// L_u and L_ac see one shared strong view instead of independent draws.
    bool share_strong_aug = false;
    /// When false, L_ac's Theta-gradients are dropped (beta-bar still updates).
    bool ac_theta_coupling = true;
};

struct ObjectiveResult {
    double total = 0.0;
    double loss_s = 0.0;
    double loss_u = 0.0;
    double loss_ac = 0.0;
    GradientSet routed;
    GradientSet grads_s;
    AvgClusteringState avg_state;
    PseudoBatch pseudo;
};

/// L = L_s + w_u L_u + w_ac L_ac on an already selected pseudo batch: losses, routing, beta-bar update.
/// Labeled augmentation draws come from `labeled_rng`, strong views from `unlabeled_rng`.
ObjectiveResult layermatch_objective(const Network& model, const LabeledBatch& labeled, PseudoBatch pseudo,
                                     AvgClusteringState avg_state, const ObjectiveOptions& options,
                                     const AugmentationSpec& aug, Rng& labeled_rng, Rng& unlabeled_rng);

/// Full step objective in fixed order: select -> losses -> route -> beta-bar update.
/// `pseudo_source` produces the pseudo-labels (the live model, or a prediction EMA).
ObjectiveResult overall_objective(const Network& model, const Network& pseudo_source, const LabeledBatch& labeled,
                                  const UnlabeledBatch& unlabeled, const ThresholdPolicy& policy,
                                  AvgClusteringState avg_state, const ObjectiveOptions& options,
                                  const AugmentationSpec& aug, Rng& labeled_rng, Rng& unlabeled_rng,
                                  std::vector<double>* batch_confidences = nullptr);

} // namespace layermatch
