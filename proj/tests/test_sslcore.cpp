#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include "layermatch/errors.hpp"
#include "layermatch/sslcore.hpp"
#include "support.hpp"

#include <cmath>
#include <random>

using namespace layermatch;
using testsupport::central_difference;
using testsupport::random_matrix;
using testsupport::random_network;
using testsupport::rel_error;

namespace {

const AugmentationSpec kNoAug{0.0, 0.0, 0.0};

Network small_net(Rng& rng, std::size_t classes = 3) {
    return random_network(2, {5, 4}, 3, classes, Activation::tanh, rng);
}

PseudoBatch pseudo_from_labels(const Matrix& inputs, const std::vector<int>& labels, std::size_t classes) {
    PseudoBatch p;
    p.inputs = inputs;
    p.pseudo_labels = one_hot(labels, classes);
    p.confidences.assign(labels.size(), 1.0);
    for (std::size_t i = 0; i < labels.size(); ++i) p.source_rows.push_back(i);
    return p;
}

PseudoBatch flipped(const PseudoBatch& p) {
    PseudoBatch out = p;
    const std::size_t c = p.pseudo_labels.cols();
    for (std::size_t r = 0; r < p.size(); ++r) {
        const std::size_t label = p.label_of(r);
        out.pseudo_labels(r, label) = 0.0;
        out.pseudo_labels(r, (label + 1) % c) = 1.0;
    }
    return out;
}

GradientSet random_grads(const Network& net, Rng& rng) {
    GradientSet g = GradientSet::zeros_like(net);
    for (Matrix* m : gradient_matrices(g)) *m = random_matrix(m->rows(), m->cols(), rng);
    return g;
}

std::vector<ParamGrad> random_feature_grads(const Network& net, Rng& rng) {
    return random_grads(net, rng).features;
}

bool all_zero(const Matrix& m) {
    for (double v : m.values()) {
        if (v != 0.0) return false;
    }
    return true;
}

double max_fd_error(Network& net, const std::function<double()>& loss, const GradientSet& grads) {
    double worst = 0.0;
    auto params = parameter_matrices(net);
    auto analytic = gradient_matrices(grads);
    for (std::size_t k = 0; k < params.size(); ++k) {
        auto values = params[k]->values();
        auto g = analytic[k]->values();
        for (std::size_t i = 0; i < values.size(); ++i) {
            worst = std::max(worst, rel_error(g[i], central_difference(loss, values[i])));
        }
    }
    return worst;
}

} // namespace

TEST_CASE("threshold admits confident rows with a one-hot argmax label") {
    const Matrix inputs = Matrix::from_rows({{1, 2}, {3, 4}, {5, 6}});
    const Matrix probs = Matrix::from_rows({{0.97, 0.03}, {0.90, 0.10}, {0.02, 0.98}});
    const PseudoBatch p = select_from_probs(inputs, probs, 0.95);
    REQUIRE(p.size() == 2);
    CHECK(p.source_rows == std::vector<std::size_t>{0, 2});
    CHECK(p.pseudo_labels == Matrix::from_rows({{1, 0}, {0, 1}}));
    CHECK(p.inputs == Matrix::from_rows({{1, 2}, {5, 6}}));
    CHECK(p.confidences == std::vector<double>{0.97, 0.98});
}

TEST_CASE("threshold boundary is inclusive and ties take the lowest class") {
    const Matrix inputs(2, 1);
    const PseudoBatch exact = select_from_probs(inputs, Matrix::from_rows({{0.95, 0.05}, {0.5, 0.5}}), 0.95);
    CHECK(exact.size() == 1);
    const PseudoBatch tie = select_from_probs(inputs, Matrix::from_rows({{0.5, 0.5}, {0.5, 0.5}}), 0.5);
    REQUIRE(tie.size() == 2);
    CHECK(tie.label_of(0) == 0);
    CHECK(tie.label_of(1) == 0);
}

TEST_CASE("uniform model admits nothing at tau 0.95") {
    Rng rng(1);
    Network net = make_network(2, std::vector<std::size_t>{4}, 3, 2, Activation::relu, rng);
    net.classifier.weight.fill(0.0);
    net.classifier.bias.fill(0.0);
    UnlabeledBatch batch{random_matrix(16, 2, rng), {}};
    std::vector<double> conf;
    const PseudoBatch p =
        select_pseudo_labels(net, batch, ThresholdPolicy::fixed(0.95, 2), AugmentationSpec{}, rng, &conf);
    CHECK(p.empty());
    CHECK(p.pseudo_labels.rows() == 0);
    REQUIRE(conf.size() == 16);
    for (double c : conf) CHECK(c == doctest::Approx(0.5));
}

TEST_CASE("selected pseudo batch keeps the original inputs and every confidence clears tau") {
    Rng rng(2);
    Network net = small_net(rng);
    UnlabeledBatch batch{random_matrix(64, 2, rng, 2.0), {}};
    AugmentationSpec aug;
    aug.weak_jitter_sigma = 0.3;
    const double tau = 0.4;
    const PseudoBatch p = select_pseudo_labels(net, batch, ThresholdPolicy::fixed(tau, 3), aug, rng);
    REQUIRE(!p.empty());
    for (std::size_t i = 0; i < p.size(); ++i) {
        CHECK(p.confidences[i] >= tau);
        auto row = p.pseudo_labels.row(i);
        double sum = 0.0;
        for (double v : row) {
            CHECK((v == 0.0 || v == 1.0));
            sum += v;
        }
        CHECK(sum == 1.0);
        for (std::size_t c = 0; c < 2; ++c) CHECK(p.inputs(i, c) == batch.inputs(p.source_rows[i], c));
    }
}

TEST_CASE("threshold policy validation") {
    CHECK_THROWS_AS(ThresholdPolicy::fixed(0.5, 2), ArgumentError);
    CHECK_THROWS_AS(ThresholdPolicy::fixed(1.0, 2), ArgumentError);
    CHECK_NOTHROW(ThresholdPolicy::fixed(0.34, 3));
    CHECK_THROWS_AS(ThresholdPolicy::adaptive(0.9, 1.5, 2), ArgumentError);
    CHECK(parse_threshold_kind("adaptive") == ThresholdKind::adaptive);
    CHECK_THROWS_AS(parse_threshold_kind("freematch"), ArgumentError);
}

TEST_CASE("supervised loss examples") {
    Rng rng(3);
    Network net = make_network(2, std::vector<std::size_t>{}, 2, 2, Activation::identity, rng);
    LabeledBatch batch{Matrix::from_rows({{0.3, -0.2}}), {0}};

    net.classifier.weight.fill(0.0);
    net.classifier.bias.fill(0.0);
    CHECK(supervised_loss(net, batch, kNoAug, rng).loss == doctest::Approx(std::log(2.0)).epsilon(1e-12));

    net.classifier.bias(0, 0) = 40.0;
    CHECK(supervised_loss(net, batch, kNoAug, rng).loss < 1e-11);

    net.classifier.bias(0, 0) = -100.0;
    CHECK(supervised_loss(net, batch, kNoAug, rng).loss == doctest::Approx(-std::log(1e-12)));

    LabeledBatch empty{Matrix(0, 2), {}};
    CHECK_THROWS_AS(supervised_loss(net, empty, kNoAug, rng), ArgumentError);
}

TEST_CASE("supervised loss gradient matches finite differences") {
    Rng rng(4);
    Network net = small_net(rng);
    LabeledBatch batch{random_matrix(6, 2, rng), {0, 1, 2, 2, 1, 0}};
    const GradientSet g = supervised_loss(net, batch, kNoAug, rng).grads;
    auto loss = [&] { return supervised_loss(net, batch, kNoAug, rng).loss; };
    CHECK(max_fd_error(net, loss, g) < 1e-4);
}

TEST_CASE("unsupervised loss on an empty pseudo batch is zero and draws nothing") {
    Rng rng(5);
    Network net = small_net(rng);
    PseudoBatch empty;
    Rng before = rng;
    const LossResult r = unsupervised_loss(net, empty, AugmentationSpec{}, rng);
    CHECK(r.loss == 0.0);
    for (const Matrix* m : gradient_matrices(r.grads)) CHECK(all_zero(*m));
    CHECK(rng == before);
}

TEST_CASE("unsupervised loss vanishes when predictions match the pseudo-label") {
    Rng rng(6);
    Network net = make_network(2, std::vector<std::size_t>{}, 2, 2, Activation::identity, rng);
    net.classifier.weight.fill(0.0);
    net.classifier.bias(1, 0) = 50.0;
    const PseudoBatch p = pseudo_from_labels(Matrix::from_rows({{0.1, 0.2}}), {1}, 2);
    CHECK(unsupervised_loss(net, p, kNoAug, rng).loss < 1e-11);
}

TEST_CASE("unsupervised loss gradient matches finite differences on a fixed view") {
    Rng rng(7);
    Network net = small_net(rng);
    const PseudoBatch p = pseudo_from_labels(random_matrix(5, 2, rng), {2, 0, 1, 1, 2}, 3);
    const Matrix view = strong_augment(p.inputs, AugmentationSpec{}, rng);
    const GradientSet g = unsupervised_loss_on(net, p, view).grads;
    auto loss = [&] { return unsupervised_loss_on(net, p, view).loss; };
    CHECK(max_fd_error(net, loss, g) < 1e-4);
}

TEST_CASE("avg-clustering loss with beta-bar equal to beta matches the pseudo-label loss") {
    Rng rng(8);
    Network net = small_net(rng);
    const PseudoBatch p = pseudo_from_labels(random_matrix(7, 2, rng), {0, 1, 2, 0, 1, 2, 0}, 3);
    Rng a(99);
    Rng b(99);
    const LossResult u = unsupervised_loss(net, p, AugmentationSpec{}, a);
    const AvgClusteringLoss ac = avg_clustering_loss(net.features, net.classifier, p, AugmentationSpec{}, b);
    CHECK(ac.loss == u.loss);
    CHECK(ac.beta_bar.weight == u.grads.classifier.weight);
    for (std::size_t k = 0; k < ac.theta.size(); ++k) CHECK(ac.theta[k].weight == u.grads.features[k].weight);
}

TEST_CASE("avg-clustering loss on an empty batch returns zeros of the right shapes") {
    Rng rng(9);
    Network net = small_net(rng);
    const AvgClusteringLoss ac = avg_clustering_loss(net.features, net.classifier, PseudoBatch{}, AugmentationSpec{}, rng);
    CHECK(ac.loss == 0.0);
    REQUIRE(ac.theta.size() == net.features.layers.size());
    for (std::size_t k = 0; k < ac.theta.size(); ++k) {
        CHECK(ac.theta[k].weight.same_shape(net.features.layers[k].weight));
        CHECK(all_zero(ac.theta[k].weight));
    }
    CHECK(ac.beta_bar.weight.same_shape(net.classifier.weight));
    CHECK(all_zero(ac.beta_bar.weight));
}

TEST_CASE("avg-clustering gradients match finite differences in both Theta and beta-bar") {
    Rng rng(10);
    Network net = small_net(rng);
    Classifier bar = net.classifier;
    for (auto& v : bar.weight.values()) v += 0.3;
    const PseudoBatch p = pseudo_from_labels(random_matrix(6, 2, rng), {1, 1, 0, 2, 2, 0}, 3);
    const Matrix view = strong_augment(p.inputs, AugmentationSpec{}, rng);
    const AvgClusteringLoss ac = avg_clustering_loss_on(net.features, bar, p, view);
    auto loss = [&] { return avg_clustering_loss_on(net.features, bar, p, view).loss; };

    double worst = 0.0;
    for (std::size_t k = 0; k < net.features.layers.size(); ++k) {
        auto w = net.features.layers[k].weight.values();
        auto g = ac.theta[k].weight.values();
        for (std::size_t i = 0; i < w.size(); ++i) worst = std::max(worst, rel_error(g[i], central_difference(loss, w[i])));
        auto b = net.features.layers[k].bias.values();
        auto gb = ac.theta[k].bias.values();
        for (std::size_t i = 0; i < b.size(); ++i) worst = std::max(worst, rel_error(gb[i], central_difference(loss, b[i])));
    }
    auto bw = bar.weight.values();
    auto gw = ac.beta_bar.weight.values();
    for (std::size_t i = 0; i < bw.size(); ++i) worst = std::max(worst, rel_error(gw[i], central_difference(loss, bw[i])));
    auto bb = bar.bias.values();
    auto gbb = ac.beta_bar.bias.values();
    for (std::size_t i = 0; i < bb.size(); ++i) worst = std::max(worst, rel_error(gbb[i], central_difference(loss, bb[i])));
    CHECK(worst < 1e-4);
}

TEST_CASE("avg-clustering rejects a beta-bar of the wrong width") {
    Rng rng(11);
    Network net = small_net(rng);
    Classifier bar{Matrix(3, 7), Matrix(3, 1)};
    const PseudoBatch p = pseudo_from_labels(random_matrix(2, 2, rng), {0, 1}, 3);
    CHECK_THROWS_AS(avg_clustering_loss(net.features, bar, p, AugmentationSpec{}, rng), ShapeError);
}

TEST_CASE("grad-relu routing is exact over random shapes") {
    Rng rng(12);
    std::uniform_int_distribution<std::size_t> dim(1, 6);
    std::uniform_int_distribution<std::size_t> depth(0, 2);
    std::uniform_real_distribution<double> weight(0.0, 3.0);
    for (int trial = 0; trial < 1000; ++trial) {
        std::vector<std::size_t> hidden(depth(rng));
        for (auto& h : hidden) h = dim(rng);
        const Network net = make_network(dim(rng), hidden, dim(rng), dim(rng) + 1, Activation::relu, rng);
        GradientSet s = random_grads(net, rng);
        const GradientSet u = random_grads(net, rng);
        const auto ac = random_feature_grads(net, rng);
        const LossWeights w{weight(rng), weight(rng)};

        const GradientSet routed = grad_relu_route(s, u, ac, w);
        REQUIRE(routed.classifier.weight == s.classifier.weight);
        REQUIRE(routed.classifier.bias == s.classifier.bias);

        s.classifier.weight.fill(0.0);
        s.classifier.bias.fill(0.0);
        const GradientSet zeroed = grad_relu_route(s, u, ac, w);
        REQUIRE(all_zero(zeroed.classifier.weight));
        REQUIRE(all_zero(zeroed.classifier.bias));

        const GradientSet off = grad_relu_route(s, u, ac, LossWeights{0.0, 0.0});
        for (std::size_t k = 0; k < s.features.size(); ++k) {
            REQUIRE(off.features[k].weight == s.features[k].weight);
            REQUIRE(off.features[k].bias == s.features[k].bias);
        }
    }
}

TEST_CASE("grad-relu feature gradients add the unsupervised terms") {
    Rng rng(13);
    const Network net = small_net(rng);
    const GradientSet s = random_grads(net, rng);
    const GradientSet u = random_grads(net, rng);
    const auto ac = random_feature_grads(net, rng);
    const GradientSet routed = grad_relu_route(s, u, ac, LossWeights{1.0, 0.5});
    bool differs = false;
    for (std::size_t k = 0; k < s.features.size(); ++k) {
        auto out = routed.features[k].weight.values();
        auto gs = s.features[k].weight.values();
        auto gu = u.features[k].weight.values();
        auto ga = ac[k].weight.values();
        for (std::size_t i = 0; i < out.size(); ++i) {
            CHECK(out[i] == doctest::Approx(gs[i] + gu[i] + 0.5 * ga[i]).epsilon(1e-14));
            differs = differs || out[i] != gs[i];
        }
    }
    CHECK(differs);
}

TEST_CASE("plain summation lets the pseudo-label loss reach the classifier") {
    Rng rng(14);
    const Network net = small_net(rng);
    const GradientSet s = random_grads(net, rng);
    const GradientSet u = random_grads(net, rng);
    const GradientSet summed = sum_gradients(s, u, {}, LossWeights{2.0, 0.0});
    auto out = summed.classifier.weight.values();
    auto gs = s.classifier.weight.values();
    auto gu = u.classifier.weight.values();
    for (std::size_t i = 0; i < out.size(); ++i) CHECK(out[i] == doctest::Approx(gs[i] + 2.0 * gu[i]));
}

TEST_CASE("grad-relu routing rejects mismatched shapes") {
    Rng rng(15);
    const Network a = small_net(rng);
    const Network b = random_network(2, {5, 4}, 3, 4, Activation::tanh, rng);
    const Network c = random_network(2, {6}, 3, 3, Activation::tanh, rng);
    const GradientSet ga = GradientSet::zeros_like(a);
    CHECK_THROWS_AS(grad_relu_route(ga, GradientSet::zeros_like(b), {}, LossWeights{}), ShapeError);
    const auto bad_ac = GradientSet::zeros_like(c).features;
    CHECK_THROWS_AS(grad_relu_route(ga, ga, bad_ac, LossWeights{}), ShapeError);
}

TEST_CASE("avg classifier resets to beta when t mod N is zero") {
    Rng rng(16);
    const Network net = small_net(rng);
    for (std::size_t period : {std::size_t{1}, std::size_t{2048}, std::size_t{204800}}) {
        AvgClusteringState s{Classifier{random_matrix(3, 3, rng), random_matrix(3, 1, rng)}, period, 0.999, 5e-4,
                             period * 3};
        const ParamGrad g{random_matrix(3, 3, rng), random_matrix(3, 1, rng)};
        const AvgClusteringState next = update_avg_classifier(s, net.classifier, g);
        CHECK(next.beta_bar.weight == net.classifier.weight);
        CHECK(next.beta_bar.bias == net.classifier.bias);
        CHECK(next.iteration_t == period * 3 + 1);
    }
}

TEST_CASE("avg classifier blend follows the update formula") {
    Classifier live{Matrix(1, 1, 7.0), Matrix(1, 1, 7.0)};
    AvgClusteringState s{Classifier{Matrix(1, 1, 1.0), Matrix(1, 1, 1.0)}, 2048, 0.999, 5e-4, 5};
    const AvgClusteringState next = update_avg_classifier(s, live, ParamGrad{Matrix(1, 1, 2000.0), Matrix(1, 1, 0.0)});
    CHECK(next.beta_bar.weight(0, 0) == doctest::Approx(0.999).epsilon(1e-12));
    CHECK(next.beta_bar.bias(0, 0) == 1.0);
    CHECK(next.iteration_t == 6);

    Rng rng(17);
    for (int trial = 0; trial < 50; ++trial) {
        std::uniform_real_distribution<double> m01(0.0, 1.0);
        const double m = m01(rng);
        const double alpha = m01(rng) * 1e-2;
        AvgClusteringState st{Classifier{random_matrix(2, 3, rng), random_matrix(2, 1, rng)}, 10, m, alpha, 3};
        const ParamGrad g{random_matrix(2, 3, rng), random_matrix(2, 1, rng)};
        const AvgClusteringState out = update_avg_classifier(st, Classifier{Matrix(2, 3), Matrix(2, 1)}, g);
        for (std::size_t i = 0; i < 6; ++i) {
            const double bar = st.beta_bar.weight.values()[i];
            const double tilde = bar - alpha * g.weight.values()[i];
            CHECK(std::abs(out.beta_bar.weight.values()[i] - (m * bar + (1 - m) * tilde)) < 1e-12);
        }
    }
}

TEST_CASE("zero gradient is a fixed point of the blend") {
    Rng rng(18);
    AvgClusteringState s{Classifier{random_matrix(3, 4, rng), random_matrix(3, 1, rng)}, 100, 0.37, 0.1, 1};
    const Classifier live{random_matrix(3, 4, rng), random_matrix(3, 1, rng)};
    const AvgClusteringState next = update_avg_classifier(s, live, ParamGrad{Matrix(3, 4), Matrix(3, 1)});
    CHECK(next.beta_bar.weight == s.beta_bar.weight);
    CHECK(next.beta_bar.bias == s.beta_bar.bias);
}

TEST_CASE("constant target contracts geometrically at rate m") {
    const double m = 0.9;
    const double alpha = 0.5;
    AvgClusteringState s{Classifier{Matrix(1, 1, 3.0), Matrix(1, 1, 0.0)}, 1000000, m, alpha, 1};
    const Classifier live{Matrix(1, 1), Matrix(1, 1)};
    double prev_gap = 3.0;
    for (int step = 0; step < 40; ++step) {
        // A gradient of (bar - c) / alpha makes beta-tilde exactly c = 0.
        const double bar = s.beta_bar.weight(0, 0);
        s = update_avg_classifier(std::move(s), live, ParamGrad{Matrix(1, 1, bar / alpha), Matrix(1, 1)});
        const double gap = std::abs(s.beta_bar.weight(0, 0));
        CHECK(gap == doctest::Approx(m * prev_gap).epsilon(1e-12));
        prev_gap = gap;
    }
}

TEST_CASE("avg classifier update rejects shape mismatch and a zero period") {
    AvgClusteringState s{Classifier{Matrix(2, 3), Matrix(2, 1)}, 10, 0.9, 0.1, 1};
    CHECK_THROWS_AS(update_avg_classifier(s, Classifier{Matrix(2, 4), Matrix(2, 1)}, ParamGrad{Matrix(2, 3), Matrix(2, 1)}),
                    ShapeError);
    CHECK_THROWS_AS(update_avg_classifier(s, Classifier{Matrix(2, 3), Matrix(2, 1)}, ParamGrad{Matrix(3, 3), Matrix(2, 1)}),
                    ShapeError);
    s.period_N = 0;
    CHECK_THROWS_AS(update_avg_classifier(s, Classifier{Matrix(2, 3), Matrix(2, 1)}, ParamGrad{Matrix(2, 3), Matrix(2, 1)}),
                    ArgumentError);
}

TEST_CASE("adaptive threshold examples") {
    const std::vector<double> conf{0.7, 0.9};
    CHECK(update_adaptive_threshold(ThresholdPolicy::adaptive(0.95, 1.0, 2), conf).current_tau == 0.95);
    CHECK(update_adaptive_threshold(ThresholdPolicy::adaptive(0.95, 0.0, 2), conf).current_tau ==
          doctest::Approx(0.8).epsilon(1e-15));
    CHECK_THROWS_AS(update_adaptive_threshold(ThresholdPolicy::fixed(0.95, 2), conf), StateError);

    const std::vector<double> low{0.1};
    const ThresholdPolicy clamped = update_adaptive_threshold(ThresholdPolicy::adaptive(0.95, 0.0, 2), low);
    CHECK(clamped.current_tau == doctest::Approx(0.5 + 1e-6));
}

TEST_CASE("adaptive threshold converges monotonically to a constant confidence") {
    const std::vector<double> stream{0.8};
    ThresholdPolicy p = ThresholdPolicy::adaptive(0.95, 0.99, 3);
    double prev = p.current_tau;
    for (int step = 0; step < 1000; ++step) {
        p = update_adaptive_threshold(p, stream);
        CHECK(p.current_tau <= prev);
        CHECK(p.current_tau >= 0.8);
        prev = p.current_tau;
    }
    CHECK(p.current_tau == doctest::Approx(0.8).epsilon(1e-4));
}

TEST_CASE("objective with zero weights reduces to the supervised step") {
    Rng rng(19);
    const Network net = small_net(rng);
    const LabeledBatch labeled{random_matrix(4, 2, rng), {0, 1, 2, 0}};
    const PseudoBatch p = pseudo_from_labels(random_matrix(5, 2, rng), {1, 1, 2, 0, 0}, 3);
    AvgClusteringState avg{net.classifier, 2048, 0.999, 5e-4, 0};
    ObjectiveOptions opt;
    opt.weights = {0.0, 0.0};
    Rng la(5);
    Rng ua(6);
    const ObjectiveResult r = layermatch_objective(net, labeled, p, avg, opt, AugmentationSpec{}, la, ua);
    Rng lb(5);
    const LossResult sup = supervised_loss(net, labeled, AugmentationSpec{}, lb);
    const auto got = gradient_matrices(r.routed);
    const auto want = gradient_matrices(sup.grads);
    for (std::size_t k = 0; k < got.size(); ++k) CHECK(*got[k] == *want[k]);
    CHECK(r.total == sup.loss);
}

TEST_CASE("objective with an empty pseudo batch matches the supervised step and still advances beta-bar") {
    Rng rng(20);
    const Network net = small_net(rng);
    const LabeledBatch labeled{random_matrix(4, 2, rng), {0, 1, 2, 0}};
    AvgClusteringState avg{Classifier{random_matrix(3, 3, rng), random_matrix(3, 1, rng)}, 4, 0.9, 0.1, 3};
    Rng la(1);
    Rng ua(2);
    const ObjectiveResult r = layermatch_objective(net, labeled, PseudoBatch{}, avg, ObjectiveOptions{},
                                                   AugmentationSpec{}, la, ua);
    Rng lb(1);
    const LossResult sup = supervised_loss(net, labeled, AugmentationSpec{}, lb);
    const auto got = gradient_matrices(r.routed);
    const auto want = gradient_matrices(sup.grads);
    for (std::size_t k = 0; k < got.size(); ++k) CHECK(*got[k] == *want[k]);
    CHECK(r.loss_u == 0.0);
    CHECK(r.loss_ac == 0.0);
    CHECK(r.avg_state.beta_bar.weight == avg.beta_bar.weight);
    CHECK(r.avg_state.iteration_t == 4);

    const ObjectiveResult reset = layermatch_objective(net, labeled, PseudoBatch{}, r.avg_state, ObjectiveOptions{},
                                                       AugmentationSpec{}, la, ua);
    CHECK(reset.avg_state.beta_bar.weight == net.classifier.weight);
}

TEST_CASE("flipping every pseudo-label leaves the classifier gradient bit-identical") {
    Rng rng(21);
    for (int trial = 0; trial < 20; ++trial) {
        const Network net = small_net(rng);
        const LabeledBatch labeled{random_matrix(4, 2, rng), {0, 1, 2, 1}};
        const PseudoBatch p = pseudo_from_labels(random_matrix(8, 2, rng), {0, 1, 2, 0, 1, 2, 2, 1}, 3);
        AvgClusteringState avg{net.classifier, 2048, 0.999, 5e-4, 1};
        Rng la(trial);
        Rng ua(trial + 100);
        Rng lb(trial);
        Rng ub(trial + 100);
        const ObjectiveResult a = layermatch_objective(net, labeled, p, avg, ObjectiveOptions{}, AugmentationSpec{}, la, ua);
        const ObjectiveResult b =
            layermatch_objective(net, labeled, flipped(p), avg, ObjectiveOptions{}, AugmentationSpec{}, lb, ub);
        CHECK(a.routed.classifier.weight == b.routed.classifier.weight);
        CHECK(a.routed.classifier.bias == b.routed.classifier.bias);
        CHECK(a.loss_u != b.loss_u);
        CHECK(a.routed.features[0].weight != b.routed.features[0].weight);

        ObjectiveOptions off;
        off.grad_relu = false;
        Rng lc(trial);
        Rng uc(trial + 100);
        Rng ld(trial);
        Rng ud(trial + 100);
        const ObjectiveResult c = layermatch_objective(net, labeled, p, avg, off, AugmentationSpec{}, lc, uc);
        const ObjectiveResult d = layermatch_objective(net, labeled, flipped(p), avg, off, AugmentationSpec{}, ld, ud);
        CHECK(c.routed.classifier.weight != d.routed.classifier.weight);
    }
}

TEST_CASE("total objective is the weighted sum of the three losses") {
    Rng rng(22);
    const Network net = small_net(rng);
    const LabeledBatch labeled{random_matrix(4, 2, rng), {0, 1, 2, 1}};
    const PseudoBatch p = pseudo_from_labels(random_matrix(6, 2, rng), {0, 1, 2, 0, 1, 2}, 3);
    Classifier bar = net.classifier;
    bar.bias.fill(0.2);
    ObjectiveOptions opt;
    opt.weights = {0.7, 1.3};
    Rng la(1);
    Rng ua(2);
    const ObjectiveResult r =
        layermatch_objective(net, labeled, p, AvgClusteringState{bar, 2048, 0.999, 5e-4, 1}, opt, AugmentationSpec{}, la, ua);
    CHECK(r.loss_u > 0.0);
    CHECK(r.loss_ac > 0.0);
    CHECK(r.total == doctest::Approx(r.loss_s + 0.7 * r.loss_u + 1.3 * r.loss_ac).epsilon(1e-15));
}

TEST_CASE("shared strong view makes the pseudo-label and avg-clustering losses agree when beta-bar equals beta") {
    Rng rng(23);
    const Network net = small_net(rng);
    const LabeledBatch labeled{random_matrix(4, 2, rng), {0, 1, 2, 1}};
    const PseudoBatch p = pseudo_from_labels(random_matrix(6, 2, rng), {0, 1, 2, 0, 1, 2}, 3);
    ObjectiveOptions opt;
    opt.share_strong_aug = true;
    Rng la(1);
    Rng ua(2);
    const ObjectiveResult shared =
        layermatch_objective(net, labeled, p, AvgClusteringState{net.classifier, 2048, 0.999, 5e-4, 1}, opt,
                             AugmentationSpec{}, la, ua);
    CHECK(shared.loss_u == shared.loss_ac);
    opt.share_strong_aug = false;
    Rng lb(1);
    Rng ub(2);
    const ObjectiveResult independent =
        layermatch_objective(net, labeled, p, AvgClusteringState{net.classifier, 2048, 0.999, 5e-4, 1}, opt,
                             AugmentationSpec{}, lb, ub);
    CHECK(independent.loss_u == shared.loss_u);
    CHECK(independent.loss_ac != independent.loss_u);
}

TEST_CASE("dropping the Theta coupling keeps routed features free of the avg-clustering term") {
    Rng rng(24);
    const Network net = small_net(rng);
    const LabeledBatch labeled{random_matrix(4, 2, rng), {0, 1, 2, 1}};
    const PseudoBatch p = pseudo_from_labels(random_matrix(6, 2, rng), {0, 1, 2, 0, 1, 2}, 3);
    AvgClusteringState avg{net.classifier, 2048, 0.999, 5e-4, 1};
    ObjectiveOptions coupled;
    coupled.weights = {0.0, 1.0};
    ObjectiveOptions decoupled = coupled;
    decoupled.ac_theta_coupling = false;
    Rng la(1), ua(2), lb(1), ub(2);
    const ObjectiveResult a = layermatch_objective(net, labeled, p, avg, coupled, AugmentationSpec{}, la, ua);
    const ObjectiveResult b = layermatch_objective(net, labeled, p, avg, decoupled, AugmentationSpec{}, lb, ub);
    CHECK(b.routed.features[0].weight == b.grads_s.features[0].weight);
    CHECK(a.routed.features[0].weight != a.grads_s.features[0].weight);
    CHECK(a.avg_state.beta_bar.weight == b.avg_state.beta_bar.weight);
}

TEST_CASE("overall objective selects from the pseudo source") {
    Rng rng(25);
    const Network net = small_net(rng);
    Network confident = net;
    confident.classifier.weight.fill(0.0);
    confident.classifier.bias.fill(0.0);
    confident.classifier.bias(2, 0) = 30.0;
    const LabeledBatch labeled{random_matrix(4, 2, rng), {0, 1, 2, 1}};
    const UnlabeledBatch unlabeled{random_matrix(10, 2, rng), {}};
    Rng la(1), ua(2);
    std::vector<double> conf;
    const ObjectiveResult r =
        overall_objective(net, confident, labeled, unlabeled, ThresholdPolicy::fixed(0.95, 3),
                          AvgClusteringState{net.classifier, 2048, 0.999, 5e-4, 0}, ObjectiveOptions{}, AugmentationSpec{},
                          la, ua, &conf);
    REQUIRE(r.pseudo.size() == 10);
    for (std::size_t i = 0; i < 10; ++i) CHECK(r.pseudo.label_of(i) == 2);
    CHECK(conf.size() == 10);
}
