#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include "purigrad/attack.hpp"
#include "purigrad/parallel.hpp"
#include "test_util.hpp"

using namespace purigrad;
using namespace purigrad::attacks;
using namespace purigrad::models;
using namespace purigrad::purifiers;

namespace {

Defense identity_defense(const Mlp& classifier) { return Defense{Purifier::identity(), classifier}; }

/// Linear binary classifier as a no-hidden-layer net.
Mlp linear_classifier(const Tensor& w_row, double b1) {
    Mlp m;
    int64_t d = w_row.numel();
    m.layer_dims = {d, 2};
    std::vector<double> w(static_cast<size_t>(2 * d), 0.0);
    for (int64_t k = 0; k < d; ++k) w[static_cast<size_t>(d + k)] = w_row.at(k);  // class-1 row
    m.weights.push_back(Tensor::from({2, d}, std::move(w)));
    m.biases.push_back(Tensor::from({2}, {0.0, b1}));
    return m;
}

}  // namespace

TEST_CASE("linf projection clamps into ball and box") {
    Tensor x0 = Tensor::from({1, 3}, {0.5, 0.95, 0.5});
    Tensor x = Tensor::from({1, 3}, {0.9, 1.2, 0.55});
    Tensor p = project_linf(x, x0, 0.1);
    CHECK(p.at(0) == doctest::Approx(0.6));   // ball binds
    CHECK(p.at(1) == doctest::Approx(1.0));   // image box binds before the ball
    CHECK(p.at(2) == doctest::Approx(0.55));  // inside: unchanged
}

TEST_CASE("l2 projection rescales the difference and flags clamp distortion") {
    Tensor x0 = Tensor::from({2, 2}, {0.5, 0.5, 0.0, 0.0});
    // row 0: difference (0.3, 0.4)*s, norm 0.5 -> rescaled to eps=1? stays
    Tensor x = Tensor::from({2, 2}, {0.8, 0.9, 0.9, 0.9});
    std::vector<char> distorted;
    Tensor p = project_l2(x, x0, 1.0, &distorted);
    // row 0 norm = 0.5 <= 1: unchanged
    CHECK(p.at2(0, 0) == doctest::Approx(0.8));
    CHECK(p.at2(0, 1) == doctest::Approx(0.9));
    CHECK(distorted[0] == 0);

    // 3-4-5 rescale: difference (0.36, 0.48) has norm 0.6 -> scaled to 0.5
    Tensor y = Tensor::from({1, 2}, {0.4 + 0.36, 0.3 + 0.48});
    Tensor y0 = Tensor::from({1, 2}, {0.4, 0.3});
    Tensor py = project_l2(y, y0, 0.5);
    double n = std::hypot(py.at(0) - 0.4, py.at(1) - 0.3);
    CHECK(n == doctest::Approx(0.5).epsilon(1e-9));
    CHECK(py.at(0) == doctest::Approx(0.7));
    CHECK(py.at(1) == doctest::Approx(0.7));

    // corner case: projection lands outside the box, clamp pulls it back
    Tensor z = Tensor::from({1, 2}, {-1.0, -1.0});
    Tensor z0 = Tensor::from({1, 2}, {0.0, 0.0});
    std::vector<char> dz;
    Tensor pz = project_l2(z, z0, 0.5, &dz);
    CHECK(pz.at(0) >= 0.0);
    CHECK(dz[0] == 1);
}

TEST_CASE("eot gradient: identity purifier is replicate-count independent; H=2 is the mean") {
    Mlp classifier = testutil::random_mlp({3, 8, 2}, Act::silu, 11);
    Defense d = identity_defense(classifier);
    Rng xr(12);
    Tensor x = testutil::random_tensor({1, 3}, xr, 0.1, 0.9);
    Tensor g1 = eot_gradient(x, d, {1}, 1, Rng(5), grad::Method::checkpointed);
    Tensor g8 = eot_gradient(x, d, {1}, 8, Rng(5), grad::Method::checkpointed);
    CHECK(max_abs_diff(g1, g8) < 1e-15);

    // stochastic purifier: H=2 equals the arithmetic mean of the two
    // single-trajectory gradients
    Mlp energy = testutil::random_mlp({3, 8, 1}, Act::soft_leaky_relu, 13);
    PurifierConfig cfg;
    cfg.langevin_steps = 4;
    cfg.eta = 0.1;
    Defense ld{Purifier::langevin(cfg, energy), classifier};
    Rng base(77);
    Tensor mean2 = eot_gradient(x, ld, {1}, 2, base, grad::Method::checkpointed);
    grad::LossHead head = grad::xent_head(classifier, {1});
    Tensor ga = grad::checkpointed_grad(x, ld.purifier, head, {base.derive(0).derive(0)}).gradient;
    Tensor gb = grad::checkpointed_grad(x, ld.purifier, head, {base.derive(0).derive(1)}).gradient;
    for (int64_t i = 0; i < x.numel(); ++i)
        CHECK(mean2.at(i) == doctest::Approx(0.5 * (ga.at(i) + gb.at(i))).epsilon(1e-12));
}

TEST_CASE("eot replicate variance shrinks about linearly in H") {
    Mlp classifier = testutil::random_mlp({3, 8, 2}, Act::silu, 11);
    Mlp energy = testutil::random_mlp({3, 8, 1}, Act::soft_leaky_relu, 13);
    PurifierConfig cfg;
    cfg.langevin_steps = 4;
    cfg.eta = 0.15;
    Defense d{Purifier::langevin(cfg, energy), classifier};
    Rng xr(14);
    Tensor x = testutil::random_tensor({1, 3}, xr, 0.2, 0.8);

    auto estimator_variance = [&](int h) {
        int repeats = 100;
        std::vector<double> first_coord;
        for (int r = 0; r < repeats; ++r)
            first_coord.push_back(
                eot_gradient(x, d, {1}, h, Rng(9000 + static_cast<uint64_t>(r)), grad::Method::checkpointed)
                    .at(0));
        double m = 0.0;
        for (double v : first_coord) m += v;
        m /= repeats;
        double var = 0.0;
        for (double v : first_coord) var += (v - m) * (v - m);
        return var / (repeats - 1);
    };
    double v1 = estimator_variance(1);
    double v20 = estimator_variance(20);
    double ratio = v1 / v20;
    INFO("variance ratio " << ratio);
    CHECK(ratio > 10.0);  // about 20, within +-50%
    CHECK(ratio < 30.0);
}

TEST_CASE("epsilon=0 attack returns the original") {
    Mlp classifier = testutil::random_mlp({4, 8, 2}, Act::silu, 15);
    Defense d = identity_defense(classifier);
    Rng xr(16);
    Tensor x = testutil::random_tensor({1, 4}, xr, 0.2, 0.8);
    AttackConfig cfg;
    cfg.epsilon = 0.0;
    cfg.iterations = 3;
    cfg.eot_replicates = 1;
    AdversarialRecord rec = pgd_attack(x, 0, d, cfg);
    CHECK(max_abs_diff(rec.final_state, Tensor::from({4}, {x.data().begin(), x.data().end()})) == 0.0);
}

TEST_CASE("linear classifier closed form: one big step lands at the signed corner") {
    Tensor w = Tensor::from({4}, {0.8, -0.6, 0.4, -0.2});
    double b1 = -0.05;
    Mlp lin = linear_classifier(w, b1);
    Defense d = identity_defense(lin);
    Tensor x0 = Tensor::from({1, 4}, {0.5, 0.5, 0.5, 0.5});
    double eps = 0.1;

    AttackConfig cfg;
    cfg.epsilon = eps;
    cfg.step_size = 0.2;  // >= eps: saturates in one step
    cfg.iterations = 1;
    cfg.eot_replicates = 1;
    cfg.seed = 3;
    AdversarialRecord rec = pgd_attack(x0, 0, d, cfg);
    // label 0: the loss increases along +grad = +(w1 - w0) = +w direction
    for (int64_t k = 0; k < 4; ++k) {
        double want = 0.5 + eps * (w.at(k) > 0 ? 1.0 : -1.0);
        CHECK(rec.final_state.at(k) == doctest::Approx(want).epsilon(1e-12));
    }
    // margin flip iff eps ||w||_1 > |m(x0)|
    double margin = b1;  // w . x0 symmetric part: 0.5 * (0.8-0.6+0.4-0.2) = 0.2; m = 0.2 + b1
    margin += 0.5 * (0.8 - 0.6 + 0.4 - 0.2);
    double l1 = 0.8 + 0.6 + 0.4 + 0.2;
    bool should_flip = eps * l1 > std::abs(margin);
    Tensor logits = lin.forward_detached(rec.final_state);
    bool flipped = logits.at(1) > logits.at(0);
    CHECK(flipped == should_flip);
}

TEST_CASE("iterates respect ball and box constraints; records are deterministic") {
    Mlp classifier = testutil::random_mlp({4, 10, 3}, Act::silu, 17);
    Mlp energy = testutil::random_mlp({4, 10, 1}, Act::soft_leaky_relu, 18);
    PurifierConfig pcfg;
    pcfg.langevin_steps = 5;
    pcfg.eta = 0.08;
    Defense d{Purifier::langevin(pcfg, energy), classifier};
    Rng xr(19);
    Tensor X = testutil::random_tensor({3, 4}, xr, 0.05, 0.95);
    std::vector<int32_t> labels{0, 1, 2};

    for (Norm norm : {Norm::linf, Norm::l2}) {
        AttackConfig cfg;
        cfg.norm = norm;
        cfg.epsilon = norm == Norm::linf ? 0.1 : 0.5;
        cfg.step_size = 0.03;
        cfg.iterations = 5;
        cfg.eot_replicates = 2;
        cfg.seed = 21;
        auto recs = pgd_attack_batch(X, labels, d, cfg);
        auto recs2 = pgd_attack_batch(X, labels, d, cfg);
        for (size_t i = 0; i < recs.size(); ++i) {
            const auto& r = recs[i];
            CHECK(bitwise_equal(r.final_state, recs2[i].final_state));
            CHECK(r.loss_trace == recs2[i].loss_trace);
            for (int64_t k = 0; k < 4; ++k) {
                double delta = r.final_state.at(k) - r.original.at(k);
                CHECK(r.final_state.at(k) >= 0.0);
                CHECK(r.final_state.at(k) <= 1.0);
                if (norm == Norm::linf) CHECK(std::abs(delta) <= cfg.epsilon + 1e-12);
            }
            if (norm == Norm::l2) {
                double n2 = 0.0;
                for (int64_t k = 0; k < 4; ++k) {
                    double delta = r.final_state.at(k) - r.original.at(k);
                    n2 += delta * delta;
                }
                CHECK(std::sqrt(n2) <= cfg.epsilon + 1e-12);
            }
            CHECK(r.loss_trace.size() == 5);
        }
    }
}

TEST_CASE("single-image attack equals the batch row with the same image id") {
    Mlp classifier = testutil::random_mlp({4, 10, 2}, Act::silu, 22);
    Defense d = identity_defense(classifier);
    Rng xr(23);
    Tensor x = testutil::random_tensor({1, 4}, xr, 0.2, 0.8);
    AttackConfig cfg;
    cfg.iterations = 4;
    cfg.eot_replicates = 1;
    cfg.seed = 31;
    AdversarialRecord single = pgd_attack(x, 1, d, cfg);
    auto batch = pgd_attack_batch(x, {1}, d, cfg, {0});
    CHECK(bitwise_equal(single.final_state, batch[0].final_state));
}

TEST_CASE("loss trace is non-decreasing for small steps on the deterministic quadratic defense") {
    Mlp classifier = testutil::random_mlp({3, 8, 2}, Act::silu, 24);
    PurifierConfig pcfg;
    pcfg.langevin_steps = 4;
    pcfg.eta = 0.1;
    pcfg.zero_noise = true;  // deterministic pipeline makes monotonicity meaningful
    Defense d{Purifier::langevin(pcfg, energy_quadratic()), classifier};
    Rng xr(25);
    Tensor x = testutil::random_tensor({1, 3}, xr, 0.3, 0.7);
    AttackConfig cfg;
    cfg.epsilon = 0.2;
    cfg.step_size = 1e-3;
    cfg.iterations = 12;
    cfg.eot_replicates = 1;
    AdversarialRecord rec = pgd_attack(x, 0, d, cfg);
    for (size_t j = 1; j < rec.loss_trace.size(); ++j)
        CHECK(rec.loss_trace[j] >= rec.loss_trace[j - 1] - 1e-12);
}

TEST_CASE("apgd first iteration equals pgd with step 2*eps") {
    Mlp classifier = testutil::random_mlp({4, 10, 2}, Act::silu, 26);
    Defense d = identity_defense(classifier);
    Rng xr(27);
    Tensor x = testutil::random_tensor({1, 4}, xr, 0.3, 0.7);
    AttackConfig a;
    a.epsilon = 0.1;
    a.iterations = 1;
    a.eot_replicates = 1;
    a.seed = 41;
    AttackConfig p = a;
    p.step_size = 2.0 * a.epsilon;
    AdversarialRecord apgd = apgd_attack(x, 0, d, a);
    AdversarialRecord pgd = pgd_attack(x, 0, d, p);
    CHECK(bitwise_equal(apgd.final_state, pgd.final_state));
}

TEST_CASE("apgd on a linear model reaches the same corner as fixed-step pgd; steps only halve") {
    Tensor w = Tensor::from({4}, {0.9, -0.7, 0.5, -0.3});
    Mlp lin = linear_classifier(w, 0.0);
    Defense d = identity_defense(lin);
    Tensor x0 = Tensor::from({1, 4}, {0.5, 0.5, 0.5, 0.5});
    AttackConfig cfg;
    cfg.epsilon = 0.1;
    cfg.iterations = 20;
    cfg.eot_replicates = 1;
    cfg.seed = 43;
    AttackConfig fixed = cfg;
    fixed.step_size = 0.025;
    AdversarialRecord apgd = apgd_attack(x0, 0, d, cfg);
    AdversarialRecord pgd = pgd_attack(x0, 0, d, fixed);
    CHECK(max_abs_diff(apgd.final_state, pgd.final_state) < 1e-12);  // both saturate the corner
    for (size_t j = 1; j < apgd.step_trace.size(); ++j) {
        CHECK(apgd.step_trace[j] <= apgd.step_trace[j - 1]);
        double ratio = apgd.step_trace[j - 1] / apgd.step_trace[j];
        CHECK((ratio == doctest::Approx(1.0) || ratio == doctest::Approx(2.0)));
    }
}

TEST_CASE("gradient-method ordering of attack-process success on a small defended setup") {
    MixtureSpec spec;
    spec.dim = 8;
    spec.classes = 3;
    spec.components = 6;
    spec.sigma = 0.05;
    spec.seed = 61;
    SyntheticDataset ds = make_dataset(spec, 384);
    TrainConfig ccfg{.epochs = 40, .lr = 0.25, .batch = 128, .seed = 67};
    Mlp classifier = train_classifier(ds, ccfg, {32, 32}, Act::silu);
    EbmTrainConfig ecfg;
    ecfg.base = {.epochs = 12, .lr = 0.02, .batch = 128, .seed = 71};
    ecfg.langevin_steps = 20;
    Mlp energy = train_ebm(ds, ecfg, {32, 32});

    PurifierConfig pcfg;
    pcfg.langevin_steps = 25;
    pcfg.eta = 0.05;
    Defense d{Purifier::langevin(pcfg, energy), classifier};

    SyntheticDataset eval = make_dataset(spec, 48, /*stream=*/1);
    AttackConfig base;
    base.epsilon = 0.1;
    base.step_size = 0.025;
    base.iterations = 10;
    base.eot_replicates = 4;
    base.seed = 73;

    auto success_fraction = [&](grad::Method m) {
        AttackConfig cfg = base;
        cfg.grad_method = m;
        auto recs = pgd_attack_batch(eval.points, eval.labels, d, cfg);
        int broken = 0;
        for (const auto& r : recs) broken += r.first_broken.has_value();
        return static_cast<double>(broken) / static_cast<double>(recs.size());
    };
    double ckpt = success_fraction(grad::Method::checkpointed);
    double tail = success_fraction(grad::Method::final_state);
    double bp = success_fraction(grad::Method::bpda);
    INFO("attack-process success: ckpt " << ckpt << " tail-half " << tail << " bpda " << bp);
    CHECK(ckpt >= tail);
    CHECK(tail >= bp);
}
