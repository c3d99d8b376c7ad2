#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include "purigrad/purifier.hpp"
#include "test_util.hpp"

using namespace purigrad;
using namespace purigrad::purifiers;
using namespace purigrad::models;

namespace {

PurifierConfig diffusion_cfg(int tstar, bool zero_noise = false) {
    PurifierConfig cfg;
    cfg.noising_depth = tstar;
    cfg.zero_noise = zero_noise;
    return cfg;
}

}  // namespace

TEST_CASE("ddpm reverse step with eps_hat=0 and z=0 rescales by 1/sqrt(alpha_t)") {
    NoiseSchedule sched = NoiseSchedule::make(5, 0.02, 0.2);
    Purifier p = Purifier::ddpm(diffusion_cfg(3, /*zero_noise=*/true), sched, eps_zero());
    Tensor x = Tensor::from({1, 2}, {0.4, 0.7});
    auto [out, rec] = purify(p, x, Rng(1));
    // noising with z=0: x * sqrt(ab_3); then three reverse steps divide by
    // sqrt(alpha_t) each, t = 3,2,1
    double want0 = 0.4 * std::sqrt(sched.alpha_bar_at(3));
    double want1 = 0.7 * std::sqrt(sched.alpha_bar_at(3));
    for (int t = 3; t >= 1; --t) {
        want0 /= std::sqrt(sched.alpha_at(t));
        want1 /= std::sqrt(sched.alpha_at(t));
    }
    CHECK(rec.final_state().at2(0, 0) == doctest::Approx(want0).epsilon(1e-12));
    CHECK(rec.final_state().at2(0, 1) == doctest::Approx(want1).epsilon(1e-12));
    CHECK(out.at2(0, 0) <= 1.0);
    CHECK(rec.num_steps() == 4);
}

TEST_CASE("ddpm t=1 step is deterministic regardless of the drawn noise") {
    NoiseSchedule sched = NoiseSchedule::make(4, 0.05, 0.3);
    Purifier p = Purifier::ddpm(diffusion_cfg(1), sched, eps_zero());
    Tensor x = Tensor::from({1, 3}, {0.2, 0.5, 0.8});
    auto [out_a, rec_a] = purify(p, x, Rng(11));
    auto [out_b, rec_b] = purify(p, x, Rng(11));
    CHECK(bitwise_equal(out_a, out_b));
    // different rng changes the noising draw but sigma_1 = 0 makes the single
    // reverse step itself noise-free: replaying step 1 from the same state
    // with a different stored z gives the same output
    TrajectoryRecord hacked = rec_a;
    hacked.noises[1] = Tensor::from({1, 3}, {5.0, -3.0, 2.0});
    Tensor replayed = replay_step(p, hacked, 1);
    CHECK(bitwise_equal(replayed, rec_a.states[2]));
}

TEST_CASE("generic ddpm step matches a hand-evaluated update in one dimension") {
    NoiseSchedule sched = NoiseSchedule::make(6, 0.03, 0.4);
    int tstar = 4;
    double eps_coef = 0.37;  // eps_hat(x, t) = 0.37 * x, an arbitrary linear predictor
    EpsFn eps = [eps_coef](Tape& tape, const Tensor& x, int) {
        return ops::scale(tape, x, eps_coef);
    };
    Purifier p = Purifier::ddpm(diffusion_cfg(tstar), sched, eps);
    Tensor x = Tensor::from({1, 1}, {0.62});
    auto [out, rec] = purify(p, x, Rng(21));

    double state = 0.62 * std::sqrt(sched.alpha_bar_at(tstar)) +
                   std::sqrt(1.0 - sched.alpha_bar_at(tstar)) * rec.noises[0].at(0);
    CHECK(rec.states[1].at(0) == doctest::Approx(state).epsilon(1e-12));
    for (int i = 1; i <= tstar; ++i) {
        int t = tstar - i + 1;
        double alpha = sched.alpha_at(t);
        double ab = sched.alpha_bar_at(t);
        double eps_hat = eps_coef * state;
        double det = (state - (1.0 - alpha) / std::sqrt(1.0 - ab) * eps_hat) / std::sqrt(alpha);
        state = det + sched.sigma_at(t) * rec.noises[static_cast<size_t>(i)].at(0);
        CHECK(rec.states[static_cast<size_t>(i) + 1].at(0) == doctest::Approx(state).epsilon(1e-12));
    }
    double clamped = std::min(std::max(state, 0.0), 1.0);
    CHECK(out.at(0) == doctest::Approx(clamped).epsilon(1e-12));
}

TEST_CASE("vpsde euler step vanishes as beta goes to zero") {
    NoiseSchedule sched = NoiseSchedule::make(3, 1e-12, 1e-12);
    Purifier p = Purifier::vpsde(diffusion_cfg(1, true), sched, eps_zero());
    Tensor x = Tensor::from({1, 2}, {0.3, 0.9});
    auto [out, rec] = purify(p, x, Rng(3));
    CHECK(max_abs_diff(out, x) < 1e-10);
    (void)rec;
}

TEST_CASE("vpsde step with the analytic standard-normal score contracts by (1 - beta/2)") {
    // when the data marginal is N(0, I), the score is -x, i.e. eps_hat =
    // sqrt(1 - ab_t) * x; one step with z=0: x + (beta/2) x - beta x = x (1 - beta/2)
    NoiseSchedule sched = NoiseSchedule::make(8, 0.04, 0.04);
    EpsFn eps = [&sched](Tape& tape, const Tensor& x, int t) {
        return ops::scale(tape, x, std::sqrt(1.0 - sched.alpha_bar_at(t)));
    };
    PurifierConfig cfg = diffusion_cfg(1, true);
    Purifier p = Purifier::vpsde(cfg, sched, eps);
    Tensor x = Tensor::from({1, 2}, {0.25, 0.75});
    auto [out, rec] = purify(p, x, Rng(5));
    (void)out;
    // step 0 is the (noise-free) forward noising; step 1 is the Euler update
    double ab1 = sched.alpha_bar_at(1);
    double noised0 = 0.25 * std::sqrt(ab1);
    double beta = sched.beta_at(1);
    CHECK(rec.states[2].at2(0, 0) == doctest::Approx(noised0 * (1.0 - beta / 2.0)).epsilon(1e-12));
}

TEST_CASE("langevin with eta=0 leaves the input unchanged for any K") {
    PurifierConfig cfg;
    cfg.langevin_steps = 7;
    cfg.eta = 0.0;
    Purifier p = Purifier::langevin(cfg, energy_quadratic());
    Tensor x = Tensor::from({2, 3}, {0.1, 0.2, 0.3, 0.4, 0.5, 0.6});
    auto [out, rec] = purify(p, x, Rng(7));
    CHECK(max_abs_diff(out, x) == 0.0);
    CHECK(rec.num_steps() == 7);
}

TEST_CASE("langevin quadratic-energy oracle: one step and the K-step recursion") {
    PurifierConfig cfg;
    cfg.langevin_steps = 1;
    cfg.eta = 0.2;
    Purifier p = Purifier::langevin(cfg, energy_quadratic());
    Tensor x = Tensor::from({1, 2}, {0.5, 0.8});
    auto [out, rec] = purify(p, x, Rng(9));
    (void)out;
    // grad U = x, so one step is x (1 - eta^2/2) + eta z
    for (int64_t k = 0; k < 2; ++k) {
        double want = x.at(k) * (1.0 - 0.2 * 0.2 / 2.0) + 0.2 * rec.noises[0].at(k);
        CHECK(rec.states[1].at(k) == doctest::Approx(want).epsilon(1e-14));
    }

    cfg.langevin_steps = 9;
    cfg.zero_noise = true;
    Purifier pz = Purifier::langevin(cfg, energy_quadratic());
    auto [out_z, rec_z] = purify(pz, x, Rng(9));
    double contraction = std::pow(1.0 - 0.2 * 0.2 / 2.0, 9);
    for (int64_t k = 0; k < 2; ++k)
        CHECK(out_z.at(k) == doctest::Approx(x.at(k) * contraction).epsilon(1e-13));
    CHECK(rec_z.num_steps() == 9);
}

TEST_CASE("replay reproduces every stored state bitwise, all kinds") {
    NoiseSchedule sched = NoiseSchedule::make(10, 1e-3, 0.1);
    Mlp denoiser = testutil::random_mlp({5, 8, 4}, Act::silu, 31);
    Mlp energy = testutil::random_mlp({4, 8, 1}, Act::soft_leaky_relu, 32);

    std::vector<Purifier> purifiers;
    purifiers.push_back(Purifier::ddpm(diffusion_cfg(4), sched, denoiser));
    purifiers.push_back(Purifier::vpsde(diffusion_cfg(4), sched, denoiser));
    PurifierConfig lc;
    lc.langevin_steps = 6;
    lc.eta = 0.08;
    purifiers.push_back(Purifier::langevin(lc, energy));

    Rng xr(33);
    Tensor x = testutil::random_tensor({3, 4}, xr, 0.05, 0.95);
    for (const Purifier& p : purifiers) {
        auto [out, rec] = purify(p, x, Rng(34));
        (void)out;
        for (int i = 0; i < rec.num_steps(); ++i) {
            Tensor replayed = replay_step(p, rec, i);
            CHECK(bitwise_equal(replayed, rec.states[static_cast<size_t>(i) + 1]));
        }
        CHECK_THROWS_AS(replay_step(p, rec, rec.num_steps()), std::out_of_range);
        CHECK_THROWS_AS(replay_step(p, rec, -1), std::out_of_range);
    }
}

TEST_CASE("langevin local jacobian of a replayed step is (1 - eta^2/2) I for the oracle energy") {
    PurifierConfig cfg;
    cfg.langevin_steps = 3;
    cfg.eta = 0.3;
    Purifier p = Purifier::langevin(cfg, energy_quadratic());
    Tensor x = Tensor::from({1, 3}, {0.2, 0.6, 0.9});
    auto [out, rec] = purify(p, x, Rng(12));
    (void)out;
    double factor = 1.0 - 0.3 * 0.3 / 2.0;
    for (int64_t col = 0; col < 3; ++col) {
        Tape tape;
        ReplayedStep step = replay_step_on(tape, p, rec, 1);
        Tensor seed = Tensor::zeros({1, 3});
        seed.mutable_data()[static_cast<size_t>(col)] = 1.0;
        Tensor g = tape.backward(step.output, seed).at(step.input);
        for (int64_t k = 0; k < 3; ++k) {
            double want = k == col ? factor : 0.0;
            CHECK(g.at(k) == doctest::Approx(want).epsilon(1e-13));
        }
    }
}

TEST_CASE("identity purifier has no steps and passes the input through") {
    Purifier p = Purifier::identity();
    Tensor x = Tensor::from({2, 2}, {0.0, 0.25, 0.5, 1.0});
    auto [out, rec] = purify(p, x, Rng(13));
    CHECK(rec.num_steps() == 0);
    CHECK(bitwise_equal(out, x));
}

TEST_CASE("purifier determinism and trajectory invariants") {
    NoiseSchedule sched = NoiseSchedule::make(12, 1e-3, 0.15);
    Mlp denoiser = testutil::random_mlp({4, 10, 3}, Act::silu, 35);
    Purifier p = Purifier::ddpm(diffusion_cfg(6), sched, denoiser);
    Rng xr(36);
    Tensor x = testutil::random_tensor({4, 3}, xr, 0.0, 1.0);
    auto [out_a, rec_a] = purify(p, x, Rng(37));
    auto [out_b, rec_b] = purify(p, x, Rng(37));
    CHECK(bitwise_equal(out_a, out_b));
    for (size_t i = 0; i < rec_a.states.size(); ++i)
        CHECK(bitwise_equal(rec_a.states[i], rec_b.states[i]));
    CHECK(rec_a.noises.size() == static_cast<size_t>(rec_a.num_steps()));

    // outputs stay in the box even under an untrained random predictor
    for (double v : out_a.data()) {
        CHECK(v >= 0.0);
        CHECK(v <= 1.0);
    }
}

TEST_CASE("diffusion purifiers reject inputs outside the unit box") {
    NoiseSchedule sched = NoiseSchedule::make(5, 1e-3, 0.1);
    Purifier p = Purifier::ddpm(diffusion_cfg(2), sched, eps_zero());
    Tensor bad = Tensor::from({1, 2}, {0.5, 1.5});
    CHECK_THROWS_AS(purify(p, bad, Rng(1)), std::invalid_argument);
    Tensor edge = Tensor::from({1, 2}, {0.0, 1.0 + 5e-10});  // within the 1e-9 tolerance
    CHECK_NOTHROW(purify(p, edge, Rng(1)));
}

TEST_CASE("invalid purifier configs are rejected") {
    NoiseSchedule sched = NoiseSchedule::make(5, 1e-3, 0.1);
    CHECK_THROWS_AS(Purifier::ddpm(diffusion_cfg(6), sched, eps_zero()), std::invalid_argument);
    CHECK_THROWS_AS(Purifier::ddpm(diffusion_cfg(0), sched, eps_zero()), std::invalid_argument);
    PurifierConfig lc;
    lc.langevin_steps = -1;
    CHECK_THROWS_AS(Purifier::langevin(lc, energy_quadratic()), std::invalid_argument);
    PurifierConfig lc2;
    lc2.eta = -0.1;
    CHECK_THROWS_AS(Purifier::langevin(lc2, energy_quadratic()), std::invalid_argument);
}

TEST_CASE("langevin divergence aborts with the step index") {
    PurifierConfig cfg;
    cfg.langevin_steps = 50;
    cfg.eta = 3.0;  // wildly unstable on a steep energy
    EnergyFn steep = [](Tape& t, const Tensor& x) {
        Tensor sq = ops::mul(t, x, x);
        return ops::scale(t, ops::sum(t, ops::mul(t, sq, sq)), 100.0);
    };
    Purifier p = Purifier::langevin(cfg, steep);
    Tensor x = Tensor::from({1, 2}, {0.9, 0.9});
    CHECK_THROWS_WITH_AS(purify(p, x, Rng(2)),
                         doctest::Contains("diverged at step"), std::runtime_error);
}
