#include <catch2/catch_amalgamated.hpp>

#include <cmath>
#include <vector>

#include "r2r/rng.hpp"
#include "r2r/schedule.hpp"

using namespace r2r;

// ---------------------------------------------------------------------------
// independent oracles, kept free of the implementation under test
// ---------------------------------------------------------------------------

// running product of (1 - beta_i) in extended precision
static long double oracle_alpha_bar_linear(int T, long double b0, long double b1, int upto) {
    long double prod = 1.0L;
    for (int i = 0; i < upto; ++i) {
        long double f = T == 1 ? 0.0L : static_cast<long double>(i) / (T - 1);
        prod *= 1.0L - (b0 + (b1 - b0) * f);
    }
    return prod;
}

// scalar evaluation of the DDIM update in extended precision
static long double oracle_ddim_step(long double z, long double e, long double a_t, long double a_p) {
    return std::sqrt(a_p) * (z - std::sqrt(1.0L - a_t) * e) / std::sqrt(a_t) +
           std::sqrt(1.0L - a_p) * e;
}

static long double oracle_ddim_invert(long double z, long double e, long double a_t, long double a_p) {
    return std::sqrt(a_t) * (z - std::sqrt(1.0L - a_p) * e) / std::sqrt(a_p) +
           std::sqrt(1.0L - a_t) * e;
}

// schedule with hand-chosen alpha_bar entries, for scalar-coefficient checks
static NoiseSchedule fixed_alpha_bar_schedule(std::vector<double> alpha_bars) {
    NoiseSchedule s;
    s.num_train_steps = static_cast<int>(alpha_bars.size());
    s.alpha_bars = std::move(alpha_bars);
    s.betas.assign(s.alpha_bars.size(), 0.0);
    s.alphas.assign(s.alpha_bars.size(), 0.0);
    return s;
}

static Latent scalar_latent(float v, int t = 0) {
    Latent z;
    z.data = Tensor::from({1, 1, 1}, {v});
    z.timestep = t;
    return z;
}

// ---------------------------------------------------------------------------

TEST_CASE("make_schedule single step") {
    auto s = make_schedule(ScheduleKind::linear, 1, 0.1, 0.1);
    REQUIRE(s.alpha_bars.size() == 1);
    REQUIRE(s.alpha_bars[0] == Catch::Approx(0.9).epsilon(1e-15));
    REQUIRE(s.alpha_bar(0) == 1.0);
}

TEST_CASE("make_schedule rejects bad arguments") {
    REQUIRE_THROWS(make_schedule(ScheduleKind::linear, 0, 1e-4, 0.02));
    REQUIRE_THROWS(make_schedule(ScheduleKind::linear, -3, 1e-4, 0.02));
    REQUIRE_THROWS(make_schedule(ScheduleKind::linear, 10, 0.0, 0.02));
    REQUIRE_THROWS(make_schedule(ScheduleKind::linear, 10, 0.02, 1e-4));
    REQUIRE_THROWS(make_schedule(ScheduleKind::linear, 10, 0.5, 1.0));
}

TEST_CASE("alpha_bar monotonicity and product identity over random schedules") {
    Rng rng(20240501);
    for (int rep = 0; rep < 20; ++rep) {
        int T = static_cast<int>(rng.uniform_int(1, 500));
        double b0 = rng.uniform(1e-6, 5e-3);
        double b1 = rng.uniform(b0, 0.05);
        auto kind = rep % 2 == 0 ? ScheduleKind::linear : ScheduleKind::scaled_linear;
        auto s = make_schedule(kind, T, b0, b1);
        for (int t = 1; t <= T; ++t) {
            REQUIRE(s.alpha_bar(t) > 0.0);
            REQUIRE(s.alpha_bar(t) <= s.alphas[0]);
            REQUIRE(s.alpha_bar(t) < s.alpha_bar(t - 1));
            // product identity exact to machine precision
            REQUIRE(s.alpha_bar(t) == s.alpha_bar(t - 1) * s.alphas[static_cast<size_t>(t - 1)]);
        }
    }
}

TEST_CASE("final alpha_bar matches extended-precision running product") {
    auto s = make_schedule(ScheduleKind::linear, 1000, 1e-4, 0.02);
    long double expect = oracle_alpha_bar_linear(1000, 1e-4L, 0.02L, 1000);
    REQUIRE(std::abs(static_cast<double>(expect) - s.alpha_bar(1000)) / static_cast<double>(expect) <
            1e-10);
    // frozen extended-precision value
    REQUIRE(s.alpha_bar(1000) == Catch::Approx(4.035829765375683e-05).epsilon(1e-10));
}

TEST_CASE("add_noise zero-noise and scalar cases") {
    auto s = make_schedule(ScheduleKind::linear, 1, 0.75, 0.75);  // alpha_bar(1) = 0.25
    Rng rng(7);
    auto z0data = randn<float>({2, 3, 3}, rng);
    Latent z0{z0data, 0};
    Tensor zero(z0data.shape, 0.0f);

    auto zt = add_noise(z0, zero, 1, s);
    REQUIRE(zt.timestep == 1);
    for (int64_t i = 0; i < zt.data.numel(); ++i)
        REQUIRE(zt.data[i] == Catch::Approx(0.5f * z0data[i]).margin(1e-7));

    // scalar oracle: 0.5*2 + sqrt(0.75)*1
    auto zs = add_noise(scalar_latent(2.0f), Tensor::from({1, 1, 1}, {1.0f}), 1, s);
    REQUIRE(zs.data[0] == Catch::Approx(1.8660254037844386).epsilon(1e-6));

    // identity limit: alpha_bar(1) = 1 - 1e-12
    auto near_id = make_schedule(ScheduleKind::linear, 1, 1e-12, 1e-12);
    auto z_id = add_noise(z0, randn<float>({2, 3, 3}, rng), 1, near_id);
    REQUIRE(max_abs_diff(z_id.data, z0.data) < 1e-5);
}

TEST_CASE("add_noise rejects bad input") {
    auto s = make_schedule(ScheduleKind::linear, 10, 1e-4, 0.02);
    Latent z0{Tensor({1, 2, 2}), 0};
    REQUIRE_THROWS(add_noise(z0, Tensor({1, 2, 3}), 1, s));
    REQUIRE_THROWS(add_noise(z0, Tensor({1, 2, 2}), 0, s));
    REQUIRE_THROWS(add_noise(z0, Tensor({1, 2, 2}), 11, s));
}

TEST_CASE("ddim_step reductions and scalar oracle") {
    auto s = fixed_alpha_bar_schedule({0.8, 0.5});  // alpha_bar(1)=0.8, alpha_bar(2)=0.5

    SECTION("zero eps reduces to sqrt(ratio) scaling") {
        auto z = scalar_latent(3.0f, 2);
        auto out = ddim_step(z, Tensor({1, 1, 1}, 0.0f), 2, 1, s);
        REQUIRE(out.data[0] == Catch::Approx(3.0 * std::sqrt(0.8 / 0.5)).epsilon(1e-6));
        REQUIRE(out.timestep == 1);
    }

    SECTION("equal alpha_bars pass the latent through for any eps") {
        auto se = fixed_alpha_bar_schedule({0.6, 0.6});
        auto z = scalar_latent(-1.75f, 2);
        auto out = ddim_step(z, Tensor::from({1, 1, 1}, {42.0f}), 2, 1, se);
        REQUIRE(out.data[0] == -1.75f);
    }

    SECTION("scalar oracle") {
        auto z = scalar_latent(1.0f, 2);
        auto out = ddim_step(z, Tensor::from({1, 1, 1}, {0.2f}), 2, 1, s);
        long double expect = oracle_ddim_step(1.0L, 0.2L, 0.5L, 0.8L);
        REQUIRE(out.data[0] == Catch::Approx(static_cast<double>(expect)).epsilon(1e-6));
        // frozen extended-precision value of the same expression
        REQUIRE(out.data[0] == Catch::Approx(1.1754683449673601).epsilon(1e-6));
    }

    SECTION("rejects t_prev >= t and shape mismatch") {
        auto z = scalar_latent(1.0f, 1);
        REQUIRE_THROWS(ddim_step(z, Tensor({1, 1, 1}), 1, 1, s));
        REQUIRE_THROWS(ddim_step(z, Tensor({1, 1, 1}), 1, 2, s));
        REQUIRE_THROWS(ddim_step(scalar_latent(1.0f, 2), Tensor({2, 1, 1}), 2, 1, s));
    }
}

TEST_CASE("ddim_invert_step reductions and scalar oracle") {
    auto s = fixed_alpha_bar_schedule({0.8, 0.5});

    SECTION("zero eps reduces to sqrt(ratio) scaling") {
        auto z = scalar_latent(2.0f, 1);
        auto out = ddim_invert_step(z, Tensor({1, 1, 1}, 0.0f), 2, 1, s);
        REQUIRE(out.data[0] == Catch::Approx(2.0 * std::sqrt(0.5 / 0.8)).epsilon(1e-6));
        REQUIRE(out.timestep == 2);
    }

    SECTION("scalar oracle mirroring the sampling example") {
        auto z = scalar_latent(1.0f, 1);
        auto out = ddim_invert_step(z, Tensor::from({1, 1, 1}, {0.2f}), 2, 1, s);
        long double expect = oracle_ddim_invert(1.0L, 0.2L, 0.5L, 0.8L);
        REQUIRE(out.data[0] == Catch::Approx(static_cast<double>(expect)).epsilon(1e-6));
        REQUIRE(out.data[0] == Catch::Approx(0.8612800931607496).epsilon(1e-6));
    }
}

TEST_CASE("invert-then-sample is the identity with shared eps") {
    auto sched = make_schedule(ScheduleKind::linear, 1000, 1e-4, 0.02);
    Rng rng(99);
    // arbitrary (t, t_prev) pairs, including extreme jumps: double latents
    for (int rep = 0; rep < 200; ++rep) {
        auto z = randn<double>({2, 4, 4}, rng);
        auto e = randn<double>({2, 4, 4}, rng);
        int t_prev = static_cast<int>(rng.uniform_int(0, 998));
        int t = static_cast<int>(rng.uniform_int(t_prev + 1, 999)) + 1;
        LatentT<double> zl{z, t_prev};
        auto up = ddim_invert_step(zl, e, t, t_prev, sched);
        auto back = ddim_step(up, e, t, t_prev, sched);
        REQUIRE(rel_error(back.data, z) < 1e-6);
    }
    // plan-sized jumps at working precision; a wide jump shrinks the latent
    // contribution below float32 resolution, so those live in the case above
    for (int rep = 0; rep < 200; ++rep) {
        auto z = randn<float>({2, 4, 4}, rng);
        auto e = randn<float>({2, 4, 4}, rng);
        int t_prev = static_cast<int>(rng.uniform_int(0, 899));
        int t = t_prev + static_cast<int>(rng.uniform_int(1, 100));
        Latent zl{z, t_prev};
        auto up = ddim_invert_step(zl, e, t, t_prev, sched);
        auto back = ddim_step(up, e, t, t_prev, sched);
        REQUIRE(rel_error(back.data, z) < 1e-6);
    }
}

TEST_CASE("full-trajectory round trip under a constant estimator") {
    auto sched = make_schedule(ScheduleKind::linear, 1000, 1e-4, 0.02);
    Rng rng(512);
    for (int plan_case = 0; plan_case < 3; ++plan_case) {
        int N = std::vector<int>{10, 25, 50}[static_cast<size_t>(plan_case)];
        double strength = std::vector<double>{1.0, 0.5, 0.3}[static_cast<size_t>(plan_case)];
        auto plan = make_step_plan(N, 1000, strength);
        for (int rep = 0; rep < 35; ++rep) {
            auto z0 = randn<float>({1, 4, 4}, rng);
            auto eps = randn<float>({1, 4, 4}, rng);
            Latent z{z0, 0};
            // inversion traverses the plan upward, sampling back downward
            for (int i = plan.run_length() - 1; i >= 0; --i)
                z = ddim_invert_step(z, eps, plan.timestep(i), plan.prev_timestep(i), sched);
            for (int i = 0; i < plan.run_length(); ++i)
                z = ddim_step(z, eps, plan.timestep(i), plan.prev_timestep(i), sched);
            REQUIRE(rel_error(z.data, z0) < 1e-5);
        }
    }
}

TEST_CASE("make_step_plan spacing and truncation") {
    SECTION("full strength keeps all N indices, ending at T") {
        auto p = make_step_plan(50, 1000, 1.0);
        REQUIRE(p.run_length() == 50);
        REQUIRE(p.start_offset == 0);
        REQUIRE(p.indices.front() == 1000);
        REQUIRE(p.indices.back() == 20);
    }
    SECTION("strength 0.3 keeps 15 of 50") {
        auto p = make_step_plan(50, 1000, 0.3);
        REQUIRE(p.run_length() == 15);
        REQUIRE(p.start_offset == 35);
        REQUIRE(p.indices.front() == 300);
        REQUIRE(p.indices.back() == 20);
    }
    SECTION("independent re-derivation of the uniform spacing rule") {
        auto p = make_step_plan(10, 1000, 0.5);
        // grid floor((i+1)*T/N) = 100*(i+1); lowest five, descending
        std::vector<int> expect = {500, 400, 300, 200, 100};
        REQUIRE(p.indices == expect);
    }
    SECTION("plan is strictly decreasing and within [1, T] for random inputs") {
        Rng rng(3);
        for (int rep = 0; rep < 50; ++rep) {
            int T = static_cast<int>(rng.uniform_int(5, 2000));
            int N = static_cast<int>(rng.uniform_int(1, static_cast<int64_t>(T)));
            double strength = rng.uniform(0.01, 1.0);
            auto p = make_step_plan(N, T, strength);
            REQUIRE(p.run_length() >= 1);
            REQUIRE(p.run_length() + p.start_offset == N);
            REQUIRE(p.indices.front() <= T);
            REQUIRE(p.indices.back() >= 1);
            for (size_t i = 1; i < p.indices.size(); ++i)
                REQUIRE(p.indices[i] < p.indices[i - 1]);
        }
    }
    SECTION("rejects bad arguments") {
        REQUIRE_THROWS(make_step_plan(0, 100, 0.5));
        REQUIRE_THROWS(make_step_plan(101, 100, 0.5));
        REQUIRE_THROWS(make_step_plan(10, 100, 0.0));
        REQUIRE_THROWS(make_step_plan(10, 100, 1.5));
        // strength so small the rounded plan would be empty
        REQUIRE_THROWS(make_step_plan(10, 100, 1e-12));
    }
}

TEST_CASE("step functions are deterministic across repeat calls") {
    auto sched = make_schedule(ScheduleKind::scaled_linear, 100, 1e-4, 0.02);
    Rng rng(1234);
    auto z = randn<float>({3, 5, 5}, rng);
    auto e = randn<float>({3, 5, 5}, rng);
    Latent zl{z, 40};
    auto a = ddim_step(zl, e, 40, 17, sched);
    auto b = ddim_step(zl, e, 40, 17, sched);
    REQUIRE(bit_equal(a.data, b.data));
    auto c = add_noise(Latent{z, 0}, e, 40, sched);
    auto d = add_noise(Latent{z, 0}, e, 40, sched);
    REQUIRE(bit_equal(c.data, d.data));
}
