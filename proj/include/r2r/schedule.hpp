#pragma once

#include <cmath>
#include <stdexcept>
#include <vector>

#include "r2r/tensor.hpp"

namespace r2r {

// A latent carries its noise-level annotation. timestep 0 means clean.
template <typename T>
struct LatentT {
    TensorT<T> data;  // [C, H, W]
    int timestep = 0;
};

using Latent = LatentT<float>;

enum class ScheduleKind { linear, scaled_linear };

inline const char* to_string(ScheduleKind k) {
    return k == ScheduleKind::linear ? "linear" : "scaled_linear";
}

inline ScheduleKind schedule_kind_from_string(const std::string& s) {
    if (s == "linear") return ScheduleKind::linear;
    if (s == "scaled_linear") return ScheduleKind::scaled_linear;
    throw std::invalid_argument("unknown schedule kind: " + s);
}

// beta/alpha/alpha_bar tables over the training-step range. All entries are
// kept in double so the cumulative-product identity is testable at 1e-10.
struct NoiseSchedule {
    ScheduleKind kind = ScheduleKind::linear;
    int num_train_steps = 0;  // T
    double beta_start = 0.0, beta_end = 0.0;
    std::vector<double> betas;       // length T, index t-1 holds beta at step t
    std::vector<double> alphas;      // 1 - beta
    std::vector<double> alpha_bars;  // running product of alphas

    // alpha_bar(0) == 1 by convention (clean image)
    double alpha_bar(int t) const {
        if (t < 0 || t > num_train_steps)
            throw std::out_of_range("alpha_bar: timestep " + std::to_string(t) + " outside [0," +
                                    std::to_string(num_train_steps) + "]");
        return t == 0 ? 1.0 : alpha_bars[static_cast<size_t>(t - 1)];
    }
};

inline NoiseSchedule make_schedule(ScheduleKind kind, int T, double beta_start, double beta_end) {
    if (T < 1) throw std::invalid_argument("make_schedule: T must be >= 1");
    if (!(beta_start > 0.0 && beta_start <= beta_end && beta_end < 1.0))
        throw std::invalid_argument("make_schedule: need 0 < beta_start <= beta_end < 1");

    NoiseSchedule s;
    s.kind = kind;
    s.num_train_steps = T;
    s.beta_start = beta_start;
    s.beta_end = beta_end;
    s.betas.resize(static_cast<size_t>(T));
    for (int i = 0; i < T; ++i) {
        double f = T == 1 ? 0.0 : static_cast<double>(i) / static_cast<double>(T - 1);
        if (kind == ScheduleKind::linear) {
            s.betas[static_cast<size_t>(i)] = beta_start + (beta_end - beta_start) * f;
        } else {
            double r = std::sqrt(beta_start) + (std::sqrt(beta_end) - std::sqrt(beta_start)) * f;
            s.betas[static_cast<size_t>(i)] = r * r;
        }
    }
    s.alphas.resize(s.betas.size());
    s.alpha_bars.resize(s.betas.size());
    double prod = 1.0;
    for (size_t i = 0; i < s.betas.size(); ++i) {
        s.alphas[i] = 1.0 - s.betas[i];
        prod *= s.alphas[i];
        s.alpha_bars[i] = prod;
    }
    // invariants: strict decrease and the product identity hold by construction,
    // but a malformed beta table would break them, so check here once
    for (size_t i = 0; i < s.alpha_bars.size(); ++i) {
        if (!(s.alpha_bars[i] > 0.0 && s.alpha_bars[i] <= s.alphas[0] && s.alphas[0] < 1.0))
            throw std::runtime_error("make_schedule: alpha_bar range invariant violated");
        if (i > 0 && !(s.alpha_bars[i] < s.alpha_bars[i - 1]))
            throw std::runtime_error("make_schedule: alpha_bar not strictly decreasing");
    }
    return s;
}

// The subset of sampling timesteps one run traverses, stored in sampling
// (descending) order. For step count N and denoising strength s, the uniform
// N-step grid over [1, T] is truncated to its ceil(s*N) lowest levels, so the
// run starts at roughly s*T worth of noise.
struct StepPlan {
    std::vector<int> indices;  // strictly decreasing
    int start_offset = 0;      // N - run_length

    int run_length() const { return static_cast<int>(indices.size()); }
    int timestep(int iter) const { return indices.at(static_cast<size_t>(iter)); }
    int prev_timestep(int iter) const {
        return iter + 1 < run_length() ? indices[static_cast<size_t>(iter + 1)] : 0;
    }
};

// ceil with a guard against upward representation drift (0.3*50 style)
inline int ceil_fraction(double x) {
    return static_cast<int>(std::ceil(x - 1e-9));
}

inline StepPlan make_step_plan(int N, int T, double strength) {
    if (N < 1 || N > T) throw std::invalid_argument("make_step_plan: need 1 <= N <= T");
    if (!(strength > 0.0 && strength <= 1.0))
        throw std::invalid_argument("make_step_plan: strength must be in (0, 1]");
    int run = ceil_fraction(strength * static_cast<double>(N));
    if (run <= 0) throw std::invalid_argument("make_step_plan: empty plan");
    run = std::min(run, N);

    StepPlan plan;
    plan.start_offset = N - run;
    plan.indices.resize(static_cast<size_t>(run));
    // ascending uniform grid g_i = floor((i+1)*T/N), kept for i < run, reversed
    for (int i = 0; i < run; ++i) {
        int64_t g = (static_cast<int64_t>(i) + 1) * T / N;
        plan.indices[static_cast<size_t>(run - 1 - i)] = static_cast<int>(g);
    }
    for (size_t i = 1; i < plan.indices.size(); ++i)
        if (plan.indices[i] >= plan.indices[i - 1])
            throw std::runtime_error("make_step_plan: indices not strictly decreasing");
    return plan;
}

namespace detail {
template <typename T>
TensorT<T> affine_combine(const TensorT<T>& a, double ca, const TensorT<T>& b, double cb) {
    TensorT<T> out;
    out.shape = a.shape;
    out.data.resize(a.data.size());
    for (size_t i = 0; i < a.data.size(); ++i)
        out.data[i] =
            static_cast<T>(ca * static_cast<double>(a.data[i]) + cb * static_cast<double>(b.data[i]));
    return out;
}
}  // namespace detail

// forward noising: z_t = sqrt(abar_t) z0 + sqrt(1 - abar_t) eps
template <typename T>
LatentT<T> add_noise(const LatentT<T>& z0, const TensorT<T>& eps, int t, const NoiseSchedule& sched) {
    check_same_shape(z0.data, eps, "add_noise");
    if (t < 1 || t > sched.num_train_steps)
        throw std::out_of_range("add_noise: t outside [1, T]");
    double ab = sched.alpha_bar(t);
    LatentT<T> out;
    out.timestep = t;
    out.data = detail::affine_combine(z0.data, std::sqrt(ab), eps, std::sqrt(1.0 - ab));
    return out;
}

// deterministic DDIM update from level t down to t_prev (eta = 0 throughout)
template <typename T>
LatentT<T> ddim_step(const LatentT<T>& z_t, const TensorT<T>& eps_pred, int t, int t_prev,
                     const NoiseSchedule& sched) {
    check_same_shape(z_t.data, eps_pred, "ddim_step");
    if (!(t > t_prev && t_prev >= 0)) throw std::invalid_argument("ddim_step: need t > t_prev >= 0");
    double a_t = sched.alpha_bar(t);
    double a_p = sched.alpha_bar(t_prev);
    double c1 = std::sqrt(a_p / a_t);
    double c2 = std::sqrt(1.0 - a_p) - c1 * std::sqrt(1.0 - a_t);
    LatentT<T> out;
    out.timestep = t_prev;
    out.data = detail::affine_combine(z_t.data, c1, eps_pred, c2);
    return out;
}

// the reverse-direction rewrite of the same update, mapping t_prev back up to t;
// with a shared eps_pred value this inverts ddim_step exactly (up to rounding)
template <typename T>
LatentT<T> ddim_invert_step(const LatentT<T>& z_prev, const TensorT<T>& eps_pred, int t, int t_prev,
                            const NoiseSchedule& sched) {
    check_same_shape(z_prev.data, eps_pred, "ddim_invert_step");
    if (!(t > t_prev && t_prev >= 0))
        throw std::invalid_argument("ddim_invert_step: need t > t_prev >= 0");
    double a_t = sched.alpha_bar(t);
    double a_p = sched.alpha_bar(t_prev);
    double c1 = std::sqrt(a_t / a_p);
    double c2 = std::sqrt(1.0 - a_t) - c1 * std::sqrt(1.0 - a_p);
    LatentT<T> out;
    out.timestep = t;
    out.data = detail::affine_combine(z_prev.data, c1, eps_pred, c2);
    return out;
}

}  // namespace r2r
