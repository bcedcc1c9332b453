#include "latentmark/ddim.hpp"

#include <cmath>
#include <string>

#include "latentmark/errors.hpp"

namespace latentmark {

namespace {

void validate_config(const SamplerConfig& cfg) {
    if (cfg.n_steps < 1) throw ConfigError("sampler: n_steps must be >= 1");
    if (cfg.eta != 0.0) throw ConfigError("sampler: only the deterministic sampler (eta = 0) is supported");
    if (!std::isfinite(cfg.guidance_scale)) throw ConfigError("sampler: non-finite guidance_scale");
}

void check_finite(const LatentTensor& z, int step, const char* what) {
    for (double v : z.data)
        if (!std::isfinite(v)) throw NumericalError(std::string(what) + ": non-finite value", step);
}

}  // namespace

std::vector<int> ddim_step_indices(int t_train, int n_steps) {
    if (n_steps < 1) throw ConfigError("sampler: n_steps must be >= 1");
    if (n_steps > t_train)
        throw ConfigError("sampler: n_steps " + std::to_string(n_steps) +
                          " exceeds t_train " + std::to_string(t_train));
    std::vector<int> idx(static_cast<std::size_t>(n_steps) + 1);
    for (int j = 0; j <= n_steps; ++j)
        idx[j] = static_cast<int>((static_cast<long long>(j) * t_train) / n_steps);
    for (int j = 1; j <= n_steps; ++j)
        if (idx[j] <= idx[j - 1])
            throw ConfigError("sampler: step indices not strictly increasing at j=" +
                              std::to_string(j));
    return idx;
}

LatentTensor ddim_sample(const MixtureScoreModel& model, const NoiseSchedule& sched,
                         const LatentTensor& z_t_train, const SamplerConfig& cfg) {
    validate_config(cfg);
    require_same_shape(z_t_train.shape, model.shape(), "ddim_sample");
    const auto idx = ddim_step_indices(sched.t_train(), cfg.n_steps);

    LatentTensor z = z_t_train;
    check_finite(z, cfg.n_steps, "ddim_sample input");
    for (int j = cfg.n_steps; j >= 1; --j) {
        const int t = idx[j];
        const int s = idx[j - 1];
        const double sab_t = sched.sqrt_alpha_bar(t);
        const double s1m_t = sched.sqrt_one_minus_alpha_bar(t);
        const double sab_s = sched.sqrt_alpha_bar(s);
        const double s1m_s = sched.sqrt_one_minus_alpha_bar(s);

        const LatentTensor eps = model.eps_pred(z, t, sched, cfg.condition);
        for (std::size_t i = 0; i < z.size(); ++i) {
            const double z0_hat = (z.data[i] - s1m_t * eps.data[i]) / sab_t;
            z.data[i] = sab_s * z0_hat + s1m_s * eps.data[i];
        }
        check_finite(z, j, "ddim_sample");
    }
    return z;
}

LatentTensor ddim_invert_naive(const MixtureScoreModel& model, const NoiseSchedule& sched,
                               const LatentTensor& z0, const SamplerConfig& cfg) {
    validate_config(cfg);
    require_same_shape(z0.shape, model.shape(), "ddim_invert_naive");
    const auto idx = ddim_step_indices(sched.t_train(), cfg.n_steps);

    LatentTensor z = z0;
    check_finite(z, 0, "ddim_invert_naive input");
    for (int j = 1; j <= cfg.n_steps; ++j) {
        const int s = idx[j - 1];
        const int t = idx[j];
        // Rearranged update with eps frozen at the lower step's state.
        const double a = sched.sqrt_alpha_bar(t) / sched.sqrt_alpha_bar(s);
        const double b =
            sched.sqrt_one_minus_alpha_bar(t) - a * sched.sqrt_one_minus_alpha_bar(s);
        const LatentTensor eps = model.eps_pred(z, s, sched, cfg.condition);
        for (std::size_t i = 0; i < z.size(); ++i) z.data[i] = a * z.data[i] + b * eps.data[i];
        check_finite(z, j, "ddim_invert_naive");
    }
    return z;
}

LatentTensor ddim_invert_exact(const MixtureScoreModel& model, const NoiseSchedule& sched,
                               const LatentTensor& z0, const SamplerConfig& cfg, double tol,
                               int max_iter) {
    validate_config(cfg);
    if (!(tol > 0.0)) throw ConfigError("ddim_invert_exact: tol must be positive");
    if (max_iter < 1) throw ConfigError("ddim_invert_exact: max_iter must be >= 1");
    require_same_shape(z0.shape, model.shape(), "ddim_invert_exact");
    const auto idx = ddim_step_indices(sched.t_train(), cfg.n_steps);

    LatentTensor z = z0;
    check_finite(z, 0, "ddim_invert_exact input");
    for (int j = 1; j <= cfg.n_steps; ++j) {
        const int s = idx[j - 1];
        const int t = idx[j];
        const double a = sched.sqrt_alpha_bar(t) / sched.sqrt_alpha_bar(s);
        const double b =
            sched.sqrt_one_minus_alpha_bar(t) - a * sched.sqrt_one_minus_alpha_bar(s);

        // Seed with the naive step, then iterate z_t = a z_s + b eps(z_t, t),
        // whose fixed point makes the downward step from z_t land on z_s.
        LatentTensor eps = model.eps_pred(z, s, sched, cfg.condition);
        LatentTensor zt(z.shape);
        for (std::size_t i = 0; i < z.size(); ++i) zt.data[i] = a * z.data[i] + b * eps.data[i];

        double residual = 0.0;
        bool converged = false;
        for (int it = 0; it < max_iter; ++it) {
            eps = model.eps_pred(zt, t, sched, cfg.condition);
            residual = 0.0;
            for (std::size_t i = 0; i < z.size(); ++i) {
                const double next = a * z.data[i] + b * eps.data[i];
                residual = std::max(residual, std::abs(next - zt.data[i]));
                zt.data[i] = next;
            }
            if (residual <= tol) {
                converged = true;
                break;
            }
        }
        if (!converged)
            throw ConvergenceError(
                "ddim_invert_exact: fixed point stalled at step " + std::to_string(j), residual);
        z = std::move(zt);
        check_finite(z, j, "ddim_invert_exact");
    }
    return z;
}

}  // namespace latentmark
