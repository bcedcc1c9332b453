#include "latentmark/forgery.hpp"

#include <cmath>
#include <string>

#include "latentmark/ddim.hpp"
#include "latentmark/errors.hpp"

namespace latentmark {

namespace {

void validate(const ForgeryConfig& cfg) {
    if (cfg.invert_steps < 1 || cfg.regen_steps < 1)
        throw ConfigError("forgery: step counts must be >= 1");
    if (!(cfg.lambda >= 0.0 && cfg.lambda <= 1.0))
        throw ConfigError("forgery: lambda must lie in [0, 1]");
    if (!(cfg.gamma >= 0.0)) throw ConfigError("forgery: gamma must be >= 0");
}

}  // namespace

LatentTensor estimate_watermark_latent(const ImageTensor& image, const ModelBundle& proxy,
                                       int invert_steps,
                                       const std::optional<std::string>& condition) {
    SamplerConfig cfg;
    cfg.n_steps = invert_steps;
    cfg.condition = condition;
    return ddim_invert_naive(proxy.mixture, proxy.schedule, proxy.codec.encode(image), cfg);
}

ImageTensor pnp_regenerate(const LatentTensor& z_t, const ImageTensor& cover,
                           const ModelBundle& proxy, const ForgeryConfig& cfg) {
    validate(cfg);
    require_same_shape(z_t.shape, proxy.shape(), "pnp_regenerate");
    require_same_shape(cover.shape, proxy.shape(), "pnp_regenerate cover");

    const NoiseSchedule& sched = proxy.schedule;
    const auto idx = ddim_step_indices(sched.t_train(), cfg.regen_steps);
    const LatentTensor cover_latent = proxy.codec.encode(cover);
    const double t_train = static_cast<double>(sched.t_train());

    LatentTensor z = z_t;
    for (int j = cfg.regen_steps; j >= 1; --j) {
        const int t = idx[j];
        const int s = idx[j - 1];
        const double sab_t = sched.sqrt_alpha_bar(t);
        const double s1m_t = sched.sqrt_one_minus_alpha_bar(t);
        const double sab_s = sched.sqrt_alpha_bar(s);
        const double s1m_s = sched.sqrt_one_minus_alpha_bar(s);

        const LatentTensor eps = proxy.mixture.eps_pred(z, t, sched, cfg.condition);
        const double w = cfg.lambda * std::pow(1.0 - static_cast<double>(t) / t_train, cfg.gamma);
        for (std::size_t i = 0; i < z.size(); ++i) {
            double z0_hat = (z.data[i] - s1m_t * eps.data[i]) / sab_t;
            double eps_used = eps.data[i];
            if (w > 0.0) {
                // Pull the clean-image estimate toward the cover, then keep
                // the step consistent by re-deriving the noise direction.
                z0_hat = (1.0 - w) * z0_hat + w * cover_latent.data[i];
                eps_used = (z.data[i] - sab_t * z0_hat) / s1m_t;
            }
            z.data[i] = sab_s * z0_hat + s1m_s * eps_used;
        }
        for (double v : z.data)
            if (!std::isfinite(v)) throw NumericalError("pnp_regenerate: non-finite value", j);
    }
    return proxy.codec.decode(z);
}

ForgeOutput pnp_forge(const ImageTensor& watermarked, const ImageTensor& cover,
                      const ModelBundle& proxy, const ForgeryConfig& cfg) {
    validate(cfg);
    ForgeOutput out{ImageTensor{}, estimate_watermark_latent(watermarked, proxy,
                                                             cfg.invert_steps, cfg.condition)};
    out.image = pnp_regenerate(out.estimated_latent, cover, proxy, cfg);
    return out;
}

ImageTensor reprompt(const ImageTensor& watermarked, const ModelBundle& proxy,
                     const std::optional<std::string>& new_condition, int invert_steps,
                     int regen_steps) {
    const LatentTensor z = estimate_watermark_latent(watermarked, proxy, invert_steps);
    SamplerConfig cfg;
    cfg.n_steps = regen_steps;
    cfg.condition = new_condition;
    return proxy.codec.decode(ddim_sample(proxy.mixture, proxy.schedule, z, cfg));
}

namespace {

// Differentiable attacker pipeline: pixels -> continuous encode -> fast
// inversion ladder. Returns all intermediate states so the adjoint sweep can
// reuse them.
struct ImprintForward {
    std::vector<LatentTensor> states;  // states[j] after j upward steps
    double data_loss = 0.0;
};

ImprintForward imprint_forward(const std::vector<double>& pixels, const LatentTensor& z_target,
                               const ModelBundle& proxy, const std::vector<int>& idx,
                               const std::optional<std::string>& condition) {
    const NoiseSchedule& sched = proxy.schedule;
    ImprintForward fwd;
    fwd.states.reserve(idx.size());
    fwd.states.push_back(proxy.codec.encode_cont(pixels));
    for (std::size_t j = 1; j < idx.size(); ++j) {
        const int s = idx[j - 1];
        const int t = idx[j];
        const double a = sched.sqrt_alpha_bar(t) / sched.sqrt_alpha_bar(s);
        const double b = sched.sqrt_one_minus_alpha_bar(t) - a * sched.sqrt_one_minus_alpha_bar(s);
        const LatentTensor& prev = fwd.states.back();
        const LatentTensor eps = proxy.mixture.eps_pred(prev, s, sched, condition);
        LatentTensor next(prev.shape);
        for (std::size_t i = 0; i < prev.size(); ++i)
            next.data[i] = a * prev.data[i] + b * eps.data[i];
        fwd.states.push_back(std::move(next));
    }
    const LatentTensor& zT = fwd.states.back();
    for (std::size_t i = 0; i < zT.size(); ++i) {
        const double r = zT.data[i] - z_target.data[i];
        fwd.data_loss += r * r;
    }
    return fwd;
}

// Gradient of the data term w.r.t. pixels: v = dL/dz_T pulled back through
// the inversion ladder (the noise-prediction Jacobian is symmetric), then
// through the continuous encoder. The ridge term is added by callers.
std::vector<double> imprint_adjoint(const ImprintForward& fwd, const LatentTensor& z_target,
                                    const ModelBundle& proxy, const std::vector<int>& idx,
                                    const std::optional<std::string>& condition) {
    const NoiseSchedule& sched = proxy.schedule;
    const LatentTensor& zT = fwd.states.back();
    LatentTensor v(zT.shape);
    for (std::size_t i = 0; i < v.size(); ++i)
        v.data[i] = 2.0 * (zT.data[i] - z_target.data[i]);
    for (std::size_t j = idx.size() - 1; j >= 1; --j) {
        const int s = idx[j - 1];
        const int t = idx[j];
        const double a = sched.sqrt_alpha_bar(t) / sched.sqrt_alpha_bar(s);
        const double b =
            sched.sqrt_one_minus_alpha_bar(t) - a * sched.sqrt_one_minus_alpha_bar(s);
        const LatentTensor jv =
            proxy.mixture.score_jacobian_vp(fwd.states[j - 1], s, v, sched, condition);
        for (std::size_t i = 0; i < v.size(); ++i) v.data[i] = a * v.data[i] + b * jv.data[i];
    }
    return proxy.codec.encode_cont_adjoint(v);
}

}  // namespace

ImprintEval imprint_loss_grad(const std::vector<double>& delta, const LatentTensor& z_target,
                              const ImageTensor& cover, const ModelBundle& proxy,
                              const ImprintConfig& cfg) {
    if (!(cfg.mu >= 0.0)) throw ConfigError("imprint: mu must be >= 0");
    require_same_shape(z_target.shape, proxy.shape(), "imprint target");
    require_same_shape(cover.shape, proxy.shape(), "imprint cover");
    if (delta.size() != cover.data.size())
        throw ConfigError("imprint: delta length does not match the pixel count");

    const auto idx = ddim_step_indices(proxy.schedule.t_train(), cfg.invert_steps);
    std::vector<double> pixels(delta.size());
    for (std::size_t i = 0; i < pixels.size(); ++i)
        pixels[i] = static_cast<double>(cover.data[i]) + delta[i];

    const ImprintForward fwd = imprint_forward(pixels, z_target, proxy, idx, cfg.condition);
    ImprintEval eval;
    eval.grad = imprint_adjoint(fwd, z_target, proxy, idx, cfg.condition);
    double reg = 0.0;
    for (std::size_t i = 0; i < delta.size(); ++i) {
        reg += delta[i] * delta[i];
        eval.grad[i] += 2.0 * cfg.mu * delta[i];
    }
    eval.loss = fwd.data_loss + cfg.mu * reg;
    return eval;
}

ImprintResult imprint_forge(const LatentTensor& z_target, const ImageTensor& cover,
                            const ModelBundle& proxy, const ImprintConfig& cfg) {
    if (cfg.n_iters < 0) throw ConfigError("imprint: n_iters must be >= 0");
    if (!(cfg.mu >= 0.0)) throw ConfigError("imprint: mu must be >= 0");
    if (!(cfg.initial_step > 0.0)) throw ConfigError("imprint: initial_step must be positive");
    require_same_shape(z_target.shape, proxy.shape(), "imprint target");
    require_same_shape(cover.shape, proxy.shape(), "imprint cover");

    const NoiseSchedule& sched = proxy.schedule;
    const auto idx = ddim_step_indices(sched.t_train(), cfg.invert_steps);
    const std::size_t d = cover.data.size();

    std::vector<double> base(cover.data.begin(), cover.data.end());
    std::vector<double> delta(d, 0.0);

    auto loss_of = [&](const std::vector<double>& dlt, ImprintForward* fwd_out) {
        std::vector<double> pixels(d);
        for (std::size_t i = 0; i < d; ++i) pixels[i] = base[i] + dlt[i];
        ImprintForward fwd = imprint_forward(pixels, z_target, proxy, idx, cfg.condition);
        double reg = 0.0;
        for (double v : dlt) reg += v * v;
        if (fwd_out) *fwd_out = std::move(fwd);
        return (fwd_out ? fwd_out->data_loss : fwd.data_loss) + cfg.mu * reg;
    };

    ImprintResult result;
    ImprintForward fwd;
    double loss = loss_of(delta, &fwd);
    result.loss_trace.push_back(loss);
    if (!std::isfinite(loss))
        throw OptimizationError("imprint: non-finite initial loss", result.loss_trace);

    double step = cfg.initial_step;
    for (int iter = 0; iter < cfg.n_iters; ++iter) {
        std::vector<double> grad = imprint_adjoint(fwd, z_target, proxy, idx, cfg.condition);
        double gnorm2 = 0.0;
        for (std::size_t i = 0; i < d; ++i) {
            grad[i] += 2.0 * cfg.mu * delta[i];
            gnorm2 += grad[i] * grad[i];
        }
        if (gnorm2 == 0.0) break;  // stationary (e.g. already at the target)

        // Armijo backtracking with growth on acceptance.
        bool accepted = false;
        while (step > 1e-12) {
            std::vector<double> trial(d);
            for (std::size_t i = 0; i < d; ++i) trial[i] = delta[i] - step * grad[i];
            ImprintForward trial_fwd;
            const double trial_loss = loss_of(trial, &trial_fwd);
            if (!std::isfinite(trial_loss)) {
                result.loss_trace.push_back(trial_loss);
                throw OptimizationError("imprint: non-finite loss during line search",
                                        result.loss_trace);
            }
            if (trial_loss <= loss - 1e-4 * step * gnorm2) {
                delta = std::move(trial);
                fwd = std::move(trial_fwd);
                loss = trial_loss;
                accepted = true;
                break;
            }
            step *= 0.5;
        }
        if (!accepted) break;  // line search exhausted: keep the best iterate
        result.loss_trace.push_back(loss);
        step = std::min(step * 1.5, 4096.0);
    }

    ImageTensor out(cover.shape);
    for (std::size_t i = 0; i < d; ++i) {
        double p = std::nearbyint(base[i] + delta[i]);
        if (p < 0.0) p = 0.0;
        if (p > 255.0) p = 255.0;
        out.data[i] = static_cast<std::uint8_t>(p);
    }
    result.image = std::move(out);
    result.delta = std::move(delta);
    return result;
}

}  // namespace latentmark
