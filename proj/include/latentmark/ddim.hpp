#pragma once

#include <optional>
#include <string>
#include <vector>

#include "latentmark/mixture.hpp"
#include "latentmark/schedule.hpp"
#include "latentmark/tensor.hpp"

namespace latentmark {

// Deterministic sampler settings. `guidance_scale` is carried for interface
// parity with pipelines whose conditional and unconditional predictors differ;
// here conditioning restricts the mixture itself, so both predictors coincide
// and the value is inert (see README). `eta` only supports the deterministic
// sampler and must stay 0.
struct SamplerConfig {
    int n_steps = 50;
    double guidance_scale = 7.5;
    double eta = 0.0;
    std::optional<std::string> condition;
};

// The n+1 schedule indices visited by an n-step trajectory: floor(j * T / n)
// for j = 0..n, ascending, endpoints exactly 0 and T. Throws ConfigError if
// the indices are not strictly increasing (requires n <= T).
std::vector<int> ddim_step_indices(int t_train, int n_steps);

// Deterministic denoising z_T -> z_0.
LatentTensor ddim_sample(const MixtureScoreModel& model, const NoiseSchedule& sched,
                         const LatentTensor& z_t_train, const SamplerConfig& cfg);

// Fast approximate encoding z_0 -> z_T: runs the update ladder upward reusing
// the noise prediction at the lower step.
LatentTensor ddim_invert_naive(const MixtureScoreModel& model, const NoiseSchedule& sched,
                               const LatentTensor& z0, const SamplerConfig& cfg);

// Exact encoding z_0 -> z_T: per step, solves the implicit equation so that a
// subsequent sampling step reproduces the input exactly (fixed-point
// iteration, seeded from the naive step). Throws ConvergenceError if a step
// fails to reach `tol` in the max-norm within `max_iter` sweeps.
LatentTensor ddim_invert_exact(const MixtureScoreModel& model, const NoiseSchedule& sched,
                               const LatentTensor& z0, const SamplerConfig& cfg,
                               double tol = 1e-12, int max_iter = 100);

}  // namespace latentmark
