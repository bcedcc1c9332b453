#pragma once

#include <optional>
#include <string>
#include <vector>

#include "latentmark/model.hpp"
#include "latentmark/tensor.hpp"

namespace latentmark {

// Attack-side knobs. `lambda` is the cover-guidance strength in [0, 1] and
// `gamma` >= 0 shapes its ramp w_t = lambda * (1 - t/T)^gamma, which is zero
// at t = T and strongest near t = 0 (for gamma = 0 the ramp is constant
// lambda, including at t = T). Steps count the attacker's own ladder and are
// independent of whatever the image's creator used.
struct ForgeryConfig {
    int invert_steps = 50;
    int regen_steps = 50;
    double lambda = 0.0;
    double gamma = 1.0;
    std::optional<std::string> condition;
};

// Attacker's estimate of an image's initial latent: encode through the proxy
// codec, then run the fast inversion upward.
LatentTensor estimate_watermark_latent(const ImageTensor& image, const ModelBundle& proxy,
                                       int invert_steps = 50,
                                       const std::optional<std::string>& condition = {});

// Denoise z_T while pulling each intermediate clean-image estimate toward the
// cover's latent with weight w_t (plug-and-play guidance). lambda = 0 is
// bitwise identical to plain sampling.
ImageTensor pnp_regenerate(const LatentTensor& z_t, const ImageTensor& cover,
                           const ModelBundle& proxy, const ForgeryConfig& cfg);

struct ForgeOutput {
    ImageTensor image;
    LatentTensor estimated_latent;
};

// Full forgery round trip: estimate the watermarked image's initial latent,
// then regenerate it onto the cover.
ForgeOutput pnp_forge(const ImageTensor& watermarked, const ImageTensor& cover,
                      const ModelBundle& proxy, const ForgeryConfig& cfg);

// Re-generation attack without a cover: estimate the initial latent, then
// sample again under a different condition.
ImageTensor reprompt(const ImageTensor& watermarked, const ModelBundle& proxy,
                     const std::optional<std::string>& new_condition, int invert_steps = 50,
                     int regen_steps = 50);

// Direct optimization baseline: perturb the cover so that the proxy pipeline
// maps it near a target initial latent.
//   L(delta) = |invert(encode_cont(cover + delta)) - z_target|^2 + mu |delta|^2
// minimized by backtracking gradient descent (Armijo c = 1e-4, halving line
// search, 1.5x growth on acceptance); n_iters counts accepted steps. The
// perturbed image is quantized once, at the end.
struct ImprintConfig {
    int n_iters = 50;
    double mu = 1e-4;
    int invert_steps = 50;
    double initial_step = 256.0;
    std::optional<std::string> condition;
};

struct ImprintResult {
    ImageTensor image;
    std::vector<double> delta;       // final continuous perturbation, pre-quantization
    std::vector<double> loss_trace;  // initial loss, then one entry per accepted step
};

// One evaluation of the imprint objective at a given perturbation, with the
// analytic gradient from the adjoint sweep. The finite-difference tests and
// external optimizers use this; imprint_forge shares the same internals.
struct ImprintEval {
    double loss = 0.0;
    std::vector<double> grad;  // dL/d(delta), same length as the pixel count
};

ImprintEval imprint_loss_grad(const std::vector<double>& delta, const LatentTensor& z_target,
                              const ImageTensor& cover, const ModelBundle& proxy,
                              const ImprintConfig& cfg);

// Throws OptimizationError (with the trace so far) if the loss turns
// non-finite.
ImprintResult imprint_forge(const LatentTensor& z_target, const ImageTensor& cover,
                            const ModelBundle& proxy, const ImprintConfig& cfg);

}  // namespace latentmark
