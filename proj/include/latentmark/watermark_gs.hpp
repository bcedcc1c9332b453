#pragma once

#include <array>
#include <cstdint>
#include <string>
#include <vector>

#include <nlohmann/json_fwd.hpp>

#include "latentmark/tensor.hpp"

namespace latentmark {

// Distribution-preserving multi-bit watermark. A keyed ChaCha20 stream cipher
// XORs the rho-fold repeated message into a bit plane; each latent coordinate
// is then drawn from the half of the standard normal selected by its cipher
// bit (inverse-CDF of u/2 or (1+u)/2). Marginally the latent stays exactly
// N(0, I); with the key, signs decrypt back to message bits.
struct GsKey {
    std::array<std::uint8_t, 32> cipher_key{};
    std::array<std::uint8_t, 12> nonce{};
    std::vector<std::uint8_t> message;  // k bits, one per entry (0/1)
    int k = 0;
    int rho = 1;
    int user_id = 0;
};

// Deterministic key generation from a seed.
GsKey gs_make_key(std::uint64_t seed, int k, int rho, int user_id = 0);

nlohmann::json gs_key_to_json(const GsKey& key);
GsKey gs_key_from_json(const nlohmann::json& j);

// Draw a watermarked initial latent; shape volume must equal k * rho.
LatentTensor gs_embed(const GsKey& key, const Shape& shape, std::uint64_t sample_seed);

struct GsRecovery {
    std::vector<std::uint8_t> bits;  // k decoded message bits
    double bit_accuracy = 0.0;       // fraction matching key.message
};

// Decrypt sign bits and majority-vote each rho-group (ties decode to 0).
GsRecovery gs_recover(const GsKey& key, const LatentTensor& latent);

// Largest fraction m/k such that declaring detection on bit accuracy
// strictly above it keeps the false-positive rate P(Bin(k, 1/2)/k > m/k) at
// or below `fpr`. Exact integer arithmetic; throws InfeasibleError when even
// requiring all k bits correct cannot reach `fpr` (i.e. 2^-k > fpr).
double gs_threshold(int k, double fpr);

struct GsDetectionReport {
    bool detected = false;
    double bit_accuracy = 0.0;
    double threshold = 0.0;
    int k = 0;
    int user_id = 0;
};

// Detection fires iff bit_accuracy strictly exceeds gs_threshold(k, fpr).
GsDetectionReport gs_detect(const GsKey& key, const LatentTensor& latent, double fpr);

struct GsAttributionResult {
    int matched_user = -1;        // user_id of the best key above threshold
    double best_accuracy = 0.0;   // highest accuracy over all keys
    double per_user_fpr = 0.0;    // fpr_total / n_users (Bonferroni)
    double threshold = 0.0;       // threshold applied to the best key
};

// Multi-user attribution: Bonferroni-corrected per-user threshold; returns
// the best-scoring user strictly above it, or matched_user = -1.
GsAttributionResult gs_attribute(const std::vector<GsKey>& keys, const LatentTensor& latent,
                                 double fpr_total);

}  // namespace latentmark
