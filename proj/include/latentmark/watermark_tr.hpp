#pragma once

#include <cstdint>
#include <utility>
#include <vector>

#include <nlohmann/json_fwd.hpp>

#include "latentmark/tensor.hpp"

namespace latentmark {

// Zero-bit frequency-domain watermark. A seeded ring pattern replaces the
// centered-FFT coefficients of one channel inside a disk of the given radius;
// detection measures the L1 distance between a latent's masked spectrum and
// the key's pattern. radius 0 is the documented degenerate key: empty mask,
// embedding returns the drawn noise bit-for-bit.
struct TrKey {
    int radius = 0;
    int channel = 0;
    std::uint64_t seed = 0;
};

nlohmann::json tr_key_to_json(const TrKey& key);
TrKey tr_key_from_json(const nlohmann::json& j);

// The key's mask cells ((y, x), row-major order) and per-cell target values.
// Ring r collects cells whose rounded distance from (h/2, w/2) equals r; its
// value is the ring-mean of the FFT of seeded Gaussian noise, rescaled by
// sqrt(ring size) back to single-coefficient magnitude. Values are real and
// the mask is centrally symmetric, so patched spectra stay conjugate
// symmetric. Throws ConfigError if the disk does not fit inside the plane or
// the channel is out of range.
struct TrPattern {
    std::vector<std::pair<int, int>> cells;
    std::vector<double> values;
};
TrPattern tr_pattern(const TrKey& key, const Shape& shape);

// Draw z ~ N(0, I) from sample_seed, then imprint the pattern into the key's
// channel in frequency space (other channels and unmasked bins untouched).
LatentTensor tr_embed(const TrKey& key, const Shape& shape, std::uint64_t sample_seed);

// L1 spectrum distance sum_mask |FFT(latent[channel]) - pattern|.
double tr_distance(const TrKey& key, const LatentTensor& latent);

// Add-one empirical p-value: (1 + #{null <= distance}) / (1 + n).
double tr_pvalue(double distance, const std::vector<double>& null_table);

struct TrDetectionReport {
    bool detected = false;
    double distance = 0.0;
    double p_value = 1.0;   // only meaningful when a null table was supplied
    double threshold = 0.0;
};

// Detection fires iff distance <= threshold (threshold from calibration).
TrDetectionReport tr_detect(const TrKey& key, const LatentTensor& latent, double threshold,
                            const std::vector<double>* null_table = nullptr);

}  // namespace latentmark
