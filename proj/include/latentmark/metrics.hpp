#pragma once

#include <vector>

#include "latentmark/tensor.hpp"

namespace latentmark {

// Peak signal-to-noise ratio in dB over all channels (peak 255).
// Identical images give +infinity.
double psnr_db(const ImageTensor& a, const ImageTensor& b);

// Mean SSIM over 8x8 tiles (partial edge tiles included) and channels,
// with the standard constants C1 = (0.01*255)^2, C2 = (0.03*255)^2.
double ssim(const ImageTensor& a, const ImageTensor& b);

// Empirical threshold from null statistics: with detect_below, the m-th
// smallest null value where m = floor(n * fpr), so that "stat <= threshold"
// has empirical false-positive mass m/n <= fpr; mirrored for detect-above.
// Throws ConfigError when floor(n * fpr) < 1 (fpr finer than the table).
double calibrate_threshold(std::vector<double> null_stats, double fpr, bool detect_below);

// Fraction of statistics on the detecting side of the threshold (inclusive).
double detection_rate(const std::vector<double>& stats, double threshold, bool detect_below);

}  // namespace latentmark
