#include "latentmark/metrics.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <string>

#include "latentmark/errors.hpp"

namespace latentmark {

double psnr_db(const ImageTensor& a, const ImageTensor& b) {
    require_same_shape(a.shape, b.shape, "psnr");
    double se = 0.0;
    for (std::size_t i = 0; i < a.data.size(); ++i) {
        const double d = static_cast<double>(a.data[i]) - static_cast<double>(b.data[i]);
        se += d * d;
    }
    if (se == 0.0) return std::numeric_limits<double>::infinity();
    const double mse = se / static_cast<double>(a.data.size());
    return 10.0 * std::log10(255.0 * 255.0 / mse);
}

double ssim(const ImageTensor& a, const ImageTensor& b) {
    require_same_shape(a.shape, b.shape, "ssim");
    constexpr double c1 = (0.01 * 255.0) * (0.01 * 255.0);
    constexpr double c2 = (0.03 * 255.0) * (0.03 * 255.0);
    constexpr int win = 8;

    double total = 0.0;
    int tiles = 0;
    for (int ch = 0; ch < a.shape.c; ++ch)
        for (int y0 = 0; y0 < a.shape.h; y0 += win)
            for (int x0 = 0; x0 < a.shape.w; x0 += win) {
                const int y1 = std::min(y0 + win, a.shape.h);
                const int x1 = std::min(x0 + win, a.shape.w);
                const double n = static_cast<double>((y1 - y0) * (x1 - x0));
                double sa = 0, sb = 0, saa = 0, sbb = 0, sab = 0;
                for (int y = y0; y < y1; ++y)
                    for (int x = x0; x < x1; ++x) {
                        const double va = a.at(ch, y, x);
                        const double vb = b.at(ch, y, x);
                        sa += va;
                        sb += vb;
                        saa += va * va;
                        sbb += vb * vb;
                        sab += va * vb;
                    }
                const double ma = sa / n, mb = sb / n;
                const double va = saa / n - ma * ma;
                const double vb = sbb / n - mb * mb;
                const double cov = sab / n - ma * mb;
                total += ((2 * ma * mb + c1) * (2 * cov + c2)) /
                         ((ma * ma + mb * mb + c1) * (va + vb + c2));
                ++tiles;
            }
    return total / static_cast<double>(tiles);
}

double calibrate_threshold(std::vector<double> null_stats, double fpr, bool detect_below) {
    const std::size_t n = null_stats.size();
    if (n == 0) throw ConfigError("calibrate: empty null table");
    if (!(fpr > 0.0 && fpr < 1.0)) throw ConfigError("calibrate: fpr must lie in (0, 1)");
    const std::size_t m = static_cast<std::size_t>(static_cast<double>(n) * fpr);
    if (m < 1)
        throw ConfigError("calibrate: fpr " + std::to_string(fpr) + " finer than 1/" +
                          std::to_string(n) + " null samples");
    std::sort(null_stats.begin(), null_stats.end());
    return detect_below ? null_stats[m - 1] : null_stats[n - m];
}

double detection_rate(const std::vector<double>& stats, double threshold, bool detect_below) {
    if (stats.empty()) throw ConfigError("detection_rate: empty statistics");
    std::size_t hits = 0;
    for (double s : stats)
        if (detect_below ? (s <= threshold) : (s >= threshold)) ++hits;
    return static_cast<double>(hits) / static_cast<double>(stats.size());
}

}  // namespace latentmark
