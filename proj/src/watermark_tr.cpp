#include "latentmark/watermark_tr.hpp"

#include <algorithm>
#include <cmath>
#include <complex>
#include <string>

#include <nlohmann/json.hpp>

#include "latentmark/errors.hpp"
#include "latentmark/fft.hpp"
#include "latentmark/rng.hpp"

namespace latentmark {

namespace {

void validate_key_shape(const TrKey& key, const Shape& shape) {
    require_valid(shape, "tr key");
    if (key.radius < 0) throw ConfigError("tr key: radius must be >= 0");
    if (key.channel < 0 || key.channel >= shape.c)
        throw ConfigError("tr key: channel " + std::to_string(key.channel) +
                          " outside [0, " + std::to_string(shape.c) + ")");
    const int cy = shape.h / 2, cx = shape.w / 2;
    const int fit = std::min(std::min(cy, cx), std::min(shape.h - 1 - cy, shape.w - 1 - cx));
    if (key.radius > fit)
        throw ConfigError("tr key: radius " + std::to_string(key.radius) +
                          " does not fit a " + std::to_string(shape.h) + "x" +
                          std::to_string(shape.w) + " plane (max " + std::to_string(fit) + ")");
}

int ring_of(int y, int x, int cy, int cx) {
    return static_cast<int>(
        std::llround(std::hypot(static_cast<double>(y - cy), static_cast<double>(x - cx))));
}

std::vector<double> channel_plane(const LatentTensor& z, int channel) {
    const std::size_t plane = static_cast<std::size_t>(z.shape.h) * z.shape.w;
    const std::size_t off = static_cast<std::size_t>(channel) * plane;
    return std::vector<double>(z.data.begin() + off, z.data.begin() + off + plane);
}

}  // namespace

nlohmann::json tr_key_to_json(const TrKey& key) {
    nlohmann::json j;
    j["radius"] = key.radius;
    j["channel"] = key.channel;
    j["seed"] = key.seed;
    return j;
}

TrKey tr_key_from_json(const nlohmann::json& j) {
    TrKey key;
    try {
        key.radius = j.at("radius").get<int>();
        key.channel = j.value("channel", 0);
        key.seed = j.at("seed").get<std::uint64_t>();
    } catch (const nlohmann::json::exception& e) {
        throw ConfigError(std::string("tr key: malformed json: ") + e.what());
    }
    if (key.radius < 0) throw ConfigError("tr key: radius must be >= 0");
    if (key.channel < 0) throw ConfigError("tr key: channel must be >= 0");
    return key;
}

TrPattern tr_pattern(const TrKey& key, const Shape& shape) {
    validate_key_shape(key, shape);
    TrPattern pat;
    if (key.radius == 0) return pat;  // degenerate key: empty mask

    const int h = shape.h, w = shape.w;
    const int cy = h / 2, cx = w / 2;

    Rng rng(key.seed);
    std::vector<double> noise(static_cast<std::size_t>(h) * w);
    for (double& v : noise) v = rng.normal();
    const auto spectrum = fft2_centered(noise, h, w);

    // Ring means of a conjugate-symmetric spectrum are real; the sqrt(size)
    // factor restores single-coefficient magnitude lost by averaging.
    std::vector<double> ring_sum(static_cast<std::size_t>(key.radius) + 1, 0.0);
    std::vector<int> ring_count(static_cast<std::size_t>(key.radius) + 1, 0);
    for (int y = 0; y < h; ++y)
        for (int x = 0; x < w; ++x) {
            const int r = ring_of(y, x, cy, cx);
            if (r <= key.radius) {
                ring_sum[r] += spectrum[static_cast<std::size_t>(y) * w + x].real();
                ring_count[r] += 1;
            }
        }
    std::vector<double> ring_value(ring_sum.size());
    for (std::size_t r = 0; r < ring_sum.size(); ++r) {
        if (ring_count[r] == 0)
            throw NumericalError("tr key: empty ring", static_cast<int>(r));
        ring_value[r] = ring_sum[r] / ring_count[r] * std::sqrt(static_cast<double>(ring_count[r]));
    }

    for (int y = 0; y < h; ++y)
        for (int x = 0; x < w; ++x) {
            const int r = ring_of(y, x, cy, cx);
            if (r <= key.radius) {
                pat.cells.emplace_back(y, x);
                pat.values.push_back(ring_value[r]);
            }
        }
    return pat;
}

LatentTensor tr_embed(const TrKey& key, const Shape& shape, std::uint64_t sample_seed) {
    const TrPattern pat = tr_pattern(key, shape);
    Rng rng(sample_seed);
    LatentTensor z = rng.normal_latent(shape);
    if (pat.cells.empty()) return z;  // radius 0: bitwise the drawn noise

    const int h = shape.h, w = shape.w;
    auto plane = channel_plane(z, key.channel);
    auto spectrum = fft2_centered(plane, h, w);
    for (std::size_t i = 0; i < pat.cells.size(); ++i) {
        const auto [y, x] = pat.cells[i];
        spectrum[static_cast<std::size_t>(y) * w + x] = {pat.values[i], 0.0};
    }
    const auto back = ifft2_centered(spectrum, h, w);

    const std::size_t off = static_cast<std::size_t>(key.channel) * h * w;
    for (std::size_t i = 0; i < back.size(); ++i) z.data[off + i] = back[i].real();
    return z;
}

double tr_distance(const TrKey& key, const LatentTensor& latent) {
    const TrPattern pat = tr_pattern(key, latent.shape);
    if (pat.cells.empty()) return 0.0;

    const int h = latent.shape.h, w = latent.shape.w;
    const auto spectrum = fft2_centered(channel_plane(latent, key.channel), h, w);
    double dist = 0.0;
    for (std::size_t i = 0; i < pat.cells.size(); ++i) {
        const auto [y, x] = pat.cells[i];
        dist += std::abs(spectrum[static_cast<std::size_t>(y) * w + x] -
                         std::complex<double>(pat.values[i], 0.0));
    }
    return dist;
}

double tr_pvalue(double distance, const std::vector<double>& null_table) {
    if (null_table.empty()) throw ConfigError("tr_pvalue: empty null table");
    std::size_t le = 0;
    for (double v : null_table)
        if (v <= distance) ++le;
    return static_cast<double>(1 + le) / static_cast<double>(1 + null_table.size());
}

TrDetectionReport tr_detect(const TrKey& key, const LatentTensor& latent, double threshold,
                            const std::vector<double>* null_table) {
    TrDetectionReport rep;
    rep.distance = tr_distance(key, latent);
    rep.threshold = threshold;
    rep.detected = rep.distance <= threshold;
    if (null_table) rep.p_value = tr_pvalue(rep.distance, *null_table);
    return rep;
}

}  // namespace latentmark
