#include "latentmark/fft.hpp"

#include <cstring>
#include <map>
#include <mutex>
#include <string>

#include <fftw3.h>

#include "latentmark/errors.hpp"

namespace latentmark {

namespace {

// FFTW plan creation is not thread-safe; creation is serialized and plans are
// cached per (h, w, sign). Execution uses the new-array interface on buffers
// from fftw_malloc (alignment-compatible with the ones the plan was built on).
std::mutex& plan_mutex() {
    static std::mutex m;
    return m;
}

fftw_plan cached_plan(int h, int w, int sign) {
    static std::map<std::tuple<int, int, int>, fftw_plan> cache;
    std::lock_guard<std::mutex> lock(plan_mutex());
    auto key = std::make_tuple(h, w, sign);
    auto it = cache.find(key);
    if (it != cache.end()) return it->second;
    fftw_complex* in = fftw_alloc_complex(static_cast<std::size_t>(h) * w);
    fftw_complex* out = fftw_alloc_complex(static_cast<std::size_t>(h) * w);
    fftw_plan plan = fftw_plan_dft_2d(h, w, in, out, sign, FFTW_ESTIMATE);
    fftw_free(in);
    fftw_free(out);
    if (!plan) throw NumericalError("fft: plan creation failed", 0);
    cache.emplace(key, plan);
    return plan;
}

struct FftwBuffer {
    fftw_complex* ptr;
    explicit FftwBuffer(std::size_t n) : ptr(fftw_alloc_complex(n)) {}
    ~FftwBuffer() { fftw_free(ptr); }
    FftwBuffer(const FftwBuffer&) = delete;
    FftwBuffer& operator=(const FftwBuffer&) = delete;
};

void check_dims(int h, int w, std::size_t n) {
    if (h <= 0 || w <= 0 || n != static_cast<std::size_t>(h) * static_cast<std::size_t>(w))
        throw ShapeError("fft: plane size " + std::to_string(n) + " != " + std::to_string(h) +
                         "x" + std::to_string(w));
}

}  // namespace

std::vector<std::complex<double>> fft2_centered(const std::vector<double>& plane, int h, int w) {
    check_dims(h, w, plane.size());
    const std::size_t n = plane.size();
    FftwBuffer in(n), out(n);
    for (std::size_t i = 0; i < n; ++i) {
        in.ptr[i][0] = plane[i];
        in.ptr[i][1] = 0.0;
    }
    fftw_execute_dft(cached_plan(h, w, FFTW_FORWARD), in.ptr, out.ptr);

    // fftshift: raw bin (0,0) lands at (h/2, w/2).
    std::vector<std::complex<double>> shifted(n);
    const int cy = h / 2, cx = w / 2;
    for (int u = 0; u < h; ++u) {
        const int ru = (u - cy + h) % h;
        for (int v = 0; v < w; ++v) {
            const int rv = (v - cx + w) % w;
            const auto& c = out.ptr[static_cast<std::size_t>(ru) * w + rv];
            shifted[static_cast<std::size_t>(u) * w + v] = {c[0], c[1]};
        }
    }
    return shifted;
}

std::vector<std::complex<double>> ifft2_centered(const std::vector<std::complex<double>>& freq,
                                                 int h, int w) {
    check_dims(h, w, freq.size());
    const std::size_t n = freq.size();
    FftwBuffer in(n), out(n);
    const int cy = h / 2, cx = w / 2;
    for (int u = 0; u < h; ++u) {
        const int ru = (u - cy + h) % h;
        for (int v = 0; v < w; ++v) {
            const int rv = (v - cx + w) % w;
            const auto& c = freq[static_cast<std::size_t>(u) * w + v];
            auto& dst = in.ptr[static_cast<std::size_t>(ru) * w + rv];
            dst[0] = c.real();
            dst[1] = c.imag();
        }
    }
    fftw_execute_dft(cached_plan(h, w, FFTW_BACKWARD), in.ptr, out.ptr);
    std::vector<std::complex<double>> res(n);
    const double norm = 1.0 / static_cast<double>(n);
    for (std::size_t i = 0; i < n; ++i) res[i] = {out.ptr[i][0] * norm, out.ptr[i][1] * norm};
    return res;
}

}  // namespace latentmark
