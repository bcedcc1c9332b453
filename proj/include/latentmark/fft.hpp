#pragma once

#include <complex>
#include <vector>

namespace latentmark {

// Centered 2-D DFT helpers (DC bin at (h/2, w/2), matching the ring geometry
// in the frequency-domain watermark). Forward is unnormalized; inverse is
// scaled by 1/(h*w) so ifft(fft(x)) == x. Thread-safe.

// Real h*w row-major plane -> complex spectrum.
std::vector<std::complex<double>> fft2_centered(const std::vector<double>& plane, int h, int w);

// Complex spectrum -> complex plane (caller takes the real part as needed).
std::vector<std::complex<double>> ifft2_centered(const std::vector<std::complex<double>>& freq,
                                                 int h, int w);

}  // namespace latentmark
