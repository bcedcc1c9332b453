#pragma once

#include <cstdint>
#include <memory>
#include <vector>

#include <Eigen/Dense>

#include "latentmark/tensor.hpp"

namespace latentmark {

// Invertible-by-construction latent <-> image map standing in for a VAE:
// a seeded orthogonal matrix Q (QR of a seeded Gaussian matrix, sign-fixed,
// determinant +1) plus an affine pixel mapping and 8-bit quantization.
//
//   decode(z) = clamp(round(out_scale * Q z + out_bias))      -> uint8 pixels
//   encode(x) = Q^T ((x - out_bias) / out_scale)              -> latent
//
// The only information loss in a round trip is pixel quantization/clipping.
// `mismatch` in [0, 1] blends Q along a rotation-group geodesic from the
// seed's matrix (0) to an independently seeded one (1), modeling an attacker
// whose autoencoder differs from the defender's: 0 = identical, 1 = unrelated.
class LinearCodec {
  public:
    LinearCodec(Shape shape, std::uint64_t seed, double out_scale = 24.0,
                double out_bias = 128.0, int bit_depth = 8, double mismatch = 0.0);

    const Shape& shape() const { return shape_; }
    std::uint64_t seed() const { return seed_; }
    double out_scale() const { return out_scale_; }
    double out_bias() const { return out_bias_; }
    int bit_depth() const { return bit_depth_; }
    double mismatch() const { return mismatch_; }

    ImageTensor decode(const LatentTensor& z) const;
    LatentTensor encode(const ImageTensor& x) const;

    // Continuous variants used inside gradient-based optimization: no
    // rounding, no clamping. `decode_cont` returns real-valued pixels;
    // `encode_cont` accepts them. On integer pixel data, encode_cont agrees
    // with encode exactly.
    std::vector<double> decode_cont(const LatentTensor& z) const;
    LatentTensor encode_cont(const std::vector<double>& pixels) const;

    // Adjoint of encode_cont (without the bias term): maps a latent-space
    // cotangent to pixel space, v -> Q v / out_scale.
    std::vector<double> encode_cont_adjoint(const LatentTensor& v) const;

    // max |Q^T Q - I| over all entries; diagnostic used by tests.
    double max_orthogonality_error() const;

    const Eigen::MatrixXd& basis() const { return *q_; }

  private:
    Shape shape_;
    std::uint64_t seed_;
    double out_scale_;
    double out_bias_;
    int bit_depth_;
    double mismatch_;
    std::shared_ptr<Eigen::MatrixXd> q_;
};

}  // namespace latentmark
