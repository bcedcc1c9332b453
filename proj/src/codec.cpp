#include "latentmark/codec.hpp"

#include <cmath>
#include <string>

#include <Eigen/Eigenvalues>
#include <Eigen/QR>

#include "latentmark/errors.hpp"
#include "latentmark/rng.hpp"

namespace latentmark {

namespace {

constexpr std::uint64_t kAltBasisStream = 0x616C74626173ULL;  // independent-basis substream
constexpr std::size_t kMaxDim = 1 << 14;

// Seeded random rotation: QR of a Gaussian matrix, columns sign-fixed so the
// factorization is unique, then determinant forced to +1 (rotation group, so
// geodesic blending below is well defined).
Eigen::MatrixXd seeded_rotation(std::uint64_t seed, int d) {
    Rng rng(seed);
    Eigen::MatrixXd g(d, d);
    for (int i = 0; i < d; ++i)
        for (int j = 0; j < d; ++j) g(i, j) = rng.normal();
    Eigen::HouseholderQR<Eigen::MatrixXd> qr(g);
    Eigen::MatrixXd q = qr.householderQ();
    Eigen::MatrixXd r = qr.matrixQR().triangularView<Eigen::Upper>();
    for (int j = 0; j < d; ++j)
        if (r(j, j) < 0.0) q.col(j) = -q.col(j);
    if (q.determinant() < 0.0) q.col(d - 1) = -q.col(d - 1);
    return q;
}

// Geodesic between rotations: Q(xi) = Q0 exp(sqrt(xi) log(Q0^T Q1)). The
// relative rotation's real Schur form is block-diagonal (it is normal), so the
// log/exp reduce to scaling the 2x2 block angles. The sqrt(xi) rate makes the
// midpoint decorrelate strongly while keeping both endpoints exact.
Eigen::MatrixXd blend_rotations(const Eigen::MatrixXd& q0, const Eigen::MatrixXd& q1,
                                double xi) {
    const int d = static_cast<int>(q0.rows());
    const double rate = std::sqrt(xi);
    const Eigen::MatrixXd rel = q0.transpose() * q1;
    Eigen::RealSchur<Eigen::MatrixXd> schur(rel);
    const Eigen::MatrixXd& t = schur.matrixT();
    const Eigen::MatrixXd& u = schur.matrixU();

    Eigen::MatrixXd s = Eigen::MatrixXd::Identity(d, d);
    std::vector<int> flipped;  // 1x1 blocks with eigenvalue -1 (pair up below)
    int i = 0;
    while (i < d) {
        if (i + 1 < d && std::abs(t(i + 1, i)) > 1e-12) {
            const double theta = std::atan2(t(i + 1, i), t(i, i));
            const double c = std::cos(rate * theta), sn = std::sin(rate * theta);
            s(i, i) = c;
            s(i, i + 1) = -sn;
            s(i + 1, i) = sn;
            s(i + 1, i + 1) = c;
            i += 2;
        } else {
            if (t(i, i) < 0.0) flipped.push_back(i);
            i += 1;
        }
    }
    // -1 eigenvalues of a rotation come in pairs; treat each pair as a
    // half-turn in its plane.
    if (flipped.size() % 2 != 0)
        throw NumericalError("codec: unpaired reflection in rotation blend", 0);
    for (std::size_t k = 0; k + 1 < flipped.size(); k += 2) {
        const int a = flipped[k], b = flipped[k + 1];
        const double theta = 3.14159265358979323846;
        const double c = std::cos(rate * theta), sn = std::sin(rate * theta);
        s(a, a) = c;
        s(a, b) = -sn;
        s(b, a) = sn;
        s(b, b) = c;
    }
    return q0 * (u * s * u.transpose());
}

}  // namespace

LinearCodec::LinearCodec(Shape shape, std::uint64_t seed, double out_scale, double out_bias,
                         int bit_depth, double mismatch)
    : shape_(shape),
      seed_(seed),
      out_scale_(out_scale),
      out_bias_(out_bias),
      bit_depth_(bit_depth),
      mismatch_(mismatch) {
    require_valid(shape_, "codec");
    if (shape_.volume() > kMaxDim)
        throw ConfigError("codec: dimension " + std::to_string(shape_.volume()) +
                          " exceeds supported maximum " + std::to_string(kMaxDim));
    if (!(out_scale_ > 0.0)) throw ConfigError("codec: out_scale must be positive");
    if (bit_depth_ != 8) throw ConfigError("codec: only bit_depth 8 is supported");
    if (!(mismatch_ >= 0.0 && mismatch_ <= 1.0))
        throw ConfigError("codec: mismatch must lie in [0, 1]");

    const int d = static_cast<int>(shape_.volume());
    Eigen::MatrixXd q = seeded_rotation(seed_, d);
    if (mismatch_ > 0.0) {
        const Eigen::MatrixXd q1 = seeded_rotation(derive_seed(seed_, kAltBasisStream), d);
        q = (mismatch_ == 1.0) ? q1 : blend_rotations(q, q1, mismatch_);
    }
    q_ = std::make_shared<Eigen::MatrixXd>(std::move(q));
}

ImageTensor LinearCodec::decode(const LatentTensor& z) const {
    const std::vector<double> pix = decode_cont(z);
    ImageTensor img(shape_);
    const double maxval = 255.0;
    for (std::size_t i = 0; i < pix.size(); ++i) {
        double v = std::nearbyint(pix[i]);
        if (v < 0.0) v = 0.0;
        if (v > maxval) v = maxval;
        img.data[i] = static_cast<std::uint8_t>(v);
    }
    return img;
}

std::vector<double> LinearCodec::decode_cont(const LatentTensor& z) const {
    require_same_shape(z.shape, shape_, "codec decode");
    const int d = static_cast<int>(shape_.volume());
    Eigen::Map<const Eigen::VectorXd> zv(z.data.data(), d);
    Eigen::VectorXd px = (*q_) * zv;
    std::vector<double> out(static_cast<std::size_t>(d));
    for (int i = 0; i < d; ++i) out[i] = out_scale_ * px(i) + out_bias_;
    return out;
}

LatentTensor LinearCodec::encode(const ImageTensor& x) const {
    require_same_shape(x.shape, shape_, "codec encode");
    std::vector<double> pix(x.data.begin(), x.data.end());
    return encode_cont(pix);
}

LatentTensor LinearCodec::encode_cont(const std::vector<double>& pixels) const {
    if (pixels.size() != shape_.volume())
        throw ShapeError("codec encode: pixel count " + std::to_string(pixels.size()) +
                         " != shape volume " + std::to_string(shape_.volume()));
    const int d = static_cast<int>(shape_.volume());
    Eigen::VectorXd v(d);
    for (int i = 0; i < d; ++i) v(i) = (pixels[i] - out_bias_) / out_scale_;
    Eigen::VectorXd zv = q_->transpose() * v;
    LatentTensor z(shape_);
    for (int i = 0; i < d; ++i) z.data[i] = zv(i);
    return z;
}

std::vector<double> LinearCodec::encode_cont_adjoint(const LatentTensor& v) const {
    require_same_shape(v.shape, shape_, "codec adjoint");
    const int d = static_cast<int>(shape_.volume());
    Eigen::Map<const Eigen::VectorXd> vv(v.data.data(), d);
    Eigen::VectorXd g = (*q_) * vv / out_scale_;
    return std::vector<double>(g.data(), g.data() + d);
}

double LinearCodec::max_orthogonality_error() const {
    const int d = static_cast<int>(shape_.volume());
    Eigen::MatrixXd err = q_->transpose() * (*q_) - Eigen::MatrixXd::Identity(d, d);
    return err.cwiseAbs().maxCoeff();
}

}  // namespace latentmark
