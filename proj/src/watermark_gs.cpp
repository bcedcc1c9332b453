#include "latentmark/watermark_gs.hpp"

#include <cmath>
#include <limits>
#include <map>
#include <mutex>

#include <boost/math/distributions/normal.hpp>
#include <boost/multiprecision/cpp_int.hpp>
#include <nlohmann/json.hpp>
#include <sodium.h>

#include "latentmark/errors.hpp"
#include "latentmark/rng.hpp"

namespace latentmark {

namespace {

using boost::multiprecision::cpp_int;

void ensure_sodium() {
    static std::once_flag once;
    std::call_once(once, [] {
        if (sodium_init() < 0) throw Error("libsodium initialization failed");
    });
}

void validate_key(const GsKey& key) {
    if (key.k < 1) throw ConfigError("gs key: k must be >= 1");
    if (key.rho < 1) throw ConfigError("gs key: rho must be >= 1");
    if (key.user_id < 0) throw ConfigError("gs key: user_id must be >= 0");
    if (key.message.size() != static_cast<std::size_t>(key.k))
        throw ConfigError("gs key: message holds " + std::to_string(key.message.size()) +
                          " bits, expected k = " + std::to_string(key.k));
    for (std::uint8_t b : key.message)
        if (b > 1) throw ConfigError("gs key: message entries must be 0 or 1");
}

// ChaCha20 keystream expanded to one bit per latent coordinate, LSB-first.
std::vector<std::uint8_t> keystream_bits(const GsKey& key, std::size_t nbits) {
    ensure_sodium();
    std::vector<std::uint8_t> buf((nbits + 7) / 8, 0);
    if (!buf.empty())
        crypto_stream_chacha20_ietf(buf.data(), buf.size(), key.nonce.data(),
                                    key.cipher_key.data());
    std::vector<std::uint8_t> bits(nbits);
    for (std::size_t j = 0; j < nbits; ++j) bits[j] = (buf[j >> 3] >> (j & 7)) & 1u;
    return bits;
}

std::string to_hex(const std::uint8_t* data, std::size_t n) {
    static const char* digits = "0123456789abcdef";
    std::string s(n * 2, '0');
    for (std::size_t i = 0; i < n; ++i) {
        s[2 * i] = digits[data[i] >> 4];
        s[2 * i + 1] = digits[data[i] & 0xF];
    }
    return s;
}

std::vector<std::uint8_t> from_hex(const std::string& s, const char* what) {
    if (s.size() % 2 != 0) throw ConfigError(std::string(what) + ": odd-length hex string");
    auto nib = [&](char c) -> int {
        if (c >= '0' && c <= '9') return c - '0';
        if (c >= 'a' && c <= 'f') return c - 'a' + 10;
        if (c >= 'A' && c <= 'F') return c - 'A' + 10;
        throw ConfigError(std::string(what) + ": invalid hex character");
    };
    std::vector<std::uint8_t> out(s.size() / 2);
    for (std::size_t i = 0; i < out.size(); ++i)
        out[i] = static_cast<std::uint8_t>(nib(s[2 * i]) << 4 | nib(s[2 * i + 1]));
    return out;
}

}  // namespace

GsKey gs_make_key(std::uint64_t seed, int k, int rho, int user_id) {
    if (k < 1) throw ConfigError("gs key: k must be >= 1");
    if (rho < 1) throw ConfigError("gs key: rho must be >= 1");
    if (user_id < 0) throw ConfigError("gs key: user_id must be >= 0");
    Rng rng(seed);
    GsKey key;
    key.k = k;
    key.rho = rho;
    key.user_id = user_id;
    for (int i = 0; i < 4; ++i) {
        std::uint64_t word = rng.next_u64();
        for (int b = 0; b < 8; ++b)
            key.cipher_key[static_cast<std::size_t>(i) * 8 + b] =
                static_cast<std::uint8_t>(word >> (8 * b));
    }
    std::uint64_t n0 = rng.next_u64(), n1 = rng.next_u64();
    for (int b = 0; b < 8; ++b) key.nonce[b] = static_cast<std::uint8_t>(n0 >> (8 * b));
    for (int b = 0; b < 4; ++b) key.nonce[8 + b] = static_cast<std::uint8_t>(n1 >> (8 * b));
    key.message.resize(static_cast<std::size_t>(k));
    std::uint64_t word = 0;
    for (int j = 0; j < k; ++j) {
        if (j % 64 == 0) word = rng.next_u64();
        key.message[j] = static_cast<std::uint8_t>((word >> (j % 64)) & 1u);
    }
    return key;
}

nlohmann::json gs_key_to_json(const GsKey& key) {
    validate_key(key);
    std::vector<std::uint8_t> packed((key.message.size() + 7) / 8, 0);
    for (std::size_t j = 0; j < key.message.size(); ++j)
        packed[j >> 3] = static_cast<std::uint8_t>(packed[j >> 3] | (key.message[j] << (j & 7)));
    nlohmann::json j;
    j["cipher_key_hex"] = to_hex(key.cipher_key.data(), key.cipher_key.size());
    j["nonce_hex"] = to_hex(key.nonce.data(), key.nonce.size());
    j["message_hex"] = to_hex(packed.data(), packed.size());
    j["k"] = key.k;
    j["rho"] = key.rho;
    j["user_id"] = key.user_id;
    return j;
}

GsKey gs_key_from_json(const nlohmann::json& j) {
    GsKey key;
    try {
        auto ck = from_hex(j.at("cipher_key_hex").get<std::string>(), "gs key cipher_key");
        auto nn = from_hex(j.at("nonce_hex").get<std::string>(), "gs key nonce");
        auto msg = from_hex(j.at("message_hex").get<std::string>(), "gs key message");
        key.k = j.at("k").get<int>();
        key.rho = j.at("rho").get<int>();
        key.user_id = j.value("user_id", 0);
        if (ck.size() != key.cipher_key.size())
            throw ConfigError("gs key: cipher_key must be 32 bytes");
        if (nn.size() != key.nonce.size()) throw ConfigError("gs key: nonce must be 12 bytes");
        std::copy(ck.begin(), ck.end(), key.cipher_key.begin());
        std::copy(nn.begin(), nn.end(), key.nonce.begin());
        if (key.k < 1 || msg.size() * 8 < static_cast<std::size_t>(key.k))
            throw ConfigError("gs key: message_hex shorter than k bits");
        key.message.resize(static_cast<std::size_t>(key.k));
        for (int b = 0; b < key.k; ++b) key.message[b] = (msg[b >> 3] >> (b & 7)) & 1u;
    } catch (const nlohmann::json::exception& e) {
        throw ConfigError(std::string("gs key: malformed json: ") + e.what());
    }
    validate_key(key);
    return key;
}

LatentTensor gs_embed(const GsKey& key, const Shape& shape, std::uint64_t sample_seed) {
    validate_key(key);
    require_valid(shape, "gs_embed");
    const std::size_t d = shape.volume();
    if (d != static_cast<std::size_t>(key.k) * static_cast<std::size_t>(key.rho))
        throw ConfigError("gs_embed: shape volume " + std::to_string(d) + " != k*rho = " +
                          std::to_string(static_cast<long long>(key.k) * key.rho));

    const auto ks = keystream_bits(key, d);
    Rng rng(sample_seed);
    const boost::math::normal_distribution<double> stdnorm;
    LatentTensor z(shape);
    for (std::size_t j = 0; j < d; ++j) {
        const unsigned cipher_bit = key.message[j / static_cast<std::size_t>(key.rho)] ^ ks[j];
        // u in (0, 1/2) selects the negative half, (1/2, 1) the positive one;
        // the open-interval uniform keeps the quantile finite.
        const double u = (static_cast<double>(cipher_bit) + rng.uniform_open()) * 0.5;
        z.data[j] = boost::math::quantile(stdnorm, u);
    }
    return z;
}

GsRecovery gs_recover(const GsKey& key, const LatentTensor& latent) {
    validate_key(key);
    const std::size_t d = latent.size();
    if (d != static_cast<std::size_t>(key.k) * static_cast<std::size_t>(key.rho))
        throw ShapeError("gs_recover: latent volume " + std::to_string(d) + " != k*rho");

    const auto ks = keystream_bits(key, d);
    GsRecovery rec;
    rec.bits.resize(static_cast<std::size_t>(key.k));
    int correct = 0;
    for (int g = 0; g < key.k; ++g) {
        int ones = 0;
        const std::size_t base = static_cast<std::size_t>(g) * key.rho;
        for (int r = 0; r < key.rho; ++r) {
            const std::size_t j = base + r;
            const unsigned sign_bit = latent.data[j] > 0.0 ? 1u : 0u;
            ones += static_cast<int>(sign_bit ^ ks[j]);
        }
        // Majority vote; an even split decodes to 0.
        const std::uint8_t bit = (2 * ones > key.rho) ? 1 : 0;
        rec.bits[g] = bit;
        correct += (bit == key.message[g]) ? 1 : 0;
    }
    rec.bit_accuracy = static_cast<double>(correct) / static_cast<double>(key.k);
    return rec;
}

double gs_threshold(int k, double fpr) {
    if (k < 1) throw ConfigError("gs_threshold: k must be >= 1");
    if (!(fpr > 0.0 && fpr < 1.0) || !std::isfinite(fpr))
        throw ConfigError("gs_threshold: fpr must lie in (0, 1)");

    // Exact dyadic representation of fpr: fpr = mant * 2^(exp2 - 53).
    int exp2 = 0;
    const double frac = std::frexp(fpr, &exp2);
    const cpp_int mant = static_cast<long long>(std::ldexp(frac, 53));

    // tail(m) = sum_{i > m} C(k, i); compare tail(m) / 2^k <= fpr exactly.
    auto tail_ok = [&](const cpp_int& tail) {
        const long long shift = static_cast<long long>(k) + exp2 - 53;
        if (shift >= 0) return tail <= (mant << static_cast<unsigned>(shift));
        return (tail << static_cast<unsigned>(-shift)) <= mant;
    };

    int best = k;  // tail(k) = 0 always passes, but leaves no detectable event
    cpp_int tail = 0;
    cpp_int binom = 1;  // C(k, i) starting at i = k
    for (int m = k - 1; m >= 0; --m) {
        const int i = m + 1;  // tail gains C(k, i)
        tail += binom;
        if (!tail_ok(tail)) break;
        best = m;
        binom = binom * i / (k - i + 1);  // C(k, i-1)
    }
    if (best == k)
        throw InfeasibleError("gs_threshold: fpr " + std::to_string(fpr) +
                              " unreachable with k = " + std::to_string(k) +
                              " (needs 2^-k <= fpr)");
    return static_cast<double>(best) / static_cast<double>(k);
}

GsDetectionReport gs_detect(const GsKey& key, const LatentTensor& latent, double fpr) {
    GsDetectionReport rep;
    rep.threshold = gs_threshold(key.k, fpr);
    const GsRecovery rec = gs_recover(key, latent);
    rep.bit_accuracy = rec.bit_accuracy;
    rep.detected = rec.bit_accuracy > rep.threshold;
    rep.k = key.k;
    rep.user_id = key.user_id;
    return rep;
}

GsAttributionResult gs_attribute(const std::vector<GsKey>& keys, const LatentTensor& latent,
                                 double fpr_total) {
    if (keys.empty()) throw ConfigError("gs_attribute: empty key list");
    if (!(fpr_total > 0.0 && fpr_total < 1.0))
        throw ConfigError("gs_attribute: fpr must lie in (0, 1)");

    GsAttributionResult res;
    res.per_user_fpr = fpr_total / static_cast<double>(keys.size());
    std::map<int, double> tau_by_k;  // keys may differ in k
    double best_acc = -1.0;
    int best_idx = -1;
    double best_excess = -std::numeric_limits<double>::infinity();
    int best_above_idx = -1;
    for (std::size_t i = 0; i < keys.size(); ++i) {
        const int k = keys[i].k;
        auto it = tau_by_k.find(k);
        if (it == tau_by_k.end()) it = tau_by_k.emplace(k, gs_threshold(k, res.per_user_fpr)).first;
        const GsRecovery rec = gs_recover(keys[i], latent);
        if (rec.bit_accuracy > best_acc) {
            best_acc = rec.bit_accuracy;
            best_idx = static_cast<int>(i);
        }
        const double excess = rec.bit_accuracy - it->second;
        if (excess > 0.0 && excess > best_excess) {
            best_excess = excess;
            best_above_idx = static_cast<int>(i);
        }
    }
    res.best_accuracy = best_acc;
    if (best_above_idx >= 0) {
        res.matched_user = keys[static_cast<std::size_t>(best_above_idx)].user_id;
        res.threshold = tau_by_k.at(keys[static_cast<std::size_t>(best_above_idx)].k);
    } else {
        res.threshold = tau_by_k.at(keys[static_cast<std::size_t>(best_idx)].k);
    }
    return res;
}

}  // namespace latentmark
