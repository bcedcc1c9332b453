#include <algorithm>
#include <cmath>
#include <vector>

#include <doctest.h>

#include "latentmark/ddim.hpp"
#include "latentmark/errors.hpp"
#include "latentmark/mixture.hpp"
#include "latentmark/rng.hpp"
#include "latentmark/schedule.hpp"

using namespace latentmark;

namespace {

const Shape kS4{1, 2, 2};

// For a single isotropic Gaussian component, every ladder update is affine in
// the state, so the whole trajectory is z_out = a * z_in + b * mu with scalar
// (a, b) computable by direct recursion on the update formulas.
struct Affine {
    double a = 1.0, b = 0.0;
};

Affine sample_affine(const NoiseSchedule& sched, const std::vector<int>& idx, double v) {
    Affine f;
    for (std::size_t j = idx.size() - 1; j > 0; --j) {
        int t = idx[j], s = idx[j - 1];
        double ab_t = sched.alpha_bar(t), ab_s = sched.alpha_bar(s);
        double st = ab_t * v + (1.0 - ab_t);
        // eps = c_e * z + d_e * mu
        double c_e = std::sqrt(1.0 - ab_t) / st;
        double d_e = -std::sqrt(1.0 - ab_t) * std::sqrt(ab_t) / st;
        // z0hat = (z - sqrt(1-ab_t) eps) / sqrt(ab_t)
        double c_z0 = (1.0 - std::sqrt(1.0 - ab_t) * c_e) / std::sqrt(ab_t);
        double d_z0 = -std::sqrt(1.0 - ab_t) * d_e / std::sqrt(ab_t);
        // z_s = sqrt(ab_s) z0hat + sqrt(1-ab_s) eps
        double c = std::sqrt(ab_s) * c_z0 + std::sqrt(1.0 - ab_s) * c_e;
        double d = std::sqrt(ab_s) * d_z0 + std::sqrt(1.0 - ab_s) * d_e;
        f = {c * f.a, c * f.b + d};
    }
    return f;
}

Affine invert_affine(const NoiseSchedule& sched, const std::vector<int>& idx, double v) {
    Affine f;
    for (std::size_t j = 0; j + 1 < idx.size(); ++j) {
        int s = idx[j], t = idx[j + 1];
        double ab_s = sched.alpha_bar(s), ab_t = sched.alpha_bar(t);
        double c_e, d_e;
        if (s == 0) {
            c_e = d_e = 0.0;
        } else {
            double ss = ab_s * v + (1.0 - ab_s);
            c_e = std::sqrt(1.0 - ab_s) / ss;
            d_e = -std::sqrt(1.0 - ab_s) * std::sqrt(ab_s) / ss;
        }
        double c_z0 = (1.0 - std::sqrt(1.0 - ab_s) * c_e) / std::sqrt(ab_s);
        double d_z0 = -std::sqrt(1.0 - ab_s) * d_e / std::sqrt(ab_s);
        double c = std::sqrt(ab_t) * c_z0 + std::sqrt(1.0 - ab_t) * c_e;
        double d = std::sqrt(ab_t) * d_z0 + std::sqrt(1.0 - ab_t) * d_e;
        f = {c * f.a, c * f.b + d};
    }
    return f;
}

MixtureScoreModel tiny_two_comp() {
    return MixtureScoreModel({1, 2, 2}, {0.3, 0.7},
                             {{2.0, 2.0, 2.0, 2.0}, {-2.0, -2.0, -2.0, -2.0}}, {0.2, 0.2}, {});
}

}  // namespace

TEST_CASE("ddim: step index grids are exact") {
    CHECK(ddim_step_indices(1000, 1) == std::vector<int>{0, 1000});
    CHECK(ddim_step_indices(10, 10) == std::vector<int>{0, 1, 2, 3, 4, 5, 6, 7, 8, 9, 10});
    auto idx = ddim_step_indices(1000, 50);
    REQUIRE(idx.size() == 51);
    CHECK(idx.front() == 0);
    CHECK(idx.back() == 1000);
    for (std::size_t j = 0; j < idx.size(); ++j)
        CHECK(idx[j] == static_cast<int>(j * 1000 / 50));
    auto odd = ddim_step_indices(1000, 7);
    CHECK(odd == std::vector<int>{0, 142, 285, 428, 571, 714, 857, 1000});
    CHECK_THROWS_AS(ddim_step_indices(1000, 1001), ConfigError);
    CHECK_THROWS_AS(ddim_step_indices(1000, 0), ConfigError);
}

TEST_CASE("ddim: sampling matches the affine oracle for a single component") {
    NoiseSchedule sched = make_linear_schedule();
    std::vector<double> mu = {0.7, -0.3, 1.1, 0.2};
    const double v = 0.7;
    MixtureScoreModel m(kS4, {1.0}, {mu}, {v}, {});
    Rng rng(5);
    for (int n : {1, 13, 50, 250}) {
        auto idx = ddim_step_indices(1000, n);
        Affine f = sample_affine(sched, idx, v);
        LatentTensor zT = rng.normal_latent(kS4);
        SamplerConfig cfg;
        cfg.n_steps = n;
        LatentTensor z0 = ddim_sample(m, sched, zT, cfg);
        for (std::size_t j = 0; j < z0.size(); ++j) {
            double want = f.a * zT.data[j] + f.b * mu[j];
            CHECK(z0.data[j] == doctest::Approx(want).epsilon(1e-12));
        }
    }
}

TEST_CASE("ddim: naive inversion matches the affine oracle for a single component") {
    NoiseSchedule sched = make_linear_schedule();
    std::vector<double> mu = {0.7, -0.3, 1.1, 0.2};
    const double v = 0.7;
    MixtureScoreModel m(kS4, {1.0}, {mu}, {v}, {});
    Rng rng(6);
    for (int n : {1, 13, 50}) {
        auto idx = ddim_step_indices(1000, n);
        Affine f = invert_affine(sched, idx, v);
        LatentTensor z0 = rng.normal_latent(kS4);
        SamplerConfig cfg;
        cfg.n_steps = n;
        LatentTensor zT = ddim_invert_naive(m, sched, z0, cfg);
        for (std::size_t j = 0; j < zT.size(); ++j) {
            double want = f.a * z0.data[j] + f.b * mu[j];
            CHECK(zT.data[j] == doctest::Approx(want).epsilon(1e-12));
        }
    }
}

TEST_CASE("ddim: guidance_scale is inert and eta must stay zero") {
    NoiseSchedule sched = make_linear_schedule();
    MixtureScoreModel m = tiny_two_comp();
    LatentTensor zT = Rng(11).normal_latent(kS4);
    SamplerConfig a, b;
    a.n_steps = b.n_steps = 20;
    a.guidance_scale = 0.0;
    b.guidance_scale = 7.5;
    LatentTensor za = ddim_sample(m, sched, zT, a);
    LatentTensor zb = ddim_sample(m, sched, zT, b);
    for (std::size_t j = 0; j < za.size(); ++j) CHECK(za.data[j] == zb.data[j]);

    SamplerConfig bad;
    bad.eta = 0.5;
    CHECK_THROWS_AS(ddim_sample(m, sched, zT, bad), ConfigError);
    CHECK_THROWS_AS(ddim_invert_naive(m, sched, zT, bad), ConfigError);
}

TEST_CASE("ddim: transport covers both mixture modes with the right mass") {
    NoiseSchedule sched = make_linear_schedule();
    MixtureScoreModel m = tiny_two_comp();
    SamplerConfig cfg;
    cfg.n_steps = 1000;
    Rng rng(404);
    const int n = 10000;
    int near_first = 0;
    double sum0 = 0.0, sum1 = 0.0;
    int n0 = 0, n1 = 0;
    for (int i = 0; i < n; ++i) {
        LatentTensor z0 = ddim_sample(m, sched, rng.normal_latent(kS4), cfg);
        double mean = (z0.data[0] + z0.data[1] + z0.data[2] + z0.data[3]) / 4.0;
        if (mean > 0.0) {
            ++near_first;
            sum0 += mean;
            ++n0;
        } else {
            sum1 += mean;
            ++n1;
        }
    }
    double frac = static_cast<double>(near_first) / n;
    // weight 0.3 on the +2 mode; 3 sigma of a Bernoulli(0.3) mean plus a
    // small allowance for discretization bias of the 1000-step ladder
    CHECK(std::abs(frac - 0.3) < 3.0 * std::sqrt(0.3 * 0.7 / n) + 0.005);
    CHECK(std::abs(sum0 / n0 - 2.0) < 0.05);
    CHECK(std::abs(sum1 / n1 + 2.0) < 0.05);
}

TEST_CASE("ddim: naive round-trip error shrinks as the ladder refines") {
    NoiseSchedule sched = make_linear_schedule();
    MixtureScoreModel m = tiny_two_comp();
    Rng rng(12);
    std::vector<LatentTensor> zs;
    for (int i = 0; i < 20; ++i) zs.push_back(rng.normal_latent(kS4));
    auto med_err = [&](int n) {
        SamplerConfig cfg;
        cfg.n_steps = n;
        std::vector<double> errs;
        for (const auto& zT : zs) {
            LatentTensor z0 = ddim_sample(m, sched, zT, cfg);
            LatentTensor back = ddim_invert_naive(m, sched, z0, cfg);
            double e = 0.0;
            for (std::size_t j = 0; j < zT.size(); ++j)
                e = std::max(e, std::abs(back.data[j] - zT.data[j]));
            errs.push_back(e);
        }
        std::sort(errs.begin(), errs.end());
        return 0.5 * (errs[errs.size() / 2 - 1] + errs[errs.size() / 2]);
    };
    double e25 = med_err(25), e50 = med_err(50), e100 = med_err(100);
    CHECK(e50 < e25);
    CHECK(e100 < e50);
    CHECK(e25 > 1e-6);  // naive reuse is genuinely approximate
}

TEST_CASE("ddim: exact inversion reaches solver precision both ways") {
    NoiseSchedule sched = make_linear_schedule();
    MixtureScoreModel m = tiny_two_comp();
    SamplerConfig cfg;
    cfg.n_steps = 50;
    Rng rng(13);
    for (int i = 0; i < 20; ++i) {
        LatentTensor zT = rng.normal_latent(kS4);
        LatentTensor z0 = ddim_sample(m, sched, zT, cfg);
        LatentTensor back = ddim_invert_exact(m, sched, z0, cfg);
        double err = 0.0;
        for (std::size_t j = 0; j < zT.size(); ++j)
            err = std::max(err, std::abs(back.data[j] - zT.data[j]));
        CHECK(err <= 1e-9);

        // defining property: sampling re-plays the exact encoding
        LatentTensor replay = ddim_sample(m, sched, ddim_invert_exact(m, sched, z0, cfg), cfg);
        double rerr = 0.0;
        for (std::size_t j = 0; j < z0.size(); ++j)
            rerr = std::max(rerr, std::abs(replay.data[j] - z0.data[j]));
        CHECK(rerr <= 1e-9);
    }
}

TEST_CASE("ddim: exact inversion reports failure honestly") {
    NoiseSchedule sched = make_linear_schedule();
    MixtureScoreModel m = tiny_two_comp();
    SamplerConfig cfg;
    cfg.n_steps = 50;
    LatentTensor z0 = Rng(14).normal_latent(kS4);
    try {
        ddim_invert_exact(m, sched, z0, cfg, 1e-300, 1);
        FAIL("expected ConvergenceError");
    } catch (const ConvergenceError& e) {
        CHECK(e.residual > 0.0);
    }
    CHECK_THROWS_AS(ddim_invert_exact(m, sched, z0, cfg, 0.0, 10), ConfigError);
    CHECK_THROWS_AS(ddim_invert_exact(m, sched, z0, cfg, 1e-12, 0), ConfigError);
}

TEST_CASE("ddim: shape mismatches are rejected") {
    NoiseSchedule sched = make_linear_schedule();
    MixtureScoreModel m = tiny_two_comp();
    SamplerConfig cfg;
    LatentTensor wrong({1, 2, 3});
    CHECK_THROWS_AS(ddim_sample(m, sched, wrong, cfg), ShapeError);
    CHECK_THROWS_AS(ddim_invert_naive(m, sched, wrong, cfg), ShapeError);
}
