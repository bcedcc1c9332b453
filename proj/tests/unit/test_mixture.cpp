#include <cmath>
#include <map>
#include <optional>
#include <string>
#include <vector>

#include <doctest.h>
#include <nlohmann/json.hpp>

#include "latentmark/errors.hpp"
#include "latentmark/mixture.hpp"
#include "latentmark/rng.hpp"
#include "latentmark/schedule.hpp"

using namespace latentmark;

namespace {

const Shape kS{1, 2, 2};  // d = 4

LatentTensor make_z(std::vector<double> v, const Shape& s = kS) {
    LatentTensor z(s);
    REQUIRE(z.data.size() == v.size());
    z.data = std::move(v);
    return z;
}

// Direct (non-log-sum-exp) noise predictor for Gaussian mixtures:
//   s_i = ab*v_i + (1 - ab)
//   r_i ~ w_i * s_i^{-d/2} * exp(-|z - sqrt(ab) mu_i|^2 / (2 s_i))
//   eps = sqrt(1-ab) * sum_i r_i (z - sqrt(ab) mu_i) / s_i
std::vector<double> eps_oracle(const std::vector<double>& z, int t, const NoiseSchedule& sched,
                               const std::vector<double>& weights,
                               const std::vector<std::vector<double>>& means,
                               const std::vector<double>& cov) {
    const std::size_t d = z.size();
    if (t == 0) return std::vector<double>(d, 0.0);
    const double ab = sched.alpha_bar(t);
    const double sab = std::sqrt(ab);
    const double s1m = std::sqrt(1.0 - ab);
    const std::size_t m = weights.size();
    std::vector<double> dens(m);
    double total = 0.0;
    for (std::size_t i = 0; i < m; ++i) {
        double si = ab * cov[i] + (1.0 - ab);
        double q = 0.0;
        for (std::size_t j = 0; j < d; ++j) {
            double r = z[j] - sab * means[i][j];
            q += r * r;
        }
        dens[i] = weights[i] * std::pow(si, -0.5 * static_cast<double>(d)) *
                  std::exp(-0.5 * q / si);
        total += dens[i];
    }
    std::vector<double> eps(d, 0.0);
    for (std::size_t i = 0; i < m; ++i) {
        double si = ab * cov[i] + (1.0 - ab);
        double r = dens[i] / total;
        for (std::size_t j = 0; j < d; ++j) eps[j] += r * (z[j] - sab * means[i][j]) / si;
    }
    for (std::size_t j = 0; j < d; ++j) eps[j] *= s1m;
    return eps;
}

}  // namespace

TEST_CASE("mixture: single-component predictor equals the closed form") {
    NoiseSchedule sched = make_linear_schedule();
    std::vector<double> mu = {0.4, -1.2, 0.0, 2.5};
    MixtureScoreModel m(kS, {1.0}, {mu}, {0.7}, {});
    Rng rng(3);
    for (int t : {1, 37, 400, 1000}) {
        LatentTensor z = rng.normal_latent(kS);
        LatentTensor e = m.eps_pred(z, t, sched);
        const double ab = sched.alpha_bar(t);
        const double s = ab * 0.7 + (1.0 - ab);
        for (std::size_t j = 0; j < z.size(); ++j) {
            double want = std::sqrt(1.0 - ab) * (z.data[j] - std::sqrt(ab) * mu[j]) / s;
            CHECK(e.data[j] == doctest::Approx(want).epsilon(1e-12));
        }
    }
}

TEST_CASE("mixture: multi-component predictor matches a direct-density oracle") {
    NoiseSchedule sched = make_linear_schedule();
    std::vector<std::vector<double>> means = {
        {0.5, 0.5, -0.5, 0.0}, {-1.0, 0.3, 0.8, 1.1}, {2.0, -2.0, 0.1, -0.7}};
    std::vector<double> w = {0.5, 0.3, 0.2}, cov = {1.0, 0.4, 2.0};
    MixtureScoreModel m(kS, w, means, cov, {});
    Rng rng(17);
    for (int t : {1, 50, 300, 900}) {
        for (int rep = 0; rep < 5; ++rep) {
            LatentTensor z = rng.normal_latent(kS);
            LatentTensor e = m.eps_pred(z, t, sched);
            auto want = eps_oracle(z.data, t, sched, w, means, cov);
            for (std::size_t j = 0; j < z.size(); ++j)
                CHECK(e.data[j] == doctest::Approx(want[j]).epsilon(1e-10));
        }
    }
}

TEST_CASE("mixture: eps at t = 0 is exactly zero") {
    NoiseSchedule sched = make_linear_schedule();
    MixtureScoreModel m(kS, {0.6, 0.4}, {{1.0, 0, 0, 0}, {0, 1.0, 0, 0}}, {1.0, 0.5}, {});
    LatentTensor z = Rng(9).normal_latent(kS);
    LatentTensor e = m.eps_pred(z, 0, sched);
    for (double v : e.data) CHECK(v == 0.0);
}

TEST_CASE("mixture: far-separated means keep the predictor finite and dominant-correct") {
    NoiseSchedule sched = make_linear_schedule();
    std::vector<std::vector<double>> means = {{1000.0, 1000, 1000, 1000},
                                              {-1000.0, -1000, -1000, -1000}};
    MixtureScoreModel m(kS, {0.5, 0.5}, means, {1.0, 1.0}, {});
    for (int t : {1, 500, 1000}) {
        LatentTensor z = make_z({998.0, 1001.0, 999.5, 1000.5});
        LatentTensor e = m.eps_pred(z, t, sched);
        const double ab = sched.alpha_bar(t);
        const double s = ab + (1.0 - ab);  // v = 1
        for (std::size_t j = 0; j < z.size(); ++j) {
            CHECK(std::isfinite(e.data[j]));
            // responsibility of the far component underflows to zero
            double want = std::sqrt(1.0 - ab) * (z.data[j] - std::sqrt(ab) * means[0][j]) / s;
            CHECK(e.data[j] == doctest::Approx(want).epsilon(1e-10));
        }
    }
}

TEST_CASE("mixture: jacobian-vector product matches central finite differences") {
    NoiseSchedule sched = make_linear_schedule();
    const Shape s8{2, 2, 2};
    std::vector<std::vector<double>> means;
    std::vector<double> w, cov;
    Rng rng(21);
    for (int i = 0; i < 3; ++i) {
        std::vector<double> mu(8);
        for (double& x : mu) x = rng.normal();
        means.push_back(mu);
        w.push_back(1.0 / 3.0);
        cov.push_back(0.5 + 0.5 * i);
    }
    MixtureScoreModel m(s8, w, means, cov, {});
    const double h = 1e-6;
    for (int t : {1, 200, 1000}) {
        LatentTensor z = rng.normal_latent(s8);
        LatentTensor v = rng.normal_latent(s8);
        LatentTensor jvp = m.score_jacobian_vp(z, t, v, sched);
        LatentTensor zp = z, zm = z;
        for (std::size_t j = 0; j < z.size(); ++j) {
            zp.data[j] += h * v.data[j];
            zm.data[j] -= h * v.data[j];
        }
        LatentTensor ep = m.eps_pred(zp, t, sched);
        LatentTensor em = m.eps_pred(zm, t, sched);
        double num = 0.0, den = 0.0;
        for (std::size_t j = 0; j < z.size(); ++j) {
            double fd = (ep.data[j] - em.data[j]) / (2.0 * h);
            num += (fd - jvp.data[j]) * (fd - jvp.data[j]);
            den += jvp.data[j] * jvp.data[j];
        }
        CHECK(std::sqrt(num) <= 1e-6 * std::max(1.0, std::sqrt(den)));
    }
}

TEST_CASE("mixture: jacobian is symmetric: <u, J v> == <v, J u>") {
    NoiseSchedule sched = make_linear_schedule();
    MixtureScoreModel m(kS, {0.7, 0.3}, {{0.5, -0.5, 1.0, 0.0}, {-1.0, 0.2, 0.3, 0.8}},
                        {1.0, 0.6}, {});
    Rng rng(33);
    LatentTensor z = rng.normal_latent(kS), u = rng.normal_latent(kS),
                 v = rng.normal_latent(kS);
    for (int t : {10, 700}) {
        LatentTensor ju = m.score_jacobian_vp(z, t, u, sched);
        LatentTensor jv = m.score_jacobian_vp(z, t, v, sched);
        double a = 0.0, b = 0.0;
        for (std::size_t j = 0; j < z.size(); ++j) {
            a += u.data[j] * jv.data[j];
            b += v.data[j] * ju.data[j];
        }
        CHECK(a == doctest::Approx(b).epsilon(1e-12));
    }
}

TEST_CASE("mixture: conditioning restricts components and renormalizes") {
    NoiseSchedule sched = make_linear_schedule();
    std::vector<std::vector<double>> means = {{1.0, 0, 0, 0}, {0, 1.0, 0, 0}, {0, 0, 1.0, 0}};
    std::map<std::string, std::vector<int>> cls = {
        {"c0", {0}}, {"c1", {1}}, {"pair", {0, 2}}, {"all", {0, 1, 2}}};
    MixtureScoreModel m(kS, {0.2, 0.5, 0.3}, means, {1.0, 1.0, 1.0}, cls);
    LatentTensor z = Rng(4).normal_latent(kS);

    // single-class condition equals the lone component's closed form
    LatentTensor e0 = m.eps_pred(z, 300, sched, std::string("c0"));
    const double ab = sched.alpha_bar(300);
    for (std::size_t j = 0; j < z.size(); ++j) {
        double want = std::sqrt(1.0 - ab) * (z.data[j] - std::sqrt(ab) * means[0][j]) / 1.0;
        CHECK(e0.data[j] == doctest::Approx(want).epsilon(1e-12));
    }

    // condition spanning every component is bitwise unconditioned
    LatentTensor eall = m.eps_pred(z, 300, sched, std::string("all"));
    LatentTensor eun = m.eps_pred(z, 300, sched);
    for (std::size_t j = 0; j < z.size(); ++j) CHECK(eall.data[j] == eun.data[j]);

    // subset condition matches the renormalized oracle
    LatentTensor ep = m.eps_pred(z, 300, sched, std::string("pair"));
    auto want = eps_oracle(z.data, 300, sched, {0.4, 0.6}, {means[0], means[2]}, {1.0, 1.0});
    for (std::size_t j = 0; j < z.size(); ++j)
        CHECK(ep.data[j] == doctest::Approx(want[j]).epsilon(1e-10));

    CHECK(m.components_for(std::string("pair")) == std::vector<int>{0, 2});
    CHECK(m.components_for({}).size() == 3);
}

TEST_CASE("mixture: unknown condition lists the available classes") {
    MixtureScoreModel m(kS, {1.0}, {{0, 0, 0, 0}}, {1.0},
                        {{"a", {0}}, {"b", {0}}});
    NoiseSchedule sched = make_linear_schedule();
    LatentTensor z(kS);
    try {
        m.eps_pred(z, 10, sched, std::string("nope"));
        FAIL("expected ConfigError");
    } catch (const ConfigError& e) {
        std::string msg = e.what();
        CHECK(msg.find("nope") != std::string::npos);
        CHECK(msg.find("a") != std::string::npos);
        CHECK(msg.find("b") != std::string::npos);
    }
}

TEST_CASE("mixture: constructor validation") {
    std::vector<double> mu4 = {0, 0, 0, 0};
    CHECK_THROWS_AS(MixtureScoreModel(kS, {}, {}, {}, {}), ConfigError);
    CHECK_THROWS_AS(MixtureScoreModel(kS, {1.0, 1.0}, {mu4}, {1.0, 1.0}, {}), ConfigError);
    CHECK_THROWS_AS(MixtureScoreModel(kS, {1.0}, {{0, 0}}, {1.0}, {}), ConfigError);
    CHECK_THROWS_AS(MixtureScoreModel(kS, {-1.0}, {mu4}, {1.0}, {}), ConfigError);
    CHECK_THROWS_AS(MixtureScoreModel(kS, {1.0}, {mu4}, {0.0}, {}), ConfigError);
    CHECK_THROWS_AS(MixtureScoreModel(kS, {1.0}, {mu4}, {-0.5}, {}), ConfigError);
    CHECK_THROWS_AS(MixtureScoreModel(kS, {1.0}, {mu4}, {1.0}, {{"x", {1}}}), ConfigError);
    CHECK_THROWS_AS(MixtureScoreModel(kS, {1.0}, {mu4}, {1.0}, {{"x", {}}}), ConfigError);
}

TEST_CASE("mixture: weights normalize to one") {
    MixtureScoreModel m(kS, {2.0, 6.0}, {{0, 0, 0, 0}, {1, 1, 1, 1}}, {1.0, 1.0}, {});
    CHECK(m.weights()[0] == doctest::Approx(0.25).epsilon(1e-15));
    CHECK(m.weights()[1] == doctest::Approx(0.75).epsilon(1e-15));
}

TEST_CASE("mixture: json round trip preserves the predictor exactly") {
    std::map<std::string, std::vector<int>> cls = {{"a", {0}}, {"b", {1}}};
    MixtureScoreModel m(kS, {0.3, 0.7}, {{0.1, -0.2, 0.3, -0.4}, {1.5, 0.5, -0.5, -1.5}},
                        {0.9, 1.3}, cls);
    // through a serialized string, as config files do
    auto j = nlohmann::json::parse(m.to_json().dump());
    MixtureScoreModel m2 = MixtureScoreModel::from_json(j);
    NoiseSchedule sched = make_linear_schedule();
    LatentTensor z = Rng(8).normal_latent(kS);
    for (int t : {1, 123, 1000}) {
        LatentTensor a = m.eps_pred(z, t, sched), b = m2.eps_pred(z, t, sched);
        for (std::size_t i = 0; i < a.size(); ++i) CHECK(a.data[i] == b.data[i]);
    }
    CHECK(m2.class_map().at("b") == std::vector<int>{1});
}

TEST_CASE("mixture: generator form builds a deterministic model") {
    nlohmann::json j = {{"shape", {2, 4, 4}},
                        {"generator",
                         {{"components", 3},
                          {"seed", 7},
                          {"mean_scale", 0.8},
                          {"cov_scale", 1.0},
                          {"classes", true}}}};
    MixtureScoreModel a = MixtureScoreModel::from_json(j);
    MixtureScoreModel b = MixtureScoreModel::from_json(j);
    CHECK(a.n_components() == 3);
    CHECK(a.shape() == Shape{2, 4, 4});
    CHECK(a.class_map().size() == 3);
    CHECK(a.class_map().count("c1") == 1);
    for (int i = 0; i < 3; ++i) {
        CHECK(a.weights()[static_cast<std::size_t>(i)] == doctest::Approx(1.0 / 3).epsilon(1e-15));
        CHECK(a.means()[static_cast<std::size_t>(i)] == b.means()[static_cast<std::size_t>(i)]);
    }
    // mean_scale scales the draws
    nlohmann::json j2 = j;
    j2["generator"]["mean_scale"] = 0.4;
    MixtureScoreModel c = MixtureScoreModel::from_json(j2);
    for (std::size_t i = 0; i < 3; ++i)
        for (std::size_t d = 0; d < a.means()[i].size(); ++d)
            CHECK(c.means()[i][d] == doctest::Approx(0.5 * a.means()[i][d]).epsilon(1e-12));
}

TEST_CASE("mixture: malformed json is a ConfigError") {
    CHECK_THROWS_AS(MixtureScoreModel::from_json(nlohmann::json{{"weights", {1.0}}}),
                    ConfigError);
    nlohmann::json bad = {{"shape", {2, 4, 4}},
                          {"generator", {{"components", 0}, {"seed", 1}}}};
    CHECK_THROWS_AS(MixtureScoreModel::from_json(bad), ConfigError);
}
