#include "latentmark/mixture.hpp"

#include <algorithm>
#include <cmath>
#include <limits>

#include <nlohmann/json.hpp>

#include "latentmark/errors.hpp"
#include "latentmark/rng.hpp"

namespace latentmark {

MixtureScoreModel::MixtureScoreModel(Shape shape, std::vector<double> weights,
                                     std::vector<std::vector<double>> means,
                                     std::vector<double> cov_scale,
                                     std::map<std::string, std::vector<int>> class_map)
    : shape_(shape),
      weights_(std::move(weights)),
      means_(std::move(means)),
      cov_(std::move(cov_scale)),
      class_map_(std::move(class_map)) {
    require_valid(shape_, "mixture");
    const std::size_t m = weights_.size();
    if (m == 0) throw ConfigError("mixture: at least one component required");
    if (means_.size() != m || cov_.size() != m)
        throw ConfigError("mixture: weights/means/cov_scale must have equal length");
    const std::size_t d = shape_.volume();
    for (const auto& mu : means_)
        if (mu.size() != d)
            throw ConfigError("mixture: mean length " + std::to_string(mu.size()) +
                              " != shape volume " + std::to_string(d));
    double wsum = 0.0;
    for (double w : weights_) {
        if (!(w > 0.0) || !std::isfinite(w))
            throw ConfigError("mixture: weights must be positive and finite");
        wsum += w;
    }
    for (double& w : weights_) w /= wsum;
    for (double c : cov_)
        if (!(c > 0.0) || !std::isfinite(c))
            throw ConfigError("mixture: cov_scale entries must be positive and finite");
    for (const auto& [label, idxs] : class_map_) {
        if (idxs.empty())
            throw ConfigError("mixture: class '" + label + "' maps to no components");
        for (int i : idxs)
            if (i < 0 || i >= static_cast<int>(m))
                throw ConfigError("mixture: class '" + label + "' references component " +
                                  std::to_string(i) + " outside [0, " + std::to_string(m) + ")");
    }
    all_components_.resize(m);
    for (std::size_t i = 0; i < m; ++i) all_components_[i] = static_cast<int>(i);
}

const std::vector<int>& MixtureScoreModel::components_for(
    const std::optional<std::string>& condition) const {
    if (!condition) return all_components_;
    auto it = class_map_.find(*condition);
    if (it == class_map_.end()) {
        std::string labels;
        for (const auto& [label, _] : class_map_) {
            if (!labels.empty()) labels += ", ";
            labels += label;
        }
        throw ConfigError("mixture: unknown class '" + *condition + "' (available: " + labels +
                          ")");
    }
    return it->second;
}

namespace {

// Shared posterior computation: responsibilities r_i and per-component
// normalized pulls g_i = (sqrt_ab * mean_i - z) / s_i over active components.
struct Posterior {
    std::vector<double> r;
    std::vector<double> inv_s;
    std::vector<std::vector<double>> g;
};

Posterior posterior_at(const MixtureScoreModel& model, const std::vector<int>& active,
                       const LatentTensor& z, double ab) {
    const std::size_t d = z.size();
    const std::size_t n = active.size();
    const double sab = std::sqrt(ab);

    Posterior post;
    post.r.resize(n);
    post.inv_s.resize(n);
    post.g.assign(n, std::vector<double>(d));

    std::vector<double> logw(n);
    for (std::size_t a = 0; a < n; ++a) {
        int i = active[a];
        const double s = ab * model.cov_scale()[i] + (1.0 - ab);
        post.inv_s[a] = 1.0 / s;
        const auto& mu = model.means()[i];
        double q = 0.0;
        for (std::size_t j = 0; j < d; ++j) {
            double diff = sab * mu[j] - z.data[j];
            post.g[a][j] = diff / s;
            q += diff * diff;
        }
        logw[a] = std::log(model.weights()[i]) -
                  0.5 * static_cast<double>(d) * std::log(s) - 0.5 * q / s;
    }
    double lmax = -std::numeric_limits<double>::infinity();
    for (double l : logw) lmax = std::max(lmax, l);
    double total = 0.0;
    for (std::size_t a = 0; a < n; ++a) {
        post.r[a] = std::exp(logw[a] - lmax);
        total += post.r[a];
    }
    for (double& r : post.r) r /= total;
    return post;
}

}  // namespace

LatentTensor MixtureScoreModel::eps_pred(const LatentTensor& z, int t, const NoiseSchedule& sched,
                                         const std::optional<std::string>& condition) const {
    require_same_shape(z.shape, shape_, "eps_pred");
    const double ab = sched.alpha_bar(t);
    const double s1mab = sched.sqrt_one_minus_alpha_bar(t);
    const auto& active = components_for(condition);

    LatentTensor eps(shape_);
    if (s1mab == 0.0) return eps;  // t == 0: the eps-parameterization vanishes

    Posterior post = posterior_at(*this, active, z, ab);
    const std::size_t d = z.size();
    for (std::size_t a = 0; a < active.size(); ++a) {
        const double r = post.r[a];
        if (r == 0.0) continue;
        for (std::size_t j = 0; j < d; ++j) eps.data[j] += r * post.g[a][j];
    }
    for (double& v : eps.data) v *= -s1mab;
    return eps;
}

LatentTensor MixtureScoreModel::score_jacobian_vp(const LatentTensor& z, int t,
                                                  const LatentTensor& v,
                                                  const NoiseSchedule& sched,
                                                  const std::optional<std::string>& condition)
    const {
    require_same_shape(z.shape, shape_, "score_jacobian_vp");
    require_same_shape(v.shape, shape_, "score_jacobian_vp");
    const double ab = sched.alpha_bar(t);
    const double s1mab = sched.sqrt_one_minus_alpha_bar(t);
    const auto& active = components_for(condition);

    LatentTensor out(shape_);
    if (s1mab == 0.0) return out;

    Posterior post = posterior_at(*this, active, z, ab);
    const std::size_t d = z.size();
    const std::size_t n = active.size();

    // H v with H = sum_i r_i (g_i g_i^T - I/s_i) - g_bar g_bar^T.
    std::vector<double> gbar(d, 0.0);
    double rsum_inv_s = 0.0;
    for (std::size_t a = 0; a < n; ++a) {
        rsum_inv_s += post.r[a] * post.inv_s[a];
        for (std::size_t j = 0; j < d; ++j) gbar[j] += post.r[a] * post.g[a][j];
    }
    double gbar_dot_v = 0.0;
    for (std::size_t j = 0; j < d; ++j) gbar_dot_v += gbar[j] * v.data[j];

    for (std::size_t j = 0; j < d; ++j) out.data[j] = -rsum_inv_s * v.data[j];
    for (std::size_t a = 0; a < n; ++a) {
        if (post.r[a] == 0.0) continue;
        double gi_dot_v = 0.0;
        for (std::size_t j = 0; j < d; ++j) gi_dot_v += post.g[a][j] * v.data[j];
        const double coef = post.r[a] * gi_dot_v;
        for (std::size_t j = 0; j < d; ++j) out.data[j] += coef * post.g[a][j];
    }
    for (std::size_t j = 0; j < d; ++j) out.data[j] -= gbar[j] * gbar_dot_v;

    // d eps / d z = -sqrt(1 - alpha_bar) * H.
    for (double& x : out.data) x *= -s1mab;
    return out;
}

MixtureScoreModel MixtureScoreModel::from_json(const nlohmann::json& j) {
    try {
        Shape shape{j.at("shape").at(0).get<int>(), j.at("shape").at(1).get<int>(),
                    j.at("shape").at(2).get<int>()};
        if (j.contains("generator")) {
            // Compact seeded form: component means drawn once from a named
            // seed, so configs stay small at any latent dimension.
            const auto& g = j.at("generator");
            const int k = g.at("components").get<int>();
            if (k < 1) throw ConfigError("mixture generator: components must be >= 1");
            const auto seed = g.at("seed").get<std::uint64_t>();
            const double mean_scale = g.value("mean_scale", 1.0);
            std::vector<double> weights =
                g.contains("weights") ? g.at("weights").get<std::vector<double>>()
                                      : std::vector<double>(k, 1.0);
            std::vector<double> cov;
            if (g.contains("cov_scale") && g.at("cov_scale").is_array())
                cov = g.at("cov_scale").get<std::vector<double>>();
            else
                cov.assign(k, g.value("cov_scale", 0.1));
            std::vector<std::vector<double>> means(k);
            for (int i = 0; i < k; ++i) {
                Rng rng(derive_seed(seed, static_cast<std::uint64_t>(i) + 1));
                means[i].resize(shape.volume());
                for (double& m : means[i]) m = mean_scale * rng.normal();
            }
            std::map<std::string, std::vector<int>> class_map;
            if (g.value("classes", false))
                for (int i = 0; i < k; ++i) class_map["c" + std::to_string(i)] = {i};
            return MixtureScoreModel(shape, std::move(weights), std::move(means),
                                     std::move(cov), std::move(class_map));
        }
        auto weights = j.at("weights").get<std::vector<double>>();
        auto means = j.at("means").get<std::vector<std::vector<double>>>();
        auto cov = j.at("cov_scale").get<std::vector<double>>();
        std::map<std::string, std::vector<int>> class_map;
        if (j.contains("class_map"))
            class_map = j.at("class_map").get<std::map<std::string, std::vector<int>>>();
        return MixtureScoreModel(shape, std::move(weights), std::move(means), std::move(cov),
                                 std::move(class_map));
    } catch (const nlohmann::json::exception& e) {
        throw ConfigError(std::string("mixture: malformed model json: ") + e.what());
    }
}

nlohmann::json MixtureScoreModel::to_json() const {
    nlohmann::json j;
    j["shape"] = {shape_.c, shape_.h, shape_.w};
    j["weights"] = weights_;
    j["means"] = means_;
    j["cov_scale"] = cov_;
    j["class_map"] = class_map_;
    return j;
}

}  // namespace latentmark
