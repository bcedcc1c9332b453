#pragma once

#include <map>
#include <optional>
#include <string>
#include <vector>

#include <nlohmann/json_fwd.hpp>

#include "latentmark/schedule.hpp"
#include "latentmark/tensor.hpp"

namespace latentmark {

// Isotropic Gaussian mixture with a closed-form noise predictor.
//
// Each component i is N(mean_i, cov_i * I). Under the schedule's forward
// noising, the time-t marginal stays a mixture with component covariance
// s_i(t) = alpha_bar(t) * cov_i + (1 - alpha_bar(t)), so the score — and hence
// the epsilon-parameterized noise predictor — is exact, no training involved.
// `class_map` names subsets of components; conditioning restricts the mixture
// to a subset and renormalizes its weights.
class MixtureScoreModel {
  public:
    MixtureScoreModel(Shape shape, std::vector<double> weights,
                      std::vector<std::vector<double>> means, std::vector<double> cov_scale,
                      std::map<std::string, std::vector<int>> class_map);

    static MixtureScoreModel from_json(const nlohmann::json& j);
    nlohmann::json to_json() const;

    const Shape& shape() const { return shape_; }
    int n_components() const { return static_cast<int>(weights_.size()); }
    const std::vector<double>& weights() const { return weights_; }
    const std::vector<std::vector<double>>& means() const { return means_; }
    const std::vector<double>& cov_scale() const { return cov_; }
    const std::map<std::string, std::vector<int>>& class_map() const { return class_map_; }

    // Noise prediction eps(z, t) = -sqrt(1 - alpha_bar(t)) * score_t(z).
    LatentTensor eps_pred(const LatentTensor& z, int t, const NoiseSchedule& sched,
                          const std::optional<std::string>& condition = {}) const;

    // Action of the Jacobian d eps / d z on a vector v. The Jacobian is
    // symmetric (it is a scaled Hessian of log-density), so this serves as
    // both JVP and VJP.
    LatentTensor score_jacobian_vp(const LatentTensor& z, int t, const LatentTensor& v,
                                   const NoiseSchedule& sched,
                                   const std::optional<std::string>& condition = {}) const;

    // Component indices active under a condition (all components when empty).
    const std::vector<int>& components_for(const std::optional<std::string>& condition) const;

  private:
    Shape shape_;
    std::vector<double> weights_;
    std::vector<std::vector<double>> means_;
    std::vector<double> cov_;
    std::map<std::string, std::vector<int>> class_map_;
    std::vector<int> all_components_;
};

}  // namespace latentmark
