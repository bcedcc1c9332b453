#include "latentmark/schedule.hpp"

#include <cmath>
#include <string>

namespace latentmark {

NoiseSchedule::NoiseSchedule(int t_train, double beta_start, double beta_end)
    : t_train_(t_train) {
    if (t_train < 2) throw ConfigError("schedule: t_train must be >= 2");
    if (!(beta_start > 0.0) || !(beta_end < 1.0) || !(beta_start <= beta_end))
        throw ConfigError("schedule: need 0 < beta_start <= beta_end < 1");

    beta_.assign(static_cast<std::size_t>(t_train) + 1, 0.0);
    alpha_bar_.assign(static_cast<std::size_t>(t_train) + 1, 0.0);
    alpha_bar_[0] = 1.0;
    double prod = 1.0;
    for (int t = 1; t <= t_train; ++t) {
        double frac = static_cast<double>(t - 1) / static_cast<double>(t_train - 1);
        double b = beta_start + (beta_end - beta_start) * frac;
        beta_[t] = b;
        prod *= 1.0 - b;
        alpha_bar_[t] = prod;
    }

    sqrt_ab_.resize(alpha_bar_.size());
    sqrt_1mab_.resize(alpha_bar_.size());
    for (std::size_t i = 0; i < alpha_bar_.size(); ++i) {
        sqrt_ab_[i] = std::sqrt(alpha_bar_[i]);
        sqrt_1mab_[i] = std::sqrt(1.0 - alpha_bar_[i]);
    }
}

double NoiseSchedule::beta(int t) const {
    if (t < 1 || t > t_train_)
        throw ConfigError("schedule: beta index " + std::to_string(t) + " outside [1, " +
                          std::to_string(t_train_) + "]");
    return beta_[t];
}

double NoiseSchedule::alpha_bar(int t) const {
    if (t < 0 || t > t_train_)
        throw ConfigError("schedule: alpha_bar index " + std::to_string(t) + " outside [0, " +
                          std::to_string(t_train_) + "]");
    return alpha_bar_[t];
}

double NoiseSchedule::sqrt_alpha_bar(int t) const {
    if (t < 0 || t > t_train_)
        throw ConfigError("schedule: index " + std::to_string(t) + " outside [0, " +
                          std::to_string(t_train_) + "]");
    return sqrt_ab_[t];
}

double NoiseSchedule::sqrt_one_minus_alpha_bar(int t) const {
    if (t < 0 || t > t_train_)
        throw ConfigError("schedule: index " + std::to_string(t) + " outside [0, " +
                          std::to_string(t_train_) + "]");
    return sqrt_1mab_[t];
}

NoiseSchedule make_linear_schedule(int t_train, double beta_start, double beta_end) {
    return NoiseSchedule(t_train, beta_start, beta_end);
}

}  // namespace latentmark
