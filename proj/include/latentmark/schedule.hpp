#pragma once

#include <vector>

#include "latentmark/errors.hpp"

namespace latentmark {

// Discrete-time noising schedule: beta(t) for t = 1..t_train linearly spaced
// (endpoints inclusive), alpha_bar(t) the cumulative product of (1 - beta),
// with alpha_bar(0) = 1 exactly.
class NoiseSchedule {
  public:
    NoiseSchedule(int t_train, double beta_start, double beta_end);

    int t_train() const { return t_train_; }

    // t in [1, t_train].
    double beta(int t) const;

    // t in [0, t_train]; alpha_bar(0) == 1.
    double alpha_bar(int t) const;

    // sqrt(alpha_bar(t)), precomputed.
    double sqrt_alpha_bar(int t) const;

    // sqrt(1 - alpha_bar(t)), precomputed.
    double sqrt_one_minus_alpha_bar(int t) const;

  private:
    int t_train_;
    std::vector<double> beta_;            // index 0 unused
    std::vector<double> alpha_bar_;       // index 0..t_train
    std::vector<double> sqrt_ab_;
    std::vector<double> sqrt_1mab_;
};

// The default schedule used throughout: 1000 steps, beta from 1e-4 to 2e-2.
NoiseSchedule make_linear_schedule(int t_train = 1000, double beta_start = 1e-4,
                                   double beta_end = 2e-2);

}  // namespace latentmark
