#pragma once

#include "promo/autograd.hpp"

#include <cstdint>
#include <vector>

namespace promo {

struct AdamOptions {
  double learning_rate = 1e-3;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double epsilon = 1e-8;
};

// Adam over a fixed parameter list. Row-sparse parameters only update the rows
// touched in the current step (lazy Adam); bias correction uses the global step.
class Adam {
 public:
  Adam() = default;
  Adam(std::vector<ad::Parameter*> params, AdamOptions options);

  void step();
  void zero_grad();
  // Multiplies the learning rate of parameter `index` (position in the list).
  void set_learning_rate_scale(std::size_t index, double scale);

  std::int64_t steps() const { return steps_; }
  const AdamOptions& options() const { return options_; }
  const std::vector<ad::Matrix>& first_moments() const { return m_; }
  const std::vector<ad::Matrix>& second_moments() const { return v_; }
  void restore(std::int64_t steps, std::vector<ad::Matrix> m, std::vector<ad::Matrix> v);

 private:
  std::vector<ad::Parameter*> params_;
  AdamOptions options_;
  std::vector<ad::Matrix> m_;
  std::vector<ad::Matrix> v_;
  std::vector<double> lr_scale_;
  std::int64_t steps_ = 0;
};

}  // namespace promo
