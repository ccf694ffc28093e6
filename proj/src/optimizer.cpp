#include "promo/optimizer.hpp"

#include <cmath>
#include <stdexcept>

namespace promo {

Adam::Adam(std::vector<ad::Parameter*> params, AdamOptions options)
    : params_(std::move(params)), options_(options) {
  for (auto* p : params_) {
    m_.push_back(ad::Matrix::Zero(p->value.rows(), p->value.cols()));
    v_.push_back(ad::Matrix::Zero(p->value.rows(), p->value.cols()));
    p->zero_grad();
  }
  lr_scale_.assign(params_.size(), 1.0);
}

void Adam::set_learning_rate_scale(std::size_t index, double scale) {
  if (!(scale > 0.0)) throw std::invalid_argument("Adam: learning rate scale must be > 0");
  lr_scale_.at(index) = scale;
}

void Adam::zero_grad() {
  for (auto* p : params_) p->zero_grad();
}

void Adam::step() {
  ++steps_;
  const double b1 = options_.beta1, b2 = options_.beta2;
  const double c1 = 1.0 - std::pow(b1, static_cast<double>(steps_));
  const double c2 = 1.0 - std::pow(b2, static_cast<double>(steps_));
  const double eps = options_.epsilon;
  for (std::size_t k = 0; k < params_.size(); ++k) {
    ad::Parameter& p = *params_[k];
    const double lr = options_.learning_rate * lr_scale_[k];
    auto update_rows = [&](Eigen::Index r0, Eigen::Index count) {
      auto g = p.grad.middleRows(r0, count);
      auto m = m_[k].middleRows(r0, count);
      auto v = v_[k].middleRows(r0, count);
      m = b1 * m + (1.0 - b1) * g;
      v = b2 * v + (1.0 - b2) * g.cwiseAbs2();
      p.value.middleRows(r0, count).array() -=
          lr * (m.array() / c1) / ((v.array() / c2).sqrt() + eps);
    };
    if (p.row_sparse) {
      for (std::size_t r = 0; r < p.touched.size(); ++r) {
        if (p.touched[r]) update_rows(static_cast<Eigen::Index>(r), 1);
      }
    } else {
      update_rows(0, p.value.rows());
    }
  }
}

void Adam::restore(std::int64_t steps, std::vector<ad::Matrix> m, std::vector<ad::Matrix> v) {
  if (m.size() != params_.size() || v.size() != params_.size()) {
    throw std::invalid_argument("Adam::restore: moment count mismatch");
  }
  for (std::size_t k = 0; k < params_.size(); ++k) {
    if (m[k].rows() != params_[k]->value.rows() || m[k].cols() != params_[k]->value.cols() ||
        v[k].rows() != m[k].rows() || v[k].cols() != m[k].cols()) {
      throw std::invalid_argument("Adam::restore: moment shape mismatch for " +
                                  params_[k]->name);
    }
  }
  steps_ = steps;
  m_ = std::move(m);
  v_ = std::move(v);
}

}  // namespace promo
