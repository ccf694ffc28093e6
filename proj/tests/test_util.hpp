#pragma once

#include "promo/autograd.hpp"
#include "promo/data.hpp"

#include <Eigen/Dense>

#include <algorithm>
#include <cmath>
#include <filesystem>
#include <functional>
#include <tuple>
#include <vector>

namespace testutil {

struct Row {
  promo::UserId user;
  promo::ItemId item;
  int label;
  std::int64_t t;
  double cr = 0.5;
  double ir = 0.5;
};

inline promo::InteractionLog make_log(const std::vector<Row>& rows, std::int32_t users,
                                      std::int32_t items) {
  promo::InteractionLog log;
  log.user_count = users;
  log.item_count = items;
  for (const auto& r : rows) log.interactions.push_back({r.user, r.item, r.label, r.t, r.cr, r.ir});
  std::stable_sort(log.interactions.begin(), log.interactions.end(),
                   [](const auto& a, const auto& b) { return a.timestamp < b.timestamp; });
  return log;
}

inline std::filesystem::path data_dir() { return PROMO_DATA_DIR; }
inline bool have_movielens() {
  return std::filesystem::exists(data_dir() / "ml-100k" / "u.data");
}

inline double rel_err(double a, double b) {
  return std::abs(a - b) / std::max(std::abs(a) + std::abs(b), 1e-6);
}

// Largest relative error between an analytic gradient and central differences
// of f with respect to every entry of x.
inline double max_fd_error(const std::function<double()>& f, Eigen::MatrixXd& x,
                           const Eigen::MatrixXd& analytic, double h = 1e-6) {
  double worst = 0.0;
  for (Eigen::Index r = 0; r < x.rows(); ++r) {
    for (Eigen::Index c = 0; c < x.cols(); ++c) {
      const double keep = x(r, c);
      x(r, c) = keep + h;
      const double up = f();
      x(r, c) = keep - h;
      const double down = f();
      x(r, c) = keep;
      worst = std::max(worst, rel_err(analytic(r, c), (up - down) / (2 * h)));
    }
  }
  return worst;
}

}  // namespace testutil
