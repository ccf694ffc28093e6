#pragma once

// Central-difference checks of the prompt-stage gradients on one random
// instance (d=8, k=3, batch=16). Each field is the worst relative error.

#include "promo/prompt_tuner.hpp"
#include "test_util.hpp"
#include "toy_world.hpp"

#include <random>

namespace testutil {

struct GradCheck {
  double forward = 0.0;
  double pfpe = 0.0;
  double pape = 0.0;
  double fusion = 0.0;
  double total = 0.0;
  // |grad total - (l1 grad pfpe + l2 grad pape + grad rec)|, relative
  double combination = 0.0;

  double worst() const {
    return std::max({forward, pfpe, pape, fusion, total, combination});
  }
};

inline Eigen::MatrixXd gaussian(Eigen::Index r, Eigen::Index c, std::mt19937& g, double s) {
  std::normal_distribution<double> n(0.0, s);
  Eigen::MatrixXd m(r, c);
  for (Eigen::Index i = 0; i < m.size(); ++i) m.data()[i] = n(g);
  return m;
}

// Reduces every parameter's analytic-vs-numeric error for a scalar built on a fresh tape.
inline double check_params(std::vector<promo::ad::Parameter*> params,
                           const std::function<promo::ad::Var(promo::ad::Tape&)>& build, double h = 1e-6) {
  for (auto* p : params) p->zero_grad();
  {
    promo::ad::Tape tape;
    tape.backward(build(tape));
  }
  auto f = [&] {
    promo::ad::Tape tape;
    return build(tape).scalar();
  };
  double worst = 0.0;
  for (auto* p : params) {
    const Eigen::MatrixXd analytic = p->grad;
    worst = std::max(worst, max_fd_error(f, p->value, analytic, h));
  }
  return worst;
}

inline GradCheck gradcheck_instance(std::uint64_t seed) {
  namespace ad = promo::ad;
  using ad::Parameter;
  using ad::Tape;
  using ad::Var;
  std::mt19937 g(static_cast<unsigned>(seed));
  GradCheck out;
  const promo::LayerDims dims{{8, 8}, {8, 4}};

  {  // prompt net forward, both the last output and the layer concatenation
    Parameter e0("e0", gaussian(1, 72, g, 0.4)), e1("e1", gaussian(1, 36, g, 0.4));
    Parameter x("x", gaussian(3, 8, g, 1.0));
    const Eigen::MatrixXd w_out = gaussian(3, 4, g, 1.0), w_layers = gaussian(3, 12, g, 1.0);
    out.forward = check_params({&e0, &e1, &x}, [&](Tape& t) {
      std::vector<Var> layers{t.param(e0), t.param(e1)};
      auto r = promo::prompt_forward(layers, dims, t.param(x));
      return ad::add(ad::sum(ad::mul(r.output, t.constant(w_out))),
                     ad::sum(ad::mul(r.layers, t.constant(w_layers))));
    });
  }
  {  // pfpe, scaled so the summed distance is O(1)
    Parameter hp("h_pos", gaussian(3, 8, g, 0.03)), hn("h_neg", gaussian(3, 8, g, 0.03));
    out.pfpe = check_params({&hp, &hn}, [&](Tape& t) {
      return promo::pfpe_loss(t.param(hp), t.param(hn));
    });
  }
  {  // pape on probabilities
    std::uniform_real_distribution<double> u(0.05, 0.95);
    Eigen::MatrixXd probs(16, 1);
    for (int i = 0; i < 16; ++i) probs(i) = u(g);
    Parameter p("probs", probs);
    std::vector<std::uint8_t> cold(16);
    std::vector<int> labels(16);
    for (int i = 0; i < 16; ++i) {
      cold[i] = static_cast<std::uint8_t>(g() % 2);
      labels[i] = static_cast<int>(g() % 2);
    }
    cold[0] = 1, labels[0] = 1;
    cold[1] = 0, labels[1] = 0;
    out.pape = check_params({&p}, [&](Tape& t) { return promo::pape_loss(t.param(p), cold, labels); });
  }
  {  // fusion head and user projection
    promo::FusionHead head = promo::FusionHead::init(8, 4, 8, seed);
    for (auto* q : head.parameters()) q->value = gaussian(q->value.rows(), q->value.cols(), g, 0.5);
    Parameter hi("h_i", gaussian(16, 8, g, 1.0)), pm("pos_mean", gaussian(16, 8, g, 1.0));
    Parameter ep("e_pl", gaussian(16, 4, g, 1.0)), hu("h_u", gaussian(16, 8, g, 1.0));
    std::vector<Parameter*> params = head.parameters();
    for (auto* q : {&hi, &pm, &ep, &hu}) params.push_back(q);
    const Eigen::MatrixXd weights = gaussian(16, 1, g, 1.0);
    out.fusion = check_params(params, [&](Tape& t) {
      promo::FusionVars f = promo::bind_fusion(t, head, true);
      Var item = promo::fuse_rows(t.param(hi), t.param(pm), t.param(ep), f);
      Var user = ad::linear(t.param(hu), t.param(head.proj_w), t.param(head.proj_b));
      return ad::sum(ad::mul(ad::row_dot(user, item), t.constant(weights)));
    });
  }
  {  // total loss through the real batch graph
    ToyWorld w(seed);
    w.randomize_state(seed, 0.3);
    w.state.lambda1 = 0.7;
    w.state.lambda2 = 1.3;
    const auto batch = w.random_batch(seed);
    const Eigen::MatrixXd ctx = w.random_contexts(seed);
    auto params = w.state.parameters();
    // The loss is O(1) while some prompt gradients are ~1e-7, so a 1e-6 step
    // loses them to round-off.
    out.total =
        check_params(params, [&](Tape& t) { return w.model->batch_loss(t, batch, ctx).total; }, 1e-4);

    auto grads_of = [&](int which) {
      for (auto* p : params) p->zero_grad();
      Tape t;
      promo::BatchLosses l = w.model->batch_loss(t, batch, ctx);
      Var pick = which == 0 ? l.total : which == 1 ? l.rec : which == 2 ? l.pfpe : l.pape;
      t.backward(pick);
      std::vector<Eigen::MatrixXd> gs;
      for (auto* p : params) gs.push_back(p->grad);
      return gs;
    };
    auto gt = grads_of(0), g3 = grads_of(1), g1 = grads_of(2), g2 = grads_of(3);
    for (std::size_t j = 0; j < params.size(); ++j) {
      for (Eigen::Index i = 0; i < gt[j].size(); ++i) {
        const double want = 0.7 * g1[j].data()[i] + 1.3 * g2[j].data()[i] + g3[j].data()[i];
        out.combination = std::max(out.combination, rel_err(gt[j].data()[i], want));
      }
    }
  }
  return out;
}

}  // namespace testutil
