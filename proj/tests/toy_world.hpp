#pragma once

// A small, fully seeded prompt-tuning instance: 20 users, 10 items, items 8
// and 9 cold, d=8, k=3.

#include "promo/backbone.hpp"
#include "promo/prompt_generator.hpp"
#include "promo/prompt_tuner.hpp"
#include "test_util.hpp"

#include <memory>
#include <random>

namespace testutil {

struct ToyWorld {
  promo::InteractionLog log;
  promo::DatasetSplit split;
  promo::ItemPartition partition;
  promo::FrozenBackbone backbone;
  promo::PromptStore store;
  promo::TuneConfig tune;
  promo::PromptState state;
  std::unique_ptr<promo::PromptModel> model;

  ToyWorld(const ToyWorld&) = delete;
  ToyWorld& operator=(const ToyWorld&) = delete;

  explicit ToyWorld(std::uint64_t seed, promo::PromptVariant variant = promo::PromptVariant::kPromo) {
    using namespace promo;
    std::mt19937 g(static_cast<unsigned>(seed) + 100);
    std::uniform_real_distribution<double> u01(0.0, 1.0);
    std::vector<Row> rows;
    std::int64_t t = 0;
    // cold interactions come first so they stay in train
    for (UserId user : {1, 4, 9}) rows.push_back({user, 8, 1, t++, u01(g), u01(g)});
    rows.push_back({6, 9, 1, t++, u01(g), u01(g)});
    rows.push_back({2, 9, 0, t++, u01(g), u01(g)});
    for (int j = 0; j < 6; ++j) {
      for (UserId user = 0; user < 20; ++user) {
        rows.push_back({user, static_cast<ItemId>((user + j) % 8), 1, t++, u01(g), u01(g)});
      }
    }
    // two late cold positives become held-out test pairs
    rows.push_back({12, 9, 1, t++, u01(g), u01(g)});
    rows.push_back({13, 8, 1, t++, u01(g), u01(g)});
    log = make_log(rows, 20, 10);
    split = leave_one_out_split(log, 10);
    partition = partition_items(split.train, 3);

    BackboneConfig c;
    c.user_count = 20;
    c.item_count = 10;
    c.dim = 8;
    c.blocks = 1;
    c.ffn_dim = 8;
    c.max_seq_len = 10;
    backbone = freeze(BackboneParams::init(c, seed));

    PromptStoreConfig sc;
    sc.k = 3;
    sc.layer_dims = {{8, 8}, {8, 4}};
    store = build_prompt_store(partition, split.train, backbone, sc, seed);

    tune.variant = variant;
    tune.fusion_hidden = 8;
    tune.batch_size = 16;
    tune.adam.learning_rate = 1e-2;
    tune.eval_negatives = 3;
    state = init_prompt_state(backbone, store, tune, seed);
    model = std::make_unique<PromptModel>(backbone, store, partition, state,
                                          feedback_embeddings(backbone.params(), split));
  }

  // Random values everywhere in the prompt state, W2 included.
  void randomize_state(std::uint64_t seed, double scale = 0.5) {
    std::mt19937 g(static_cast<unsigned>(seed) + 7);
    std::normal_distribution<double> n(0.0, scale);
    for (auto* p : state.parameters()) {
      for (Eigen::Index i = 0; i < p->value.size(); ++i) p->value.data()[i] = n(g);
    }
  }

  // 16 samples mixing cold positives, warm negatives and the rest.
  std::vector<promo::TrainSample> random_batch(std::uint64_t seed, int size = 16) const {
    std::mt19937 g(static_cast<unsigned>(seed) + 13);
    std::vector<promo::TrainSample> b;
    for (int s = 0; s < size; ++s) {
      promo::TrainSample x;
      x.user = static_cast<promo::UserId>(g() % 20);
      x.context = s;
      if (s == 0) {
        x.item = 8;
        x.label = 1;
      } else if (s == 1) {
        x.item = 2;
        x.label = 0;
      } else {
        x.item = static_cast<promo::ItemId>(g() % 10);
        x.label = static_cast<int>(g() % 2);
      }
      b.push_back(x);
    }
    return b;
  }

  Eigen::MatrixXd random_contexts(std::uint64_t seed, int rows = 16) const {
    std::mt19937 g(static_cast<unsigned>(seed) + 21);
    std::normal_distribution<double> n(0.0, 0.5);
    Eigen::MatrixXd m(rows, 8);
    for (Eigen::Index i = 0; i < m.size(); ++i) m.data()[i] = n(g);
    return m;
  }
};

}  // namespace testutil
