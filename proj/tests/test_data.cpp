#include "promo/data.hpp"
#include "test_util.hpp"

#include <doctest.h>

#include <fstream>
#include <map>
#include <set>

using namespace promo;
using testutil::make_log;

namespace {

std::filesystem::path write_tmp(const std::string& name, const std::string& text) {
  auto p = std::filesystem::temp_directory_path() / ("promo_test_" + name);
  std::ofstream(p) << text;
  return p;
}

}  // namespace

TEST_CASE("generic csv singleton") {
  auto p = write_tmp("one.csv", "user,item,label,timestamp,stay_time,interact_score\n0,0,1,5,0.2,0.1\n");
  auto log = load_interactions(p, LogFormat::kGenericCsv);
  CHECK(log.size() == 1);
  CHECK(log.user_count == 1);
  CHECK(log.item_count == 1);
  CHECK(log.interactions[0].timestamp == 5);
  CHECK(log.interactions[0].stay_time == doctest::Approx(0.2));
}

TEST_CASE("empty and malformed files are rejected") {
  auto empty = write_tmp("empty.csv", "user,item,label,timestamp,stay_time,interact_score\n");
  CHECK_THROWS_AS(load_interactions(empty, LogFormat::kGenericCsv), DataError);
  auto empty_tab = write_tmp("empty.tab", "");
  CHECK_THROWS_AS(load_interactions(empty_tab, LogFormat::kMovielensTab), DataError);

  auto bad = write_tmp("bad.tab", "1\t2\t5\t100\n1\tx\t4\t101\n");
  try {
    load_interactions(bad, LogFormat::kMovielensTab);
    FAIL("expected a parse error");
  } catch (const DataError& e) {
    CHECK(std::string(e.what()).find(":2") != std::string::npos);
  }
  CHECK_THROWS_AS(load_interactions("/nonexistent/u.data", LogFormat::kMovielensTab), DataError);
}

TEST_CASE("movielens rows map ratings and reindex densely") {
  auto p = write_tmp("ml.tab", "10\t7\t5\t3\n10\t9\t1\t1\n20\t7\t4\t2\n");
  auto log = load_interactions(p, LogFormat::kMovielensTab);
  REQUIRE(log.size() == 3);
  CHECK(log.user_count == 2);
  CHECK(log.item_count == 2);
  // time order
  CHECK(log.interactions[0].timestamp == 1);
  CHECK(log.interactions[2].timestamp == 3);
  // rating 5 is the default positive threshold
  CHECK(log.interactions[2].label == 1);
  CHECK(log.interactions[1].label == 0);
  CHECK(log.interactions[2].stay_time == doctest::Approx(1.0));
  CHECK(log.interactions[0].stay_time == doctest::Approx(0.0));
  LoadOptions four;
  four.positive_min_rating = 4;
  auto log4 = load_interactions(p, LogFormat::kMovielensTab, four);
  CHECK(log4.interactions[1].label == 1);
}

TEST_CASE("leave-one-out on three positives") {
  auto log = make_log({{0, 1, 1, 1}, {0, 2, 1, 2}, {0, 3, 1, 3}}, 1, 4);
  auto s = leave_one_out_split(log, 50);
  REQUIRE(s.train.size() == 1);
  CHECK(s.train.interactions[0].item == 1);
  REQUIRE(s.validation.size() == 1);
  CHECK(s.validation.interactions[0].item == 2);
  REQUIRE(s.test.size() == 1);
  CHECK(s.test.interactions[0].item == 3);
}

TEST_CASE("users with two positives stay in train") {
  auto log = make_log({{0, 1, 1, 1}, {0, 2, 1, 2}, {1, 0, 1, 1}, {1, 1, 1, 2}, {1, 2, 1, 3}}, 2, 3);
  auto s = leave_one_out_split(log, 50);
  int user0_train = 0;
  for (const auto& x : s.train.interactions) user0_train += x.user == 0;
  CHECK(user0_train == 2);
  for (const auto& x : s.test.interactions) CHECK(x.user != 0);
  for (const auto& x : s.validation.interactions) CHECK(x.user != 0);
}

TEST_CASE("sequences keep the most recent max_seq_len items") {
  std::vector<testutil::Row> rows;
  for (int t = 0; t < 10; ++t) rows.push_back({0, t, 1, t});
  auto s = leave_one_out_split(make_log(rows, 1, 10), 4);
  CHECK(s.full_train_sequences[0].size() == 8);
  CHECK(s.user_sequences[0] == std::vector<ItemId>{4, 5, 6, 7});
  CHECK(s.context_sequence(0, true) == std::vector<ItemId>{5, 6, 7, 8});
}

TEST_CASE("partition boundary at the threshold") {
  std::vector<testutil::Row> rows;
  for (int u = 0; u < 21; ++u) rows.push_back({u, 0, 1, u});        // 21 positives
  for (int u = 0; u < 19; ++u) rows.push_back({u, 1, 1, 100 + u});  // 19
  for (int u = 0; u < 20; ++u) rows.push_back({u, 2, 1, 200 + u});  // 20
  auto p = partition_items(make_log(rows, 21, 4), 20);
  CHECK(!p.cold(0));
  CHECK(p.cold(1));
  CHECK(p.cold(2));
  CHECK(p.cold(3));  // no positives
  CHECK(p.cold_items.size() + p.warm_items.size() == 4);
  CHECK(p.cold_warm_ratio() == doctest::Approx(3.0));
}

TEST_CASE("eval negatives: pigeonhole error, determinism, purity") {
  std::vector<testutil::Row> rows;
  // user 0 touches every item but one
  for (int i = 0; i < 50; ++i) rows.push_back({0, i, 1, i});
  for (int i = 0; i < 3; ++i) rows.push_back({1, i, 1, 100 + i});
  auto s = leave_one_out_split(make_log(rows, 2, 51), 50);
  try {
    sample_eval_negatives(s, 100, 1);
    FAIL("expected an insufficient-negatives error");
  } catch (const DataError& e) {
    CHECK(std::string(e.what()).find("user 0") != std::string::npos);
  }
  auto a = sample_eval_negatives(s, 1, 3);
  auto b = sample_eval_negatives(s, 1, 3);
  REQUIRE(a.lists.size() == b.lists.size());
  for (std::size_t j = 0; j < a.lists.size(); ++j) CHECK(a.lists[j].items == b.lists[j].items);
  CHECK(a.lists[0].items.size() == 2);
}

TEST_CASE("generic log round-trips through its text form") {
  auto log = make_log({{0, 1, 1, 1, 0.25, 0.5}, {1, 0, 0, 2, 0.0, 1.0}}, 2, 2);
  auto p = std::filesystem::temp_directory_path() / "promo_test_rt.csv";
  write_log(log, p);
  auto back = read_log(p);
  CHECK(back.interactions == log.interactions);
}

TEST_CASE("MovieLens 100K counts, split conservation and candidates") {
  if (!testutil::have_movielens()) {
    MESSAGE("MovieLens 100K not found under " << testutil::data_dir() << "; skipped");
    return;
  }
  auto log = load_interactions(testutil::data_dir() / "ml-100k" / "u.data", LogFormat::kMovielensTab);
  CHECK(log.user_count == 943);
  CHECK(log.item_count == 1682);
  CHECK(log.size() == 100000);
  auto s = leave_one_out_split(log, 50);

  // Independent count: users with >= 3 positives.
  std::map<UserId, int> per_user;
  std::size_t positives = 0;
  for (const auto& x : log.interactions) {
    if (x.label == 1) {
      ++per_user[x.user];
      ++positives;
    }
  }
  std::size_t eligible = 0;
  for (auto& [u, n] : per_user) eligible += n >= 3;
  CHECK(s.test.size() == eligible);
  CHECK(s.validation.size() == eligible);
  CHECK(s.train.size() + s.validation.size() + s.test.size() == positives);

  // Temporal correctness.
  std::map<UserId, std::int64_t> last_train;
  for (const auto& x : s.train.interactions) last_train[x.user] = std::max(last_train[x.user], x.timestamp);
  for (const auto& x : s.test.interactions) CHECK(x.timestamp >= last_train[x.user]);

  auto c = sample_eval_negatives(s, 100, 7);
  std::map<UserId, std::set<ItemId>> history;
  for (const auto& x : log.interactions) history[x.user].insert(x.item);
  bool all_101 = true, pure = true;
  for (const auto& l : c.lists) {
    all_101 &= l.items.size() == 101;
    for (ItemId i : l.items) {
      if (i != l.target && history[l.user].count(i)) pure = false;
    }
  }
  CHECK(all_101);
  CHECK(pure);
}
