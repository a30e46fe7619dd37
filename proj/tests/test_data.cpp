#include <cstdio>
#include <filesystem>
#include <fstream>
#include <set>

#include "doctest.h"

#include "ktrace/common.hpp"
#include "ktrace/data.hpp"

using namespace ktrace;

namespace {

std::string temp_path(const std::string& name) {
  return (std::filesystem::temp_directory_path() / name).string();
}

void write_file(const std::string& path, const std::string& text) {
  std::ofstream out(path);
  out << text;
}

}  // namespace

TEST_CASE("parse_interactions builds histories sorted by time") {
  const std::string path = temp_path("ktrace_parse_basic.csv");
  write_file(path,
             "learner_id,kc_id,timestamp,correct\n"
             "L1,add,1000.0,1\n"
             "L2,sub,2000.0,0\n"
             "L1,sub,1500.0,1\n");
  const Cohort cohort = parse_interactions(path);
  CHECK(cohort.num_learners() == 2);
  CHECK(cohort.num_kcs() == 2);
  CHECK(cohort.histories[0].learner_id == "L1");
  CHECK(cohort.histories[0].records.size() == 2);
  CHECK(cohort.histories[0].records[0].timestamp == 1000.0);
  CHECK(cohort.histories[0].records[1].kc_id == "sub");
  CHECK(cohort.require_kc("add") == 0);
  CHECK_THROWS_AS(cohort.require_kc("mul"), std::invalid_argument);
}

TEST_CASE("parse_interactions sorts out-of-order timestamps idempotently") {
  const std::string shuffled = temp_path("ktrace_parse_shuffled.csv");
  const std::string sorted = temp_path("ktrace_parse_sorted.csv");
  write_file(shuffled,
             "learner_id,kc_id,timestamp,correct\n"
             "L1,a,30,1\nL1,b,10,0\nL1,c,20,1\n");
  write_file(sorted,
             "learner_id,kc_id,timestamp,correct\n"
             "L1,b,10,0\nL1,c,20,1\nL1,a,30,1\n");
  const Cohort a = parse_interactions(shuffled);
  const Cohort b = parse_interactions(sorted);
  REQUIRE(a.histories[0].records.size() == b.histories[0].records.size());
  for (std::size_t i = 0; i < a.histories[0].records.size(); ++i) {
    CHECK(a.histories[0].records[i].kc_id == b.histories[0].records[i].kc_id);
    CHECK(a.histories[0].records[i].timestamp == b.histories[0].records[i].timestamp);
  }
}

TEST_CASE("parse_interactions rejects malformed rows with line numbers") {
  const std::string path = temp_path("ktrace_parse_bad.csv");
  write_file(path,
             "learner_id,kc_id,timestamp,correct\n"
             "L1,KC1,1000.0,2\n");
  CHECK_THROWS_WITH_AS(parse_interactions(path),
                       doctest::Contains("invalid outcome at line 2"),
                       std::invalid_argument);

  write_file(path, "learner_id,kc_id,timestamp,correct\n");
  CHECK_THROWS_AS(parse_interactions(path), std::invalid_argument);

  write_file(path, "");
  CHECK_THROWS_AS(parse_interactions(path), std::invalid_argument);

  write_file(path,
             "learner_id,kc_id,timestamp,correct\n"
             "L1,KC1,notatime,1\n");
  CHECK_THROWS_WITH_AS(parse_interactions(path), doctest::Contains("line 2"),
                       std::invalid_argument);
}

TEST_CASE("parse handles ms-to-seconds schema flag and column remapping") {
  const std::string path = temp_path("ktrace_parse_ms.csv");
  write_file(path,
             "user,skill,t_ms,ok\n"
             "L1,a,1500,1\n");
  CsvSchema schema;
  schema.learner_col = "user";
  schema.kc_col = "skill";
  schema.time_col = "t_ms";
  schema.outcome_col = "ok";
  schema.timestamps_in_ms = true;
  const Cohort cohort = parse_interactions(path, schema);
  CHECK(cohort.histories[0].records[0].timestamp == doctest::Approx(1.5));
}

TEST_CASE("parse/write round-trip preserves the record multiset") {
  const std::string path = temp_path("ktrace_roundtrip_in.csv");
  write_file(path,
             "learner_id,kc_id,timestamp,correct\n"
             "L1,a,1000.25,1\nL1,b,1000.25,0\nL2,a,999.125,1\nL1,a,2000.5,0\n");
  const Cohort first = parse_interactions(path);
  const std::string out = temp_path("ktrace_roundtrip_out.csv");
  write_interactions(first, out);
  const Cohort second = parse_interactions(out);

  auto multiset_of = [](const Cohort& c) {
    std::multiset<std::tuple<std::string, std::string, double, int>> s;
    for (const auto& h : c.histories)
      for (const auto& r : h.records)
        s.insert({r.learner_id, r.kc_id, r.timestamp, r.outcome});
    return s;
  };
  CHECK(multiset_of(first) == multiset_of(second));
}

TEST_CASE("duplicate timestamps keep input order") {
  const std::string path = temp_path("ktrace_parse_dup.csv");
  write_file(path,
             "learner_id,kc_id,timestamp,correct\n"
             "L1,first,50,1\nL1,second,50,0\n");
  const Cohort cohort = parse_interactions(path);
  CHECK(cohort.histories[0].records[0].kc_id == "first");
  CHECK(cohort.histories[0].records[1].kc_id == "second");
}

TEST_CASE("filter_and_split applies the threshold and slices exactly") {
  Cohort cohort;
  cohort.kc_ids = {"a"};
  cohort.kc_index_of["a"] = 0;
  auto learner = [&](const std::string& id, int n) {
    InteractionHistory h{id, {}};
    for (int i = 0; i < n; ++i)
      h.records.push_back({id, "a", 0, 10.0 * (i + 1), i % 2});
    return h;
  };
  cohort.histories.push_back(learner("small", 25));
  cohort.histories.push_back(learner("big", 50));

  SUBCASE("learner below min_interactions is dropped") {
    const SplitCohort split = filter_and_split(cohort, 50, 10, 10);
    CHECK(split.dropped_learners == 1);
    REQUIRE(split.train.size() == 1);
    CHECK(split.train[0].learner_id == "big");
    CHECK(split.train[0].records.size() == 10);
    CHECK(split.test[0].records.size() == 10);
    CHECK(split.train[0].records.front().timestamp == 10.0);
    CHECK(split.test[0].records.front().timestamp == 110.0);
  }
  SUBCASE("minimal split") {
    Cohort tiny;
    tiny.kc_ids = {"a"};
    tiny.kc_index_of["a"] = 0;
    tiny.histories.push_back(learner("L", 2));
    const SplitCohort split = filter_and_split(tiny, 0, 1, 1);
    CHECK(split.train[0].records.size() == 1);
    CHECK(split.test[0].records.size() == 1);
  }
  SUBCASE("no survivors is an error") {
    CHECK_THROWS_AS(filter_and_split(cohort, 1000, 10, 10), std::invalid_argument);
  }
}

namespace {

InteractionHistory multi_kc_history(int n_records, int n_kcs) {
  InteractionHistory h{"L", {}};
  Rng rng(7);
  for (int i = 0; i < n_records; ++i) {
    const int kc = static_cast<int>(rng.below(n_kcs));
    h.records.push_back({"L", "kc" + std::to_string(kc), kc, 100.0 * (i + 1), 1});
  }
  return h;
}

}  // namespace

TEST_CASE("build_time_balanced_subsets yields disjoint exact-size subsets") {
  const InteractionHistory h = multi_kc_history(150, 12);
  const auto subsets = build_time_balanced_subsets(h, 5, 30, 0);
  REQUIRE(subsets.size() == 5);
  std::set<double> seen;
  for (const auto& sub : subsets) {
    CHECK(sub.records.size() == 30);
    for (const auto& rec : sub.records) {
      CHECK(seen.insert(rec.timestamp).second);  // disjoint
    }
  }
  // union stays within the original records
  std::set<double> original;
  for (const auto& rec : h.records) original.insert(rec.timestamp);
  for (double t : seen) CHECK(original.count(t) == 1);
}

TEST_CASE("build_time_balanced_subsets is deterministic and validates input") {
  const InteractionHistory h = multi_kc_history(90, 9);
  const auto a = build_time_balanced_subsets(h, 3, 30, 1);
  const auto b = build_time_balanced_subsets(h, 3, 30, 2);
  REQUIRE(a.size() == b.size());
  for (std::size_t j = 0; j < a.size(); ++j) {
    REQUIRE(a[j].records.size() == b[j].records.size());
    for (std::size_t i = 0; i < a[j].records.size(); ++i)
      CHECK(a[j].records[i].timestamp == b[j].records[i].timestamp);
  }
  CHECK_THROWS_AS(build_time_balanced_subsets(h, 4, 30, 0), std::invalid_argument);

  SUBCASE("n_subsets=1 keeps the balanced assignment truncated") {
    const auto single = build_time_balanced_subsets(h, 1, 30, 0);
    REQUIRE(single.size() == 1);
    CHECK(single[0].records.size() == 30);
  }
}

TEST_CASE("annotation parsing aggregates repeated rows") {
  const std::string path = temp_path("ktrace_annotations.csv");
  write_file(path,
             "source_kc,target_kc,relation,rating,expert\n"
             "a,b,prerequisite,7,0\n"
             "a,b,prerequisite,9,0\n"
             "a,c,similarity,5,0\n"
             "b,c,prerequisite,,1\n");
  const auto annotations = parse_annotations(path);
  REQUIRE(annotations.size() == 3);
  CHECK(annotations[0].ratings.size() == 2);
  CHECK(annotations[0].relation == GraphAnnotation::Relation::kPrerequisite);
  CHECK(annotations[1].relation == GraphAnnotation::Relation::kSimilarity);
  CHECK(annotations[2].expert);
  CHECK(annotations[2].ratings.empty());
}

TEST_CASE("crowd annotation without ratings is rejected") {
  const std::string path = temp_path("ktrace_annotations_bad.csv");
  write_file(path,
             "source_kc,target_kc,relation,rating,expert\n"
             "a,b,prerequisite,,0\n");
  CHECK_THROWS_AS(parse_annotations(path), std::invalid_argument);
}
