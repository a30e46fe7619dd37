#pragma once

#include <cstdint>
#include <map>
#include <optional>
#include <string>
#include <vector>

namespace ktrace {

/// One logged learner/KC interaction. Timestamps are real seconds since an
/// arbitrary epoch; outcome is the graded correctness in {0, 1}.
struct InteractionRecord {
  std::string learner_id;
  std::string kc_id;
  int kc_index = -1;  // index into the cohort vocabulary
  double timestamp = 0.0;
  int outcome = 0;
};

/// Time-ordered interaction history of a single learner.
struct InteractionHistory {
  std::string learner_id;
  std::vector<InteractionRecord> records;

  std::size_t size() const { return records.size(); }

  /// Gap in seconds before record n (n >= 1). Non-negative by construction.
  double interval(std::size_t n) const {
    return records[n].timestamp - records[n - 1].timestamp;
  }
};

/// A set of learner histories plus the KC vocabulary shared by all of them.
/// The vocabulary is frozen once built; unseen KC ids raise.
struct Cohort {
  std::vector<InteractionHistory> histories;
  std::vector<std::string> kc_ids;                // index -> id
  std::map<std::string, int> kc_index_of;         // id -> index

  int num_kcs() const { return static_cast<int>(kc_ids.size()); }
  std::size_t num_learners() const { return histories.size(); }
  std::size_t num_interactions() const;

  /// Index of an id in the frozen vocabulary; throws for unknown ids.
  int require_kc(const std::string& kc_id) const;
};

/// Train/test split per learner, as produced by filter_and_split.
struct SplitCohort {
  std::vector<std::string> kc_ids;
  std::map<std::string, int> kc_index_of;
  std::vector<InteractionHistory> train;  // exactly train_len records each
  std::vector<InteractionHistory> test;   // exactly test_len records each
  std::size_t dropped_learners = 0;

  int num_kcs() const { return static_cast<int>(kc_ids.size()); }
};

/// Column mapping and unit flags for interaction CSV files.
struct CsvSchema {
  std::string learner_col = "learner_id";
  std::string kc_col = "kc_id";
  std::string time_col = "timestamp";
  std::string outcome_col = "correct";
  bool timestamps_in_ms = false;  // converted to seconds at ingestion
};

/// Crowd or expert annotation of a KC pair.
struct GraphAnnotation {
  std::string source_kc;
  std::string target_kc;
  enum class Relation { kPrerequisite, kSimilarity } relation = Relation::kPrerequisite;
  std::vector<double> ratings;  // 1-9 scale; empty only for expert rows
  bool expert = false;
};

/// Parses an interaction CSV (header row required) into a Cohort. Records are
/// grouped by learner and stably sorted by timestamp; the KC vocabulary is
/// built in first-seen order of the sorted stream.
Cohort parse_interactions(const std::string& path, const CsvSchema& schema = {});

/// Writes a cohort back to the canonical CSV schema
/// (learner_id,kc_id,timestamp,correct). Round-trips through
/// parse_interactions without loss.
void write_interactions(const Cohort& cohort, const std::string& path);

/// Drops learners with fewer than max(min_interactions, train_len + test_len)
/// records and slices the survivors into (first train_len, next test_len).
SplitCohort filter_and_split(const Cohort& cohort, std::size_t min_interactions,
                             std::size_t train_len, std::size_t test_len);

/// Splits a history into n_subsets disjoint sub-histories of exactly
/// subset_len records each. Whole KCs are assigned to subsets greedily so the
/// per-subset mean presentation time stays close to the history's overall
/// mean; KCs are placed in descending frequency order (ties by KC index) and
/// overfull subsets drop their latest records. The seed is unused by the
/// deterministic assignment but kept for interface stability.
std::vector<InteractionHistory> build_time_balanced_subsets(
    const InteractionHistory& history, std::size_t n_subsets,
    std::size_t subset_len, std::uint64_t seed = 0);

/// Parses annotation CSV rows (source_kc,target_kc,relation,rating,expert),
/// aggregating repeated (source, target, relation) rows into rating lists.
std::vector<GraphAnnotation> parse_annotations(const std::string& path);

/// Clamps zero inter-interaction gaps to a configurable minimum (seconds).
/// The OU kernel is degenerate at tau = 0, so simultaneous interactions are
/// flagged and nudged apart.
struct IntervalPolicy {
  double min_interval_seconds = 1.0;
  double apply(double tau) const {
    return tau < min_interval_seconds ? min_interval_seconds : tau;
  }
};

}  // namespace ktrace
