#include "ktrace/data.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <fstream>
#include <limits>
#include <numeric>
#include <sstream>
#include <stdexcept>

namespace ktrace {

std::size_t Cohort::num_interactions() const {
  std::size_t n = 0;
  for (const auto& h : histories) n += h.records.size();
  return n;
}

int Cohort::require_kc(const std::string& kc_id) const {
  auto it = kc_index_of.find(kc_id);
  if (it == kc_index_of.end())
    throw std::invalid_argument("unknown KC id '" + kc_id +
                                "': vocabulary is frozen after ingestion");
  return it->second;
}

namespace {

std::vector<std::string> split_csv_line(const std::string& line) {
  std::vector<std::string> fields;
  std::string cur;
  for (char c : line) {
    if (c == ',') {
      fields.push_back(cur);
      cur.clear();
    } else if (c != '\r') {
      cur.push_back(c);
    }
  }
  fields.push_back(cur);
  return fields;
}

int find_column(const std::vector<std::string>& header, const std::string& name,
                const std::string& path) {
  auto it = std::find(header.begin(), header.end(), name);
  if (it == header.end())
    throw std::invalid_argument(path + ": header is missing column '" + name + "'");
  return static_cast<int>(it - header.begin());
}

double parse_double(const std::string& s, const std::string& path, std::size_t line_no,
                    const std::string& what) {
  try {
    std::size_t pos = 0;
    const double v = std::stod(s, &pos);
    if (pos != s.size() || !std::isfinite(v)) throw std::invalid_argument(s);
    return v;
  } catch (const std::exception&) {
    throw std::invalid_argument(path + ": invalid " + what + " '" + s + "' at line " +
                                std::to_string(line_no));
  }
}

}  // namespace

Cohort parse_interactions(const std::string& path, const CsvSchema& schema) {
  std::ifstream in(path);
  if (!in) throw std::invalid_argument("cannot open interaction file: " + path);

  std::string line;
  if (!std::getline(in, line))
    throw std::invalid_argument(path + ": empty file");
  const auto header = split_csv_line(line);
  const int c_learner = find_column(header, schema.learner_col, path);
  const int c_kc = find_column(header, schema.kc_col, path);
  const int c_time = find_column(header, schema.time_col, path);
  const int c_outcome = find_column(header, schema.outcome_col, path);
  const int n_cols = static_cast<int>(header.size());

  struct RawRecord {
    std::string learner, kc;
    double time;
    int outcome;
    std::size_t input_pos;
  };
  std::vector<RawRecord> raw;
  std::size_t line_no = 1;
  while (std::getline(in, line)) {
    ++line_no;
    if (line.empty() || line == "\r") continue;
    const auto fields = split_csv_line(line);
    if (static_cast<int>(fields.size()) != n_cols)
      throw std::invalid_argument(path + ": expected " + std::to_string(n_cols) +
                                  " fields but got " + std::to_string(fields.size()) +
                                  " at line " + std::to_string(line_no));
    double t = parse_double(fields[c_time], path, line_no, "timestamp");
    if (schema.timestamps_in_ms) t *= 1e-3;
    const std::string& oc = fields[c_outcome];
    if (oc != "0" && oc != "1")
      throw std::invalid_argument(path + ": invalid outcome at line " +
                                  std::to_string(line_no));
    raw.push_back({fields[c_learner], fields[c_kc], t, oc == "1" ? 1 : 0, raw.size()});
  }
  if (raw.empty()) throw std::invalid_argument(path + ": no interaction rows");

  // Stable sort by (learner-first-seen, timestamp, input order). Duplicate
  // (learner, timestamp) pairs keep their input order.
  std::vector<std::string> learner_order;
  std::map<std::string, std::size_t> learner_pos;
  for (const auto& r : raw) {
    if (learner_pos.emplace(r.learner, learner_order.size()).second)
      learner_order.push_back(r.learner);
  }
  std::stable_sort(raw.begin(), raw.end(), [&](const RawRecord& a, const RawRecord& b) {
    const std::size_t la = learner_pos[a.learner], lb = learner_pos[b.learner];
    if (la != lb) return la < lb;
    return a.time < b.time;
  });

  Cohort cohort;
  cohort.histories.reserve(learner_order.size());
  for (const auto& id : learner_order)
    cohort.histories.push_back({id, {}});
  for (const auto& r : raw) {
    int kc_idx;
    auto it = cohort.kc_index_of.find(r.kc);
    if (it == cohort.kc_index_of.end()) {
      kc_idx = static_cast<int>(cohort.kc_ids.size());
      cohort.kc_index_of.emplace(r.kc, kc_idx);
      cohort.kc_ids.push_back(r.kc);
    } else {
      kc_idx = it->second;
    }
    auto& hist = cohort.histories[learner_pos[r.learner]];
    hist.records.push_back({r.learner, r.kc, kc_idx, r.time, r.outcome});
  }
  return cohort;
}

void write_interactions(const Cohort& cohort, const std::string& path) {
  std::ofstream out(path);
  if (!out) throw std::invalid_argument("cannot write interaction file: " + path);
  out << "learner_id,kc_id,timestamp,correct\n";
  char buf[64];
  for (const auto& h : cohort.histories) {
    for (const auto& r : h.records) {
      std::snprintf(buf, sizeof(buf), "%.17g", r.timestamp);
      out << r.learner_id << ',' << r.kc_id << ',' << buf << ',' << r.outcome << '\n';
    }
  }
}

SplitCohort filter_and_split(const Cohort& cohort, std::size_t min_interactions,
                             std::size_t train_len, std::size_t test_len) {
  if (train_len < 1 || test_len < 1)
    throw std::invalid_argument("filter_and_split: train_len and test_len must be >= 1");
  const std::size_t need = std::max(min_interactions, train_len + test_len);

  SplitCohort split;
  split.kc_ids = cohort.kc_ids;
  split.kc_index_of = cohort.kc_index_of;
  for (const auto& h : cohort.histories) {
    if (h.records.size() < need) {
      ++split.dropped_learners;
      continue;
    }
    InteractionHistory train{h.learner_id, {}}, test{h.learner_id, {}};
    train.records.assign(h.records.begin(), h.records.begin() + train_len);
    test.records.assign(h.records.begin() + train_len,
                        h.records.begin() + train_len + test_len);
    split.train.push_back(std::move(train));
    split.test.push_back(std::move(test));
  }
  if (split.train.empty())
    throw std::invalid_argument("filter_and_split: no learners survive the filter");
  return split;
}

std::vector<InteractionHistory> build_time_balanced_subsets(
    const InteractionHistory& history, std::size_t n_subsets,
    std::size_t subset_len, std::uint64_t /*seed*/) {
  if (n_subsets < 1 || subset_len < 1)
    throw std::invalid_argument("build_time_balanced_subsets: need n_subsets, subset_len >= 1");
  if (history.records.size() < n_subsets * subset_len)
    throw std::invalid_argument("build_time_balanced_subsets: history has " +
                                std::to_string(history.records.size()) +
                                " records, need at least " +
                                std::to_string(n_subsets * subset_len));

  // Per-KC record positions, counts, and mean timestamps.
  std::map<int, std::vector<std::size_t>> kc_positions;
  for (std::size_t i = 0; i < history.records.size(); ++i)
    kc_positions[history.records[i].kc_index].push_back(i);

  struct KcInfo {
    int kc;
    std::size_t count;
    double sum_time;
  };
  std::vector<KcInfo> kcs;
  double total_time = 0.0;
  for (const auto& [kc, positions] : kc_positions) {
    double s = 0.0;
    for (std::size_t p : positions) s += history.records[p].timestamp;
    kcs.push_back({kc, positions.size(), s});
    total_time += s;
  }
  const double global_mean = total_time / static_cast<double>(history.records.size());
  std::sort(kcs.begin(), kcs.end(), [](const KcInfo& a, const KcInfo& b) {
    if (a.count != b.count) return a.count > b.count;
    return a.kc < b.kc;
  });

  // Placement runs in two phases. The fill phase walks KCs in descending
  // frequency order and gives each to the least-loaded subset, breaking load
  // ties toward the subset whose mean presentation time lands closest to the
  // global mean. The refinement phase then moves whole KCs between subsets
  // whenever that strictly improves the mean-time balance without dropping a
  // subset below subset_len.
  std::vector<double> sub_sum(n_subsets, 0.0);
  std::vector<std::size_t> sub_count(n_subsets, 0);
  std::map<int, std::size_t> subset_of_kc;
  for (const auto& info : kcs) {
    std::size_t min_count = sub_count[0];
    for (std::size_t j = 1; j < n_subsets; ++j) min_count = std::min(min_count, sub_count[j]);
    std::size_t best = n_subsets;
    double best_dev = 0.0;
    for (std::size_t j = 0; j < n_subsets; ++j) {
      if (sub_count[j] != min_count) continue;
      const double mean_j = (sub_sum[j] + info.sum_time) /
                            static_cast<double>(sub_count[j] + info.count);
      const double dev = std::fabs(mean_j - global_mean);
      if (best == n_subsets || dev < best_dev) {
        best = j;
        best_dev = dev;
      }
    }
    sub_sum[best] += info.sum_time;
    sub_count[best] += info.count;
    subset_of_kc[info.kc] = best;
  }

  auto balance_objective = [&]() {
    double total = 0.0;
    for (std::size_t j = 0; j < n_subsets; ++j) {
      if (sub_count[j] == 0) return std::numeric_limits<double>::infinity();
      total += std::fabs(sub_sum[j] / static_cast<double>(sub_count[j]) - global_mean);
    }
    return total;
  };
  for (int sweep = 0; sweep < 3; ++sweep) {
    bool moved = false;
    for (const auto& info : kcs) {
      const std::size_t from = subset_of_kc[info.kc];
      // A move must keep the source subset fillable and strictly improve the
      // deficit-then-balance objective.
      for (std::size_t to = 0; to < n_subsets; ++to) {
        if (to == from) continue;
        const bool fixes_deficit =
            sub_count[to] < subset_len && sub_count[from] - info.count >= subset_len;
        const double before = balance_objective();
        sub_sum[from] -= info.sum_time;
        sub_count[from] -= info.count;
        sub_sum[to] += info.sum_time;
        sub_count[to] += info.count;
        const bool keeps_feasible = sub_count[from] >= subset_len;
        const double after = balance_objective();
        if (fixes_deficit || (keeps_feasible && sub_count[to] <= subset_len + info.count &&
                              after + 1e-12 < before)) {
          subset_of_kc[info.kc] = to;
          moved = true;
          break;
        }
        sub_sum[from] += info.sum_time;
        sub_count[from] += info.count;
        sub_sum[to] -= info.sum_time;
        sub_count[to] -= info.count;
      }
    }
    if (!moved) break;
  }

  std::vector<std::vector<std::size_t>> subset_positions(n_subsets);
  for (std::size_t i = 0; i < history.records.size(); ++i)
    subset_positions[subset_of_kc[history.records[i].kc_index]].push_back(i);

  // Whole-KC assignment rarely lands on exact sizes: overfull subsets drop
  // their latest extras into a spare pool, and underfull subsets are padded
  // from that pool, pulling whichever spare keeps the subset mean closest to
  // the global mean.
  std::vector<std::size_t> spare;
  for (std::size_t j = 0; j < n_subsets; ++j) {
    auto& positions = subset_positions[j];
    if (positions.size() <= subset_len) continue;
    std::vector<std::size_t> by_time = positions;
    std::stable_sort(by_time.begin(), by_time.end(), [&](std::size_t a, std::size_t b) {
      return history.records[a].timestamp < history.records[b].timestamp;
    });
    spare.insert(spare.end(), by_time.begin() + subset_len, by_time.end());
    by_time.resize(subset_len);
    std::sort(by_time.begin(), by_time.end());
    positions = by_time;
  }
  std::sort(spare.begin(), spare.end());
  for (std::size_t j = 0; j < n_subsets; ++j) {
    auto& positions = subset_positions[j];
    while (positions.size() < subset_len) {
      if (spare.empty())
        throw std::invalid_argument(
            "build_time_balanced_subsets: insufficient records after placement");
      double sum = 0.0;
      for (std::size_t p : positions) sum += history.records[p].timestamp;
      std::size_t best = 0;
      double best_dev = std::numeric_limits<double>::infinity();
      for (std::size_t s = 0; s < spare.size(); ++s) {
        const double mean = (sum + history.records[spare[s]].timestamp) /
                            static_cast<double>(positions.size() + 1);
        const double dev = std::fabs(mean - global_mean);
        if (dev < best_dev) {
          best = s;
          best_dev = dev;
        }
      }
      positions.push_back(spare[best]);
      spare.erase(spare.begin() + best);
    }
    std::sort(positions.begin(), positions.end());
  }

  std::vector<InteractionHistory> subsets;
  subsets.reserve(n_subsets);
  for (std::size_t j = 0; j < n_subsets; ++j) {
    InteractionHistory sub{history.learner_id, {}};
    for (std::size_t p : subset_positions[j]) sub.records.push_back(history.records[p]);
    subsets.push_back(std::move(sub));
  }
  return subsets;
}

std::vector<GraphAnnotation> parse_annotations(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw std::invalid_argument("cannot open annotation file: " + path);
  std::string line;
  if (!std::getline(in, line)) throw std::invalid_argument(path + ": empty file");
  const auto header = split_csv_line(line);
  const int c_src = find_column(header, "source_kc", path);
  const int c_dst = find_column(header, "target_kc", path);
  const int c_rel = find_column(header, "relation", path);
  const int c_rating = find_column(header, "rating", path);
  const int c_expert = find_column(header, "expert", path);

  std::vector<GraphAnnotation> annotations;
  std::map<std::tuple<std::string, std::string, int>, std::size_t> index;
  std::size_t line_no = 1;
  while (std::getline(in, line)) {
    ++line_no;
    if (line.empty() || line == "\r") continue;
    const auto fields = split_csv_line(line);
    if (fields.size() != header.size())
      throw std::invalid_argument(path + ": malformed row at line " +
                                  std::to_string(line_no));
    GraphAnnotation::Relation rel;
    if (fields[c_rel] == "prerequisite")
      rel = GraphAnnotation::Relation::kPrerequisite;
    else if (fields[c_rel] == "similarity")
      rel = GraphAnnotation::Relation::kSimilarity;
    else
      throw std::invalid_argument(path + ": unknown relation '" + fields[c_rel] +
                                  "' at line " + std::to_string(line_no));
    const bool expert = fields[c_expert] == "1" || fields[c_expert] == "true";

    const auto key = std::make_tuple(fields[c_src], fields[c_dst], static_cast<int>(rel));
    auto it = index.find(key);
    if (it == index.end()) {
      GraphAnnotation a;
      a.source_kc = fields[c_src];
      a.target_kc = fields[c_dst];
      a.relation = rel;
      a.expert = expert;
      index.emplace(key, annotations.size());
      annotations.push_back(std::move(a));
      it = index.find(key);
    }
    auto& a = annotations[it->second];
    a.expert = a.expert || expert;
    if (!fields[c_rating].empty()) {
      const double r = parse_double(fields[c_rating], path, line_no, "rating");
      if (r < 1.0 || r > 9.0)
        throw std::invalid_argument(path + ": rating outside [1,9] at line " +
                                    std::to_string(line_no));
      a.ratings.push_back(r);
    }
  }
  for (const auto& a : annotations)
    if (!a.expert && a.ratings.empty())
      throw std::invalid_argument(path + ": crowd annotation " + a.source_kc + "->" +
                                  a.target_kc + " has no ratings");
  return annotations;
}

}  // namespace ktrace
