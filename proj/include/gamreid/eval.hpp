#pragma once

// Cross-camera retrieval metrics (CMC, mAP) and clustering agreement (NMI).

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <map>
#include <numeric>
#include <string>
#include <vector>

#include "gamreid/error.hpp"

namespace gamreid {

inline constexpr int kJunkIdentity = -1;

struct EvalItem {
  std::vector<double> embedding;
  int identity = 0;
  int camera = 0;
};

struct QueryRanking {
  // Valid gallery indices, nearest first, with matching distances.
  std::vector<std::size_t> order;
  std::vector<double> distances;
  std::vector<bool> relevant;
  bool skipped = false;  // no relevant item survived the exclusions

  std::size_t first_match() const {
    for (std::size_t r = 0; r < relevant.size(); ++r)
      if (relevant[r]) return r + 1;
    return 0;
  }
};

using RankingResult = std::vector<QueryRanking>;

inline double euclidean(const std::vector<double>& a, const std::vector<double>& b) {
  require(a.size() == b.size(), ErrorKind::shape,
          "embedding widths differ: " + std::to_string(a.size()) + " vs " + std::to_string(b.size()));
  double s = 0;
  for (std::size_t k = 0; k < a.size(); ++k) s += (a[k] - b[k]) * (a[k] - b[k]);
  return std::sqrt(s);
}

/// Ranks gallery items by distance to the query, dropping junk and
/// same-identity items seen by the query's own camera.
inline QueryRanking rank_gallery(const EvalItem& query, const std::vector<EvalItem>& gallery) {
  QueryRanking r;
  std::vector<std::pair<double, std::size_t>> scored;
  for (std::size_t g = 0; g < gallery.size(); ++g) {
    const auto& item = gallery[g];
    if (item.identity == kJunkIdentity) continue;
    if (item.identity == query.identity && item.camera == query.camera) continue;
    scored.emplace_back(euclidean(query.embedding, item.embedding), g);
  }
  std::sort(scored.begin(), scored.end());
  bool any = false;
  for (const auto& [d, g] : scored) {
    r.order.push_back(g);
    r.distances.push_back(d);
    const bool rel = gallery[g].identity == query.identity;
    r.relevant.push_back(rel);
    any = any || rel;
  }
  r.skipped = !any;
  return r;
}

inline RankingResult rank_all(const std::vector<EvalItem>& queries, const std::vector<EvalItem>& gallery) {
  RankingResult out;
  out.reserve(queries.size());
  for (const auto& q : queries) out.push_back(rank_gallery(q, gallery));
  return out;
}

inline std::size_t counted_queries(const RankingResult& rankings) {
  return static_cast<std::size_t>(
      std::count_if(rankings.begin(), rankings.end(), [](const QueryRanking& q) { return !q.skipped; }));
}

/// Fraction of counted queries whose first correct match is within the top k.
inline std::vector<double> cmc(const RankingResult& rankings, const std::vector<std::size_t>& ks) {
  for (auto k : ks) require(k >= 1, ErrorKind::usage, "cmc: rank k must be at least 1");
  std::vector<double> out(ks.size(), 0.0);
  const std::size_t counted = counted_queries(rankings);
  if (counted == 0) return out;
  for (const auto& q : rankings) {
    if (q.skipped) continue;
    const std::size_t first = q.first_match();
    for (std::size_t i = 0; i < ks.size(); ++i)
      if (first <= ks[i]) out[i] += 1.0;
  }
  for (auto& v : out) v /= static_cast<double>(counted);
  return out;
}

/// Mean over relevant positions r of precision@r.
inline double average_precision(const QueryRanking& q) {
  double hits = 0, total = 0;
  for (std::size_t r = 0; r < q.relevant.size(); ++r) {
    if (!q.relevant[r]) continue;
    hits += 1;
    total += hits / static_cast<double>(r + 1);
  }
  return hits > 0 ? total / hits : 0.0;
}

inline double mean_average_precision(const RankingResult& rankings) {
  const std::size_t counted = counted_queries(rankings);
  if (counted == 0) return 0.0;
  double sum = 0;
  for (const auto& q : rankings)
    if (!q.skipped) sum += average_precision(q);
  return sum / static_cast<double>(counted);
}

struct EvalMetrics {
  double rank1 = 0, rank5 = 0, rank10 = 0, mAP = 0;
  std::size_t num_queries = 0, num_skipped = 0;
};

inline EvalMetrics evaluate(const std::vector<EvalItem>& queries, const std::vector<EvalItem>& gallery) {
  const auto rankings = rank_all(queries, gallery);
  EvalMetrics m;
  const auto c = cmc(rankings, {1, 5, 10});
  m.rank1 = c[0];
  m.rank5 = c[1];
  m.rank10 = c[2];
  m.mAP = mean_average_precision(rankings);
  m.num_queries = queries.size();
  m.num_skipped = queries.size() - counted_queries(rankings);
  return m;
}

/// Normalised mutual information with the arithmetic-mean normaliser,
/// 2 I(U;V) / (H(U) + H(V)). Two single-cluster labellings score 1.
template <typename A, typename B>
double normalized_mutual_information(const std::vector<A>& u, const std::vector<B>& v) {
  require(u.size() == v.size() && !u.empty(), ErrorKind::usage, "nmi: labellings must be non-empty and equal length");
  const double n = static_cast<double>(u.size());
  std::map<A, double> cu;
  std::map<B, double> cv;
  std::map<std::pair<A, B>, double> joint;
  for (std::size_t i = 0; i < u.size(); ++i) {
    cu[u[i]] += 1;
    cv[v[i]] += 1;
    joint[{u[i], v[i]}] += 1;
  }
  auto entropy = [n](const auto& counts) {
    double h = 0;
    for (const auto& [k, c] : counts) h -= c / n * std::log(c / n);
    return h;
  };
  const double hu = entropy(cu), hv = entropy(cv);
  if (hu + hv == 0) return 1.0;
  double mi = 0;
  for (const auto& [k, c] : joint) mi += c / n * std::log(c * n / (cu[k.first] * cv[k.second]));
  return std::clamp(2 * mi / (hu + hv), 0.0, 1.0);
}

inline std::string format_metric(double v) {
  char buf[32];
  std::snprintf(buf, sizeof buf, "%.6f", v);
  return buf;
}

/// Writes metrics.txt (readable) and metrics.kv (key=value) into dir.
inline void write_metrics(const std::filesystem::path& dir, const EvalMetrics& m,
                          const std::vector<std::pair<std::string, std::string>>& extra = {}) {
  std::filesystem::create_directories(dir);
  std::vector<std::pair<std::string, std::string>> rows{
      {"rank1", format_metric(m.rank1)},
      {"rank5", format_metric(m.rank5)},
      {"rank10", format_metric(m.rank10)},
      {"mAP", format_metric(m.mAP)},
      {"num_queries", std::to_string(m.num_queries)},
      {"num_skipped", std::to_string(m.num_skipped)},
  };
  rows.insert(rows.end(), extra.begin(), extra.end());
  std::ofstream txt(dir / "metrics.txt"), kv(dir / "metrics.kv");
  require(txt && kv, ErrorKind::io, "cannot write metrics into " + dir.string());
  for (const auto& [k, v] : rows) {
    char line[96];
    std::snprintf(line, sizeof line, "%-12s %s\n", k.c_str(), v.c_str());
    txt << line;
    kv << k << '=' << v << '\n';
  }
  require(static_cast<bool>(txt) && static_cast<bool>(kv), ErrorKind::io, "metrics write failed");
}

}  // namespace gamreid
