#pragma once

// Agglomerative clustering over a centroid memory bank: cluster-membership
// loss, balanced merge distance and the bottom-up merge step.

#include <cmath>
#include <istream>
#include <limits>
#include <ostream>
#include <span>
#include <string>
#include <vector>

#include "gamreid/idl.hpp"
#include "gamreid/ops.hpp"

namespace gamreid {

class MemoryBank {
 public:
  MemoryBank() = default;

  /// One singleton cluster per instance; rows are normalised.
  template <std::floating_point T>
  static MemoryBank singletons(const BasicTensor<T>& features) {
    require(features.dim() == 2 && features.extent(0) > 0, ErrorKind::shape,
            "memory bank needs [n, D] features, got " + shape_str(features.shape()));
    const std::size_t n = features.extent(0);
    std::vector<std::size_t> assignment(n);
    for (std::size_t i = 0; i < n; ++i) assignment[i] = i;
    return MemoryBank(features, std::vector<std::size_t>(n, 1), std::move(assignment));
  }

  /// Explicit state; centroids are normalised and every invariant is checked.
  template <std::floating_point T>
  MemoryBank(const BasicTensor<T>& centroids, std::vector<std::size_t> sizes, std::vector<std::size_t> assignment)
      : sizes_(std::move(sizes)), assignment_(std::move(assignment)) {
    require(centroids.dim() == 2, ErrorKind::shape, "centroids must be [|M|, D]");
    d_ = centroids.extent(1);
    centroids_.assign(centroids.data().begin(), centroids.data().end());
    require(sizes_.size() == centroids.extent(0), ErrorKind::integrity, "one size per centroid required");
    for (std::size_t c = 0; c < num_clusters(); ++c) normalize_row(c);
    check_invariants();
  }

  std::size_t num_clusters() const { return sizes_.size(); }
  std::size_t num_instances() const { return assignment_.size(); }
  std::size_t dim() const { return d_; }
  std::span<const double> centroid(std::size_t c) const { return {centroids_.data() + c * d_, d_}; }
  const std::vector<double>& centroids() const { return centroids_; }
  const std::vector<std::size_t>& sizes() const { return sizes_; }
  const std::vector<std::size_t>& assignment() const { return assignment_; }

  void check_invariants(double tol = 1e-9) const {
    const std::size_t m = num_clusters();
    require(m > 0, ErrorKind::integrity, "memory bank has no clusters");
    std::vector<std::size_t> counts(m, 0);
    for (auto b : assignment_) {
      require(b < m, ErrorKind::integrity,
              "assignment " + std::to_string(b) + " out of range for " + std::to_string(m) + " clusters");
      ++counts[b];
    }
    for (std::size_t c = 0; c < m; ++c) {
      require(counts[c] > 0, ErrorKind::integrity, "cluster " + std::to_string(c) + " is empty");
      require(counts[c] == sizes_[c], ErrorKind::integrity, "cluster " + std::to_string(c) + " size disagrees");
      double ss = 0;
      for (double v : centroid(c)) ss += v * v;
      require(std::abs(std::sqrt(ss) - 1.0) <= tol, ErrorKind::integrity,
              "centroid " + std::to_string(c) + " is not unit norm");
    }
  }

  /// Recomputes every centroid as the normalised mean of its members.
  template <std::floating_point T>
  void update(const BasicTensor<T>& embeddings) {
    require(embeddings.dim() == 2 && embeddings.extent(0) == num_instances() && embeddings.extent(1) == d_,
            ErrorKind::shape,
            "update_bank expects [" + std::to_string(num_instances()) + ", " + std::to_string(d_) +
                "] embeddings, got " + shape_str(embeddings.shape()));
    std::fill(centroids_.begin(), centroids_.end(), 0.0);
    for (std::size_t i = 0; i < num_instances(); ++i) {
      double* r = centroids_.data() + assignment_[i] * d_;
      for (std::size_t k = 0; k < d_; ++k) r[k] += static_cast<double>(embeddings[i * d_ + k]);
    }
    for (std::size_t c = 0; c < num_clusters(); ++c) {
      double* r = centroids_.data() + c * d_;
      for (std::size_t k = 0; k < d_; ++k) r[k] /= static_cast<double>(sizes_[c]);
      normalize_row(c);
    }
  }

 private:
  friend struct MergeAccess;

  void normalize_row(std::size_t c) {
    double* r = centroids_.data() + c * d_;
    double ss = 0;
    for (std::size_t k = 0; k < d_; ++k) ss += r[k] * r[k];
    const double norm = std::max(std::sqrt(ss), kNormEpsilon);
    for (std::size_t k = 0; k < d_; ++k) r[k] /= norm;
  }

  std::size_t d_ = 0;
  std::vector<double> centroids_;
  std::vector<std::size_t> sizes_;
  std::vector<std::size_t> assignment_;
};

template <std::floating_point T>
void update_bank(MemoryBank& bank, const BasicTensor<T>& embeddings) {
  bank.update(embeddings);
}

struct MergeSchedule {
  double merge_fraction = 0.04;
  double lambda = 0.0;
  // Stop once the cluster count reaches this floor; 0 means ceil(0.1 n).
  std::size_t min_clusters = 0;

  void validate() const {
    require(merge_fraction > 0 && merge_fraction < 1, ErrorKind::config, "merge_fraction must lie in (0,1)");
    require(lambda >= 0 && std::isfinite(lambda), ErrorKind::config, "lambda must be a finite non-negative number");
  }

  /// Pair-merges per stage, relative to the original instance count.
  std::size_t merges_per_stage(std::size_t n) const {
    return std::max<std::size_t>(1, static_cast<std::size_t>(std::ceil(merge_fraction * static_cast<double>(n))));
  }

  std::size_t floor(std::size_t n) const {
    if (min_clusters > 0) return min_clusters;
    return std::max<std::size_t>(1, static_cast<std::size_t>(std::ceil(0.1 * static_cast<double>(n))));
  }
};

/// Softmax of M f / tau over clusters.
template <typename Span>
std::vector<double> p_cluster(const Span& f, const MemoryBank& bank, double tau) {
  require(tau > 0, ErrorKind::config, "temperature must be positive");
  require(f.size() == bank.dim(), ErrorKind::shape, "feature width does not match the memory bank");
  const std::size_t m = bank.num_clusters();
  std::vector<double> z(m);
  for (std::size_t c = 0; c < m; ++c) {
    const auto r = bank.centroid(c);
    double s = 0;
    for (std::size_t k = 0; k < r.size(); ++k) s += r[k] * static_cast<double>(f[k]);
    z[c] = s / tau;
  }
  const double lse = detail::logsumexp(z, m);
  for (auto& v : z) v = std::exp(v - lse);
  return z;
}

/// -sum_b log P(beta_b | x_b) over the batch, with centroids held constant.
template <std::floating_point T>
BasicTensor<T> acl_loss(const BasicTensor<T>& embeddings, const std::vector<std::size_t>& assignments,
                        const MemoryBank& bank, double tau, Reduction reduction = Reduction::mean) {
  require(tau > 0, ErrorKind::config, "acl temperature must be positive");
  const std::size_t B = assignments.size(), D = bank.dim(), m = bank.num_clusters();
  require(B > 0, ErrorKind::usage, "acl_loss: empty batch");
  require(embeddings.shape() == Shape({B, D}), ErrorKind::shape,
          "acl_loss expects [" + std::to_string(B) + ", " + std::to_string(D) + "] embeddings, got " +
              shape_str(embeddings.shape()));
  for (auto a : assignments)
    require(a < m, ErrorKind::integrity,
            "stale cluster assignment " + std::to_string(a) + " (bank has " + std::to_string(m) + " clusters)");

  std::vector<double> coef(B * m);
  double loss = 0;
  for (std::size_t b = 0; b < B; ++b) {
    std::vector<double> z(m);
    for (std::size_t c = 0; c < m; ++c) {
      const auto r = bank.centroid(c);
      double s = 0;
      for (std::size_t k = 0; k < D; ++k) s += r[k] * static_cast<double>(embeddings[b * D + k]);
      z[c] = s / tau;
    }
    const double lse = detail::logsumexp(z, m);
    loss -= z[assignments[b]] - lse;
    for (std::size_t c = 0; c < m; ++c) coef[b * m + c] = std::exp(z[c] - lse);
    coef[b * m + assignments[b]] -= 1.0;
  }
  const double factor = reduction == Reduction::mean ? 1.0 / static_cast<double>(B) : 1.0;
  loss *= factor;

  auto en = embeddings.node_ptr();
  auto frozen = std::make_shared<std::vector<double>>(bank.centroids());
  return make_result<T>({}, {static_cast<T>(loss)}, {embeddings},
                        [en, frozen, coef = std::move(coef), B, D, m, tau, factor](detail::Node<T>& self) {
                          auto* dx = grad_sink(en);
                          if (!dx) return;
                          const double g = self.grad[0] * factor / tau;
                          for (std::size_t b = 0; b < B; ++b)
                            for (std::size_t c = 0; c < m; ++c) {
                              const double a = coef[b * m + c] * g;
                              const double* r = frozen->data() + c * D;
                              for (std::size_t k = 0; k < D; ++k) (*dx)[b * D + k] += static_cast<T>(a * r[k]);
                            }
                        });
}

/// Euclidean distance.
template <typename A, typename B>
double pairwise_d0(const A& a, const B& b) {
  require(a.size() == b.size(), ErrorKind::shape, "pairwise_d0: width mismatch");
  double s = 0;
  for (std::size_t k = 0; k < a.size(); ++k) {
    const double d = static_cast<double>(a[k]) - static_cast<double>(b[k]);
    s += d * d;
  }
  return std::sqrt(s);
}

/// Plain distance plus a penalty on the size of the merged cluster.
inline double balanced_distance(double d0, std::size_t size_i, std::size_t size_j, double lambda) {
  return d0 + lambda * static_cast<double>(size_i + size_j);
}

/// Cluster indices refer to the compact labelling just before that merge.
struct MergeRecord {
  std::size_t a, b;
  double distance;
  bool operator==(const MergeRecord&) const = default;
};

struct MergeAccess {
  static std::vector<double>& centroids(MemoryBank& m) { return m.centroids_; }
  static std::vector<std::size_t>& sizes(MemoryBank& m) { return m.sizes_; }
  static std::vector<std::size_t>& assignment(MemoryBank& m) { return m.assignment_; }
};

/// Performs n_c sequential greedy merges of the closest pair under
/// balanced_distance. Ties go to the lexicographically smallest pair; the
/// merged cluster keeps the smaller index and later indices shift down.
inline std::vector<MergeRecord> merge_step(MemoryBank& bank, std::size_t n_c, double lambda) {
  require(n_c >= 1, ErrorKind::usage, "merge_step: merge count must be positive");
  require(n_c < bank.num_clusters(), ErrorKind::usage,
          "merge_step: cannot perform " + std::to_string(n_c) + " merges with " +
              std::to_string(bank.num_clusters()) + " clusters");
  require(lambda >= 0, ErrorKind::config, "lambda must be non-negative");
  auto& cent = MergeAccess::centroids(bank);
  auto& sizes = MergeAccess::sizes(bank);
  auto& assign = MergeAccess::assignment(bank);
  const std::size_t D = bank.dim();
  const std::size_t m = sizes.size();

  // Slots keep their original order, so scanning live slots in order is the
  // same as scanning compact labels in order.
  std::vector<bool> live(m, true);
  std::vector<double> dist(m * m, 0.0);
  auto row = [&](std::size_t c) { return std::span<const double>(cent.data() + c * D, D); };
  for (std::size_t i = 0; i < m; ++i)
    for (std::size_t j = i + 1; j < m; ++j) dist[i * m + j] = dist[j * m + i] = pairwise_d0(row(i), row(j));

  std::vector<std::size_t> parent(m);
  for (std::size_t c = 0; c < m; ++c) parent[c] = c;

  std::vector<MergeRecord> records;
  for (std::size_t step = 0; step < n_c; ++step) {
    double best = std::numeric_limits<double>::infinity();
    std::size_t bi = 0, bj = 0;
    for (std::size_t i = 0; i < m; ++i) {
      if (!live[i]) continue;
      for (std::size_t j = i + 1; j < m; ++j) {
        if (!live[j]) continue;
        const double d = balanced_distance(dist[i * m + j], sizes[i], sizes[j], lambda);
        if (d < best) best = d, bi = i, bj = j;
      }
    }
    require(std::isfinite(best), ErrorKind::numeric, "merge_step: non-finite centroid distance");
    std::size_t label_i = 0, label_j = 0;
    for (std::size_t c = 0; c < bj; ++c) {
      if (!live[c]) continue;
      if (c < bi) ++label_i;
      ++label_j;
    }
    records.push_back({label_i, label_j, best});

    const double si = static_cast<double>(sizes[bi]), sj = static_cast<double>(sizes[bj]);
    double* ci = cent.data() + bi * D;
    const double* cj = cent.data() + bj * D;
    double ss = 0;
    for (std::size_t k = 0; k < D; ++k) {
      ci[k] = (si * ci[k] + sj * cj[k]) / (si + sj);
      ss += ci[k] * ci[k];
    }
    const double norm = std::max(std::sqrt(ss), kNormEpsilon);
    for (std::size_t k = 0; k < D; ++k) ci[k] /= norm;
    sizes[bi] += sizes[bj];
    live[bj] = false;
    parent[bj] = bi;
    for (std::size_t c = 0; c < m; ++c)
      if (live[c] && c != bi) dist[bi * m + c] = dist[c * m + bi] = pairwise_d0(row(bi), row(c));
  }

  // Compact relabelling.
  std::vector<std::size_t> label(m, 0);
  std::vector<double> new_cent;
  std::vector<std::size_t> new_sizes;
  for (std::size_t c = 0, next = 0; c < m; ++c) {
    if (!live[c]) continue;
    label[c] = next++;
    new_cent.insert(new_cent.end(), cent.begin() + c * D, cent.begin() + (c + 1) * D);
    new_sizes.push_back(sizes[c]);
  }
  auto root = [&](std::size_t c) {
    while (parent[c] != c) c = parent[c];
    return c;
  };
  for (auto& b : assign) b = label[root(b)];
  cent = std::move(new_cent);
  sizes = std::move(new_sizes);
  return records;
}

/// Instance-level lambda default: 0.1 times the mean pairwise distance,
/// spread over n instances.
template <std::floating_point T>
double auto_lambda(const BasicTensor<T>& features) {
  const std::size_t n = features.extent(0), D = features.extent(1);
  if (n < 2) return 0.0;
  double total = 0;
  for (std::size_t i = 0; i < n; ++i)
    for (std::size_t j = i + 1; j < n; ++j)
      total += pairwise_d0(features.data().subspan(i * D, D), features.data().subspan(j * D, D));
  const double mean = total / (static_cast<double>(n) * static_cast<double>(n - 1) / 2);
  return 0.1 * mean / static_cast<double>(n);
}

/// `instance_index<TAB>cluster_id` per line.
inline void write_assignments(std::ostream& os, const MemoryBank& bank) {
  for (std::size_t i = 0; i < bank.num_instances(); ++i) os << i << '\t' << bank.assignment()[i] << '\n';
}

inline std::vector<std::size_t> read_assignments(std::istream& is) {
  std::vector<std::size_t> out;
  std::string line;
  std::size_t line_no = 0;
  while (std::getline(is, line)) {
    ++line_no;
    if (line.empty()) continue;
    const auto tab = line.find('\t');
    require(tab != std::string::npos, ErrorKind::parse, "assignments line " + std::to_string(line_no) + ": no tab");
    std::size_t idx = 0, cluster = 0;
    try {
      idx = std::stoull(line.substr(0, tab));
      cluster = std::stoull(line.substr(tab + 1));
    } catch (const std::exception&) {
      fail(ErrorKind::parse, "assignments line " + std::to_string(line_no) + ": not an integer pair");
    }
    require(idx == out.size(), ErrorKind::parse,
            "assignments line " + std::to_string(line_no) + ": instance indices must be consecutive");
    out.push_back(cluster);
  }
  return out;
}

}  // namespace gamreid
