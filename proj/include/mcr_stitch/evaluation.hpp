#pragma once

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <cstring>
#include <map>
#include <optional>
#include <ostream>
#include <string>
#include <vector>

#include "mcr_stitch/embedding_store.hpp"
#include "mcr_stitch/error.hpp"
#include "mcr_stitch/linalg.hpp"
#include "mcr_stitch/projector.hpp"

namespace mcr {

struct RetrievalReport {
  double map = 0.0;
  std::map<std::size_t, double> r_at;
  std::size_t num_queries = 0;
  std::string direction = "query->gallery";

  friend bool operator==(const RetrievalReport&, const RetrievalReport&) = default;
};

struct ClassificationReport {
  std::map<std::size_t, double> acc_at;
  std::size_t num_classes = 0;
  std::size_t num_samples = 0;
};

// 1-based rank of `target` in one similarity row, descending, ties to the lower index.
template <class Row>
std::size_t rank_of(const Row& sims, Eigen::Index target) {
  const double s = sims(target);
  std::size_t rank = 1;
  for (Eigen::Index j = 0; j < sims.size(); ++j) {
    if (sims(j) > s || (sims(j) == s && j < target)) ++rank;
  }
  return rank;
}

// Ranks computed from a similarity matrix (queries x gallery).
inline RetrievalReport retrieval_from_similarity(const Matrix& sims, const std::vector<std::size_t>& ground_truth,
                                                 const std::vector<std::size_t>& ks) {
  if (ground_truth.size() != static_cast<std::size_t>(sims.rows())) {
    throw ShapeError("ground truth has " + std::to_string(ground_truth.size()) + " entries for " +
                     std::to_string(sims.rows()) + " queries");
  }
  RetrievalReport r;
  r.num_queries = ground_truth.size();
  std::vector<std::size_t> hits(ks.size(), 0);
  double ap_sum = 0.0;
  for (Eigen::Index i = 0; i < sims.rows(); ++i) {
    const std::size_t gt = ground_truth[static_cast<std::size_t>(i)];
    if (gt >= static_cast<std::size_t>(sims.cols())) {
      throw Error("ground-truth index " + std::to_string(gt) + " out of range for gallery of " +
                  std::to_string(sims.cols()));
    }
    const std::size_t rank = rank_of(sims.row(i), static_cast<Eigen::Index>(gt));
    ap_sum += 1.0 / static_cast<double>(rank);
    for (std::size_t k = 0; k < ks.size(); ++k) hits[k] += rank <= ks[k] ? 1 : 0;
  }
  const double nq = static_cast<double>(r.num_queries);
  r.map = ap_sum / nq;
  for (std::size_t k = 0; k < ks.size(); ++k) r.r_at[ks[k]] = static_cast<double>(hits[k]) / nq;
  return r;
}

// Single relevant item per query: AP = 1/rank.
inline RetrievalReport retrieval_eval(const EmbeddingMatrix& queries, const EmbeddingMatrix& gallery,
                                      const std::vector<std::size_t>& ground_truth,
                                      const std::vector<std::size_t>& ks = {1, 5, 10}) {
  return retrieval_from_similarity(cosine_similarity(queries, gallery), ground_truth, ks);
}

inline std::vector<std::size_t> identity_ground_truth(std::size_t n) {
  std::vector<std::size_t> gt(n);
  for (std::size_t i = 0; i < n; ++i) gt[i] = i;
  return gt;
}

// Prototype per class = unit-normalized mean of its template embeddings.
inline ClassificationReport zero_shot_classify(const EmbeddingMatrix& samples,
                                               const std::vector<EmbeddingMatrix>& class_templates,
                                               const std::vector<std::size_t>& labels) {
  if (class_templates.empty()) throw Error("no classes given");
  if (labels.size() != samples.rows()) throw ShapeError("one label per sample required");
  const std::size_t dim = samples.dim();
  Matrix prototypes(static_cast<Eigen::Index>(class_templates.size()), static_cast<Eigen::Index>(dim));
  for (std::size_t c = 0; c < class_templates.size(); ++c) {
    const auto& t = class_templates[c];
    if (t.rows() == 0) throw Error("empty class " + std::to_string(c));
    if (t.dim() != dim) throw ShapeError("template dim mismatch for class " + std::to_string(c));
    prototypes.row(static_cast<Eigen::Index>(c)) = t.to_matrix().colwise().mean();
  }
  for (Eigen::Index c = 0; c < prototypes.rows(); ++c) {
    const double n = prototypes.row(c).norm();
    if (n < kMinRowNorm) throw Error("class " + std::to_string(c) + " prototype has zero norm");
    prototypes.row(c) /= n;
  }
  const Matrix sims = samples.to_matrix() * prototypes.transpose();
  ClassificationReport r;
  r.num_classes = class_templates.size();
  r.num_samples = samples.rows();
  std::map<std::size_t, std::size_t> hits{{1, 0}, {3, 0}, {5, 0}};
  for (Eigen::Index i = 0; i < sims.rows(); ++i) {
    const std::size_t label = labels[static_cast<std::size_t>(i)];
    if (label >= r.num_classes) throw Error("label " + std::to_string(label) + " out of range");
    const std::size_t rank = rank_of(sims.row(i), static_cast<Eigen::Index>(label));
    for (auto& [k, h] : hits) h += rank <= k ? 1 : 0;
  }
  for (const auto& [k, h] : hits) r.acc_at[k] = static_cast<double>(h) / static_cast<double>(r.num_samples);
  return r;
}

struct PreservationResult {
  bool identical = false;
  RetrievalReport before;
  RetrievalReport after;
  std::vector<std::string> differences;
};

// Base-space evaluation never passes through a projector, so reports must match bit for bit.
inline PreservationResult base_preservation_check(const RetrievalReport& before, const RetrievalReport& after) {
  PreservationResult p{true, before, after, {}};
  auto bits_differ = [](double a, double b) { return std::memcmp(&a, &b, sizeof(double)) != 0; };
  if (bits_differ(before.map, after.map)) p.differences.push_back("map");
  if (before.num_queries != after.num_queries) p.differences.push_back("num_queries");
  for (const auto& [k, v] : before.r_at) {
    auto it = after.r_at.find(k);
    if (it == after.r_at.end() || bits_differ(v, it->second)) p.differences.push_back("R@" + std::to_string(k));
  }
  for (const auto& [k, v] : after.r_at) {
    if (!before.r_at.count(k)) p.differences.push_back("R@" + std::to_string(k));
  }
  p.identical = p.differences.empty();
  return p;
}

// Projects leaf embeddings into the base space (eval mode, unit-normalized).
inline EmbeddingMatrix project_embeddings(const ProjectorParams& pp, const EmbeddingMatrix& leaf) {
  if (leaf.dim() != pp.arch.leaf_dim) {
    throw ShapeError("leaf embeddings have dim " + std::to_string(leaf.dim()) + ", projector expects " +
                     std::to_string(pp.arch.leaf_dim));
  }
  return EmbeddingMatrix::from_matrix(embed_nonoverlap(pp, leaf.to_matrix()), false);
}

// Float32 rounding of the projected rows can push norms off by ~1e-7; re-normalizing
// keeps them within the EmbeddingMatrix tolerance.
inline EmbeddingMatrix project_and_normalize(const ProjectorParams& pp, const EmbeddingMatrix& leaf) {
  return l2_normalize(project_embeddings(pp, leaf));
}

inline RetrievalReport cross_space_eval(const EmbeddingMatrix& leaf_queries, const ProjectorParams& projector,
                                        const EmbeddingMatrix& base_gallery,
                                        const std::vector<std::size_t>& ground_truth,
                                        const std::vector<std::size_t>& ks = {1, 5, 10}) {
  return retrieval_eval(project_and_normalize(projector, leaf_queries), base_gallery, ground_truth, ks);
}

// Mean reciprocal rank of a uniformly random ranking: H_n / n.
inline double random_ranking_map(std::size_t n) {
  double h = 0.0;
  for (std::size_t k = 1; k <= n; ++k) h += 1.0 / static_cast<double>(k);
  return h / static_cast<double>(n);
}

// Standard error of the mAP over `queries` queries under random ranking in a gallery of n.
inline double random_ranking_map_stderr(std::size_t n, std::size_t queries) {
  double h2 = 0.0;
  for (std::size_t k = 1; k <= n; ++k) h2 += 1.0 / (static_cast<double>(k) * static_cast<double>(k));
  const double mean = random_ranking_map(n);
  const double var = h2 / static_cast<double>(n) - mean * mean;
  return std::sqrt(var / static_cast<double>(queries));
}

// One "metric,value,dataset,direction" line per metric, values to 4 decimals.
inline void write_report_lines(std::ostream& os, const RetrievalReport& r, const std::string& dataset,
                               const std::string& direction) {
  char buf[64];
  std::snprintf(buf, sizeof(buf), "%.4f", r.map);
  os << "mAP," << buf << ',' << dataset << ',' << direction << '\n';
  for (const auto& [k, v] : r.r_at) {
    std::snprintf(buf, sizeof(buf), "%.4f", v);
    os << "R@" << k << ',' << buf << ',' << dataset << ',' << direction << '\n';
  }
}

inline void write_report_lines(std::ostream& os, const ClassificationReport& r, const std::string& dataset) {
  char buf[64];
  for (const auto& [k, v] : r.acc_at) {
    std::snprintf(buf, sizeof(buf), "%.4f", v);
    os << "Acc@" << k << ',' << buf << ',' << dataset << ",classify\n";
  }
}

// Element-wise mean of two reports over the same k set.
inline RetrievalReport mean_report(const RetrievalReport& a, const RetrievalReport& b) {
  RetrievalReport m;
  m.map = 0.5 * (a.map + b.map);
  for (const auto& [k, v] : a.r_at) m.r_at[k] = 0.5 * (v + b.r_at.at(k));
  m.num_queries = a.num_queries + b.num_queries;
  m.direction = "mean";
  return m;
}

// Inverse of a permutation ground truth, used for the reverse retrieval direction.
inline std::optional<std::vector<std::size_t>> invert_ground_truth(const std::vector<std::size_t>& gt,
                                                                    std::size_t gallery_rows) {
  if (gt.size() != gallery_rows) return std::nullopt;
  std::vector<std::size_t> inv(gt.size(), gt.size());
  for (std::size_t i = 0; i < gt.size(); ++i) {
    if (gt[i] >= gt.size() || inv[gt[i]] != gt.size()) return std::nullopt;
    inv[gt[i]] = i;
  }
  return inv;
}

}  // namespace mcr
