#pragma once

#include <cmath>
#include <cstdint>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <istream>
#include <ostream>
#include <span>
#include <sstream>
#include <string>
#include <utility>
#include <vector>

#include <nlohmann/json.hpp>

#include "mcr_stitch/binary_io.hpp"
#include "mcr_stitch/error.hpp"
#include "mcr_stitch/linalg.hpp"

namespace mcr {

inline constexpr double kNormTolerance = 1e-5;
inline constexpr double kMinRowNorm = 1e-12;

// N x D row-major float32 embeddings for one (space, modality) pair.
// Immutable once constructed; the constructor enforces every invariant.
class EmbeddingMatrix {
 public:
  EmbeddingMatrix() = default;

  EmbeddingMatrix(std::size_t rows, std::size_t dim, std::vector<float> data, bool normalized)
      : rows_(rows), dim_(dim), data_(std::move(data)), normalized_(normalized) {
    validate();
  }

  // Narrows a double matrix to float32 storage.
  static EmbeddingMatrix from_matrix(const Matrix& m, bool normalized) {
    std::vector<float> data(static_cast<std::size_t>(m.size()));
    for (Eigen::Index i = 0; i < m.rows(); ++i)
      for (Eigen::Index j = 0; j < m.cols(); ++j)
        data[static_cast<std::size_t>(i * m.cols() + j)] = static_cast<float>(m(i, j));
    return EmbeddingMatrix(static_cast<std::size_t>(m.rows()), static_cast<std::size_t>(m.cols()),
                           std::move(data), normalized);
  }

  std::size_t rows() const { return rows_; }
  std::size_t dim() const { return dim_; }
  bool normalized() const { return normalized_; }
  std::span<const float> data() const { return data_; }

  std::span<const float> row(std::size_t i) const {
    return std::span<const float>(data_).subspan(i * dim_, dim_);
  }

  Matrix to_matrix() const {
    Matrix m(static_cast<Eigen::Index>(rows_), static_cast<Eigen::Index>(dim_));
    for (std::size_t i = 0; i < rows_; ++i)
      for (std::size_t j = 0; j < dim_; ++j)
        m(static_cast<Eigen::Index>(i), static_cast<Eigen::Index>(j)) = data_[i * dim_ + j];
    return m;
  }

  // Rows [begin, end) as a new matrix.
  EmbeddingMatrix slice_rows(std::size_t begin, std::size_t end) const {
    if (begin >= end || end > rows_) {
      throw ShapeError("row slice [" + std::to_string(begin) + ", " + std::to_string(end) +
                       ") out of range for " + std::to_string(rows_) + " rows");
    }
    std::vector<float> out(data_.begin() + static_cast<std::ptrdiff_t>(begin * dim_),
                           data_.begin() + static_cast<std::ptrdiff_t>(end * dim_));
    return EmbeddingMatrix(end - begin, dim_, std::move(out), normalized_);
  }

  friend bool operator==(const EmbeddingMatrix& a, const EmbeddingMatrix& b) {
    if (a.rows_ != b.rows_ || a.dim_ != b.dim_ || a.normalized_ != b.normalized_) return false;
    // bitwise comparison so that -0.0f and 0.0f differ
    return std::memcmp(a.data_.data(), b.data_.data(), a.data_.size() * sizeof(float)) == 0;
  }

 private:
  void validate() const {
    if (rows_ < 1 || dim_ < 1) throw ShapeError("embedding matrix needs rows >= 1 and dim >= 1");
    if (data_.size() != rows_ * dim_) {
      throw ShapeError("payload length mismatch: expected " + std::to_string(rows_ * dim_) +
                       " values, got " + std::to_string(data_.size()));
    }
    for (std::size_t k = 0; k < data_.size(); ++k) {
      if (!std::isfinite(data_[k])) {
        throw FormatError("non-finite value at row " + std::to_string(k / dim_) + ", column " +
                          std::to_string(k % dim_));
      }
    }
    if (normalized_) {
      for (std::size_t i = 0; i < rows_; ++i) {
        double sq = 0.0;
        for (float v : row(i)) sq += static_cast<double>(v) * v;
        if (std::abs(std::sqrt(sq) - 1.0) > kNormTolerance) {
          throw FormatError("row " + std::to_string(i) + " flagged normalized but has norm " +
                            std::to_string(std::sqrt(sq)));
        }
      }
    }
  }

  std::size_t rows_ = 0;
  std::size_t dim_ = 0;
  std::vector<float> data_;
  bool normalized_ = false;
};

struct SpaceManifest {
  std::string space_id;
  std::string modality;
  std::size_t rows = 0;
  std::size_t dim = 0;
  bool normalized = false;
  std::string source_note;

  friend bool operator==(const SpaceManifest&, const SpaceManifest&) = default;
};

inline void to_json(nlohmann::json& j, const SpaceManifest& m) {
  j = nlohmann::json{{"space_id", m.space_id}, {"modality", m.modality}, {"rows", m.rows},
                     {"dim", m.dim},           {"normalized", m.normalized},
                     {"source_note", m.source_note}};
}

inline void from_json(const nlohmann::json& j, SpaceManifest& m) {
  j.at("space_id").get_to(m.space_id);
  j.at("modality").get_to(m.modality);
  j.at("rows").get_to(m.rows);
  j.at("dim").get_to(m.dim);
  j.at("normalized").get_to(m.normalized);
  m.source_note = j.value("source_note", std::string{});
}

inline SpaceManifest manifest_for(const EmbeddingMatrix& m, std::string space_id, std::string modality,
                                  std::string source_note = {}) {
  return SpaceManifest{std::move(space_id), std::move(modality), m.rows(), m.dim(), m.normalized(),
                       std::move(source_note)};
}

inline std::filesystem::path manifest_path(const std::filesystem::path& path) {
  return std::filesystem::path(path.string() + ".manifest.json");
}

// EMB1 layout: "EMB1" | u32 version=1 | u32 rows | u32 dim | u8 dtype (0 = f32) | payload.
inline constexpr std::string_view kEmbMagic = "EMB1";
inline constexpr std::uint32_t kEmbVersion = 1;
inline constexpr std::size_t kEmbHeaderBytes = 17;

inline void write_emb1(std::ostream& os, const EmbeddingMatrix& m) {
  binary::write_magic(os, kEmbMagic);
  binary::write_u32(os, kEmbVersion);
  binary::write_u32(os, static_cast<std::uint32_t>(m.rows()));
  binary::write_u32(os, static_cast<std::uint32_t>(m.dim()));
  binary::write_u8(os, 0);
  binary::write_f32_span(os, m.data());
}

// Reads one EMB1 block. With `exact_end`, trailing bytes are an error (whole-file reads).
inline EmbeddingMatrix read_emb1(std::istream& is, bool normalized, bool exact_end) {
  binary::expect_magic(is, kEmbMagic);
  const auto version = binary::read_u32(is, "EMB1 version");
  if (version != kEmbVersion) throw FormatError("unsupported EMB1 version " + std::to_string(version));
  const std::size_t rows = binary::read_u32(is, "EMB1 rows");
  const std::size_t dim = binary::read_u32(is, "EMB1 dim");
  const auto dtype = binary::read_u8(is, "EMB1 dtype");
  if (dtype != 0) throw FormatError("unsupported dtype code " + std::to_string(dtype));
  if (rows < 1 || dim < 1) throw FormatError("EMB1 header declares an empty matrix");

  std::vector<float> data;
  data.reserve(rows * dim);
  for (std::size_t k = 0; k < rows * dim; ++k) {
    char buf[4];
    is.read(buf, 4);
    if (is.gcount() != 4) throw FormatError("payload length mismatch: payload shorter than header");
    std::uint32_t bits = static_cast<std::uint32_t>(static_cast<unsigned char>(buf[0])) |
                         (static_cast<std::uint32_t>(static_cast<unsigned char>(buf[1])) << 8) |
                         (static_cast<std::uint32_t>(static_cast<unsigned char>(buf[2])) << 16) |
                         (static_cast<std::uint32_t>(static_cast<unsigned char>(buf[3])) << 24);
    float v = 0.0f;
    std::memcpy(&v, &bits, 4);
    data.push_back(v);
  }
  if (exact_end && is.peek() != std::char_traits<char>::eof()) {
    throw FormatError("payload length mismatch: trailing bytes after declared payload");
  }
  return EmbeddingMatrix(rows, dim, std::move(data), normalized);
}

inline void save_embeddings(const EmbeddingMatrix& matrix, const SpaceManifest& manifest,
                            const std::filesystem::path& path) {
  if (manifest.rows != matrix.rows() || manifest.dim != matrix.dim() ||
      manifest.normalized != matrix.normalized()) {
    throw FormatError("manifest/header disagreement for " + path.string());
  }
  {
    std::ofstream os(path, std::ios::binary | std::ios::trunc);
    if (!os) throw Error("cannot open for writing: " + path.string());
    write_emb1(os, matrix);
    if (!os) throw Error("write failed: " + path.string());
  }
  std::ofstream ms(manifest_path(path), std::ios::trunc);
  if (!ms) throw Error("cannot open for writing: " + manifest_path(path).string());
  ms << nlohmann::json(manifest).dump(2) << "\n";
  if (!ms) throw Error("write failed: " + manifest_path(path).string());
}

inline std::pair<EmbeddingMatrix, SpaceManifest> load_embeddings(const std::filesystem::path& path) {
  if (!std::filesystem::exists(path)) throw Error("missing file: " + path.string());
  const auto mpath = manifest_path(path);
  if (!std::filesystem::exists(mpath)) throw Error("missing manifest sidecar: " + mpath.string());

  SpaceManifest manifest;
  try {
    std::ifstream ms(mpath);
    manifest = nlohmann::json::parse(ms).get<SpaceManifest>();
  } catch (const nlohmann::json::exception& e) {
    throw FormatError("malformed manifest " + mpath.string() + ": " + e.what());
  }

  std::ifstream is(path, std::ios::binary);
  if (!is) throw Error("cannot open: " + path.string());
  EmbeddingMatrix m = read_emb1(is, manifest.normalized, true);
  if (manifest.rows != m.rows() || manifest.dim != m.dim()) {
    throw FormatError("manifest/header disagreement: manifest says " + std::to_string(manifest.rows) +
                      "x" + std::to_string(manifest.dim) + ", header says " + std::to_string(m.rows()) +
                      "x" + std::to_string(m.dim()));
  }
  return {std::move(m), std::move(manifest)};
}

inline EmbeddingMatrix l2_normalize(const EmbeddingMatrix& m) {
  std::vector<float> out(m.data().begin(), m.data().end());
  for (std::size_t i = 0; i < m.rows(); ++i) {
    double sq = 0.0;
    for (float v : m.row(i)) sq += static_cast<double>(v) * v;
    const double norm = std::sqrt(sq);
    if (norm < kMinRowNorm) throw Error("zero-norm row " + std::to_string(i));
    for (std::size_t j = 0; j < m.dim(); ++j) {
      out[i * m.dim() + j] = static_cast<float>(static_cast<double>(out[i * m.dim() + j]) / norm);
    }
  }
  return EmbeddingMatrix(m.rows(), m.dim(), std::move(out), true);
}

// Entry (i, j) is the dot product of query row i and gallery row j.
inline Matrix cosine_similarity(const EmbeddingMatrix& queries, const EmbeddingMatrix& gallery) {
  if (queries.dim() != gallery.dim()) {
    throw ShapeError("dim mismatch: queries " + std::to_string(queries.dim()) + " vs gallery " +
                     std::to_string(gallery.dim()));
  }
  if (!queries.normalized() || !gallery.normalized()) {
    throw Error("cosine_similarity requires normalized inputs");
  }
  return queries.to_matrix() * gallery.to_matrix().transpose();
}

}  // namespace mcr
