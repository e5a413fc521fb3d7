#pragma once

#include <array>
#include <cmath>
#include <cstdint>
#include <random>

#include <Eigen/Dense>

namespace mcr {

// Dense row-major double matrices are the working type for every numeric path;
// float32 only appears at the storage boundary.
using Matrix = Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
using Vector = Eigen::VectorXd;

using Rng = std::mt19937_64;

// Derives an independent stream seed from a base seed and a salt so that
// sub-generators (per space, per modality, per epoch) do not share state.
inline std::uint64_t derive_seed(std::uint64_t seed, std::uint64_t salt) {
  std::seed_seq seq{static_cast<std::uint32_t>(seed), static_cast<std::uint32_t>(seed >> 32),
                    static_cast<std::uint32_t>(salt), static_cast<std::uint32_t>(salt >> 32)};
  std::array<std::uint32_t, 2> out{};
  seq.generate(out.begin(), out.end());
  return (static_cast<std::uint64_t>(out[0]) << 32) | out[1];
}

// Row-wise unit normalization; returns the norms used.
inline Vector normalize_rows_inplace(Matrix& m) {
  Vector norms = m.rowwise().norm();
  for (Eigen::Index i = 0; i < m.rows(); ++i) m.row(i) /= norms(i);
  return norms;
}

}  // namespace mcr
