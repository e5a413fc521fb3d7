#pragma once

#include <cstdint>
#include <filesystem>
#include <fstream>
#include <map>
#include <random>
#include <string>
#include <utility>
#include <vector>

#include "mcr_stitch/binary_io.hpp"
#include "mcr_stitch/embedding_store.hpp"
#include "mcr_stitch/error.hpp"
#include "mcr_stitch/evaluation.hpp"
#include "mcr_stitch/linalg.hpp"

namespace mcr {

struct SynthSpace {
  std::string id;
  std::vector<std::string> modalities;
};

// base(x, y), leaf1(x, z), leaf2(y, w): two leaves sharing one modality each with the base.
inline std::vector<SynthSpace> four_modality_layout() {
  return {{"base", {"x", "y"}}, {"leaf1", {"x", "z"}}, {"leaf2", {"y", "w"}}};
}

struct SynthWorldConfig {
  std::size_t latent_dim = 16;
  std::size_t embed_dim = 32;
  std::size_t n_items = 2000;
  double modality_gap_magnitude = 0.5;
  double observation_noise_sigma = 0.02;
  std::vector<SynthSpace> spaces = four_modality_layout();
  std::uint64_t seed = 0;

  void validate() const {
    if (latent_dim < 1 || embed_dim < 1 || n_items < 1) throw ConfigError("synth dims and counts must be >= 1");
    if (embed_dim < latent_dim) throw ConfigError("embed_dim must be >= latent_dim");
    if (modality_gap_magnitude < 0.0 || observation_noise_sigma < 0.0) {
      throw ConfigError("gap magnitude and noise sigma must be non-negative");
    }
    if (modality_gap_magnitude > 0.0 && embed_dim == latent_dim) {
      throw ConfigError("a non-zero modality gap needs embed_dim > latent_dim");
    }
    if (spaces.empty()) throw ConfigError("synth world needs at least one space");
    for (const auto& s : spaces) {
      if (s.modalities.empty()) throw ConfigError("space " + s.id + " has no modalities");
    }
  }
};

using ModalityKey = std::pair<std::string, std::string>;  // (space_id, modality)

struct SynthWorld {
  SynthWorldConfig config;
  Matrix latents;                           // n_items x latent_dim, unit rows
  std::map<std::string, Matrix> frames;     // embed_dim x latent_dim, orthonormal columns
  std::map<ModalityKey, Vector> offsets;    // orthogonal to the space's frame
  std::map<ModalityKey, EmbeddingMatrix> embeddings;

  const EmbeddingMatrix& at(const std::string& space, const std::string& modality) const {
    auto it = embeddings.find({space, modality});
    if (it == embeddings.end()) throw Error("unknown modality " + space + "." + modality);
    return it->second;
  }
};

// Each space gets a random orthonormal frame Q; each modality a fixed offset of the
// configured norm orthogonal to Q. Row i of every modality is
// normalize(Q s_i + offset + sigma * noise), with s_i shared across all modalities.
inline SynthWorld generate_world(const SynthWorldConfig& cfg) {
  cfg.validate();
  const auto n = static_cast<Eigen::Index>(cfg.n_items);
  const auto latent = static_cast<Eigen::Index>(cfg.latent_dim);
  const auto embed = static_cast<Eigen::Index>(cfg.embed_dim);
  std::normal_distribution<double> normal(0.0, 1.0);

  SynthWorld w;
  w.config = cfg;
  {
    Rng rng(derive_seed(cfg.seed, 1));
    w.latents = Matrix(n, latent);
    for (Eigen::Index i = 0; i < w.latents.size(); ++i) w.latents.data()[i] = normal(rng);
    normalize_rows_inplace(w.latents);
  }

  for (std::size_t si = 0; si < cfg.spaces.size(); ++si) {
    const auto& space = cfg.spaces[si];
    if (w.frames.count(space.id)) throw ConfigError("duplicate space id " + space.id);
    Rng frame_rng(derive_seed(cfg.seed, 100 + si));
    Matrix g(embed, latent);
    for (Eigen::Index i = 0; i < g.size(); ++i) g.data()[i] = normal(frame_rng);
    const Eigen::HouseholderQR<Matrix> qr(g);
    const Matrix frame = qr.householderQ() * Matrix::Identity(embed, latent);
    w.frames[space.id] = frame;

    for (std::size_t mi = 0; mi < space.modalities.size(); ++mi) {
      const ModalityKey key{space.id, space.modalities[mi]};
      if (w.embeddings.count(key)) throw ConfigError("duplicate modality " + key.first + "." + key.second);
      Rng rng(derive_seed(cfg.seed, 1000 + 64 * si + mi));

      Vector offset = Vector::Zero(embed);
      Vector dir(embed);
      for (Eigen::Index k = 0; k < embed; ++k) dir(k) = normal(rng);
      if (embed > latent) {
        dir -= frame * (frame.transpose() * dir);
        offset = cfg.modality_gap_magnitude * dir / dir.norm();
      }

      Matrix e = w.latents * frame.transpose();
      e.rowwise() += offset.transpose();
      if (cfg.observation_noise_sigma > 0.0) {
        for (Eigen::Index i = 0; i < e.size(); ++i) e.data()[i] += cfg.observation_noise_sigma * normal(rng);
      }
      normalize_rows_inplace(e);
      w.offsets[key] = offset;
      w.embeddings.emplace(key, l2_normalize(EmbeddingMatrix::from_matrix(e, false)));
    }
  }
  return w;
}

inline SynthWorld make_fourmodality_scenario(SynthWorldConfig cfg) {
  cfg.spaces = four_modality_layout();
  return generate_world(cfg);
}

// Retrieval after mapping both sets back to latent coordinates with the known frames
// (offsets are orthogonal to the frames, so they drop out). The achievable reference.
inline RetrievalReport oracle_retrieval(const SynthWorld& world, const ModalityKey& query, const ModalityKey& gallery,
                                        const std::vector<std::size_t>& ks = {1, 5, 10}) {
  auto to_latent = [&](const ModalityKey& key) {
    const auto& frame = world.frames.at(key.first);
    Matrix m = world.at(key.first, key.second).to_matrix() * frame;
    normalize_rows_inplace(m);
    return m;
  };
  const Matrix q = to_latent(query);
  const Matrix g = to_latent(gallery);
  return retrieval_from_similarity(q * g.transpose(), identity_ground_truth(static_cast<std::size_t>(q.rows())), ks);
}

inline std::filesystem::path embedding_file(const std::filesystem::path& dir, const ModalityKey& key) {
  return dir / (key.first + "." + key.second + ".emb");
}

// GT1 layout: "GT1" | u32 n_items | u32 latent_dim | latents (f32 LE, row-major).
inline void save_ground_truth(const Matrix& latents, const std::filesystem::path& path) {
  std::ofstream os(path, std::ios::binary | std::ios::trunc);
  if (!os) throw Error("cannot open for writing: " + path.string());
  binary::write_magic(os, "GT1");
  binary::write_u32(os, static_cast<std::uint32_t>(latents.rows()));
  binary::write_u32(os, static_cast<std::uint32_t>(latents.cols()));
  for (Eigen::Index i = 0; i < latents.size(); ++i) binary::write_f32(os, static_cast<float>(latents.data()[i]));
}

inline Matrix load_ground_truth(const std::filesystem::path& path) {
  std::ifstream is(path, std::ios::binary);
  if (!is) throw Error("missing file: " + path.string());
  binary::expect_magic(is, "GT1");
  const auto n = binary::read_u32(is, "GT1 n_items");
  const auto d = binary::read_u32(is, "GT1 latent_dim");
  Matrix m(n, d);
  for (Eigen::Index i = 0; i < m.size(); ++i) m.data()[i] = binary::read_f32(is, "GT1 latents");
  return m;
}

// Writes every modality as EMB1 + manifest plus ground_truth.gt1; returns the written paths.
inline std::vector<std::filesystem::path> write_world(const SynthWorld& world, const std::filesystem::path& dir) {
  std::filesystem::create_directories(dir);
  std::vector<std::filesystem::path> written;
  for (const auto& space : world.config.spaces) {
    for (const auto& modality : space.modalities) {
      const ModalityKey key{space.id, modality};
      const auto path = embedding_file(dir, key);
      const auto& m = world.embeddings.at(key);
      save_embeddings(m, manifest_for(m, space.id, modality, "synthetic world, seed " + std::to_string(world.config.seed)),
                      path);
      written.push_back(path);
    }
  }
  const auto gt = dir / "ground_truth.gt1";
  save_ground_truth(world.latents, gt);
  written.push_back(gt);
  return written;
}

}  // namespace mcr
