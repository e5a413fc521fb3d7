#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <filesystem>
#include <fstream>
#include <functional>
#include <iomanip>
#include <numeric>
#include <sstream>
#include <string>
#include <vector>

#include "mcr_stitch/aggregation.hpp"
#include "mcr_stitch/error.hpp"
#include "mcr_stitch/linalg.hpp"
#include "mcr_stitch/losses.hpp"
#include "mcr_stitch/optimizer.hpp"
#include "mcr_stitch/projector.hpp"

namespace mcr {

// Which inter-space InfoNCE terms contribute to the objective.
//   avc: projected non-overlap vs base non-overlap
//   atc: projected non-overlap vs base overlap
//   tvc: projected overlap vs base non-overlap
//   ttc: projected overlap vs base overlap
struct LossMask {
  bool avc = true;
  bool atc = true;
  bool tvc = true;
  bool ttc = true;

  std::size_t count() const { return static_cast<std::size_t>(avc) + atc + tvc + ttc; }

  static LossMask parse(const std::string& spec) {
    LossMask m{false, false, false, false};
    std::stringstream ss(spec);
    std::string item;
    while (std::getline(ss, item, ',')) {
      if (item == "avc") m.avc = true;
      else if (item == "atc") m.atc = true;
      else if (item == "tvc") m.tvc = true;
      else if (item == "ttc") m.ttc = true;
      else if (item == "all") m = LossMask{};
      else if (!item.empty()) throw ConfigError("unknown loss term '" + item + "'");
    }
    if (m.count() == 0) throw ConfigError("loss mask enables no terms");
    return m;
  }

  std::string to_string() const {
    std::string s;
    for (auto [on, name] : {std::pair{avc, "avc"}, {atc, "atc"}, {tvc, "tvc"}, {ttc, "ttc"}}) {
      if (on) s += (s.empty() ? "" : ",") + std::string(name);
    }
    return s;
  }
};

struct TrainConfig {
  std::size_t batch_size = 4096;
  std::size_t epochs = 36;
  double lr0 = 1e-3;
  double lambda = 0.1;
  double tau2 = 0.05;
  double weight_decay = 0.01;
  double adam_beta1 = 0.9;
  double adam_beta2 = 0.999;
  double adam_epsilon = 1e-8;
  std::uint64_t seed = 0;
  LossMask loss_mask;
  IntraForm intra_form = IntraForm::squared;
  bool grad_check = false;

  void validate() const {
    if (batch_size < 2) throw ConfigError("batch_size must be >= 2");
    if (!(tau2 > 0.0)) throw ConfigError("tau2 must be positive");
    if (!(lr0 >= 0.0)) throw ConfigError("lr0 must be non-negative");
    if (!(lambda >= 0.0)) throw ConfigError("lambda must be non-negative");
    if (!(weight_decay >= 0.0)) throw ConfigError("weight_decay must be non-negative");
    if (loss_mask.count() == 0) throw ConfigError("loss mask enables no terms");
  }

  AdamWConfig adamw() const { return AdamWConfig{adam_beta1, adam_beta2, adam_epsilon, weight_decay}; }
};

struct LossReport {
  double l_intra = 0.0;
  double l_avc = 0.0;
  double l_atc = 0.0;
  double l_tvc = 0.0;
  double l_ttc = 0.0;
  double total = 0.0;
  std::size_t step = 0;
  double lr = 0.0;
};

// Coefficients of each term in the objective.
struct TermWeights {
  double intra = 0.0;
  double avc = 0.0;
  double atc = 0.0;
  double tvc = 0.0;
  double ttc = 0.0;

  // lambda on the intra term; the enabled inter terms share 1/|enabled| each.
  static TermWeights from(double lambda, const LossMask& mask) {
    const double share = 1.0 / static_cast<double>(mask.count());
    return TermWeights{lambda, mask.avc ? share : 0.0, mask.atc ? share : 0.0, mask.tvc ? share : 0.0,
                       mask.ttc ? share : 0.0};
  }
};

// L = lambda * L_intra + mean of the enabled inter terms.
inline double total_loss(const LossReport& r, double lambda, const LossMask& mask) {
  const auto w = TermWeights::from(lambda, mask);
  return w.intra * r.l_intra + w.avc * r.l_avc + w.atc * r.l_atc + w.tvc * r.l_tvc + w.ttc * r.l_ttc;
}

// A training batch: rows of the four quadruple members.
struct QuadrupleBatch {
  Matrix leaf_nonoverlap;
  Matrix leaf_overlap;
  Matrix base_overlap;
  Matrix base_nonoverlap;

  Eigen::Index rows() const { return leaf_nonoverlap.rows(); }
};

inline QuadrupleBatch gather_batch(const QuadrupleMatrices& q, const std::vector<Eigen::Index>& idx) {
  return QuadrupleBatch{q.leaf_nonoverlap(idx, Eigen::all), q.leaf_overlap(idx, Eigen::all),
                        q.base_overlap(idx, Eigen::all), q.base_nonoverlap(idx, Eigen::all)};
}

inline QuadrupleBatch full_batch(const QuadrupleMatrices& q) {
  return QuadrupleBatch{q.leaf_nonoverlap, q.leaf_overlap, q.base_overlap, q.base_nonoverlap};
}

// ---------------------------------------------------------------------------
// Reverse pass through the fixed projector graph.

inline Matrix backward_linear(const LinearParams& p, const Matrix& input, const Matrix& grad_out, LinearParams& grad) {
  grad.weight.noalias() += grad_out.transpose() * input;
  grad.bias += grad_out.colwise().sum().transpose();
  return grad_out * p.weight;
}

inline Matrix backward_fl(const std::vector<LinearParams>& layers, const LinearStackTape& tape, Matrix grad_out,
                          std::vector<LinearParams>& grads) {
  for (std::size_t k = layers.size(); k-- > 0;) {
    if (k + 1 < layers.size()) {
      grad_out = grad_out.cwiseProduct((tape.pre_activation[k].array() > 0.0).cast<double>().matrix());
    }
    grad_out = backward_linear(layers[k], tape.inputs[k], grad_out, grads[k]);
  }
  return grad_out;
}

// Train-mode f_m backward, including the batch-statistics path of batch normalization.
inline Matrix backward_mlp(const MlpParams& params, const MlpTape& tape, Matrix grad_out, MlpParams& grads) {
  for (std::size_t k = params.blocks.size(); k-- > 0;) {
    const auto& block = params.blocks[k];
    const auto& rec = tape.blocks[k];
    auto& g = grads.blocks[k];
    if (block.activation) {
      grad_out = grad_out.cwiseProduct((rec.pre_activation.array() > 0.0).cast<double>().matrix());
    }
    const double n = static_cast<double>(grad_out.rows());
    g.bn.gamma += grad_out.cwiseProduct(rec.xhat).colwise().sum().transpose();
    g.bn.beta += grad_out.colwise().sum().transpose();
    const Matrix dxhat = grad_out.array().rowwise() * block.bn.gamma.transpose().array();
    const Eigen::RowVectorXd sum_dxhat = dxhat.colwise().sum();
    const Eigen::RowVectorXd sum_dxhat_xhat = dxhat.cwiseProduct(rec.xhat).colwise().sum();
    Matrix dz = (n * dxhat).rowwise() - sum_dxhat;
    dz.array() -= rec.xhat.array().rowwise() * sum_dxhat_xhat.array();
    dz.array().rowwise() *= rec.inv_std.transpose().array() / n;
    grad_out = backward_linear(block.linear, rec.input, dz, g.linear);
  }
  return grad_out;
}

struct StepResult {
  LossReport report;
  ProjectorParams grads;
};

namespace detail {

struct ForwardState {
  LinearStackTape fl_tape;
  Matrix fl_out;
  MlpTape tape_a;
  MlpTape tape_t;
  Matrix a_hat;
  Vector a_norms;
  Matrix t_hat;
  Vector t_norms;
  LossGrad intra;
  LossGrad avc, atc, tvc, ttc;
  LossReport report;
};

inline void check_batch(const ProjectorParams& pp, const QuadrupleBatch& b) {
  const auto n = b.rows();
  if (n < 2) throw ShapeError("train-mode batch needs at least 2 quadruples");
  if (b.leaf_overlap.rows() != n || b.base_overlap.rows() != n || b.base_nonoverlap.rows() != n) {
    throw ShapeError("quadruple members have different row counts");
  }
  const auto leaf = static_cast<Eigen::Index>(pp.arch.leaf_dim);
  const auto base = static_cast<Eigen::Index>(pp.arch.base_dim);
  if (b.leaf_nonoverlap.cols() != leaf || b.leaf_overlap.cols() != leaf || b.base_overlap.cols() != base ||
      b.base_nonoverlap.cols() != base) {
    throw ShapeError("quadruple dims do not match projector (leaf " + std::to_string(leaf) + ", base " +
                     std::to_string(base) + ")");
  }
}

inline ForwardState forward(const ProjectorParams& pp, const QuadrupleBatch& b, const TermWeights& w, double tau2,
                            IntraForm form) {
  check_batch(pp, b);
  ForwardState s;
  s.fl_out = forward_fl(pp.f_l, b.leaf_nonoverlap, &s.fl_tape);
  s.intra = intra_mcr_loss(s.fl_out, b.leaf_overlap, form);

  s.a_hat = forward_mlp_pure(pp.f_m, s.fl_out, Mode::train, &s.tape_a);
  s.a_norms = normalize_rows_inplace(s.a_hat);
  s.t_hat = forward_mlp_pure(pp.f_m, b.leaf_overlap, Mode::train, &s.tape_t);
  s.t_norms = normalize_rows_inplace(s.t_hat);

  // Base-space targets are frozen: only gradients w.r.t. the projected side are formed.
  s.avc = info_nce(s.a_hat, b.base_nonoverlap, tau2);
  s.atc = info_nce(s.a_hat, b.base_overlap, tau2);
  s.tvc = info_nce(s.t_hat, b.base_nonoverlap, tau2);
  s.ttc = info_nce(s.t_hat, b.base_overlap, tau2);

  auto& r = s.report;
  r.l_intra = s.intra.value;
  r.l_avc = s.avc.value;
  r.l_atc = s.atc.value;
  r.l_tvc = s.tvc.value;
  r.l_ttc = s.ttc.value;
  r.total = w.intra * r.l_intra + w.avc * r.l_avc + w.atc * r.l_atc + w.tvc * r.l_tvc + w.ttc * r.l_ttc;
  return s;
}

inline void accumulate(Matrix& dst, double weight, const Matrix& grad) {
  if (weight != 0.0) dst += weight * grad;
}

}  // namespace detail

// Forward only; no running-statistics update. The objective seen by the optimizer.
inline LossReport evaluate_loss(const ProjectorParams& pp, const QuadrupleBatch& batch, const TermWeights& w,
                                double tau2, IntraForm form = IntraForm::squared) {
  return detail::forward(pp, batch, w, tau2, form).report;
}

// Forward + exact reverse-mode gradients for every projector parameter. Terms with
// zero weight are reported but contribute nothing to the gradient.
inline StepResult loss_and_gradients(ProjectorParams& pp, const QuadrupleBatch& batch, const TermWeights& w,
                                     double tau2, IntraForm form = IntraForm::squared,
                                     bool update_running = true) {
  auto s = detail::forward(pp, batch, w, tau2, form);
  StepResult out{s.report, zeros_like(pp)};

  Matrix d_a = Matrix::Zero(s.a_hat.rows(), s.a_hat.cols());
  detail::accumulate(d_a, w.avc, s.avc.grad_x);
  detail::accumulate(d_a, w.atc, s.atc.grad_x);
  Matrix d_t = Matrix::Zero(s.t_hat.rows(), s.t_hat.cols());
  detail::accumulate(d_t, w.tvc, s.tvc.grad_x);
  detail::accumulate(d_t, w.ttc, s.ttc.grad_x);

  Matrix d_fl = backward_mlp(pp.f_m, s.tape_a, normalize_rows_backward(s.a_hat, s.a_norms, d_a), out.grads.f_m);
  backward_mlp(pp.f_m, s.tape_t, normalize_rows_backward(s.t_hat, s.t_norms, d_t), out.grads.f_m);
  detail::accumulate(d_fl, w.intra, s.intra.grad_x);
  backward_fl(pp.f_l, s.fl_tape, d_fl, out.grads.f_l);

  if (update_running) {
    update_running_stats(pp.f_m, s.tape_a, batch.rows());
    update_running_stats(pp.f_m, s.tape_t, batch.rows());
  }
  return out;
}

// Dense inter-space objective for one batch under `cfg` (lambda, tau2, mask).
inline StepResult dense_alignment_loss(ProjectorParams& pp, const QuadrupleBatch& batch, const TrainConfig& cfg) {
  if (pp.mode != Mode::train) throw Error("dense_alignment_loss requires a projector in train mode");
  return loss_and_gradients(pp, batch, TermWeights::from(cfg.lambda, cfg.loss_mask), cfg.tau2, cfg.intra_form);
}

struct GradCheckEntry {
  std::string tensor;
  double max_relative_error = 0.0;
  std::size_t reduced_steps = 0;
};

namespace detail {

// On/off state of every rectifier in a train-mode forward pass.
inline std::vector<bool> rectifier_pattern(const ProjectorParams& pp, const QuadrupleBatch& b) {
  std::vector<bool> out;
  auto record = [&](const Matrix& m) {
    for (Eigen::Index i = 0; i < m.size(); ++i) out.push_back(m.data()[i] > 0.0);
  };
  LinearStackTape fl;
  const Matrix h = forward_fl(pp.f_l, b.leaf_nonoverlap, &fl);
  for (const auto& m : fl.pre_activation) record(m);
  for (const Matrix* x : {&h, &b.leaf_overlap}) {
    MlpTape tape;
    forward_mlp_pure(pp.f_m, *x, Mode::train, &tape);
    for (std::size_t k = 0; k < tape.blocks.size(); ++k) {
      if (pp.f_m.blocks[k].activation) record(tape.blocks[k].pre_activation);
    }
  }
  return out;
}

}  // namespace detail

// Central finite differences over every parameter with h = 1e-4 * max(|theta|, 0.01). If
// theta +- h flips a rectifier, h shrinks tenfold (up to 6 times) so the quotient does not
// straddle a kink. Relative error per tensor:
// ||analytic - numeric||_inf / max(||analytic||_inf, ||numeric||_inf, 1e-3 * largest analytic entry).
inline std::vector<GradCheckEntry> finite_difference_check(const ProjectorParams& pp, const QuadrupleBatch& batch,
                                                           const TermWeights& w, double tau2, IntraForm form) {
  ProjectorParams work = pp;
  auto analytic = loss_and_gradients(work, batch, w, tau2, form, false).grads;
  double scale = 0.0;
  visit_parameters(analytic, [&](const std::string&, std::span<double> g, bool) {
    for (double x : g) scale = std::max(scale, std::abs(x));
  });
  const auto pattern = detail::rectifier_pattern(pp, batch);
  ProjectorParams probe = pp;
  std::vector<GradCheckEntry> out;
  visit_parameter_pairs(probe, analytic, [&](const std::string& name, std::span<double> p, std::span<double> g, bool) {
    GradCheckEntry e{name, 0.0, 0};
    double max_diff = 0.0;
    double max_mag = std::max(1e-3 * scale, 1e-12);
    for (std::size_t i = 0; i < p.size(); ++i) {
      const double orig = p[i];
      double h = 1e-4 * std::max(std::abs(orig), 0.01);
      for (int attempt = 0; attempt < 6; ++attempt) {
        p[i] = orig + h;
        bool stable = detail::rectifier_pattern(probe, batch) == pattern;
        p[i] = orig - h;
        stable = stable && detail::rectifier_pattern(probe, batch) == pattern;
        p[i] = orig;
        if (stable) break;
        h /= 10.0;
        if (attempt == 0) ++e.reduced_steps;
      }
      p[i] = orig + h;
      const double up = evaluate_loss(probe, batch, w, tau2, form).total;
      p[i] = orig - h;
      const double down = evaluate_loss(probe, batch, w, tau2, form).total;
      p[i] = orig;
      const double numeric = (up - down) / (2.0 * h);
      max_diff = std::max(max_diff, std::abs(numeric - g[i]));
      max_mag = std::max({max_mag, std::abs(numeric), std::abs(g[i])});
    }
    e.max_relative_error = max_diff / max_mag;
    out.push_back(e);
  });
  return out;
}

class TrainingDiverged : public Error {
 public:
  TrainingDiverged(std::size_t step, double total)
      : Error("training diverged at step " + std::to_string(step) + " (total loss " + std::to_string(total) + ")"),
        step_(step) {}
  std::size_t step() const { return step_; }

 private:
  std::size_t step_;
};

// Full batches plus a trailing partial batch when it holds at least 2 rows.
inline std::size_t steps_per_epoch(std::size_t n, std::size_t batch_size) {
  return n / batch_size + (n % batch_size >= 2 ? 1 : 0);
}

struct TrainResult {
  ProjectorParams params;
  std::vector<LossReport> history;
};

using EpochCallback = std::function<void(std::size_t epoch, const ProjectorParams&)>;

// Extends the leaf space onto the frozen base space: only the projector is updated.
inline TrainResult train_extension(const QuadrupleMatrices& quads, ProjectorParams pp, const TrainConfig& cfg,
                                   const EpochCallback& on_epoch_end = {}) {
  cfg.validate();
  const std::size_t n = quads.size();
  if (n == 0) throw Error("empty training set");
  const std::size_t per_epoch = steps_per_epoch(n, cfg.batch_size);
  if (per_epoch == 0) throw Error("training set too small for a batch of 2");
  const std::size_t total_steps = cfg.epochs * per_epoch;

  pp.mode = Mode::train;
  const TermWeights weights = TermWeights::from(cfg.lambda, cfg.loss_mask);
  const AdamWConfig opt_cfg = cfg.adamw();
  OptimizerState state = init_optimizer_state(pp);
  Rng rng(derive_seed(cfg.seed, 0x45504f4348ULL));

  if (cfg.grad_check) {
    const std::size_t m = std::min<std::size_t>(n, 16);
    std::vector<Eigen::Index> idx(m);
    std::iota(idx.begin(), idx.end(), 0);
    for (const auto& e : finite_difference_check(pp, gather_batch(quads, idx), weights, cfg.tau2, cfg.intra_form)) {
      if (e.max_relative_error > 1e-4) {
        throw Error("gradient check failed for " + e.tensor + " (relative error " +
                    std::to_string(e.max_relative_error) + ")");
      }
    }
  }

  TrainResult result;
  result.history.reserve(total_steps);
  std::vector<Eigen::Index> order(n);
  std::size_t step = 0;
  for (std::size_t epoch = 0; epoch < cfg.epochs; ++epoch) {
    std::iota(order.begin(), order.end(), 0);
    std::shuffle(order.begin(), order.end(), rng);
    for (std::size_t s = 0; s < per_epoch; ++s, ++step) {
      const std::size_t begin = s * cfg.batch_size;
      const std::size_t end = std::min(n, begin + cfg.batch_size);
      const std::vector<Eigen::Index> idx(order.begin() + static_cast<std::ptrdiff_t>(begin),
                                          order.begin() + static_cast<std::ptrdiff_t>(end));
      const double lr = cosine_lr(step, total_steps, cfg.lr0);
      StepResult r = loss_and_gradients(pp, gather_batch(quads, idx), weights, cfg.tau2, cfg.intra_form);
      if (!std::isfinite(r.report.total)) throw TrainingDiverged(step, r.report.total);
      adamw_step(pp, r.grads, state, lr, opt_cfg);
      r.report.step = step;
      r.report.lr = lr;
      result.history.push_back(r.report);
    }
    if (on_epoch_end) on_epoch_end(epoch, pp);
  }
  pp.mode = Mode::eval;
  result.params = std::move(pp);
  return result;
}

inline void write_loss_history(const std::vector<LossReport>& history, std::ostream& os) {
  os << "step,lr,l_intra,l_avc,l_atc,l_tvc,l_ttc,total\n";
  os << std::setprecision(9);
  for (const auto& r : history) {
    os << r.step << ',' << r.lr << ',' << r.l_intra << ',' << r.l_avc << ',' << r.l_atc << ',' << r.l_tvc << ','
       << r.l_ttc << ',' << r.total << '\n';
  }
}

inline void save_loss_history(const std::vector<LossReport>& history, const std::filesystem::path& path) {
  std::ofstream os(path, std::ios::trunc);
  if (!os) throw Error("cannot open for writing: " + path.string());
  write_loss_history(history, os);
}

}  // namespace mcr
