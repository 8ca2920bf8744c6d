#pragma once

#include <Eigen/Dense>
#include <cmath>
#include <cstddef>
#include <random>
#include <vector>

#include "o3n/tensor.hpp"

// Gradient-free alignment of text embeddings and class prototypes.
namespace o3n::nma {

using Mat = Eigen::MatrixXd;

struct PrototypeBank {
  Mat prototypes;  // [L, d], base rows first
  double alpha = 0.9;
  std::size_t base_count = 0;
  std::size_t novel_count = 0;

  std::size_t size() const { return base_count + novel_count; }

  /// Rows drawn as fixed-seed unit vectors.
  static PrototypeBank seeded(std::size_t base, std::size_t novel, std::size_t d, std::uint64_t seed,
                              double alpha = 0.9) {
    if (base + novel < 1 || d < 1) throw PreconditionError("prototype bank needs L >= 1 and d >= 1");
    PrototypeBank b;
    b.base_count = base;
    b.novel_count = novel;
    b.alpha = alpha;
    b.prototypes.resize(static_cast<Eigen::Index>(base + novel), static_cast<Eigen::Index>(d));
    std::mt19937_64 rng(seed);
    std::normal_distribution<double> n;
    for (Eigen::Index r = 0; r < b.prototypes.rows(); ++r) {
      for (Eigen::Index c = 0; c < b.prototypes.cols(); ++c) b.prototypes(r, c) = n(rng);
      b.prototypes.row(r).normalize();
    }
    return b;
  }
};

/// P_b <- α·P_b + (1-α)·mean of the embeddings labelled b. Classes without
/// pixels keep their prototype. Labels < 0 are ignored; labels must name
/// base rows.
inline void ema_update(PrototypeBank& bank, const Mat& pixels, const std::vector<int>& labels) {
  if (static_cast<std::size_t>(pixels.rows()) != labels.size()) throw ShapeError("ema_update: label count mismatch");
  if (pixels.cols() != bank.prototypes.cols()) throw ShapeError("ema_update: embedding width mismatch");
  Mat sums = Mat::Zero(static_cast<Eigen::Index>(bank.base_count), pixels.cols());
  std::vector<double> counts(bank.base_count, 0.0);
  for (std::size_t i = 0; i < labels.size(); ++i) {
    if (labels[i] < 0) continue;
    if (static_cast<std::size_t>(labels[i]) >= bank.base_count)
      throw PreconditionError("ema_update: label " + std::to_string(labels[i]) + " is not a base class");
    sums.row(labels[i]) += pixels.row(static_cast<Eigen::Index>(i));
    counts[static_cast<std::size_t>(labels[i])] += 1.0;
  }
  for (std::size_t b = 0; b < bank.base_count; ++b) {
    if (counts[b] == 0.0) continue;
    const auto r = static_cast<Eigen::Index>(b);
    bank.prototypes.row(r) = bank.alpha * bank.prototypes.row(r) + (1.0 - bank.alpha) * (sums.row(r) / counts[b]);
  }
}

/// S[a, b] = λ·cos(T0_a, P0_b); zero rows give zero affinity.
inline Mat affinity(const Mat& T0, const Mat& P0, double lambda) {
  if (T0.cols() != P0.cols()) throw ShapeError("affinity: embedding width mismatch");
  auto unit = [](const Mat& M) {
    Mat U = M;
    for (Eigen::Index r = 0; r < U.rows(); ++r) {
      const double n = U.row(r).norm();
      U.row(r) = n > 0.0 ? Eigen::RowVectorXd(U.row(r) / n) : Eigen::RowVectorXd::Zero(U.cols());
    }
    return U;
  };
  return lambda * unit(T0) * unit(P0).transpose();
}

struct WalkConfig {
  double beta = 0.1;
  double lambda = 1.0;
  std::size_t max_iters = 1000;
  double tol = 1e-12;

  void validate() const {
    if (!(beta >= 0.0 && beta < 1.0)) throw PreconditionError("walk beta must lie in [0, 1)");
    if (!(lambda > 0.0)) throw PreconditionError("walk lambda must be positive");
  }
};

struct StepResult {
  Mat T, P;
};

/// P_k = β·Sᵀ·T_prev + (1-β)·P0; T_k = β·S·P_k + (1-β)·T0.
inline StepResult walk_step(const Mat& T_prev, const Mat& T0, const Mat& P0, const Mat& S, double beta) {
  if (S.rows() != T0.rows() || S.cols() != P0.rows() || T_prev.rows() != T0.rows() || T_prev.cols() != T0.cols())
    throw ShapeError("walk_step: inconsistent shapes");
  StepResult r;
  r.P = beta * S.transpose() * T_prev + (1.0 - beta) * P0;
  r.T = beta * S * r.P + (1.0 - beta) * T0;
  return r;
}

struct IterativeResult {
  Mat T;
  std::size_t iterations = 0;
  bool converged = false;
};

inline IterativeResult align_iterative(const Mat& T0, const Mat& P0, const WalkConfig& cfg) {
  cfg.validate();
  const Mat S = affinity(T0, P0, cfg.lambda);
  IterativeResult r{T0, 0, false};
  while (r.iterations < cfg.max_iters) {
    Mat next = walk_step(r.T, T0, P0, S, cfg.beta).T;
    ++r.iterations;
    const double diff = (next - r.T).cwiseAbs().maxCoeff();
    r.T = std::move(next);
    if (diff < cfg.tol) {
      r.converged = true;
      break;
    }
  }
  return r;
}

/// Largest eigenvalue of the PSD matrix A by 50 steps of power iteration.
inline double spectral_radius_psd(const Mat& A) {
  if (A.rows() == 0) return 0.0;
  Eigen::VectorXd v = Eigen::VectorXd::Constant(A.rows(), 1.0 / std::sqrt(static_cast<double>(A.rows())));
  double est = 0.0;
  for (int k = 0; k < 50; ++k) {
    Eigen::VectorXd w = A * v;
    const double n = w.norm();
    if (n == 0.0) return 0.0;
    est = n;
    v = w / n;
  }
  return est;
}

/// T∞ = (1-β)·(I - β²·S·Sᵀ)⁻¹·(β·S·P0 + T0). Not renormalised.
inline Mat align_closed_form(const Mat& T0, const Mat& P0, const WalkConfig& cfg) {
  cfg.validate();
  if (cfg.beta == 0.0) return T0;
  const Mat S = affinity(T0, P0, cfg.lambda);
  const Mat A = S * S.transpose();
  const double rho = cfg.beta * cfg.beta * spectral_radius_psd(A);
  if (!(rho < 1.0))
    throw NumericalError("align_closed_form: walk does not converge (beta^2 * rho(S S^T) = " + std::to_string(rho) +
                         ")");
  const Mat M = Mat::Identity(A.rows(), A.cols()) - cfg.beta * cfg.beta * A;
  const Eigen::PartialPivLU<Mat> lu(M);
  if (lu.rcond() < 1e-12) throw NumericalError("align_closed_form: system is ill-conditioned");
  return (1.0 - cfg.beta) * lu.solve(cfg.beta * S * P0 + T0);
}

inline Mat to_matrix(const Tensor& t) {
  if (t.rank() != 2) throw ShapeError("expected a rank-2 tensor, got " + shape_str(t.shape()));
  return Eigen::Map<const Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>>(
      t.data(), static_cast<Eigen::Index>(t.dim(0)), static_cast<Eigen::Index>(t.dim(1)));
}

inline Tensor to_tensor(const Mat& m) {
  Tensor t({static_cast<std::size_t>(m.rows()), static_cast<std::size_t>(m.cols())});
  for (Eigen::Index r = 0; r < m.rows(); ++r)
    for (Eigen::Index c = 0; c < m.cols(); ++c) t.at(r, c) = m(r, c);
  return t;
}

}  // namespace o3n::nma
