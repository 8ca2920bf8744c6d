#pragma once

#include <array>
#include <cmath>
#include <cstddef>
#include <random>
#include <string>
#include <vector>

#include "o3n/autodiff.hpp"
#include "o3n/tensor.hpp"

namespace o3n {

/// Per-class unit text embeddings with a base/novel partition.
struct TextBank {
  Tensor embeddings;  // [N_c, d]
  std::vector<std::string> class_names;
  std::vector<bool> base_mask;

  std::size_t size() const { return class_names.size(); }
  std::size_t dim() const { return embeddings.rank() == 2 ? embeddings.dim(1) : 0; }

  void validate() const {
    if (embeddings.rank() != 2 || embeddings.dim(0) < 1) throw ShapeError("text bank needs at least one [1, d] row");
    if (class_names.size() != embeddings.dim(0) || base_mask.size() != embeddings.dim(0))
      throw ShapeError("text bank names/mask disagree with embedding rows");
    const std::size_t d = dim();
    for (std::size_t l = 0; l < size(); ++l) {
      double n2 = 0.0;
      for (std::size_t k = 0; k < d; ++k) n2 += embeddings[l * d + k] * embeddings[l * d + k];
      if (std::abs(std::sqrt(n2) - 1.0) > 1e-6) throw DomainError("text embedding '" + class_names[l] + "' is not unit length");
    }
  }

  std::vector<std::size_t> indices(bool base) const {
    std::vector<std::size_t> out;
    for (std::size_t l = 0; l < size(); ++l)
      if (base_mask[l] == base) out.push_back(l);
    return out;
  }

  Tensor rows(const std::vector<std::size_t>& idx) const {
    const std::size_t d = dim();
    Tensor out({idx.size(), d});
    for (std::size_t r = 0; r < idx.size(); ++r) std::copy_n(embeddings.data() + idx[r] * d, d, out.data() + r * d);
    return out;
  }
};

// ---------------------------------------------------------------- weights

struct OcaDims {
  std::size_t embed_dim = 512;   // voxel / text embedding width
  std::size_t cost_dim = 128;    // d_o
  std::size_t text_proj = 16;    // projected text width inside tokens
  std::size_t guide_dim = 16;    // decoder channels used as guidance
  std::size_t guide_proj = 16;   // projected guidance width inside tokens
  std::size_t key_dim = 16;      // attention query/key width

  std::size_t token_dim() const { return cost_dim + text_proj + guide_proj; }
};

/// Aggregator weights, generic over the storage type (Tensor or ad::Var).
template <class T>
struct OcaWeights {
  T embed_w, embed_b;                 // [d_o, 1, 3, 3, 3], [d_o]
  std::array<T, 3> aspp_w, aspp_b;    // dilations 1, 2, 3: [d_o, d_o, 3, 3, 3], [d_o]
  T global_w, global_b;               // [d_o, d_o], [d_o]
  T text_w, guide_w;                  // [E, text_proj], [guide_dim, guide_proj]
  T q_w, k_w, v_w;                    // [token, key], [token, key], [token, d_o]
  T head_w;                           // [d_o, 1]

  template <class F>
  void for_each(F&& f) {
    visit(*this, f);
  }
  template <class F>
  void for_each(F&& f) const {
    visit(*this, f);
  }

 private:
  template <class Self, class F>
  static void visit(Self& s, F& f) {
    f("embed_w", s.embed_w);
    f("embed_b", s.embed_b);
    for (std::size_t i = 0; i < 3; ++i) {
      f("aspp" + std::to_string(i + 1) + "_w", s.aspp_w[i]);
      f("aspp" + std::to_string(i + 1) + "_b", s.aspp_b[i]);
    }
    f("global_w", s.global_w);
    f("global_b", s.global_b);
    f("text_w", s.text_w);
    f("guide_w", s.guide_w);
    f("q_w", s.q_w);
    f("k_w", s.k_w);
    f("v_w", s.v_w);
    f("head_w", s.head_w);
  }
};

using OcaParams = OcaWeights<Tensor>;
using OcaVars = OcaWeights<ad::Var>;

/// Fan-in scaled Gaussian initialisation; biases start at zero.
inline OcaParams init_oca(const OcaDims& dims, std::mt19937_64& rng) {
  auto gauss = [&](Shape s, std::size_t fan_in) {
    std::normal_distribution<double> n(0.0, 1.0 / std::sqrt(static_cast<double>(fan_in)));
    Tensor t(std::move(s));
    for (double& v : t.buffer()) v = n(rng);
    return t;
  };
  const std::size_t o = dims.cost_dim;
  OcaParams p;
  p.embed_w = gauss({o, 1, 3, 3, 3}, 27);
  p.embed_b = Tensor({o});
  for (std::size_t i = 0; i < 3; ++i) {
    p.aspp_w[i] = gauss({o, o, 3, 3, 3}, 27 * o * 4);
    p.aspp_b[i] = Tensor({o});
  }
  p.global_w = gauss({o, o}, o * 4);
  p.global_b = Tensor({o});
  p.text_w = gauss({dims.embed_dim, dims.text_proj}, dims.embed_dim);
  p.guide_w = gauss({dims.guide_dim, dims.guide_proj}, dims.guide_dim);
  p.q_w = gauss({dims.token_dim(), dims.key_dim}, dims.token_dim());
  p.k_w = gauss({dims.token_dim(), dims.key_dim}, dims.token_dim());
  p.v_w = gauss({dims.token_dim(), o}, dims.token_dim());
  p.head_w = gauss({o, 1}, o);
  return p;
}

inline OcaVars constants(ad::Tape& t, const OcaParams& p) {
  OcaVars v;
  std::vector<const Tensor*> ps;
  p.for_each([&](const std::string&, const Tensor& x) { ps.push_back(&x); });
  std::size_t i = 0;
  v.for_each([&](const std::string&, ad::Var& x) { x = t.constant(*ps[i++]); });
  return v;
}

// ---------------------------------------------------------------- pipeline

/// Cosine cost between voxel embeddings [N, d] and texts [L, d] -> [N, L].
/// Zero-norm rows give zero cost.
inline ad::Var occupancy_cost(const ad::Var& V, const ad::Var& texts) {
  if (V.shape().size() != 2 || texts.shape().size() != 2 || V.shape()[1] != texts.shape()[1])
    throw ShapeError("occupancy_cost: embedding width mismatch " + shape_str(V.shape()) + " vs " +
                     shape_str(texts.shape()));
  return ad::cosine_rows(V, texts);
}

/// One shared 1 -> d_o 3x3x3 convolution per class slice.
/// cost [N, L] over a grid of `dims` -> [L, d_o, H, W, D].
inline ad::Var embed_cost(const ad::Var& cost, const std::array<std::size_t, 3>& dims, const ad::Var& w,
                          const ad::Var& b) {
  const std::size_t L = cost.shape()[1];
  if (cost.shape()[0] != dims[0] * dims[1] * dims[2]) throw ShapeError("embed_cost: voxel count mismatch");
  const ad::Var slices = ad::reshape(ad::permute(cost, {1, 0}), {L, 1, dims[0], dims[1], dims[2]});
  return ad::add_channel_bias(ad::conv3d(slices, w, 1), b, 1);
}

/// Dilated 3x3x3 branches at rates 1, 2, 3 plus a global-average branch,
/// summed, then ELU. emb [L, d_o, H, W, D] -> same shape.
inline ad::Var spatial_aggregate(const ad::Var& emb, const OcaVars& p) {
  const Shape s = emb.shape();
  const std::size_t L = s[0], o = s[1], S = s[2] * s[3] * s[4];
  std::vector<ad::Var> terms;
  for (std::size_t i = 0; i < 3; ++i)
    terms.push_back(ad::add_channel_bias(ad::conv3d(emb, p.aspp_w[i], i + 1), p.aspp_b[i], 1));
  const ad::Var pooled = ad::mean_last(ad::reshape(emb, {L, o, S}));
  const ad::Var g = ad::add_channel_bias(ad::linear(pooled, p.global_w), p.global_b, 1);
  terms.push_back(ad::reshape(ad::broadcast_last(g, S), s));
  return ad::elu(ad::add_all(terms));
}

/// Per-voxel linear attention across the class tokens.
/// emb [L, d_o, H, W, D], texts [L, E], guide [N, guide_dim] -> [N, L, d_o].
inline ad::Var class_aggregate(const ad::Var& emb, const ad::Var& texts, const ad::Var& guide, const OcaVars& p) {
  const Shape s = emb.shape();
  const std::size_t L = s[0], o = s[1], N = s[2] * s[3] * s[4];
  const ad::Var tok_emb = ad::permute(ad::reshape(emb, {L, o, N}), {2, 0, 1});
  const ad::Var tokens = ad::concat_tokens(tok_emb, ad::linear(texts, p.text_w), ad::linear(guide, p.guide_w));
  return ad::linear_attention(ad::linear(tokens, p.q_w), ad::linear(tokens, p.k_w), ad::linear(tokens, p.v_w));
}

/// d_o -> 1 projection per class plus the raw cost, softmax over classes.
/// agg [N, L, d_o], cost [N, L] -> [N, L].
inline ad::Var oca_head(const ad::Var& agg, const ad::Var& cost, const ad::Var& head_w) {
  const std::size_t N = agg.shape()[0], L = agg.shape()[1];
  if (cost.shape() != Shape{N, L}) throw ShapeError("oca_head: residual cost shape mismatch");
  return ad::softmax(ad::add(ad::reshape(ad::linear(agg, head_w), {N, L}), cost));
}

/// Full aggregator: voxel embeddings [N, E], texts [L, E], guidance
/// [N, guide_dim] over a grid of `dims` -> class probabilities [N, L].
inline ad::Var oca_forward(const ad::Var& V, const ad::Var& texts, const ad::Var& guide,
                           const std::array<std::size_t, 3>& dims, const OcaVars& p) {
  const ad::Var cost = occupancy_cost(V, texts);
  const ad::Var emb = spatial_aggregate(embed_cost(cost, dims, p.embed_w, p.embed_b), p);
  return oca_head(class_aggregate(emb, texts, guide, p), cost, p.head_w);
}

// ---------------------------------------------------------------- affinity loss

struct AffinityResult {
  double value = 0.0;
  bool empty_mask = false;
};

namespace detail {

struct AffinityTerms {
  std::size_t K = 0;
  std::vector<double> A, B, n, m, S;  // per class
  std::vector<double> weight;         // scale applied to each class's defined terms
  std::vector<std::array<bool, 3>> defined;
  bool empty = true;
  double value = 0.0;
};

inline AffinityTerms affinity_terms(const Tensor& p, const std::vector<int>& labels, const std::vector<bool>& mask) {
  const std::size_t K = p.shape().back(), N = p.size() / K;
  if (labels.size() != N || mask.size() != N) throw ShapeError("affinity_loss: label/mask length mismatch");
  AffinityTerms r;
  r.K = K;
  r.A.assign(K, 0.0);
  r.B.assign(K, 0.0);
  r.n.assign(K, 0.0);
  r.m.assign(K, 0.0);
  r.S.assign(K, 0.0);
  r.weight.assign(K, 0.0);
  r.defined.assign(K, {false, false, false});
  for (std::size_t i = 0; i < N; ++i) {
    if (!mask[i] || labels[i] < 0) continue;
    if (static_cast<std::size_t>(labels[i]) >= K) throw DomainError("affinity_loss: label out of range");
    r.empty = false;
    for (std::size_t l = 0; l < K; ++l) {
      const double pil = p[i * K + l];
      r.B[l] += pil;
      if (static_cast<std::size_t>(labels[i]) == l) {
        r.A[l] += pil;
        r.n[l] += 1.0;
      } else {
        r.S[l] += 1.0 - pil;
        r.m[l] += 1.0;
      }
    }
  }
  if (r.empty) return r;
  std::size_t contributing = 0;
  double total = 0.0;
  std::vector<double> sums(K, 0.0);
  for (std::size_t l = 0; l < K; ++l) {
    r.defined[l] = {r.B[l] > 0.0, r.n[l] > 0.0, r.m[l] > 0.0};
    const int count = r.defined[l][0] + r.defined[l][1] + r.defined[l][2];
    if (count == 0) continue;
    ++contributing;
    if (r.defined[l][0]) sums[l] += r.A[l] / r.B[l];
    if (r.defined[l][1]) sums[l] += r.A[l] / r.n[l];
    if (r.defined[l][2]) sums[l] += r.S[l] / r.m[l];
    r.weight[l] = 3.0 / count;
  }
  for (std::size_t l = 0; l < K; ++l) {
    r.weight[l] /= static_cast<double>(contributing);
    total += r.weight[l] * sums[l];
  }
  r.value = -total;
  return r;
}

}  // namespace detail

/// Soft precision / recall / specificity loss over masked rows:
/// L = -(1/K)·Σ_l (P_l + R_l + S_l), in [-3, 0]. A class whose ratio is
/// undefined (zero denominator) has its defined terms rescaled to three.
/// Rows with a negative label are ignored; an empty selection returns 0 and
/// sets `empty_mask`.
inline AffinityResult affinity_loss(const Tensor& p, const std::vector<int>& labels, const std::vector<bool>& mask) {
  const auto r = detail::affinity_terms(p, labels, mask);
  return {r.value, r.empty};
}

inline ad::Var affinity_loss(const ad::Var& p, const std::vector<int>& labels, const std::vector<bool>& mask,
                             bool* empty_mask = nullptr) {
  auto r = std::make_shared<detail::AffinityTerms>(detail::affinity_terms(p.value(), labels, mask));
  if (empty_mask) *empty_mask = r->empty;
  return p.tape()->record(Tensor({1}, r->value), {p}, [p, labels, mask, r](ad::Tape& t, std::size_t self) {
    if (r->empty) return;
    const double g = t.grad_buffer(self)[0];
    double* d = t.accum(p);
    const std::size_t K = r->K, N = labels.size();
    for (std::size_t i = 0; i < N; ++i) {
      if (!mask[i] || labels[i] < 0) continue;
      for (std::size_t l = 0; l < K; ++l) {
        if (r->weight[l] == 0.0) continue;
        const bool pos = static_cast<std::size_t>(labels[i]) == l;
        double dv = 0.0;
        if (r->defined[l][0]) dv += ((pos ? r->B[l] : 0.0) - r->A[l]) / (r->B[l] * r->B[l]);
        if (r->defined[l][1] && pos) dv += 1.0 / r->n[l];
        if (r->defined[l][2] && !pos) dv -= 1.0 / r->m[l];
        d[i * K + l] -= g * r->weight[l] * dv;
      }
    }
  });
}

// ---------------------------------------------------------------- plain wrappers

/// Cost volume in grid layout: V [..., d] -> [..., N_c].
inline Tensor occupancy_cost(const Tensor& V, const TextBank& bank) {
  bank.validate();
  if (V.rank() < 1 || V.shape().back() != bank.dim()) throw ShapeError("occupancy_cost: embedding width mismatch");
  ad::Tape t;
  const std::size_t d = bank.dim();
  Tensor c = occupancy_cost(t.constant(V.reshaped({V.size() / d, d})), t.constant(bank.embeddings)).value();
  Shape s = V.shape();
  s.back() = bank.size();
  return std::move(c).reshaped(s);
}

/// cost [H, W, D, N_c] -> [H, W, D, N_c, d_o].
inline Tensor embed_cost(const Tensor& cost, const Tensor& w, const Tensor& b) {
  if (cost.rank() != 4) throw ShapeError("embed_cost expects [H, W, D, N_c]");
  ad::Tape t;
  const std::size_t N = cost.dim(0) * cost.dim(1) * cost.dim(2), L = cost.dim(3), o = w.dim(0);
  const Tensor e = embed_cost(t.constant(cost.reshaped({N, L})), {cost.dim(0), cost.dim(1), cost.dim(2)},
                              t.constant(w), t.constant(b))
                       .value();
  return permute(e.reshaped({L, o, cost.dim(0), cost.dim(1), cost.dim(2)}), {2, 3, 4, 0, 1});
}

/// emb [H, W, D, N_c, d_o] -> same shape.
inline Tensor spatial_aggregate(const Tensor& emb, const OcaParams& p) {
  if (emb.rank() != 5) throw ShapeError("spatial_aggregate expects [H, W, D, N_c, d_o]");
  ad::Tape t;
  const Tensor x = permute(emb, {3, 4, 0, 1, 2});
  const Tensor y = spatial_aggregate(t.constant(x), constants(t, p)).value();
  return permute(y, {2, 3, 4, 0, 1});
}

/// emb [H, W, D, N_c, d_o], guide [H, W, D, guide_dim] -> [H, W, D, N_c, d_o].
inline Tensor class_aggregate(const Tensor& emb, const TextBank& bank, const Tensor& guide, const OcaParams& p) {
  if (emb.rank() != 5) throw ShapeError("class_aggregate expects [H, W, D, N_c, d_o]");
  ad::Tape t;
  const std::size_t N = emb.dim(0) * emb.dim(1) * emb.dim(2);
  const Tensor x = permute(emb, {3, 4, 0, 1, 2});
  const Tensor y = class_aggregate(t.constant(x), t.constant(bank.embeddings),
                                   t.constant(guide.reshaped({N, guide.size() / N})), constants(t, p))
                       .value();
  return y.reshaped(emb.shape());
}

/// emb [..., N_c, d_o], residual [..., N_c] -> probabilities [..., N_c].
inline Tensor oca_head(const Tensor& emb, const Tensor& residual, const Tensor& head_w) {
  const std::size_t L = residual.shape().back(), N = residual.size() / L;
  if (emb.size() != N * L * head_w.dim(0)) throw ShapeError("oca_head: embedding shape mismatch");
  ad::Tape t;
  const Tensor p = oca_head(t.constant(emb.reshaped({N, L, head_w.dim(0)})), t.constant(residual.reshaped({N, L})),
                            t.constant(head_w))
                       .value();
  return p.reshaped(residual.shape());
}

}  // namespace o3n
