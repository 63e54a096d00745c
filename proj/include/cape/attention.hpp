#pragma once

#include <algorithm>
#include <atomic>
#include <cstdint>
#include <optional>
#include <vector>

#include "cape/nn.hpp"

namespace cape {

enum class ViewRole { Reference, Target };

/// Tokens of one view. Every token shares the view's pose.
template <typename S>
struct ViewTokensT {
  TensorT<S> tokens;  // [T, d]
  Pose pose;
  ViewRole role = ViewRole::Target;
};

using ViewTokens = ViewTokensT<float>;

template <typename S>
struct AttentionOutputT {
  TensorT<S> tokens;                 // [T, d] per query view
  std::vector<TensorT<S>> weights;   // optional diagnostic, one [T, K] matrix per head
};

/// Deterministic counters for the cost of attention, in query-key token pairs
/// (per head). Used by the bench command; wall clock is reported separately.
struct AttentionStats {
  static inline std::atomic<std::uint64_t> self_pairs{0};
  static inline std::atomic<std::uint64_t> cross_pairs{0};
  static void reset() {
    self_pairs = 0;
    cross_pairs = 0;
  }
};

template <typename S>
struct AttentionParamsT {
  TensorT<S> wq, wk, wv, wo;      // [d, d]
  TensorT<S> ln_gamma, ln_beta;   // [d], used by the residual block wrappers

  static AttentionParamsT random(std::int64_t d, Rng& rng) {
    AttentionParamsT p;
    const double s = 1.0 / std::sqrt(static_cast<double>(d));
    p.wq = TensorT<S>::uniform({d, d}, rng, -s, s);
    p.wk = TensorT<S>::uniform({d, d}, rng, -s, s);
    p.wv = TensorT<S>::uniform({d, d}, rng, -s, s);
    p.wo = TensorT<S>::uniform({d, d}, rng, -s, s);
    p.ln_gamma = TensorT<S>({d});
    p.ln_gamma.fill(S(1));
    p.ln_beta = TensorT<S>({d});
    return p;
  }
};

namespace nn {

template <typename S>
struct AttentionWeightNodes {
  int wq = -1, wk = -1, wv = -1, wo = -1;
  int ln_gamma = -1, ln_beta = -1;
};

/// One view inside a tape: the node holding its [T, d] tokens plus its pose.
struct TapeView {
  int node;
  Pose pose;
};

namespace detail_attn {

/// Canonical ordering of key views so that pooled softmax sums do not depend
/// on caller list order: sort by pose parameters, breaking ties by token
/// content, keeping the original order for exact duplicates.
template <typename S>
std::vector<std::size_t> canonical_key_order(const TapeT<S>& t, const std::vector<TapeView>& views) {
  auto pose_key = [](const Pose& p) {
    std::vector<double> k;
    if (p.mode == PoseMode::FourDoF) {
      k = {0.0, p.p4.azimuth(), p.p4.elevation(), p.p4.roll(), p.p4.radius()};
    } else {
      k.push_back(1.0);
      for (int i = 0; i < 3; ++i)
        for (int j = 0; j < 3; ++j) k.push_back(p.p6.rotation()(i, j));
      for (int i = 0; i < 3; ++i) k.push_back(p.p6.translation()(i));
    }
    return k;
  };
  std::vector<std::vector<double>> keys;
  keys.reserve(views.size());
  for (const auto& v : views) keys.push_back(pose_key(v.pose));
  std::vector<std::size_t> order(views.size());
  for (std::size_t i = 0; i < order.size(); ++i) order[i] = i;
  std::stable_sort(order.begin(), order.end(), [&](std::size_t a, std::size_t b) {
    if (keys[a] != keys[b]) return keys[a] < keys[b];
    const auto& ta = t.val(views[a].node).data;
    const auto& tb = t.val(views[b].node).data;
    return std::lexicographical_compare(ta.begin(), ta.end(), tb.begin(), tb.end());
  });
  return order;
}

}  // namespace detail_attn

/// Multi-head scaled dot-product attention with the camera positional
/// transform on keys and queries (values are left untouched). Returns one
/// output node per query view; weights_out, when given, receives the softmax
/// matrices of the first query view per head.
template <typename S>
std::vector<int> cape_attention(TapeT<S>& t, const std::vector<TapeView>& queries,
                                const std::vector<TapeView>& keys_values,
                                const AttentionWeightNodes<S>& w, const CapeConfig& cfg, int heads,
                                bool is_self,
                                std::vector<TensorT<S>>* weights_out = nullptr) {
  if (keys_values.empty()) throw std::invalid_argument("cape_attention: empty key set");
  if (queries.empty()) throw std::invalid_argument("cape_attention: empty query set");
  const std::int64_t d = t.val(queries[0].node).dim(1);
  if (heads <= 0 || d % heads != 0) {
    throw std::invalid_argument("cape_attention: dimension not divisible by head count");
  }
  const std::int64_t dh = d / heads;
  check_cape_dimension(dh, cfg.mode);

  const auto order = detail_attn::canonical_key_order(t, keys_values);

  // Column ranges of each key view in caller order and in pooled order, used
  // to report diagnostic weights in the caller's layout.
  std::vector<std::int64_t> caller_off(keys_values.size() + 1, 0);
  for (std::size_t i = 0; i < keys_values.size(); ++i) {
    caller_off[i + 1] = caller_off[i] + t.val(keys_values[i].node).dim(0);
  }
  std::vector<std::int64_t> pooled_off(order.size(), 0);
  {
    std::int64_t off = 0;
    for (std::size_t oi = 0; oi < order.size(); ++oi) {
      pooled_off[oi] = off;
      off += t.val(keys_values[order[oi]].node).dim(0);
    }
  }

  // Per key view: project once, then split per head and pose-transform keys.
  std::vector<std::vector<int>> k_heads(static_cast<std::size_t>(heads));
  std::vector<std::vector<int>> v_heads(static_cast<std::size_t>(heads));
  std::int64_t total_keys = 0;
  for (std::size_t oi = 0; oi < order.size(); ++oi) {
    const TapeView& kv = keys_values[order[oi]];
    if (t.val(kv.node).dim(1) != d) throw std::invalid_argument("cape_attention: key dim mismatch");
    total_keys += t.val(kv.node).dim(0);
    const int kproj = matmul(t, kv.node, w.wk);
    const int vproj = matmul(t, kv.node, w.wv);
    for (int h = 0; h < heads; ++h) {
      int kh = slice_cols(t, kproj, h * dh, dh);
      kh = cape_rows(t, kh, kv.pose, AttentionRole::Key, cfg);
      k_heads[static_cast<std::size_t>(h)].push_back(kh);
      v_heads[static_cast<std::size_t>(h)].push_back(slice_cols(t, vproj, h * dh, dh));
    }
  }
  std::vector<int> k_cat(static_cast<std::size_t>(heads)), v_cat(static_cast<std::size_t>(heads));
  for (int h = 0; h < heads; ++h) {
    k_cat[static_cast<std::size_t>(h)] = vstack(t, k_heads[static_cast<std::size_t>(h)]);
    v_cat[static_cast<std::size_t>(h)] = vstack(t, v_heads[static_cast<std::size_t>(h)]);
  }

  const double inv_sqrt = 1.0 / std::sqrt(static_cast<double>(dh));
  std::vector<int> outputs;
  outputs.reserve(queries.size());
  std::int64_t total_queries = 0;
  for (std::size_t qi = 0; qi < queries.size(); ++qi) {
    const TapeView& qv = queries[qi];
    total_queries += t.val(qv.node).dim(0);
    const int qproj = matmul(t, qv.node, w.wq);
    std::vector<int> head_outs;
    head_outs.reserve(static_cast<std::size_t>(heads));
    for (int h = 0; h < heads; ++h) {
      int qh = slice_cols(t, qproj, h * dh, dh);
      qh = cape_rows(t, qh, qv.pose, AttentionRole::Query, cfg);
      const int kt = transpose2d(t, k_cat[static_cast<std::size_t>(h)]);
      int logits = matmul(t, qh, kt);
      logits = scale(t, logits, inv_sqrt);
      const int weights = softmax_rows(t, logits);
      if (weights_out && qi == 0) {
        // Restore caller key order in the diagnostic copy.
        const auto& wv_ = t.val(weights);
        TensorT<S> reordered(wv_.shape);
        const std::int64_t rows = wv_.dim(0), cols = wv_.dim(1);
        for (std::size_t oi = 0; oi < order.size(); ++oi) {
          const std::int64_t n = t.val(keys_values[order[oi]].node).dim(0);
          const std::int64_t src = pooled_off[oi], dst = caller_off[order[oi]];
          for (std::int64_t r = 0; r < rows; ++r)
            for (std::int64_t j = 0; j < n; ++j)
              reordered.at(r * cols + dst + j) = wv_.at(r * cols + src + j);
        }
        weights_out->push_back(std::move(reordered));
      }
      head_outs.push_back(matmul(t, weights, v_cat[static_cast<std::size_t>(h)]));
    }
    const int cat = hstack(t, head_outs);
    outputs.push_back(matmul(t, cat, w.wo));
  }

  const std::uint64_t pairs = static_cast<std::uint64_t>(total_queries) *
                              static_cast<std::uint64_t>(total_keys) *
                              static_cast<std::uint64_t>(heads);
  (is_self ? AttentionStats::self_pairs : AttentionStats::cross_pairs) += pairs;
  return outputs;
}

/// Pre-norm residual self-attention over target views:
/// x_v <- x_v + Attn(LN(x_v); keys/values = LN of every target view).
template <typename S>
std::vector<int> self_attention_block(TapeT<S>& t, const std::vector<TapeView>& targets,
                                      const AttentionWeightNodes<S>& w, const CapeConfig& cfg,
                                      int heads) {
  if (targets.empty()) throw std::invalid_argument("self_attention_block: no target views");
  std::vector<TapeView> normed;
  normed.reserve(targets.size());
  for (const auto& v : targets) {
    normed.push_back({layernorm_rows(t, v.node, w.ln_gamma, w.ln_beta), v.pose});
  }
  const auto att = cape_attention(t, normed, normed, w, cfg, heads, /*is_self=*/true);
  std::vector<int> out;
  out.reserve(targets.size());
  for (std::size_t i = 0; i < targets.size(); ++i) out.push_back(add(t, targets[i].node, att[i]));
  return out;
}

/// Pre-norm residual cross-attention from target views to reference tokens.
template <typename S>
std::vector<int> cross_attention_block(TapeT<S>& t, const std::vector<TapeView>& targets,
                                       const std::vector<TapeView>& references,
                                       const AttentionWeightNodes<S>& w, const CapeConfig& cfg,
                                       int heads) {
  if (references.empty()) throw std::invalid_argument("cross_attention_block: empty reference set");
  std::vector<TapeView> normed;
  normed.reserve(targets.size());
  for (const auto& v : targets) {
    normed.push_back({layernorm_rows(t, v.node, w.ln_gamma, w.ln_beta), v.pose});
  }
  const auto att = cape_attention(t, normed, references, w, cfg, heads, /*is_self=*/false);
  std::vector<int> out;
  out.reserve(targets.size());
  for (std::size_t i = 0; i < targets.size(); ++i) out.push_back(add(t, targets[i].node, att[i]));
  return out;
}

}  // namespace nn

// ---------------------------------------------------------------------------
// Value-level wrappers around the tape builders, for callers that just want
// the numbers (tests, the verify suite).

template <typename S>
nn::AttentionWeightNodes<S> leaf_attention_params(nn::TapeT<S>& t, const AttentionParamsT<S>& p,
                                                  bool requires_grad = false) {
  nn::AttentionWeightNodes<S> w;
  w.wq = t.leaf(p.wq, requires_grad);
  w.wk = t.leaf(p.wk, requires_grad);
  w.wv = t.leaf(p.wv, requires_grad);
  w.wo = t.leaf(p.wo, requires_grad);
  w.ln_gamma = t.leaf(p.ln_gamma, requires_grad);
  w.ln_beta = t.leaf(p.ln_beta, requires_grad);
  return w;
}

template <typename S>
std::vector<AttentionOutputT<S>> cape_attention_eval(const std::vector<ViewTokensT<S>>& queries,
                                                     const std::vector<ViewTokensT<S>>& keys_values,
                                                     const AttentionParamsT<S>& params,
                                                     const CapeConfig& cfg, int heads,
                                                     bool collect_weights = false) {
  nn::TapeT<S> t;
  const auto w = leaf_attention_params(t, params);
  std::vector<nn::TapeView> q, kv;
  for (const auto& v : queries) q.push_back({t.leaf(v.tokens), v.pose});
  for (const auto& v : keys_values) kv.push_back({t.leaf(v.tokens), v.pose});
  std::vector<TensorT<S>> weights;
  const auto outs = nn::cape_attention(t, q, kv, w, cfg, heads, /*is_self=*/false,
                                       collect_weights ? &weights : nullptr);
  std::vector<AttentionOutputT<S>> result;
  for (std::size_t i = 0; i < outs.size(); ++i) {
    AttentionOutputT<S> o;
    o.tokens = t.val(outs[i]);
    if (collect_weights && i == 0) o.weights = weights;
    result.push_back(std::move(o));
  }
  return result;
}

template <typename S>
std::vector<ViewTokensT<S>> self_attention_block_eval(const std::vector<ViewTokensT<S>>& targets,
                                                      const AttentionParamsT<S>& params,
                                                      const CapeConfig& cfg, int heads) {
  nn::TapeT<S> t;
  const auto w = leaf_attention_params(t, params);
  std::vector<nn::TapeView> tv;
  for (const auto& v : targets) tv.push_back({t.leaf(v.tokens), v.pose});
  const auto outs = nn::self_attention_block(t, tv, w, cfg, heads);
  std::vector<ViewTokensT<S>> result = targets;
  for (std::size_t i = 0; i < outs.size(); ++i) result[i].tokens = t.val(outs[i]);
  return result;
}

template <typename S>
std::vector<ViewTokensT<S>> cross_attention_block_eval(const std::vector<ViewTokensT<S>>& targets,
                                                       const std::vector<ViewTokensT<S>>& references,
                                                       const AttentionParamsT<S>& params,
                                                       const CapeConfig& cfg, int heads) {
  nn::TapeT<S> t;
  const auto w = leaf_attention_params(t, params);
  std::vector<nn::TapeView> tv, rv;
  for (const auto& v : targets) tv.push_back({t.leaf(v.tokens), v.pose});
  for (const auto& v : references) rv.push_back({t.leaf(v.tokens), v.pose});
  const auto outs = nn::cross_attention_block(t, tv, rv, w, cfg, heads);
  std::vector<ViewTokensT<S>> result = targets;
  for (std::size_t i = 0; i < outs.size(); ++i) result[i].tokens = t.val(outs[i]);
  return result;
}

}  // namespace cape
