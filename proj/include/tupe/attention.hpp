#pragma once

// Pre-softmax score assembly for every positional-encoding variant, and the
// multi-head attention that consumes the scores.

#include <array>
#include <cstddef>
#include <cstdint>
#include <map>
#include <span>
#include <string>
#include <string_view>
#include <vector>

#include "tupe/posenc.hpp"
#include "tupe/tensor.hpp"

namespace tupe {

enum class EncodingVariant {
  kAbsBaseline,  // w + p at the input
  kShawRel,      // w + p at the input, query-to-relative-key vectors per layer
  kT5Rel,        // w + p at the input, scalar relative bias shared by layers
  kUntiedAbs,    // word-only input, untied positional correlation
  kUntiedRel,    // untied correlation + scalar relative bias
  kTupeA,        // untied correlation with [CLS] reset
  kTupeR,        // reset(untied correlation + relative bias)
  kTupeATieCls,  // TUPE-A without the reset
  kBertAd,       // word-only input, four terms with separate projections
};

inline constexpr std::array<EncodingVariant, 9> kAllVariants = {
    EncodingVariant::kAbsBaseline, EncodingVariant::kShawRel,   EncodingVariant::kT5Rel,
    EncodingVariant::kUntiedAbs,   EncodingVariant::kUntiedRel, EncodingVariant::kTupeA,
    EncodingVariant::kTupeR,       EncodingVariant::kTupeATieCls, EncodingVariant::kBertAd,
};

std::string_view variant_name(EncodingVariant v);
/// Accepts the names produced by variant_name(); throws std::invalid_argument.
EncodingVariant parse_variant(std::string_view name);

/// Which ingredients a variant uses.
struct VariantTraits {
  bool position_in_input = false;
  bool untied_correlation = false;
  bool relative_bias = false;
  bool shaw = false;
  bool reset = false;
  bool four_term = false;
};
VariantTraits variant_traits(EncodingVariant v);
bool is_tupe_family(EncodingVariant v);

/// Per-layer projections. Head h uses columns [h*d_h, (h+1)*d_h) of W_Q,
/// W_K and W_V; W_O mixes the concatenated heads.
struct AttentionLayerParams {
  Tensor w_q;   // [d x d]
  Tensor w_k;   // [d x d]
  Tensor w_v;   // [d x d]
  Tensor w_o;   // [d x d]
  Tensor shaw;  // [(2t+1) x d_h], Shaw variant only
};

/// Per-head n x n scores and the additive terms that produced them.
/// Component names: "word-word", "word-pos", "pos-word", "pos-pos",
/// "rel-bias", "reset-applied". For the Shaw variant "rel-bias" holds the
/// query-dependent relative-key term.
struct ScoreMap {
  std::vector<Tensor> scores;
  std::map<std::string, std::vector<Tensor>> components;

  std::size_t heads() const { return scores.size(); }
  std::size_t length() const { return scores.empty() ? 0 : scores.front().rows(); }
};

/// (1/sqrt(d_h)) (x W_Q)(x W_K)^T per head; x already holds w + p.
ScoreMap scores_abs_baseline(const Tensor& x, const AttentionLayerParams& layer,
                             std::size_t heads);

/// Baseline scores plus (1/sqrt(d_h)) (x_i W_Q) a_{clip(j-i)}^T.
ScoreMap scores_shaw(const Tensor& x, const AttentionLayerParams& layer, std::size_t heads,
                     int clip);

/// Baseline scores plus the unscaled scalar bias b[h][clip(j-i)].
ScoreMap scores_t5(const Tensor& x, const AttentionLayerParams& layer, std::size_t heads,
                   const RelativeBiasTable& bias);

/// The four word/position products, each scaled by 1/sqrt(4 d_h). `p` is
/// the n x d (normalised) position block; x excludes positions.
ScoreMap scores_bert_ad(const Tensor& x, const Tensor& p, const AttentionLayerParams& layer,
                        const PositionalProjection& proj);

/// (1/sqrt(2 d_h)) (x W_Q)(x W_K)^T + V_final[h]. `v_final` is computed once
/// per forward pass and shared by every layer.
ScoreMap scores_tupe(const Tensor& x, const AttentionLayerParams& layer,
                     const PositionalCorrelation& v_final);

/// Key-padding mask for n positions (nonzero = pad) expanded to n x n.
std::vector<std::uint8_t> key_padding_mask(std::span<const std::uint8_t> pad, std::size_t n);

/// Softmax over (pad-masked) scores, dropout on the probabilities, weighted
/// sum of x W_V per head, heads concatenated and projected by W_O.
Tensor attend(const ScoreMap& scores, const Tensor& x, const AttentionLayerParams& layer,
              std::span<const std::uint8_t> pad, double dropout_p, std::uint64_t dropout_key);

}  // namespace tupe
