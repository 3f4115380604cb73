#include "tupe/attention.hpp"

#include <cmath>
#include <stdexcept>

#include "tupe/rng.hpp"

namespace tupe {

namespace {

struct VariantEntry {
  EncodingVariant variant;
  std::string_view name;
};

constexpr std::array<VariantEntry, 9> kNames = {{
    {EncodingVariant::kAbsBaseline, "abs"},
    {EncodingVariant::kShawRel, "shaw"},
    {EncodingVariant::kT5Rel, "t5"},
    {EncodingVariant::kUntiedAbs, "untied-abs"},
    {EncodingVariant::kUntiedRel, "untied-rel"},
    {EncodingVariant::kTupeA, "tupe-a"},
    {EncodingVariant::kTupeR, "tupe-r"},
    {EncodingVariant::kTupeATieCls, "tupe-a-tie-cls"},
    {EncodingVariant::kBertAd, "bert-ad"},
}};

std::size_t head_width(const Tensor& w, std::size_t heads) {
  if (heads == 0 || w.cols() % heads != 0) {
    throw DimensionError("projection width " + std::to_string(w.cols()) +
                         " is not divisible by " + std::to_string(heads) + " heads");
  }
  return w.cols() / heads;
}

Tensor head_cols(const Tensor& a, std::size_t h, std::size_t w) {
  return slice_cols(a, h * w, (h + 1) * w);
}

// Scaled content products for every head.
std::vector<Tensor> content_scores(const Tensor& x, const AttentionLayerParams& layer,
                                   std::size_t heads, double s) {
  const std::size_t w = head_width(layer.w_q, heads);
  const Tensor q = matmul(x, layer.w_q);
  const Tensor k = matmul(x, layer.w_k);
  std::vector<Tensor> out;
  out.reserve(heads);
  for (std::size_t h = 0; h < heads; ++h) {
    out.push_back(scale(matmul_nt(head_cols(q, h, w), head_cols(k, h, w)), s));
  }
  return out;
}

}  // namespace

std::string_view variant_name(EncodingVariant v) {
  for (const auto& e : kNames) {
    if (e.variant == v) return e.name;
  }
  throw std::invalid_argument("unknown encoding variant");
}

EncodingVariant parse_variant(std::string_view name) {
  for (const auto& e : kNames) {
    if (e.name == name) return e.variant;
  }
  throw std::invalid_argument("unknown encoding variant '" + std::string(name) + "'");
}

VariantTraits variant_traits(EncodingVariant v) {
  VariantTraits t;
  switch (v) {
    case EncodingVariant::kAbsBaseline:
      t.position_in_input = true;
      break;
    case EncodingVariant::kShawRel:
      t.position_in_input = true;
      t.shaw = true;
      break;
    case EncodingVariant::kT5Rel:
      t.position_in_input = true;
      t.relative_bias = true;
      break;
    case EncodingVariant::kUntiedAbs:
    case EncodingVariant::kTupeATieCls:
      t.untied_correlation = true;
      break;
    case EncodingVariant::kUntiedRel:
      t.untied_correlation = true;
      t.relative_bias = true;
      break;
    case EncodingVariant::kTupeA:
      t.untied_correlation = true;
      t.reset = true;
      break;
    case EncodingVariant::kTupeR:
      t.untied_correlation = true;
      t.relative_bias = true;
      t.reset = true;
      break;
    case EncodingVariant::kBertAd:
      t.four_term = true;
      break;
  }
  return t;
}

bool is_tupe_family(EncodingVariant v) { return variant_traits(v).untied_correlation; }

ScoreMap scores_abs_baseline(const Tensor& x, const AttentionLayerParams& layer,
                             std::size_t heads) {
  const std::size_t w = head_width(layer.w_q, heads);
  ScoreMap out;
  out.scores = content_scores(x, layer, heads, 1.0 / std::sqrt(static_cast<double>(w)));
  out.components["word-word"] = out.scores;
  return out;
}

ScoreMap scores_shaw(const Tensor& x, const AttentionLayerParams& layer, std::size_t heads,
                     int clip) {
  const std::size_t w = head_width(layer.w_q, heads);
  const std::size_t width = 2 * static_cast<std::size_t>(clip) + 1;
  if (!layer.shaw.defined() || layer.shaw.rows() != width || layer.shaw.cols() != w) {
    throw DimensionError("Shaw relative table must be [" + std::to_string(width) + "," +
                         std::to_string(w) + "]");
  }
  const double s = 1.0 / std::sqrt(static_cast<double>(w));
  const std::size_t n = x.rows();
  std::vector<std::size_t> index(n * n);
  for (std::size_t i = 0; i < n; ++i) {
    for (std::size_t j = 0; j < n; ++j) {
      const int c = clip_distance(static_cast<long>(j) - static_cast<long>(i), clip);
      index[i * n + j] = i * width + static_cast<std::size_t>(c + clip);
    }
  }
  const Tensor q = matmul(x, layer.w_q);
  ScoreMap out;
  out.components["word-word"] = content_scores(x, layer, heads, s);
  std::vector<Tensor>& rel = out.components["rel-bias"];
  for (std::size_t h = 0; h < heads; ++h) {
    // [n x (2t+1)] query-to-distance products, then a lookup by clip(j-i).
    const Tensor qa = matmul_nt(head_cols(q, h, w), layer.shaw);
    rel.push_back(scale(gather(qa, index, {n, n}), s));
    out.scores.push_back(add(out.components["word-word"][h], rel.back()));
  }
  return out;
}

ScoreMap scores_t5(const Tensor& x, const AttentionLayerParams& layer, std::size_t heads,
                   const RelativeBiasTable& bias) {
  const std::size_t w = head_width(layer.w_q, heads);
  ScoreMap out;
  out.components["word-word"] = content_scores(x, layer, heads, 1.0 / std::sqrt(static_cast<double>(w)));
  std::vector<Tensor>& rel = out.components["rel-bias"];
  for (std::size_t h = 0; h < heads; ++h) {
    rel.push_back(relative_bias_matrix(bias, h, x.rows()));
    out.scores.push_back(add(out.components["word-word"][h], rel.back()));
  }
  return out;
}

ScoreMap scores_bert_ad(const Tensor& x, const Tensor& p, const AttentionLayerParams& layer,
                        const PositionalProjection& proj) {
  if (p.rows() != x.rows() || p.cols() != x.cols()) {
    throw DimensionError("scores_bert_ad: position block " + shape_str(p.shape()) +
                         " does not match input " + shape_str(x.shape()));
  }
  const std::size_t heads = proj.heads;
  const std::size_t w = head_width(layer.w_q, heads);
  const double s = 1.0 / std::sqrt(4.0 * static_cast<double>(w));
  const Tensor q = matmul(x, layer.w_q);
  const Tensor k = matmul(x, layer.w_k);
  const Tensor pq = matmul(p, proj.u_q);
  const Tensor pk = matmul(p, proj.u_k);
  ScoreMap out;
  for (std::size_t h = 0; h < heads; ++h) {
    const Tensor qh = head_cols(q, h, w), kh = head_cols(k, h, w);
    const Tensor pqh = head_cols(pq, h, w), pkh = head_cols(pk, h, w);
    Tensor ww = scale(matmul_nt(qh, kh), s);
    Tensor wp = scale(matmul_nt(qh, pkh), s);
    Tensor pw = scale(matmul_nt(pqh, kh), s);
    Tensor pp = scale(matmul_nt(pqh, pkh), s);
    out.scores.push_back(add(add(ww, wp), add(pw, pp)));
    out.components["word-word"].push_back(ww);
    out.components["word-pos"].push_back(wp);
    out.components["pos-word"].push_back(pw);
    out.components["pos-pos"].push_back(pp);
  }
  return out;
}

ScoreMap scores_tupe(const Tensor& x, const AttentionLayerParams& layer,
                     const PositionalCorrelation& v_final) {
  const std::size_t heads = v_final.heads.size();
  if (heads == 0) throw std::invalid_argument("scores_tupe: empty positional correlation");
  if (v_final.length() != x.rows()) {
    throw DimensionError("scores_tupe: positional correlation covers " +
                         std::to_string(v_final.length()) + " positions, input has " +
                         std::to_string(x.rows()));
  }
  const std::size_t w = head_width(layer.w_q, heads);
  ScoreMap out;
  out.components["word-word"] = content_scores(x, layer, heads, untied_scale(w));
  for (const auto& [name, part] : v_final.parts) out.components[name] = part;
  for (std::size_t h = 0; h < heads; ++h) {
    out.scores.push_back(add(out.components["word-word"][h], v_final.heads[h]));
  }
  return out;
}

std::vector<std::uint8_t> key_padding_mask(std::span<const std::uint8_t> pad, std::size_t n) {
  std::vector<std::uint8_t> mask(n * n, 0);
  if (pad.empty()) return mask;
  if (pad.size() != n) throw DimensionError("pad mask length does not match sequence length");
  bool any_real = false;
  for (std::size_t j = 0; j < n; ++j) any_real = any_real || !pad[j];
  if (!any_real) throw std::invalid_argument("attend: sequence is fully padded");
  for (std::size_t i = 0; i < n; ++i) {
    for (std::size_t j = 0; j < n; ++j) mask[i * n + j] = pad[j];
  }
  return mask;
}

Tensor attend(const ScoreMap& scores, const Tensor& x, const AttentionLayerParams& layer,
              std::span<const std::uint8_t> pad, double dropout_p, std::uint64_t dropout_key) {
  const std::size_t heads = scores.heads();
  const std::size_t n = x.rows();
  if (heads == 0 || scores.length() != n) {
    throw DimensionError("attend: score map does not match input length");
  }
  const std::size_t w = head_width(layer.w_v, heads);
  const std::vector<std::uint8_t> mask = key_padding_mask(pad, n);
  const bool masked = !pad.empty();
  const Tensor v = matmul(x, layer.w_v);
  std::vector<Tensor> outs;
  outs.reserve(heads);
  for (std::size_t h = 0; h < heads; ++h) {
    Tensor probs = softmax_rows(scores.scores[h], masked ? std::span<const std::uint8_t>(mask)
                                                          : std::span<const std::uint8_t>());
    probs = dropout(probs, dropout_p, mix_key({dropout_key, h}));
    outs.push_back(matmul(probs, head_cols(v, h, w)));
  }
  return matmul(heads == 1 ? outs.front() : concat_cols(outs), layer.w_o);
}

}  // namespace tupe
