#include "tupe/model.hpp"

#include <cmath>
#include <stdexcept>

#include "tupe/rng.hpp"
#include "tupe/vocab.hpp"

namespace tupe {

namespace {

// Dropout sites inside one forward pass.
enum : std::uint64_t { kSiteEmbed = 1, kSiteProbs = 2, kSiteAttnOut = 3, kSiteFfnOut = 4 };

std::uint64_t dropout_key(const ModelConfig& c, const ForwardOptions& o, std::uint64_t layer,
                          std::uint64_t site) {
  return mix_key({c.seed, o.step, layer, site});
}

Tensor normal_param(Rng& rng, Shape shape, double std) {
  std::vector<double> v(shape_numel(shape));
  for (double& x : v) x = std * rng.normal();
  return Tensor::parameter(std::move(shape), std::move(v));
}

Tensor filled_param(Shape shape, double value) {
  return Tensor::parameter(shape, std::vector<double>(shape_numel(shape), value));
}

void check_tokens(const ModelConfig& config, std::span<const int> tokens) {
  const std::size_t n = tokens.size();
  if (n == 0) throw std::invalid_argument("embed: empty token sequence");
  if (n > config.n_max) {
    throw std::out_of_range("embed: sequence length " + std::to_string(n) + " exceeds n_max " +
                            std::to_string(config.n_max));
  }
  for (int id : tokens) {
    if (id < 0 || static_cast<std::size_t>(id) >= config.vocab_size) {
      throw std::out_of_range("embed: token id " + std::to_string(id) + " outside vocabulary of " +
                              std::to_string(config.vocab_size));
    }
  }
}

// Variants whose scores are a scaled content product plus an optional
// item-independent bias; these run through multi_head_attention.
bool shared_bias_scores(const ModelConfig& config) {
  switch (config.variant) {
    case EncodingVariant::kBertAd:
      return false;
    case EncodingVariant::kShawRel:
      return !config.positional;
    default:
      return true;
  }
}

void push(std::vector<NamedParameter>& out, std::string name, const Tensor& t, bool decay) {
  if (t.defined()) out.push_back({std::move(name), t, decay});
}

}  // namespace

void ModelConfig::validate() const {
  if (d == 0 || heads == 0) throw std::invalid_argument("d and heads must be positive");
  if (d % heads != 0) {
    throw std::invalid_argument("d (" + std::to_string(d) + ") must be divisible by heads (" +
                                std::to_string(heads) + ")");
  }
  if (n_max < 2) throw std::invalid_argument("n_max must be at least 2");
  if (vocab_size <= static_cast<std::size_t>(kNumSpecialTokens)) {
    throw std::invalid_argument("vocab_size must exceed the reserved specials");
  }
  if (d_ff == 0) throw std::invalid_argument("d_ff must be positive");
  if (clip < 1) throw std::invalid_argument("clip range t must be >= 1");
  if (dropout < 0.0 || dropout >= 1.0) throw std::invalid_argument("dropout must lie in [0, 1)");
  if (num_classes == 0) throw std::invalid_argument("num_classes must be positive");
  if (!(init_std >= 0.0)) throw std::invalid_argument("init_std must be non-negative");
}

nlohmann::json to_json(const ModelConfig& c) {
  return {
      {"d", c.d},
      {"heads", c.heads},
      {"layers", c.layers},
      {"d_ff", c.d_ff},
      {"n_max", c.n_max},
      {"vocab_size", c.vocab_size},
      {"clip", c.clip},
      {"variant", std::string(variant_name(c.variant))},
      {"dropout", c.dropout},
      {"seed", c.seed},
      {"positional", c.positional},
      {"num_classes", c.num_classes},
      {"init_std", c.init_std},
  };
}

ModelConfig model_config_from_json(const nlohmann::json& j) {
  ModelConfig c;
  c.d = j.at("d").get<std::size_t>();
  c.heads = j.at("heads").get<std::size_t>();
  c.layers = j.at("layers").get<std::size_t>();
  c.d_ff = j.at("d_ff").get<std::size_t>();
  c.n_max = j.at("n_max").get<std::size_t>();
  c.vocab_size = j.at("vocab_size").get<std::size_t>();
  c.clip = j.at("clip").get<int>();
  c.variant = parse_variant(j.at("variant").get<std::string>());
  c.dropout = j.at("dropout").get<double>();
  c.seed = j.at("seed").get<std::uint64_t>();
  c.positional = j.at("positional").get<bool>();
  c.num_classes = j.at("num_classes").get<std::size_t>();
  c.init_std = j.at("init_std").get<double>();
  c.validate();
  return c;
}

std::vector<NamedParameter> ModelParams::named() const {
  std::vector<NamedParameter> out;
  push(out, "word_embedding", word_embedding, true);
  push(out, "pos.table", positions.table, true);
  push(out, "pos.ln_gain", positions.ln_gain, false);
  push(out, "pos.ln_bias", positions.ln_bias, false);
  push(out, "pos.u_q", projection.u_q, true);
  push(out, "pos.u_k", projection.u_k, true);
  push(out, "pos.rel_bias", relative_bias.bias, false);
  push(out, "pos.p_theta1", reset.p_theta1, true);
  push(out, "pos.p_theta2", reset.p_theta2, true);
  for (std::size_t l = 0; l < layers.size(); ++l) {
    const std::string p = "layer" + std::to_string(l) + ".";
    const EncoderLayerParams& L = layers[l];
    push(out, p + "attn.w_q", L.attn.w_q, true);
    push(out, p + "attn.w_k", L.attn.w_k, true);
    push(out, p + "attn.w_v", L.attn.w_v, true);
    push(out, p + "attn.w_o", L.attn.w_o, true);
    push(out, p + "attn.shaw", L.attn.shaw, true);
    push(out, p + "ln1_gain", L.ln1_gain, false);
    push(out, p + "ln1_bias", L.ln1_bias, false);
    push(out, p + "ff_w1", L.ff_w1, true);
    push(out, p + "ff_b1", L.ff_b1, false);
    push(out, p + "ff_w2", L.ff_w2, true);
    push(out, p + "ff_b2", L.ff_b2, false);
    push(out, p + "ln2_gain", L.ln2_gain, false);
    push(out, p + "ln2_bias", L.ln2_bias, false);
  }
  push(out, "mlm_bias", mlm_bias, false);
  push(out, "cls_weight", cls_weight, true);
  push(out, "cls_bias", cls_bias, false);
  return out;
}

ModelParams init_params(const ModelConfig& config) {
  config.validate();
  const VariantTraits traits = variant_traits(config.variant);
  const std::size_t d = config.d, V = config.vocab_size, dh = config.head_dim();
  const double s = config.init_std;
  Rng rng(config.seed);
  ModelParams p;
  p.word_embedding = normal_param(rng, {V, d}, s);
  p.positions.table = normal_param(rng, {config.n_max, d}, s);
  p.positions.ln_gain = filled_param({d}, 1.0);
  p.positions.ln_bias = filled_param({d}, 0.0);
  if (traits.untied_correlation || traits.four_term) {
    p.projection.u_q = normal_param(rng, {d, d}, s);
    p.projection.u_k = normal_param(rng, {d, d}, s);
  }
  p.projection.heads = config.heads;
  p.relative_bias.clip = config.clip;
  if (traits.relative_bias) {
    p.relative_bias.bias = filled_param({config.heads, 2 * static_cast<std::size_t>(config.clip) + 1}, 0.0);
  }
  if (traits.reset) {
    p.reset.p_theta1 = normal_param(rng, {1, d}, s);
    p.reset.p_theta2 = normal_param(rng, {1, d}, s);
  }
  for (std::size_t l = 0; l < config.layers; ++l) {
    EncoderLayerParams L;
    L.attn.w_q = normal_param(rng, {d, d}, s);
    L.attn.w_k = normal_param(rng, {d, d}, s);
    L.attn.w_v = normal_param(rng, {d, d}, s);
    L.attn.w_o = normal_param(rng, {d, d}, s);
    if (traits.shaw) L.attn.shaw = normal_param(rng, {2 * static_cast<std::size_t>(config.clip) + 1, dh}, s);
    L.ln1_gain = filled_param({d}, 1.0);
    L.ln1_bias = filled_param({d}, 0.0);
    L.ff_w1 = normal_param(rng, {d, config.d_ff}, s);
    L.ff_b1 = filled_param({config.d_ff}, 0.0);
    L.ff_w2 = normal_param(rng, {config.d_ff, d}, s);
    L.ff_b2 = filled_param({d}, 0.0);
    L.ln2_gain = filled_param({d}, 1.0);
    L.ln2_bias = filled_param({d}, 0.0);
    p.layers.push_back(std::move(L));
  }
  p.mlm_bias = filled_param({V}, 0.0);
  p.cls_weight = normal_param(rng, {d, config.num_classes}, s);
  p.cls_bias = filled_param({config.num_classes}, 0.0);
  return p;
}

std::map<std::string, std::size_t> parameter_census(const ModelParams& params) {
  std::map<std::string, std::size_t> out;
  std::size_t total = 0;
  for (const NamedParameter& np : params.named()) {
    out[np.name] = np.tensor.numel();
    total += np.tensor.numel();
  }
  out["total"] = total;
  return out;
}

PositionalCorrelation positional_correlation(const ModelParams& params, const ModelConfig& config,
                                             std::size_t n) {
  if (n == 0) throw std::invalid_argument("sequence length must be positive");
  if (n > config.n_max) {
    throw std::out_of_range("sequence length " + std::to_string(n) + " exceeds n_max " +
                            std::to_string(config.n_max));
  }
  const VariantTraits traits = variant_traits(config.variant);
  if (!traits.untied_correlation) {
    throw std::invalid_argument("variant " + std::string(variant_name(config.variant)) +
                                " has no untied positional correlation");
  }
  if (!config.positional) {
    PositionalCorrelation zero;
    zero.tag = "disabled";
    for (std::size_t h = 0; h < config.heads; ++h) zero.heads.push_back(Tensor::zeros({n, n}));
    zero.parts["pos-pos"] = zero.heads;
    return zero;
  }
  PositionalCorrelation v = compute_untied_correlation(params.positions, params.projection, n);
  if (traits.relative_bias) v = add_relative_bias(v, params.relative_bias);
  if (traits.reset) {
    std::vector<Tensor> t1, t2;
    for (std::size_t h = 0; h < config.heads; ++h) {
      auto [a, b] = compute_theta(params.reset, params.projection, h);
      t1.push_back(std::move(a));
      t2.push_back(std::move(b));
    }
    v = reset_cls(v, t1, t2);
  }
  return v;
}

PositionalContext build_positional_context(const ModelParams& params, const ModelConfig& config,
                                           std::size_t n) {
  if (n == 0) throw std::invalid_argument("sequence length must be positive");
  if (n > config.n_max) {
    throw std::out_of_range("sequence length " + std::to_string(n) + " exceeds n_max " +
                            std::to_string(config.n_max));
  }
  const VariantTraits traits = variant_traits(config.variant);
  PositionalContext ctx;
  ctx.length = n;
  if (traits.untied_correlation) {
    ctx.correlation = positional_correlation(params, config, n);
  } else if (traits.four_term) {
    ctx.positions = config.positional ? normalized_positions(params.positions, n)
                                      : Tensor::zeros({n, config.d});
  } else if (config.positional) {
    ctx.positions = normalized_positions(params.positions, n);
  }
  return ctx;
}

Tensor embed(const ModelParams& params, const ModelConfig& config, std::span<const int> tokens,
             const ForwardOptions& options, const PositionalContext* context) {
  const std::size_t n = tokens.size();
  check_tokens(config, tokens);
  Tensor x = gather_rows(params.word_embedding, tokens);
  if (variant_traits(config.variant).position_in_input && config.positional) {
    if (context) {
      if (context->length != n) throw DimensionError("embed: positional context length mismatch");
      x = add(x, context->positions);
    } else {
      x = add(x, normalized_positions(params.positions, n));
    }
  }
  if (options.training) x = dropout(x, config.dropout, dropout_key(config, options, 0, kSiteEmbed));
  return x;
}

ScoreMap layer_scores(const ModelParams& params, const ModelConfig& config, std::size_t layer,
                      const Tensor& x, const PositionalContext& context) {
  const AttentionLayerParams& attn = params.layers.at(layer).attn;
  if (!config.positional && !is_tupe_family(config.variant) &&
      config.variant != EncodingVariant::kBertAd) {
    return scores_abs_baseline(x, attn, config.heads);
  }
  switch (config.variant) {
    case EncodingVariant::kAbsBaseline:
      return scores_abs_baseline(x, attn, config.heads);
    case EncodingVariant::kShawRel:
      return scores_shaw(x, attn, config.heads, config.clip);
    case EncodingVariant::kT5Rel:
      return scores_t5(x, attn, config.heads, params.relative_bias);
    case EncodingVariant::kBertAd:
      return scores_bert_ad(x, context.positions, attn, params.projection);
    case EncodingVariant::kUntiedAbs:
    case EncodingVariant::kUntiedRel:
    case EncodingVariant::kTupeA:
    case EncodingVariant::kTupeR:
    case EncodingVariant::kTupeATieCls:
      return scores_tupe(x, attn, context.correlation.value());
  }
  throw std::logic_error("unhandled encoding variant");
}

Tensor encode_batch(const ModelParams& params, const ModelConfig& config,
                    std::span<const std::vector<int>> batch, const ForwardOptions& options,
                    const PositionalContext* context, std::span<const std::size_t> output_rows) {
  if (batch.empty()) throw std::invalid_argument("encode: empty batch");
  const std::size_t n = batch.front().size(), items = batch.size();
  std::vector<int> flat, position_ids;
  flat.reserve(items * n);
  for (const std::vector<int>& tokens : batch) {
    if (tokens.size() != n) throw DimensionError("encode: batch sequences differ in length");
    check_tokens(config, tokens);
    flat.insert(flat.end(), tokens.begin(), tokens.end());
  }
  PositionalContext local;
  if (!context) {
    local = build_positional_context(params, config, n);
    context = &local;
  }
  if (context->length != n) throw DimensionError("encode: positional context length mismatch");

  const VariantTraits traits = variant_traits(config.variant);
  Tensor x = gather_rows(params.word_embedding, flat);
  if (traits.position_in_input && config.positional) {
    for (std::size_t b = 0; b < items; ++b) {
      for (std::size_t i = 0; i < n; ++i) position_ids.push_back(static_cast<int>(i));
    }
    x = add(x, gather_rows(context->positions, position_ids));
  }
  const double p = options.training ? config.dropout : 0.0;
  x = dropout(x, p, dropout_key(config, options, 0, kSiteEmbed));

  std::vector<std::uint8_t> pad(flat.size(), 0);
  bool any_pad = false;
  for (std::size_t r = 0; r < flat.size(); ++r) {
    pad[r] = flat[r] == kPadId;
    any_pad = any_pad || pad[r];
  }
  const std::span<const std::uint8_t> pad_span =
      any_pad ? std::span<const std::uint8_t>(pad) : std::span<const std::uint8_t>();

  const bool subset = !output_rows.empty();
  std::vector<int> out_ids;
  for (std::size_t r : output_rows) {
    if (r >= flat.size()) throw std::out_of_range("encode: output row outside the batch");
    out_ids.push_back(static_cast<int>(r));
  }
  if (subset && params.layers.empty()) return gather_rows(x, out_ids);

  const std::size_t w = config.head_dim();
  const double s = traits.untied_correlation ? untied_scale(w)
                                             : 1.0 / std::sqrt(static_cast<double>(w));
  for (std::size_t l = 0; l < params.layers.size(); ++l) {
    const EncoderLayerParams& L = params.layers[l];
    const std::uint64_t attn_key = dropout_key(config, options, l + 1, kSiteProbs);
    PositionalContext fresh;
    const PositionalContext* ctx = context;
    if (options.recompute_positional_per_layer) {
      fresh = build_positional_context(params, config, n);
      ctx = &fresh;
    }
    const bool last = l + 1 == params.layers.size();
    const std::span<const std::size_t> queries = last ? output_rows : std::span<const std::size_t>();
    Tensor a;
    if (shared_bias_scores(config)) {
      std::vector<Tensor> bias;
      if (traits.untied_correlation) {
        bias = ctx->correlation.value().heads;
      } else if (traits.relative_bias && config.positional) {
        for (std::size_t h = 0; h < config.heads; ++h) {
          bias.push_back(relative_bias_matrix(params.relative_bias, h, n));
        }
      }
      const Tensor q = matmul(queries.empty() ? x : gather_rows(x, out_ids), L.attn.w_q);
      a = multi_head_attention(q, matmul(x, L.attn.w_k), matmul(x, L.attn.w_v), config.heads, n,
                               s, bias, pad_span, p, attn_key, queries);
      a = matmul(a, L.attn.w_o);
    } else {
      std::vector<Tensor> parts;
      for (std::size_t b = 0; b < items; ++b) {
        const Tensor xb = items == 1 ? x : slice_rows(x, b * n, (b + 1) * n);
        const auto pad_b = any_pad ? pad_span.subspan(b * n, n) : std::span<const std::uint8_t>();
        parts.push_back(attend(layer_scores(params, config, l, xb, *ctx), xb, L.attn, pad_b, p,
                               mix_key({attn_key, b})));
      }
      a = items == 1 ? parts.front() : concat_rows(parts);
      if (!queries.empty()) a = gather_rows(a, out_ids);
    }
    if (!queries.empty()) x = gather_rows(x, out_ids);
    a = dropout(a, p, dropout_key(config, options, l + 1, kSiteAttnOut), queries);
    x = layer_norm(add(x, a), L.ln1_gain, L.ln1_bias);
    Tensor f = add_row(matmul(gelu(add_row(matmul(x, L.ff_w1), L.ff_b1)), L.ff_w2), L.ff_b2);
    f = dropout(f, p, dropout_key(config, options, l + 1, kSiteFfnOut), queries);
    x = layer_norm(add(x, f), L.ln2_gain, L.ln2_bias);
  }
  return x;
}

Tensor encode(const ModelParams& params, const ModelConfig& config, std::span<const int> tokens,
              const ForwardOptions& options, const PositionalContext* context) {
  const std::vector<std::vector<int>> one{std::vector<int>(tokens.begin(), tokens.end())};
  return encode_batch(params, config, one, options, context);
}

Tensor mlm_logits(const ModelParams& params, const Tensor& hidden) {
  return add_row(matmul_nt(hidden, params.word_embedding), params.mlm_bias);
}

Tensor forward_mlm(const ModelParams& params, const ModelConfig& config,
                   std::span<const int> tokens, const ForwardOptions& options,
                   const PositionalContext* context) {
  return mlm_logits(params, encode(params, config, tokens, options, context));
}

Tensor forward_cls(const ModelParams& params, const ModelConfig& config,
                   std::span<const int> tokens, const ForwardOptions& options,
                   const PositionalContext* context) {
  if (tokens.empty() || tokens[0] != kClsId) {
    throw std::invalid_argument("forward_cls: sequence must start with [CLS]");
  }
  const Tensor hidden = encode(params, config, tokens, options, context);
  return cls_logits(params, slice_rows(hidden, 0, 1));
}

Tensor cls_logits(const ModelParams& params, const Tensor& rows) {
  return add_row(matmul(rows, params.cls_weight), params.cls_bias);
}

}  // namespace tupe
