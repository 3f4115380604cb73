#pragma once

// Toy BERT-style encoder: variant-dependent embedding, L post-LN blocks,
// tied masked-LM head and a [CLS] classification head.

#include <cstddef>
#include <cstdint>
#include <map>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include "json.hpp"
#include "tupe/attention.hpp"
#include "tupe/posenc.hpp"
#include "tupe/tensor.hpp"

namespace tupe {

struct ModelConfig {
  std::size_t d = 64;
  std::size_t heads = 4;
  std::size_t layers = 2;
  std::size_t d_ff = 256;
  std::size_t n_max = 32;
  std::size_t vocab_size = 40;
  int clip = 8;
  EncodingVariant variant = EncodingVariant::kTupeA;
  double dropout = 0.1;
  std::uint64_t seed = 0;
  /// False removes every positional term (input addition, correlation,
  /// relative terms); the resulting model only sees a bag of tokens.
  bool positional = true;
  std::size_t num_classes = 2;
  double init_std = 0.02;

  std::size_t head_dim() const { return d / heads; }
  /// Throws std::invalid_argument describing the first violated constraint.
  void validate() const;
};

nlohmann::json to_json(const ModelConfig& config);
ModelConfig model_config_from_json(const nlohmann::json& j);

struct EncoderLayerParams {
  AttentionLayerParams attn;
  Tensor ln1_gain, ln1_bias;
  Tensor ff_w1, ff_b1;  // [d x d_ff], [d_ff]
  Tensor ff_w2, ff_b2;  // [d_ff x d], [d]
  Tensor ln2_gain, ln2_bias;
};

struct NamedParameter {
  std::string name;
  Tensor tensor;
  /// Subject to decoupled weight decay (false for biases and norm affines).
  bool decay = true;
};

struct ModelParams {
  Tensor word_embedding;  // [V x d], also the tied MLM output matrix
  AbsolutePositionTable positions;
  PositionalProjection projection;  // untied and four-term variants
  RelativeBiasTable relative_bias;  // scalar relative variants
  ResetParams reset;                // reset variants
  std::vector<EncoderLayerParams> layers;
  Tensor mlm_bias;    // [V]
  Tensor cls_weight;  // [d x C]
  Tensor cls_bias;    // [C]

  /// Every defined parameter under a stable name.
  std::vector<NamedParameter> named() const;
};

/// Draws initial parameters from config.seed: weights ~ N(0, init_std^2),
/// relative bias and every bias vector 0, norm gains 1.
ModelParams init_params(const ModelConfig& config);

/// Parameter counts grouped by name prefix ("pos.u_q", "layer0.attn.w_q", ...)
/// plus a "total" entry.
std::map<std::string, std::size_t> parameter_census(const ModelParams& params);

struct ForwardOptions {
  bool training = false;  // enables dropout
  std::uint64_t step = 0;
  /// Rebuild the positional correlation inside every layer instead of
  /// reusing the shared one (reference path for the caching check).
  bool recompute_positional_per_layer = false;
};

/// Positional quantities shared by all layers and batch items of one
/// forward pass over sequences of length n.
struct PositionalContext {
  std::size_t length = 0;
  Tensor positions;                  // normalised P[0..n), when the variant reads it
  std::optional<PositionalCorrelation> correlation;  // untied variants
};

PositionalContext build_positional_context(const ModelParams& params, const ModelConfig& config,
                                           std::size_t n);

/// Content-free scores V_final for untied variants (zeros when positional
/// terms are disabled).
PositionalCorrelation positional_correlation(const ModelParams& params,
                                             const ModelConfig& config, std::size_t n);

/// Word embeddings plus, for input-position variants, normalised p_i rows;
/// embedding dropout when training.
Tensor embed(const ModelParams& params, const ModelConfig& config, std::span<const int> tokens,
             const ForwardOptions& options = {}, const PositionalContext* context = nullptr);

/// Scores of one layer for the configured variant.
ScoreMap layer_scores(const ModelParams& params, const ModelConfig& config, std::size_t layer,
                      const Tensor& x, const PositionalContext& context);

/// Final hidden states [n x d]. [PAD] ids are masked from the keys.
Tensor encode(const ModelParams& params, const ModelConfig& config, std::span<const int> tokens,
              const ForwardOptions& options = {}, const PositionalContext* context = nullptr);

/// Equal-length sequences encoded together; item b occupies rows
/// [b·n, (b+1)·n) of the [B·n x d] result. A strictly increasing
/// `output_rows` keeps only those rows, and the last layer computes nothing
/// else.
Tensor encode_batch(const ModelParams& params, const ModelConfig& config,
                    std::span<const std::vector<int>> batch, const ForwardOptions& options = {},
                    const PositionalContext* context = nullptr,
                    std::span<const std::size_t> output_rows = {});

/// hidden · Eᵀ + bias.
Tensor mlm_logits(const ModelParams& params, const Tensor& hidden);

/// [n x V] vocabulary logits.
Tensor forward_mlm(const ModelParams& params, const ModelConfig& config,
                   std::span<const int> tokens, const ForwardOptions& options = {},
                   const PositionalContext* context = nullptr);

/// rows · W_cls + bias.
Tensor cls_logits(const ModelParams& params, const Tensor& rows);

/// [1 x C] class logits from the position-0 ([CLS]) state.
Tensor forward_cls(const ModelParams& params, const ModelConfig& config,
                   std::span<const int> tokens, const ForwardOptions& options = {},
                   const PositionalContext* context = nullptr);

}  // namespace tupe
