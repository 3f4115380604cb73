#include "tupe/train.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <iomanip>

#include "tupe/checkpoint.hpp"

namespace tupe {

void TrainConfig::validate() const {
  if (batch_size == 0) throw std::invalid_argument("batch_size must be positive");
  if (steps > 0 && warmup_steps >= steps) {
    throw std::invalid_argument("warmup_steps (" + std::to_string(warmup_steps) +
                                ") must be smaller than steps (" + std::to_string(steps) + ")");
  }
  if (!(peak_lr >= 0.0)) throw std::invalid_argument("peak_lr must be non-negative");
  if (!(adam_eps > 0.0)) throw std::invalid_argument("adam_eps must be positive");
  if (beta1 < 0.0 || beta1 >= 1.0 || beta2 < 0.0 || beta2 >= 1.0) {
    throw std::invalid_argument("Adam betas must lie in [0, 1)");
  }
  if (weight_decay < 0.0) throw std::invalid_argument("weight_decay must be non-negative");
  if (log_every == 0) throw std::invalid_argument("log_every must be positive");
  mask.validate();
}

double lr_at(std::uint64_t step, const TrainConfig& config) {
  if (step > config.steps) {
    throw std::out_of_range("lr_at: step " + std::to_string(step) + " beyond schedule of " +
                            std::to_string(config.steps));
  }
  if (config.steps == 0) return 0.0;
  const auto s = static_cast<double>(step);
  const auto w = static_cast<double>(config.warmup_steps);
  const auto total = static_cast<double>(config.steps);
  if (step < config.warmup_steps) return config.peak_lr * s / w;
  return config.peak_lr * (total - s) / (total - w);
}

double adam_step(std::span<const NamedParameter> params, std::vector<std::vector<double>> grads,
                 AdamState& state, const TrainConfig& config, double lr) {
  if (grads.size() != params.size()) {
    throw DimensionError("adam_step: " + std::to_string(grads.size()) + " gradients for " +
                         std::to_string(params.size()) + " parameters");
  }
  double sq = 0.0;
  for (std::size_t i = 0; i < params.size(); ++i) {
    if (grads[i].size() != params[i].tensor.numel()) {
      throw DimensionError("adam_step: gradient of '" + params[i].name + "' has " +
                           std::to_string(grads[i].size()) + " entries, expected " +
                           std::to_string(params[i].tensor.numel()));
    }
    for (double g : grads[i]) {
      if (!std::isfinite(g)) throw NumericError("non-finite gradient in '" + params[i].name + "'");
      sq += g * g;
    }
  }
  const double norm = std::sqrt(sq);
  const double clip = config.clip_norm > 0.0 && norm > config.clip_norm ? config.clip_norm / norm : 1.0;

  if (state.m.empty()) {
    for (const NamedParameter& p : params) {
      state.m.emplace_back(p.tensor.numel(), 0.0);
      state.v.emplace_back(p.tensor.numel(), 0.0);
    }
  } else if (state.m.size() != params.size()) {
    throw DimensionError("adam_step: optimizer state does not match the parameter list");
  }
  ++state.t;
  const double c1 = 1.0 - std::pow(config.beta1, static_cast<double>(state.t));
  const double c2 = 1.0 - std::pow(config.beta2, static_cast<double>(state.t));

  for (std::size_t i = 0; i < params.size(); ++i) {
    Tensor handle = params[i].tensor;
    std::span<double> p = handle.mutable_data();
    std::vector<double>& m = state.m[i];
    std::vector<double>& v = state.v[i];
    const double decay = params[i].decay ? lr * config.weight_decay : 0.0;
    for (std::size_t k = 0; k < p.size(); ++k) {
      const double g = grads[i][k] * clip;
      m[k] = config.beta1 * m[k] + (1.0 - config.beta1) * g;
      v[k] = config.beta2 * v[k] + (1.0 - config.beta2) * g * g;
      p[k] -= decay * p[k];
      p[k] -= lr * (m[k] / c1) / (std::sqrt(v[k] / c2) + config.adam_eps);
    }
  }
  return norm;
}

std::vector<Example> make_examples(const Corpus& corpus, const Vocab& vocab, std::size_t n_max) {
  std::vector<Example> out;
  out.reserve(corpus.lines.size());
  for (std::size_t i = 0; i < corpus.lines.size(); ++i) {
    Example ex{vocab.encode_line(corpus.lines[i], n_max), -1};
    if (!corpus.labels.empty()) ex.label = corpus.labels[i];
    out.push_back(std::move(ex));
  }
  return out;
}

Batch make_batch(std::span<const Example> examples, Objective objective, const MaskConfig& mask,
                 std::size_t vocab_size, Rng& rng) {
  if (examples.empty()) throw std::invalid_argument("make_batch: no examples");
  Batch batch;
  for (const Example& ex : examples) batch.length = std::max(batch.length, ex.tokens.size());
  for (const Example& ex : examples) {
    std::vector<int> tokens = ex.tokens;
    std::vector<int> labels(tokens.size(), -1);
    if (objective == Objective::kMlm) {
      MaskedSequence ms = mask_sequence(tokens, mask, vocab_size, rng);
      tokens = std::move(ms.tokens);
      labels = std::move(ms.labels);
    } else {
      if (ex.label < 0) throw std::invalid_argument("make_batch: classification example without label");
      batch.class_labels.push_back(ex.label);
    }
    tokens.resize(batch.length, kPadId);
    labels.resize(batch.length, -1);
    batch.tokens.push_back(std::move(tokens));
    batch.mlm_labels.push_back(std::move(labels));
  }
  return batch;
}

namespace {

void count_correct(const Tensor& logits, std::span<const int> labels, BatchResult& stats) {
  const std::size_t c = logits.cols();
  const auto v = logits.data();
  for (std::size_t r = 0; r < labels.size(); ++r) {
    if (labels[r] < 0) continue;
    const auto row = v.subspan(r * c, c);
    const auto best = std::max_element(row.begin(), row.end()) - row.begin();
    stats.correct += best == labels[r] ? 1 : 0;
    ++stats.total;
  }
}

}  // namespace

Tensor batch_loss(const ModelParams& params, const ModelConfig& config, const Batch& batch,
                  Objective objective, const ForwardOptions& options, BatchResult* stats) {
  const PositionalContext context = build_positional_context(params, config, batch.length);
  std::vector<std::size_t> picked;
  std::vector<int> labels;
  for (std::size_t b = 0; b < batch.tokens.size(); ++b) {
    if (objective == Objective::kCls) {
      picked.push_back(b * batch.length);
      labels.push_back(batch.class_labels.at(b));
      continue;
    }
    for (std::size_t i = 0; i < batch.length; ++i) {
      if (batch.mlm_labels[b][i] >= 0) {
        picked.push_back(b * batch.length + i);
        labels.push_back(batch.mlm_labels[b][i]);
      }
    }
  }
  if (picked.empty()) {
    if (stats) *stats = {};
    return Tensor::scalar(0.0);
  }
  const Tensor rows = encode_batch(params, config, batch.tokens, options, &context, picked);
  const Tensor logits =
      objective == Objective::kMlm ? mlm_logits(params, rows) : cls_logits(params, rows);
  Tensor loss = cross_entropy(logits, labels);
  if (stats) {
    *stats = {};
    stats->loss = loss.item();
    count_correct(logits, labels, *stats);
  }
  return loss;
}

TrainResult train_loop(const ModelConfig& model_config, const TrainConfig& train_config,
                       std::span<const Example> corpus, Objective objective,
                       const TrainHooks& hooks) {
  model_config.validate();
  train_config.validate();
  if (corpus.empty()) throw std::invalid_argument("train_loop: corpus is empty");

  TrainResult result{model_config, init_params(model_config), 0, {}};
  const std::vector<NamedParameter> named = result.params.named();
  AdamState adam;
  Rng rng(mix_key({train_config.seed, 0x7261696eULL}));

  double window_loss = 0.0;
  std::size_t window_steps = 0, window_correct = 0, window_total = 0;
  std::vector<Example> members(train_config.batch_size);

  for (std::uint64_t step = 1; step <= train_config.steps; ++step) {
    for (Example& m : members) m = corpus[rng.below(corpus.size())];
    const Batch batch = make_batch(members, objective, train_config.mask, model_config.vocab_size, rng);

    ForwardOptions options;
    options.training = true;
    options.step = step;
    BatchResult stats;
    try {
      const Tensor loss = batch_loss(result.params, model_config, batch, objective, options, &stats);
      if (!std::isfinite(stats.loss)) {
        throw TrainingDiverged("training diverged at step " + std::to_string(step) + ": loss is " +
                               std::to_string(stats.loss));
      }
      for (const NamedParameter& p : named) p.tensor.node().grad.clear();
      backward(loss);
    } catch (const NumericError& e) {
      throw TrainingDiverged("training diverged at step " + std::to_string(step) + ": " + e.what());
    }

    std::vector<std::vector<double>> grads;
    grads.reserve(named.size());
    for (const NamedParameter& p : named) {
      const auto g = p.tensor.grad();
      grads.emplace_back(g.empty() ? std::vector<double>(p.tensor.numel(), 0.0)
                                   : std::vector<double>(g.begin(), g.end()));
    }
    const double lr = lr_at(step, train_config);
    try {
      adam_step(named, std::move(grads), adam, train_config, lr);
    } catch (const NumericError& e) {
      throw TrainingDiverged("training diverged at step " + std::to_string(step) + ": " + e.what());
    }
    result.steps_done = step;

    window_loss += stats.loss;
    ++window_steps;
    window_correct += stats.correct;
    window_total += stats.total;
    if (step % train_config.log_every == 0 || step == train_config.steps) {
      MetricRow row{step, window_loss / static_cast<double>(window_steps), lr,
                    window_total ? static_cast<double>(window_correct) / static_cast<double>(window_total)
                                 : 0.0};
      result.log.push_back(row);
      if (hooks.on_log) hooks.on_log(row);
      window_loss = 0.0;
      window_steps = window_correct = window_total = 0;
    }
    if (hooks.checkpoint_dir && train_config.checkpoint_every > 0 &&
        step % train_config.checkpoint_every == 0) {
      save_checkpoint(result.params, model_config, step,
                      *hooks.checkpoint_dir / ("checkpoint_step" + std::to_string(step) + ".bin"));
    }
  }
  return result;
}

double evaluate(const ModelParams& params, const ModelConfig& config,
                std::span<const Example> examples, Objective objective, const MaskConfig& mask,
                std::uint64_t seed, std::size_t batch_size) {
  if (batch_size == 0) throw std::invalid_argument("evaluate: batch_size must be positive");
  Rng rng(seed);
  std::size_t correct = 0, total = 0;
  for (std::size_t begin = 0; begin < examples.size(); begin += batch_size) {
    const auto chunk = examples.subspan(begin, std::min(batch_size, examples.size() - begin));
    const Batch batch = make_batch(chunk, objective, mask, config.vocab_size, rng);
    BatchResult stats;
    batch_loss(params, config, batch, objective, ForwardOptions{}, &stats);
    correct += stats.correct;
    total += stats.total;
  }
  return total ? static_cast<double>(correct) / static_cast<double>(total) : 0.0;
}

void write_metrics_csv(std::span<const MetricRow> log, const std::filesystem::path& path) {
  std::ofstream out(path, std::ios::trunc);
  if (!out) throw std::runtime_error("cannot write metrics to " + path.string());
  out << "step,loss,lr,accuracy\n" << std::setprecision(9);
  for (const MetricRow& r : log) out << r.step << ',' << r.loss << ',' << r.lr << ',' << r.accuracy << '\n';
  if (!out) throw std::runtime_error("write failed for " + path.string());
}


ModelConfig GradientFixture::model_config(EncodingVariant variant) const {
  ModelConfig c;
  c.d = d;
  c.heads = heads;
  c.layers = layers;
  c.d_ff = 2 * d;
  c.n_max = n;
  c.vocab_size = vocab_size;
  c.clip = clip;
  c.variant = variant;
  c.dropout = 0.0;
  c.seed = seed;
  c.init_std = scale;
  return c;
}

GradCheckResult check_mlm_gradients(EncodingVariant variant, const GradientFixture& fixture,
                                    const GradCheckOptions& options) {
  const ModelConfig config = fixture.model_config(variant);
  config.validate();
  ModelParams params = init_params(config);
  Rng rng(mix_key({fixture.seed, 0x67726164ULL}));
  std::vector<NamedTensor> tensors;
  for (const NamedParameter& np : params.named()) {
    Tensor t = np.tensor;
    const bool gain = np.name.ends_with("gain");
    for (double& v : t.mutable_data()) v = (gain ? 1.0 : 0.0) + fixture.scale * rng.normal();
    tensors.push_back({np.name, t});
  }

  const auto regular = static_cast<std::uint64_t>(config.vocab_size - kNumSpecialTokens);
  std::vector<int> tokens{kClsId};
  std::vector<int> labels{-1};
  for (std::size_t i = 1; i < fixture.n; ++i) {
    const int original = kNumSpecialTokens + static_cast<int>(rng.below(regular));
    labels.push_back(original);
    tokens.push_back(i % 2 ? kMaskId : original);
  }
  const auto loss = [&] { return cross_entropy(forward_mlm(params, config, tokens), labels); };
  return grad_check(loss, tensors, options);
}

}  // namespace tupe
