#pragma once

#include <cstddef>
#include <cstdint>
#include <filesystem>
#include <functional>
#include <optional>
#include <span>
#include <stdexcept>
#include <string>
#include <vector>

#include "tupe/data.hpp"
#include "tupe/grad_check.hpp"
#include "tupe/model.hpp"

namespace tupe {

struct TrainConfig {
  std::uint64_t steps = 2000;
  std::size_t batch_size = 32;
  double peak_lr = 1e-3;
  std::uint64_t warmup_steps = 100;
  double adam_eps = 1e-6;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double weight_decay = 0.01;
  double clip_norm = 1.0;  // <= 0 disables clipping
  MaskConfig mask;
  std::uint64_t seed = 0;
  std::uint64_t log_every = 50;
  std::uint64_t checkpoint_every = 0;  // 0: no periodic checkpoints

  void validate() const;
};

/// Linear warm-up from 0 to peak_lr at warmup_steps, then linear decay to 0
/// at `steps`.
double lr_at(std::uint64_t step, const TrainConfig& config);

struct AdamState {
  std::vector<std::vector<double>> m;
  std::vector<std::vector<double>> v;
  std::uint64_t t = 0;
};

/// One Adam update with bias correction and decoupled weight decay for
/// parameters flagged `decay`. Gradients are first clipped to a global norm
/// of clip_norm. Returns the pre-clipping global norm. Throws NumericError
/// naming the first tensor with a non-finite gradient.
double adam_step(std::span<const NamedParameter> params, std::vector<std::vector<double>> grads,
                 AdamState& state, const TrainConfig& config, double lr);

enum class Objective { kMlm, kCls };

struct Example {
  std::vector<int> tokens;  // starts with [CLS]
  int label = -1;           // class label for kCls
};

/// Tokenises every line of `corpus` ([CLS] + characters, truncated to n_max).
std::vector<Example> make_examples(const Corpus& corpus, const Vocab& vocab, std::size_t n_max);

struct Batch {
  std::size_t length = 0;            // padded length n
  std::vector<std::vector<int>> tokens;
  std::vector<std::vector<int>> mlm_labels;  // -1 = not predicted
  std::vector<int> class_labels;
};

/// Pads to the longest member with [PAD]; applies MLM corruption when
/// objective is kMlm.
Batch make_batch(std::span<const Example> examples, Objective objective, const MaskConfig& mask,
                 std::size_t vocab_size, Rng& rng);

struct BatchResult {
  double loss = 0.0;
  std::size_t correct = 0;
  std::size_t total = 0;
};

/// Loss tensor and accuracy counts of one batch.
Tensor batch_loss(const ModelParams& params, const ModelConfig& config, const Batch& batch,
                  Objective objective, const ForwardOptions& options, BatchResult* stats);

struct MetricRow {
  std::uint64_t step = 0;
  double loss = 0.0;
  double lr = 0.0;
  double accuracy = 0.0;
};

class TrainingDiverged : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

struct TrainResult {
  ModelConfig config;
  ModelParams params;
  std::uint64_t steps_done = 0;
  std::vector<MetricRow> log;
};

struct TrainHooks {
  /// Directory for periodic checkpoints (checkpoint_step<k>.bin).
  std::optional<std::filesystem::path> checkpoint_dir;
  std::function<void(const MetricRow&)> on_log;
};

TrainResult train_loop(const ModelConfig& model_config, const TrainConfig& train_config,
                       std::span<const Example> corpus, Objective objective,
                       const TrainHooks& hooks = {});

/// Accuracy over `examples` in evaluation mode (no dropout). MLM corruption
/// is drawn from `seed`, so repeated calls see identical inputs.
double evaluate(const ModelParams& params, const ModelConfig& config,
                std::span<const Example> examples, Objective objective, const MaskConfig& mask,
                std::uint64_t seed, std::size_t batch_size = 64);

void write_metrics_csv(std::span<const MetricRow> log, const std::filesystem::path& path);

/// Tiny dense model for checking MLM gradients. Every parameter, including
/// the zero-initialised biases, is redrawn at `scale` so no gradient entry
/// vanishes by construction.
struct GradientFixture {
  std::size_t n = 5;
  std::size_t d = 8;
  std::size_t heads = 2;
  std::size_t layers = 2;
  std::size_t vocab_size = 12;
  int clip = 2;
  double scale = 0.5;
  std::uint64_t seed = 0;

  ModelConfig model_config(EncodingVariant variant) const;
};

GradCheckResult check_mlm_gradients(EncodingVariant variant, const GradientFixture& fixture,
                                    const GradCheckOptions& options = {});

}  // namespace tupe
