#include <gtest/gtest.h>

#include <cmath>
#include <filesystem>
#include <fstream>
#include <random>

#include "tupe/data.hpp"
#include "tupe/train.hpp"
#include "tupe/vocab.hpp"

namespace tupe {
namespace {

namespace fs = std::filesystem;

fs::path temp_path(const std::string& name) {
  return fs::temp_directory_path() / ("tupe_train_test_" + name);
}

std::string slurp(const fs::path& p) {
  std::ifstream in(p, std::ios::binary);
  return {std::istreambuf_iterator<char>(in), {}};
}

// --- Vocabulary and corpora ---------------------------------------------

TEST(Vocab, DefaultAlphabetLayout) {
  const Vocab v = Vocab::default_characters();
  EXPECT_EQ(v.size(), 40u);
  EXPECT_EQ(v.token(kPadId), "[PAD]");
  EXPECT_EQ(v.token(kClsId), "[CLS]");
  EXPECT_EQ(v.token(kMaskId), "[MASK]");
  EXPECT_EQ(v.token(kUnkId), "[UNK]");
  EXPECT_EQ(v.id("a"), 4);
  EXPECT_EQ(v.id("?"), kUnkId);
}

TEST(Vocab, RejectsBadTokenLists) {
  EXPECT_THROW(Vocab::from_tokens({"[CLS]", "[PAD]", "[MASK]", "[UNK]", "a"}), std::invalid_argument);
  EXPECT_THROW(Vocab::from_tokens({"[PAD]", "[CLS]", "[MASK]", "[UNK]", "a", "a"}), std::invalid_argument);
}

TEST(Vocab, EncodeLinePrependsClsAndTruncates) {
  const Vocab v = Vocab::from_characters("abc");
  EXPECT_EQ(v.encode_line("cab", 10), (std::vector<int>{kClsId, 6, 4, 5}));
  EXPECT_EQ(v.encode_line("cabcab", 3), (std::vector<int>{kClsId, 6, 4}));
  EXPECT_EQ(v.encode_line("az", 10), (std::vector<int>{kClsId, 4, kUnkId}));
}

TEST(Vocab, FileRoundTrip) {
  const Vocab v = Vocab::from_characters("xyzé");
  const fs::path p = temp_path("vocab.txt");
  v.save(p);
  const Vocab back = Vocab::load(p);
  ASSERT_EQ(back.size(), v.size());
  for (int i = 0; i < static_cast<int>(v.size()); ++i) EXPECT_EQ(back.token(i), v.token(i));
  fs::remove(p);
}

TEST(Corpus, LabelledFileRoundTrip) {
  const Corpus c = gen_parity_task(20, 8, 5);
  const fs::path p = temp_path("corpus.tsv");
  write_corpus(c, p);
  const Corpus back = read_corpus(p, true);
  EXPECT_EQ(back.lines, c.lines);
  EXPECT_EQ(back.labels, c.labels);
  fs::remove(p);
}

TEST(PositionTask, CleanLetterDominates) {
  const PositionTask task{4, 0.1};
  const Corpus c = gen_position_task(5000, 12, 1, task);
  std::size_t clean = 0, total = 0;
  for (const std::string& line : c.lines) {
    ASSERT_EQ(line.size(), 11u);
    for (std::size_t i = 1; i <= line.size(); ++i) {
      clean += line[i - 1] == static_cast<char>('a' + i % 4);
      ++total;
    }
  }
  EXPECT_NEAR(static_cast<double>(clean) / total, 0.9, 0.005);
}

TEST(PositionTask, SeedFixesCorpus) {
  const fs::path a = temp_path("pos_a.txt"), b = temp_path("pos_b.txt");
  write_corpus(gen_position_task(50, 16, 9), a);
  write_corpus(gen_position_task(50, 16, 9), b);
  EXPECT_EQ(slurp(a), slurp(b));
  EXPECT_NE(gen_position_task(50, 16, 9).lines, gen_position_task(50, 16, 10).lines);
  fs::remove(a);
  fs::remove(b);
}

TEST(PositionTask, MarginalMatchesCounting) {
  const PositionTask task{4, 0.1};
  const std::size_t n = 7;
  const std::vector<double> q = position_task_marginal(n, task);
  // Positions 1..6 carry clean letters 1,2,3,0,1,2.
  const double clean_count[] = {1, 2, 2, 1};
  for (std::size_t k = 0; k < 4; ++k) {
    const double expected = (clean_count[k] * 0.9 + (6 - clean_count[k]) * 0.1 / 3.0) / 6.0;
    EXPECT_NEAR(q[k], expected, 1e-15);
  }
}

TEST(PositionTask, BayesAccuracyReducesToMarginalMaximum) {
  const PositionTask task{4, 0.1};
  MaskConfig mask_only{0.15, 1.0, 0.0, 0.0};
  const std::vector<double> q = position_task_marginal(32, task);
  EXPECT_NEAR(position_task_bayes_accuracy(32, task, mask_only, 36),
              *std::max_element(q.begin(), q.end()), 1e-15);
}

TEST(PositionTask, BayesAccuracyMatchesMonteCarlo) {
  // Simulate the best no-position guesser on corrupted draws of one position.
  const PositionTask task{4, 0.1};
  const MaskConfig mask;
  const std::size_t n = 9, pool = 36;
  const std::vector<double> q = position_task_marginal(n, task);
  const std::size_t mode = std::max_element(q.begin(), q.end()) - q.begin();
  std::mt19937_64 gen(3);
  std::uniform_real_distribution<double> u(0.0, 1.0);
  std::discrete_distribution<std::size_t> letter(q.begin(), q.end());
  std::size_t hits = 0;
  const std::size_t trials = 400000;
  for (std::size_t t = 0; t < trials; ++t) {
    const std::size_t truth = letter(gen);
    const double b = u(gen);
    std::size_t guess = mode;
    if (b >= mask.mask_frac) {
      const std::size_t seen = b < mask.mask_frac + mask.random_frac ? gen() % pool : truth;
      // Copy a visible letter when that beats the mode.
      if (seen < 4 && mask.keep_frac * q[seen] + mask.random_frac * q[seen] / pool >
                          mask.random_frac * q[mode] / pool) {
        guess = seen;
      }
    }
    hits += guess == truth;
  }
  EXPECT_NEAR(static_cast<double>(hits) / trials, position_task_bayes_accuracy(n, task, mask, pool), 0.003);
}

TEST(ParityTask, LabelDefinition) {
  EXPECT_EQ(parity_label("bcdbcd", 'a'), 0);
  EXPECT_EQ(parity_label("aaaa", 'a'), 0);
  EXPECT_EQ(parity_label("aba", 'a'), 0);
  EXPECT_EQ(parity_label("abc", 'a'), 1);
}

TEST(ParityTask, BalancedAndConsistent) {
  const Corpus c = gen_parity_task(10000, 16, 2);
  ASSERT_EQ(c.labels.size(), 10000u);
  std::size_t ones = 0;
  for (std::size_t i = 0; i < c.lines.size(); ++i) {
    EXPECT_EQ(c.labels[i], parity_label(c.lines[i], 'a'));
    ones += c.labels[i];
  }
  EXPECT_NEAR(static_cast<double>(ones) / c.lines.size(), 0.5, 0.01);
}

// --- Masking ---------------------------------------------------------------

const std::vector<int> kLine = {kClsId, 4, 9, 12, 7, 5, 30, 11, 6, 8};

TEST(Masking, ZeroProbabilityLeavesLineAlone) {
  Rng rng(1);
  const MaskedSequence m = mask_sequence(kLine, {0.0, 0.8, 0.1, 0.1}, 40, rng);
  EXPECT_EQ(m.tokens, kLine);
  for (int l : m.labels) EXPECT_EQ(l, -1);
}

TEST(Masking, CertainMaskReplacesEveryEligibleToken) {
  Rng rng(2);
  std::vector<int> line = kLine;
  line.push_back(kPadId);
  const MaskedSequence m = mask_sequence(line, {1.0, 1.0, 0.0, 0.0}, 40, rng);
  EXPECT_EQ(m.tokens.front(), kClsId);
  EXPECT_EQ(m.tokens.back(), kPadId);
  EXPECT_EQ(m.labels.front(), -1);
  EXPECT_EQ(m.labels.back(), -1);
  for (std::size_t i = 1; i + 1 < line.size(); ++i) {
    EXPECT_EQ(m.tokens[i], kMaskId);
    EXPECT_EQ(m.labels[i], line[i]);
  }
}

TEST(Masking, RequiresLeadingCls) {
  Rng rng(3);
  const std::vector<int> bad = {5, 6};
  EXPECT_THROW(mask_sequence(bad, {}, 40, rng), std::invalid_argument);
}

TEST(Masking, MatchesReferenceSampler) {
  // Reference: raw mt19937_64 words, 53-bit uniforms, floor(u * pool) picks.
  const MaskConfig cfg{0.5, 0.8, 0.1, 0.1};
  const std::size_t vocab = 40;
  std::mt19937_64 gen(42);
  auto u = [&] { return static_cast<double>(gen() >> 11) / 9007199254740992.0; };
  std::vector<int> tokens = kLine, labels(kLine.size(), -1);
  for (std::size_t i = 1; i < kLine.size(); ++i) {
    if (u() >= cfg.prob) continue;
    labels[i] = kLine[i];
    const double b = u();
    if (b < 0.8) {
      tokens[i] = kMaskId;
    } else if (b < 0.9) {
      tokens[i] = 4 + static_cast<int>(u() * 36.0);
    }
  }
  Rng rng(42);
  const MaskedSequence m = mask_sequence(kLine, cfg, vocab, rng);
  EXPECT_EQ(m.tokens, tokens);
  EXPECT_EQ(m.labels, labels);
}

TEST(Masking, CorruptionStatistics) {
  Rng rng(4);
  const MaskConfig cfg;
  std::size_t eligible = 0, chosen = 0, masked = 0, randomised = 0, kept = 0;
  std::vector<int> line(33, 10);
  line[0] = kClsId;
  while (eligible < 100000) {
    for (std::size_t i = 1; i < line.size(); ++i) line[i] = 4 + static_cast<int>(rng.below(36));
    const MaskedSequence m = mask_sequence(line, cfg, 40, rng);
    for (std::size_t i = 1; i < line.size(); ++i) {
      ++eligible;
      if (m.labels[i] < 0) continue;
      ++chosen;
      if (m.tokens[i] == kMaskId) {
        ++masked;
      } else if (m.tokens[i] == line[i]) {
        ++kept;  // includes random draws of the same id
      } else {
        ++randomised;
      }
    }
  }
  const double c = static_cast<double>(chosen);
  EXPECT_NEAR(c / eligible, 0.15, 0.01);
  EXPECT_NEAR(masked / c, 0.8, 0.02);
  EXPECT_NEAR(randomised / c, 0.1 * 35.0 / 36.0, 0.02);
  EXPECT_NEAR(kept / c, 0.1 + 0.1 / 36.0, 0.02);
}

TEST(MaskConfig, SplitMustSumToOne) {
  EXPECT_NO_THROW(MaskConfig{}.validate());
  EXPECT_THROW((MaskConfig{0.15, 0.8, 0.1, 0.2}.validate()), std::invalid_argument);
  EXPECT_THROW((MaskConfig{1.5, 0.8, 0.1, 0.1}.validate()), std::invalid_argument);
}

// --- Schedule and optimiser ------------------------------------------------

TEST(Schedule, Endpoints) {
  TrainConfig c;
  c.steps = 1000;
  c.warmup_steps = 100;
  c.peak_lr = 1e-3;
  EXPECT_EQ(lr_at(0, c), 0.0);
  EXPECT_DOUBLE_EQ(lr_at(50, c), 5e-4);
  EXPECT_DOUBLE_EQ(lr_at(100, c), 1e-3);
  EXPECT_DOUBLE_EQ(lr_at(550, c), 5e-4);
  EXPECT_EQ(lr_at(1000, c), 0.0);
}

TEST(Schedule, PeakAtWarmupBoundaryAndContinuous) {
  TrainConfig c;
  c.steps = 300;
  c.warmup_steps = 30;
  double best = 0.0;
  std::uint64_t best_step = 0;
  for (std::uint64_t s = 0; s <= c.steps; ++s) {
    const double lr = lr_at(s, c);
    if (lr > best) {
      best = lr;
      best_step = s;
    }
    if (s > 0) EXPECT_LE(std::abs(lr - lr_at(s - 1, c)), c.peak_lr / 30.0 + 1e-18);
  }
  EXPECT_EQ(best_step, 30u);
}

TEST(TrainConfig, WarmupMustPrecedeEnd) {
  TrainConfig c;
  c.steps = 100;
  c.warmup_steps = 100;
  EXPECT_THROW(c.validate(), std::invalid_argument);
  c.warmup_steps = 99;
  EXPECT_NO_THROW(c.validate());
}

NamedParameter scalar_param(const std::string& name, double v, bool decay) {
  return {name, Tensor::parameter({1}, {v}), decay};
}

TEST(Adam, ZeroGradientWithoutDecayIsNoOp) {
  const std::vector<NamedParameter> params = {scalar_param("w", 0.7, true)};
  TrainConfig c;
  c.weight_decay = 0.0;
  AdamState s;
  adam_step(params, {{0.0}}, s, c, 0.1);
  EXPECT_EQ(params[0].tensor.data()[0], 0.7);
  EXPECT_EQ(s.m[0][0], 0.0);
  EXPECT_EQ(s.v[0][0], 0.0);
}

TEST(Adam, SingleStepByHand) {
  const std::vector<NamedParameter> params = {scalar_param("w", 1.0, true), scalar_param("b", 1.0, false)};
  TrainConfig c;
  c.weight_decay = 0.01;
  c.clip_norm = 0.0;
  AdamState s;
  const double lr = 0.1, g = 0.5;
  adam_step(params, {{g}, {g}}, s, c, lr);
  // m = 0.05, v = 0.00025; bias-corrected 0.5 and 0.25.
  const double update = lr * 0.5 / (std::sqrt(0.25) + 1e-6);
  EXPECT_NEAR(params[0].tensor.data()[0], 1.0 - lr * 0.01 - update, 1e-12);
  EXPECT_NEAR(params[1].tensor.data()[0], 1.0 - update, 1e-12);
  EXPECT_NEAR(s.m[0][0], 0.05, 1e-15);
  EXPECT_NEAR(s.v[0][0], 0.00025, 1e-15);
}

TEST(Adam, ClipsGlobalNorm) {
  const std::vector<NamedParameter> params = {scalar_param("a", 0.0, false), scalar_param("b", 0.0, false)};
  TrainConfig c;
  c.clip_norm = 1.0;
  AdamState s;
  const double norm = adam_step(params, {{6.0}, {8.0}}, s, c, 0.0);
  EXPECT_DOUBLE_EQ(norm, 10.0);
  EXPECT_NEAR(s.m[0][0], 0.1 * 0.6, 1e-15);
  EXPECT_NEAR(s.m[1][0], 0.1 * 0.8, 1e-15);
}

TEST(Adam, NonFiniteGradientNamesTensor) {
  const std::vector<NamedParameter> params = {scalar_param("a", 0.0, true), scalar_param("layer3.w", 0.0, true)};
  TrainConfig c;
  AdamState s;
  try {
    adam_step(params, {{0.0}, {std::nan("")}}, s, c, 0.1);
    FAIL();
  } catch (const NumericError& e) {
    EXPECT_NE(std::string(e.what()).find("layer3.w"), std::string::npos);
  }
}

// --- Batches, loss and the loop ----------------------------------------------

ModelConfig small_model(EncodingVariant v = EncodingVariant::kTupeA) {
  ModelConfig c;
  c.d = 16;
  c.heads = 2;
  c.layers = 1;
  c.d_ff = 32;
  c.n_max = 12;
  c.vocab_size = 40;
  c.clip = 4;
  c.variant = v;
  return c;
}

std::vector<Example> position_examples(std::size_t lines, std::size_t n, std::uint64_t seed) {
  return make_examples(gen_position_task(lines, n, seed), Vocab::default_characters(), n);
}

TEST(Batch, PadsToLongestAndLabelsCorruptedPositions) {
  const std::vector<Example> ex = {{{kClsId, 5, 6, 7}, -1}, {{kClsId, 8}, -1}};
  Rng rng(5);
  const Batch b = make_batch(ex, Objective::kMlm, {1.0, 1.0, 0.0, 0.0}, 40, rng);
  EXPECT_EQ(b.length, 4u);
  EXPECT_EQ(b.tokens[1], (std::vector<int>{kClsId, kMaskId, kPadId, kPadId}));
  EXPECT_EQ(b.mlm_labels[1], (std::vector<int>{-1, 8, -1, -1}));
}

TEST(Batch, ClassificationNeedsLabels) {
  const std::vector<Example> ex = {{{kClsId, 5}, -1}};
  Rng rng(6);
  EXPECT_THROW(make_batch(ex, Objective::kCls, {}, 40, rng), std::invalid_argument);
}

TEST(Loss, InitialMlmLossNearLogVocab) {
  const ModelConfig c = small_model();
  const std::vector<Example> ex = position_examples(64, 12, 7);
  Rng rng(8);
  const Batch b = make_batch(ex, Objective::kMlm, {}, c.vocab_size, rng);
  BatchResult stats;
  const Tensor loss = batch_loss(init_params(c), c, b, Objective::kMlm, {}, &stats);
  EXPECT_GT(stats.total, 0u);
  EXPECT_NEAR(loss.item() / std::log(40.0), 1.0, 0.1);
}

TEST(TrainLoop, ZeroStepsReturnsInitialParameters) {
  const ModelConfig c = small_model();
  TrainConfig t;
  t.steps = 0;
  const std::vector<Example> ex = position_examples(10, 12, 9);
  const TrainResult r = train_loop(c, t, ex, Objective::kMlm);
  EXPECT_TRUE(r.log.empty());
  EXPECT_EQ(r.steps_done, 0u);
  const auto a = r.params.named(), b = init_params(c).named();
  for (std::size_t i = 0; i < a.size(); ++i) {
    for (std::size_t k = 0; k < a[i].tensor.numel(); ++k) EXPECT_EQ(a[i].tensor.data()[k], b[i].tensor.data()[k]);
  }
}

TEST(TrainLoop, SameSeedSameLog) {
  const ModelConfig c = small_model(EncodingVariant::kTupeR);
  TrainConfig t;
  t.steps = 12;
  t.warmup_steps = 3;
  t.batch_size = 4;
  t.log_every = 3;
  const std::vector<Example> ex = position_examples(40, 12, 10);
  const TrainResult a = train_loop(c, t, ex, Objective::kMlm);
  const TrainResult b = train_loop(c, t, ex, Objective::kMlm);
  ASSERT_EQ(a.log.size(), 4u);
  for (std::size_t i = 0; i < a.log.size(); ++i) {
    EXPECT_EQ(a.log[i].step, b.log[i].step);
    EXPECT_EQ(a.log[i].loss, b.log[i].loss);
    EXPECT_EQ(a.log[i].accuracy, b.log[i].accuracy);
    EXPECT_EQ(a.log[i].lr, b.log[i].lr);
  }
  t.seed = 1;
  EXPECT_NE(train_loop(c, t, ex, Objective::kMlm).log.back().loss, a.log.back().loss);
}

TEST(TrainLoop, ClassificationRunsAndWritesCheckpoints) {
  const ModelConfig c = small_model();
  TrainConfig t;
  t.steps = 4;
  t.warmup_steps = 1;
  t.batch_size = 4;
  t.log_every = 2;
  t.checkpoint_every = 2;
  const std::vector<Example> ex =
      make_examples(gen_parity_task(20, 12, 11), Vocab::default_characters(), 12);
  const fs::path dir = temp_path("ckpt");
  fs::create_directories(dir);
  TrainHooks hooks;
  hooks.checkpoint_dir = dir;
  std::size_t logged = 0;
  hooks.on_log = [&](const MetricRow&) { ++logged; };
  const TrainResult r = train_loop(c, t, ex, Objective::kCls, hooks);
  EXPECT_EQ(logged, 2u);
  EXPECT_TRUE(fs::exists(dir / "checkpoint_step2.bin"));
  EXPECT_TRUE(fs::exists(dir / "checkpoint_step4.bin"));
  fs::remove_all(dir);
}

TEST(TrainLoop, DivergenceIsReported) {
  ModelConfig c = small_model();
  c.init_std = 1e200;
  TrainConfig t;
  t.steps = 3;
  t.warmup_steps = 1;
  t.batch_size = 2;
  const std::vector<Example> ex = position_examples(10, 12, 12);
  EXPECT_THROW(train_loop(c, t, ex, Objective::kMlm), TrainingDiverged);
}

TEST(TrainLoop, EmptyCorpusRejected) {
  EXPECT_THROW(train_loop(small_model(), TrainConfig{}, {}, Objective::kMlm), std::invalid_argument);
}

TEST(Metrics, CsvHeaderAndRows) {
  const fs::path p = temp_path("metrics.csv");
  const std::vector<MetricRow> rows = {{1, 2.5, 0.001, 0.25}, {2, 2.0, 0.002, 0.5}};
  write_metrics_csv(rows, p);
  EXPECT_EQ(slurp(p), "step,loss,lr,accuracy\n1,2.5,0.001,0.25\n2,2,0.002,0.5\n");
  fs::remove(p);
}

}  // namespace
}  // namespace tupe
