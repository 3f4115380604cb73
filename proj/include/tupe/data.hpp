#pragma once

// Corpora, synthetic probe tasks and BERT-style corruption.

#include <cstddef>
#include <cstdint>
#include <filesystem>
#include <span>
#include <string>
#include <string_view>
#include <vector>

#include "tupe/rng.hpp"
#include "tupe/vocab.hpp"

namespace tupe {

/// Text lines, with one class label per line for classification corpora.
struct Corpus {
  std::vector<std::string> lines;
  std::vector<int> labels;  // empty for unlabelled corpora

  bool labelled() const { return !labels.empty() || lines.empty(); }
};

/// One line per example; "label<TAB>text" when `labelled`.
Corpus read_corpus(const std::filesystem::path& path, bool labelled);
void write_corpus(const Corpus& corpus, const std::filesystem::path& path);

struct PositionTask {
  std::size_t alphabet = 4;
  double noise = 0.1;
};

/// Lines of n - 1 characters (the [CLS] slot makes n positions). The
/// character at position i (1-based after [CLS]) is letter (i mod a) with
/// probability 1 - noise, otherwise a different letter chosen uniformly.
Corpus gen_position_task(std::size_t num_lines, std::size_t n, std::uint64_t seed,
                         const PositionTask& task = {});

struct ParityTask {
  std::size_t alphabet = 4;
  char designated = 'a';
};

/// 1 when `line` holds an odd number of `designated` characters.
int parity_label(std::string_view line, char designated);

/// Uniform random lines of n - 1 letters. Line k targets label k mod 2 and
/// is repaired by one edit when its parity disagrees, so classes are
/// exactly balanced.
Corpus gen_parity_task(std::size_t num_lines, std::size_t n, std::uint64_t seed,
                       const ParityTask& task = {});

struct MaskConfig {
  double prob = 0.15;
  double mask_frac = 0.8;
  double random_frac = 0.1;
  double keep_frac = 0.1;

  void validate() const;
};

struct MaskedSequence {
  std::vector<int> tokens;
  std::vector<int> labels;  // original id at corrupted positions, -1 elsewhere
};

/// Independent Bernoulli(prob) selection of every non-special position,
/// then [MASK] / random non-special id / unchanged by the configured split.
/// Draw order per eligible position: one uniform for selection, and for a
/// selected position one uniform for the branch plus, for the random
/// branch, one Rng::below(vocab_size - 4) for the replacement.
MaskedSequence mask_sequence(std::span<const int> tokens, const MaskConfig& config,
                             std::size_t vocab_size, Rng& rng);

/// Label distribution at a uniformly chosen content position of the
/// position task, indexed by letter.
std::vector<double> position_task_marginal(std::size_t n, const PositionTask& task);

/// Best masked-token accuracy reachable without positional information on
/// the position task: [MASK] inputs are answered by the marginal mode,
/// visible inputs (kept or randomly replaced) by the joint
/// P(label, visible) maximiser. `random_pool` is the number of ids the
/// random branch draws from.
double position_task_bayes_accuracy(std::size_t n, const PositionTask& task,
                                    const MaskConfig& mask, std::size_t random_pool);

}  // namespace tupe
