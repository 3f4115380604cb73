#include "tupe/data.hpp"

#include <algorithm>
#include <fstream>
#include <stdexcept>

namespace tupe {

// Vocab -----------------------------------------------------------------

std::vector<std::string> utf8_chars(std::string_view text) {
  std::vector<std::string> out;
  std::size_t i = 0;
  while (i < text.size()) {
    const auto c = static_cast<unsigned char>(text[i]);
    std::size_t len = 1;
    if (c >= 0xF0 && c < 0xF8) {
      len = 4;
    } else if (c >= 0xE0) {
      len = c < 0xF0 ? 3 : 1;
    } else if (c >= 0xC0) {
      len = 2;
    }
    if (i + len > text.size()) len = 1;
    out.emplace_back(text.substr(i, len));
    i += len;
  }
  return out;
}

Vocab Vocab::from_tokens(std::vector<std::string> tokens) {
  if (tokens.size() < static_cast<std::size_t>(kNumSpecialTokens)) {
    throw std::invalid_argument("vocabulary must start with the four reserved specials");
  }
  for (int i = 0; i < kNumSpecialTokens; ++i) {
    if (tokens[static_cast<std::size_t>(i)] != kSpecialTokens[i]) {
      throw std::invalid_argument("vocabulary entry " + std::to_string(i) + " must be " +
                                  std::string(kSpecialTokens[i]) + ", found '" +
                                  tokens[static_cast<std::size_t>(i)] + "'");
    }
  }
  Vocab v;
  for (std::size_t i = 0; i < tokens.size(); ++i) {
    if (!v.index_.emplace(tokens[i], static_cast<int>(i)).second) {
      throw std::invalid_argument("duplicate vocabulary token '" + tokens[i] + "'");
    }
  }
  v.tokens_ = std::move(tokens);
  return v;
}

Vocab Vocab::from_characters(std::string_view chars) {
  std::vector<std::string> tokens(std::begin(kSpecialTokens), std::end(kSpecialTokens));
  for (std::string& c : utf8_chars(chars)) tokens.push_back(std::move(c));
  return from_tokens(std::move(tokens));
}

Vocab Vocab::default_characters() {
  return from_characters("abcdefghijklmnopqrstuvwxyz0123456789");
}

Vocab Vocab::load(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw std::runtime_error("cannot open vocabulary file " + path.string());
  std::vector<std::string> tokens;
  std::string line;
  while (std::getline(in, line)) {
    if (!line.empty() && line.back() == '\r') line.pop_back();
    tokens.push_back(line);
  }
  return from_tokens(std::move(tokens));
}

void Vocab::save(const std::filesystem::path& path) const {
  std::ofstream out(path, std::ios::trunc);
  if (!out) throw std::runtime_error("cannot write vocabulary file " + path.string());
  for (const std::string& t : tokens_) out << t << '\n';
  if (!out) throw std::runtime_error("write failed for " + path.string());
}

int Vocab::id(std::string_view token) const {
  auto it = index_.find(std::string(token));
  return it == index_.end() ? kUnkId : it->second;
}

bool Vocab::contains(std::string_view token) const { return index_.contains(std::string(token)); }

std::vector<int> Vocab::encode_line(std::string_view line, std::size_t max_length) const {
  std::vector<int> ids{kClsId};
  for (const std::string& c : utf8_chars(line)) {
    if (ids.size() >= max_length) break;
    ids.push_back(id(c));
  }
  return ids;
}

// Corpus I/O ------------------------------------------------------------

Corpus read_corpus(const std::filesystem::path& path, bool labelled) {
  std::ifstream in(path);
  if (!in) throw std::runtime_error("cannot open corpus " + path.string());
  Corpus corpus;
  std::string line;
  std::size_t lineno = 0;
  while (std::getline(in, line)) {
    ++lineno;
    if (!line.empty() && line.back() == '\r') line.pop_back();
    if (!labelled) {
      corpus.lines.push_back(line);
      continue;
    }
    const auto tab = line.find('\t');
    if (tab == std::string::npos) {
      throw std::runtime_error(path.string() + ":" + std::to_string(lineno) +
                               ": expected 'label<TAB>text'");
    }
    try {
      std::size_t used = 0;
      const int label = std::stoi(line.substr(0, tab), &used);
      if (used != tab || label < 0) throw std::invalid_argument("label");
      corpus.labels.push_back(label);
    } catch (const std::exception&) {
      throw std::runtime_error(path.string() + ":" + std::to_string(lineno) +
                               ": label must be a non-negative integer");
    }
    corpus.lines.push_back(line.substr(tab + 1));
  }
  return corpus;
}

void write_corpus(const Corpus& corpus, const std::filesystem::path& path) {
  std::ofstream out(path, std::ios::trunc | std::ios::binary);
  if (!out) throw std::runtime_error("cannot write corpus " + path.string());
  for (std::size_t i = 0; i < corpus.lines.size(); ++i) {
    if (!corpus.labels.empty()) out << corpus.labels[i] << '\t';
    out << corpus.lines[i] << '\n';
  }
  if (!out) throw std::runtime_error("write failed for " + path.string());
}

// Synthetic tasks -------------------------------------------------------

namespace {

void check_alphabet(std::size_t a) {
  if (a < 2 || a > 26) throw std::invalid_argument("task alphabet size must lie in [2, 26]");
}

char letter(std::size_t k) { return static_cast<char>('a' + k); }

}  // namespace

Corpus gen_position_task(std::size_t num_lines, std::size_t n, std::uint64_t seed,
                         const PositionTask& task) {
  check_alphabet(task.alphabet);
  if (n < 2) throw std::invalid_argument("position task needs n >= 2");
  if (task.noise < 0.0 || task.noise > 1.0) throw std::invalid_argument("noise must lie in [0, 1]");
  Rng rng(seed);
  Corpus corpus;
  corpus.lines.reserve(num_lines);
  for (std::size_t l = 0; l < num_lines; ++l) {
    std::string line(n - 1, ' ');
    for (std::size_t i = 1; i < n; ++i) {
      std::size_t k = i % task.alphabet;
      if (rng.uniform() < task.noise) {
        // Any letter but the clean one.
        const std::size_t other = rng.below(task.alphabet - 1);
        k = other < k ? other : other + 1;
      }
      line[i - 1] = letter(k);
    }
    corpus.lines.push_back(std::move(line));
  }
  return corpus;
}

int parity_label(std::string_view line, char designated) {
  return static_cast<int>(std::count(line.begin(), line.end(), designated) % 2);
}

Corpus gen_parity_task(std::size_t num_lines, std::size_t n, std::uint64_t seed,
                       const ParityTask& task) {
  check_alphabet(task.alphabet);
  if (n < 2) throw std::invalid_argument("parity task needs n >= 2");
  if (task.designated < 'a' || static_cast<std::size_t>(task.designated - 'a') >= task.alphabet) {
    throw std::invalid_argument("designated token must belong to the task alphabet");
  }
  Rng rng(seed);
  Corpus corpus;
  for (std::size_t l = 0; l < num_lines; ++l) {
    std::string line(n - 1, ' ');
    for (char& c : line) c = letter(rng.below(task.alphabet));
    const int target = static_cast<int>(l % 2);
    if (parity_label(line, task.designated) != target) {
      const std::size_t pos = rng.below(line.size());
      if (line[pos] == task.designated) {
        const std::size_t other = rng.below(task.alphabet - 1);
        const auto d = static_cast<std::size_t>(task.designated - 'a');
        line[pos] = letter(other < d ? other : other + 1);
      } else {
        line[pos] = task.designated;
      }
    }
    corpus.labels.push_back(target);
    corpus.lines.push_back(std::move(line));
  }
  return corpus;
}

// Masking ---------------------------------------------------------------

void MaskConfig::validate() const {
  if (prob < 0.0 || prob > 1.0) throw std::invalid_argument("mask probability must lie in [0, 1]");
  if (mask_frac < 0.0 || random_frac < 0.0 || keep_frac < 0.0) {
    throw std::invalid_argument("mask split fractions must be non-negative");
  }
  if (std::abs(mask_frac + random_frac + keep_frac - 1.0) > 1e-9) {
    throw std::invalid_argument("mask/random/keep split must sum to 1");
  }
}

MaskedSequence mask_sequence(std::span<const int> tokens, const MaskConfig& config,
                             std::size_t vocab_size, Rng& rng) {
  if (tokens.empty() || tokens[0] != kClsId) {
    throw std::invalid_argument("mask_sequence: sequence must start with [CLS]");
  }
  if (vocab_size <= static_cast<std::size_t>(kNumSpecialTokens)) {
    throw std::invalid_argument("mask_sequence: vocabulary has no regular tokens");
  }
  MaskedSequence out{std::vector<int>(tokens.begin(), tokens.end()),
                     std::vector<int>(tokens.size(), -1)};
  for (std::size_t i = 0; i < tokens.size(); ++i) {
    if (tokens[i] < kNumSpecialTokens) continue;
    if (rng.uniform() >= config.prob) continue;
    out.labels[i] = tokens[i];
    const double branch = rng.uniform();
    if (branch < config.mask_frac) {
      out.tokens[i] = kMaskId;
    } else if (branch < config.mask_frac + config.random_frac) {
      out.tokens[i] = kNumSpecialTokens +
                      static_cast<int>(rng.below(vocab_size - static_cast<std::size_t>(kNumSpecialTokens)));
    }
  }
  return out;
}

std::vector<double> position_task_marginal(std::size_t n, const PositionTask& task) {
  check_alphabet(task.alphabet);
  if (n < 2) throw std::invalid_argument("position task needs n >= 2");
  const std::size_t a = task.alphabet;
  std::vector<double> q(a, 0.0);
  for (std::size_t i = 1; i < n; ++i) {
    for (std::size_t c = 0; c < a; ++c) {
      q[c] += c == i % a ? 1.0 - task.noise : task.noise / static_cast<double>(a - 1);
    }
  }
  for (double& v : q) v /= static_cast<double>(n - 1);
  return q;
}

double position_task_bayes_accuracy(std::size_t n, const PositionTask& task,
                                    const MaskConfig& mask, std::size_t random_pool) {
  if (random_pool < task.alphabet) {
    throw std::invalid_argument("random replacement pool must contain the task alphabet");
  }
  const std::vector<double> q = position_task_marginal(n, task);
  const double q_max = *std::max_element(q.begin(), q.end());
  const double pool = static_cast<double>(random_pool);
  double visible = 0.0;
  // Visible letters of the task alphabet: either copy it or answer the mode.
  for (double qv : q) {
    visible += std::max(mask.keep_frac * qv + mask.random_frac * qv / pool,
                        mask.random_frac * q_max / pool);
  }
  // Visible ids outside the alphabet can only come from random replacement.
  visible += static_cast<double>(random_pool - task.alphabet) * mask.random_frac * q_max / pool;
  return mask.mask_frac * q_max + visible;
}

}  // namespace tupe
