#include "tupe/cli.hpp"

#include <algorithm>
#include <cstdlib>
#include <fstream>
#include <functional>
#include <iomanip>
#include <iostream>
#include <map>
#include <sstream>

#include <Eigen/Core>

#include "CLI11.hpp"
#include "tupe/analysis.hpp"
#include "tupe/checkpoint.hpp"
#include "tupe/train.hpp"

namespace tupe {

namespace fs = std::filesystem;

namespace {

class UsageError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

std::string trim(std::string s) {
  const auto first = s.find_first_not_of(" \t\r");
  if (first == std::string::npos) return "";
  const auto last = s.find_last_not_of(" \t\r");
  return s.substr(first, last - first + 1);
}

bool user_sets(const std::vector<std::string>& args, const std::string& key) {
  const std::string flag = "--" + key;
  return std::any_of(args.begin(), args.end(), [&](const std::string& a) {
    return a == flag || a.rfind(flag + "=", 0) == 0;
  });
}

// Splices `key = value` lines from --config FILE in front of the user's own
// arguments; keys given on the command line are left out.
std::vector<std::string> expand_config(std::vector<std::string> args) {
  std::string path;
  for (std::size_t i = 0; i < args.size(); ++i) {
    if (args[i] == "--config") {
      if (i + 1 >= args.size()) throw UsageError("--config needs a file argument");
      path = args[i + 1];
      args.erase(args.begin() + static_cast<std::ptrdiff_t>(i), args.begin() + static_cast<std::ptrdiff_t>(i) + 2);
      break;
    }
    if (args[i].rfind("--config=", 0) == 0) {
      path = args[i].substr(9);
      args.erase(args.begin() + static_cast<std::ptrdiff_t>(i));
      break;
    }
  }
  if (path.empty()) return args;
  if (args.empty() || args.front().rfind("-", 0) == 0) {
    throw UsageError("--config must follow a subcommand");
  }
  std::ifstream in(path);
  if (!in) throw UsageError("cannot read config file " + path);
  std::vector<std::string> injected;
  std::string line;
  std::size_t lineno = 0;
  while (std::getline(in, line)) {
    ++lineno;
    line = trim(line.substr(0, line.find('#')));
    if (line.empty()) continue;
    const auto eq = line.find('=');
    if (eq == std::string::npos) {
      throw UsageError(path + ":" + std::to_string(lineno) + ": expected 'key = value'");
    }
    std::string key = trim(line.substr(0, eq));
    std::string value = trim(line.substr(eq + 1));
    std::replace(key.begin(), key.end(), '_', '-');
    if (value.size() >= 2 && value.front() == '"' && value.back() == '"') value = value.substr(1, value.size() - 2);
    if (key.empty()) throw UsageError(path + ":" + std::to_string(lineno) + ": empty key");
    if (user_sets(args, key)) continue;
    injected.push_back("--" + key + "=" + value);
  }
  args.insert(args.begin() + 1, injected.begin(), injected.end());
  return args;
}

std::string resolved_config(const CLI::App& sub) {
  std::ostringstream out;
  for (const CLI::Option* opt : sub.get_options()) {
    if (opt->get_lnames().empty() || opt->get_group().empty()) continue;
    const std::string& key = opt->get_lnames().front();
    if (key == "help" || key == "config") continue;
    std::string value;
    if (opt->count() > 0) {
      for (const std::string& r : opt->results()) value += (value.empty() ? "" : ",") + r;
    } else {
      value = opt->get_default_str();
      if (value.size() >= 2 && value.front() == '[' && value.back() == ']') value = value.substr(1, value.size() - 2);
    }
    if (value.empty() && !opt->get_required()) continue;
    out << key << " = " << value << '\n';
  }
  return out.str();
}

void write_text(const fs::path& path, const std::string& text) {
  std::ofstream out(path, std::ios::trunc);
  if (!out) throw std::runtime_error("cannot write " + path.string());
  out << text;
  if (!out) throw std::runtime_error("write failed for " + path.string());
}

std::vector<std::string> variant_names() {
  std::vector<std::string> names;
  for (EncodingVariant v : kAllVariants) names.emplace_back(variant_name(v));
  return names;
}

// Options shared by commands that build or read a corpus.
struct DataOptions {
  std::string task;  // position | parity, empty when reading --corpus
  std::string corpus;
  std::string vocab;
  std::size_t lines = 2000;
  std::size_t length = 0;  // 0: n_max
  std::size_t alphabet = 4;
  double noise = 0.1;
  std::string objective = "auto";

  void add(CLI::App* sub) {
    sub->add_option("--task", task, "Generate a synthetic corpus instead of reading one")
        ->check(CLI::IsMember({"position", "parity"}));
    sub->add_option("--corpus", corpus, "Corpus file (one example per line, 'label<TAB>text' for cls)");
    sub->add_option("--vocab", vocab, "Vocabulary file (one token per line, specials first)");
    sub->add_option("--lines", lines, "Generated lines");
    sub->add_option("--length", length, "Generated sequence length including [CLS] (0: n-max)");
    sub->add_option("--alphabet", alphabet, "Letters used by the synthetic tasks");
    sub->add_option("--noise", noise, "Position task corruption rate");
    sub->add_option("--objective", objective, "mlm, cls or auto (cls for labelled data)")
        ->check(CLI::IsMember({"auto", "mlm", "cls"}));
  }

  Objective resolve_objective() const {
    if (objective == "mlm") return Objective::kMlm;
    if (objective == "cls") return Objective::kCls;
    return task == "parity" ? Objective::kCls : Objective::kMlm;
  }

  Vocab load_vocab() const {
    if (vocab.empty()) return Vocab::default_characters();
    if (!fs::exists(vocab)) throw UsageError("vocabulary file not found: " + vocab);
    try {
      return Vocab::load(vocab);
    } catch (const std::invalid_argument& e) {
      throw UsageError(vocab + ": " + e.what());
    }
  }

  Corpus load_corpus(std::size_t n_max, std::uint64_t seed) const {
    if (!corpus.empty()) {
      if (!task.empty()) throw UsageError("--corpus and --task are mutually exclusive");
      if (!fs::exists(corpus)) throw UsageError("corpus file not found: " + corpus);
      return read_corpus(corpus, resolve_objective() == Objective::kCls);
    }
    const std::size_t n = length ? length : n_max;
    if (task == "position") return gen_position_task(lines, n, seed, PositionTask{alphabet, noise});
    if (task == "parity") return gen_parity_task(lines, n, seed, ParityTask{alphabet, 'a'});
    throw UsageError("either --corpus or --task is required");
  }
};

void add_model_options(CLI::App* sub, ModelConfig& m, std::string& variant) {
  sub->add_option("--variant", variant, "Encoding variant")->check(CLI::IsMember(variant_names()));
  sub->add_option("--d", m.d, "Model width");
  sub->add_option("--heads", m.heads, "Attention heads");
  sub->add_option("--layers", m.layers, "Encoder layers");
  sub->add_option("--d-ff", m.d_ff, "Feed-forward width");
  sub->add_option("--n-max", m.n_max, "Maximum sequence length");
  sub->add_option("--clip", m.clip, "Relative distance clip t");
  sub->add_option("--dropout", m.dropout, "Dropout probability");
  sub->add_option("--init-std", m.init_std, "Initial weight standard deviation");
  sub->add_option("--positional", m.positional, "false disables every positional term");
  sub->add_option("--num-classes", m.num_classes, "Classes of the [CLS] head");
}

void add_train_options(CLI::App* sub, TrainConfig& t) {
  sub->add_option("--steps", t.steps, "Optimizer steps");
  sub->add_option("--batch-size", t.batch_size, "Sequences per step");
  sub->add_option("--lr", t.peak_lr, "Peak learning rate");
  sub->add_option("--warmup", t.warmup_steps, "Warm-up steps");
  sub->add_option("--adam-eps", t.adam_eps, "Adam epsilon");
  sub->add_option("--beta1", t.beta1, "Adam beta1");
  sub->add_option("--beta2", t.beta2, "Adam beta2");
  sub->add_option("--weight-decay", t.weight_decay, "Decoupled weight decay");
  sub->add_option("--clip-norm", t.clip_norm, "Global gradient norm clip (<= 0 disables)");
  sub->add_option("--log-every", t.log_every, "Steps between metric rows");
  sub->add_option("--checkpoint-every", t.checkpoint_every, "Steps between checkpoints (0: final only)");
}

void add_mask_options(CLI::App* sub, MaskConfig& m) {
  sub->add_option("--mask-prob", m.prob, "Corruption probability");
  sub->add_option("--mask-frac", m.mask_frac, "Share of corrupted positions set to [MASK]");
  sub->add_option("--random-frac", m.random_frac, "Share replaced by a random token");
  sub->add_option("--keep-frac", m.keep_frac, "Share left unchanged");
}

template <typename F>
void validated(F&& f) {
  try {
    f();
  } catch (const std::invalid_argument& e) {
    throw UsageError(e.what());
  }
}

// train -----------------------------------------------------------------

struct TrainCommand {
  ModelConfig model;
  TrainConfig train;
  DataOptions data;
  std::string variant = "tupe-a";
  std::string out_dir;
  std::uint64_t seed = 0;

  void add(CLI::App* sub) {
    add_model_options(sub, model, variant);
    add_train_options(sub, train);
    add_mask_options(sub, train.mask);
    data.add(sub);
    sub->add_option("--seed", seed, "Seed for data, initialisation, masking and dropout");
    sub->add_option("--out", out_dir, "Output directory")->required();
  }

  int run(const CLI::App& sub, std::ostream& out) {
    model.variant = parse_variant(variant);
    model.seed = train.seed = seed;
    const Vocab vocab = data.load_vocab();
    model.vocab_size = vocab.size();
    validated([&] {
      model.validate();
      train.validate();
    });
    const Objective objective = data.resolve_objective();
    Corpus corpus;
    validated([&] { corpus = data.load_corpus(model.n_max, seed); });
    if (corpus.lines.empty()) throw UsageError("corpus is empty");
    const std::vector<Example> examples = make_examples(corpus, vocab, model.n_max);

    fs::create_directories(out_dir);
    write_text(fs::path(out_dir) / "config.resolved", resolved_config(sub));
    vocab.save(fs::path(out_dir) / "vocab.txt");

    TrainHooks hooks;
    hooks.checkpoint_dir = fs::path(out_dir);
    hooks.on_log = [&](const MetricRow& r) {
      out << "step " << r.step << "  loss " << std::setprecision(5) << r.loss << "  lr " << r.lr
          << "  acc " << r.accuracy << '\n';
    };
    const TrainResult result = train_loop(model, train, examples, objective, hooks);
    save_checkpoint(result.params, model, result.steps_done, fs::path(out_dir) / "checkpoint.bin");
    write_metrics_csv(result.log, fs::path(out_dir) / "metrics.csv");
    out << "wrote " << (fs::path(out_dir) / "checkpoint.bin").string() << '\n';
    return kExitOk;
  }
};

// eval ------------------------------------------------------------------

struct EvalCommand {
  std::string ckpt;
  DataOptions data;
  MaskConfig mask;
  std::uint64_t seed = 0;
  std::size_t batch_size = 64;

  void add(CLI::App* sub) {
    sub->add_option("--ckpt", ckpt, "Checkpoint file")->required();
    data.add(sub);
    add_mask_options(sub, mask);
    sub->add_option("--seed", seed, "Seed for generated data and masking");
    sub->add_option("--batch-size", batch_size, "Sequences per evaluation batch");
  }

  int run(std::ostream& out) {
    if (!fs::exists(ckpt)) throw UsageError("checkpoint not found: " + ckpt);
    validated([&] { mask.validate(); });
    const LoadedModel m = load_checkpoint(ckpt);
    const Vocab vocab = data.load_vocab();
    if (vocab.size() != m.config.vocab_size) {
      throw UsageError("vocabulary has " + std::to_string(vocab.size()) + " tokens, checkpoint expects " +
                       std::to_string(m.config.vocab_size));
    }
    Corpus corpus;
    validated([&] { corpus = data.load_corpus(m.config.n_max, seed); });
    const std::vector<Example> examples = make_examples(corpus, vocab, m.config.n_max);
    const Objective objective = data.resolve_objective();
    const double acc = evaluate(m.params, m.config, examples, objective, mask, seed, batch_size);
    out << "accuracy " << std::setprecision(6) << acc << '\n';
    if (data.task == "position" && objective == Objective::kMlm) {
      const std::size_t n = data.length ? data.length : m.config.n_max;
      out << "no-position bayes accuracy "
          << position_task_bayes_accuracy(n, PositionTask{data.alphabet, data.noise}, mask,
                                          vocab.size() - kNumSpecialTokens)
          << '\n';
    }
    return kExitOk;
  }
};

// gradcheck -------------------------------------------------------------

struct GradCheckCommand {
  std::string variant = "all";
  GradientFixture fixture;
  std::string method = "extrapolated";
  double step = 0.0;  // 0: 1e-6 for central, 1e-2 for extrapolated
  double tolerance = 1e-5;
  double fault = 0.0;

  void add(CLI::App* sub) {
    std::vector<std::string> names = variant_names();
    names.insert(names.begin(), "all");
    sub->add_option("--variant", variant, "Variant to check, or all")->check(CLI::IsMember(names));
    sub->add_option("--seed", fixture.seed, "Fixture seed");
    sub->add_option("--scale", fixture.scale, "Standard deviation of the fixture parameters");
    sub->add_option("--method", method, "central or extrapolated differences")
        ->check(CLI::IsMember({"central", "extrapolated"}));
    sub->add_option("--step", step, "Difference step (0: method default)");
    sub->add_option("--tolerance", tolerance, "Largest accepted relative error");
    sub->add_option("--inject-fault", fault, "Scale the softmax backward rule by 1 + f")->group("");
  }

  int run(std::ostream& out, std::ostream& err) {
    std::vector<EncodingVariant> variants;
    if (variant == "all") {
      variants.assign(kAllVariants.begin(), kAllVariants.end());
    } else {
      variants.push_back(parse_variant(variant));
    }
    std::optional<testing::ScopedBackwardFault> injected;
    if (fault != 0.0) injected.emplace(fault);
    GradCheckOptions options;
    options.method = method == "central" ? Difference::kCentral : Difference::kExtrapolated;
    options.step = step > 0.0 ? step : (method == "central" ? 1e-6 : 1e-2);
    options.sample_seed = fixture.seed;
    out << std::left << std::setw(16) << "variant" << std::setw(14) << "max_rel_err"
        << "worst_param\n";
    int status = kExitOk;
    for (EncodingVariant v : variants) {
      const GradCheckResult r = check_mlm_gradients(v, fixture, options);
      out << std::left << std::setw(16) << variant_name(v) << std::setw(14) << std::setprecision(3)
          << std::scientific << r.max_rel_error << std::defaultfloat << r.worst_param << '\n';
      if (!(r.max_rel_error < tolerance)) {
        err << "gradient check failed for " << variant_name(v) << ": parameter " << r.worst_param
            << " entry " << r.worst_index << " analytic " << r.worst_analytic << " numeric "
            << r.worst_numeric << '\n';
        status = kExitRuntime;
      }
    }
    return status;
  }
};

// verify-toeplitz -------------------------------------------------------

struct VerifyToeplitzCommand {
  std::vector<std::size_t> orders{1, 2, 3, 4, 8, 16};
  std::size_t seeds = 100;
  std::uint64_t seed = 0;
  bool corrupt_g = false;

  void add(CLI::App* sub) {
    sub->add_option("--n", orders, "Matrix orders")->delimiter(',');
    sub->add_option("--seeds", seeds, "Random value vectors per order");
    sub->add_option("--seed", seed, "Base seed");
    sub->add_flag("--corrupt-g", corrupt_g, "Perturb G before measuring")->group("");
  }

  int run(std::ostream& out, std::ostream& err) {
    for (std::size_t n : orders) {
      if (n == 0) throw UsageError("--n values must be positive");
    }
    int status = kExitOk;
    out << std::left << std::setw(6) << "n" << "max_error\n";
    for (std::size_t n : orders) {
      double worst = 0.0;
      for (std::size_t s = 0; s < seeds; ++s) {
        Rng rng(mix_key({seed, n, s}));
        std::vector<double> b(2 * n - 1);
        for (double& v : b) v = 2.0 * rng.uniform() - 1.0;
        double e = 0.0;
        try {
          ToeplitzFactorization f = factorize_toeplitz(b);
          if (corrupt_g) f.g(0, 0) *= 1.01;
          e = reconstruction_error(f);
        } catch (const FactorizationError& ex) {
          err << ex.what() << '\n';
          e = std::numeric_limits<double>::infinity();
        }
        worst = std::max(worst, e);
      }
      out << std::left << std::setw(6) << n << std::scientific << std::setprecision(3) << worst
          << std::defaultfloat << '\n';
      if (!(worst <= kToeplitzTolerance)) {
        err << "reconstruction error " << worst << " exceeds " << kToeplitzTolerance << " at n = " << n << '\n';
        status = kExitRuntime;
      }
    }
    return status;
  }
};

// analyze ---------------------------------------------------------------

struct AnalyzeCommand {
  std::string ckpt;
  std::string mode;
  std::string out_dir;
  std::size_t n = 0;
  std::size_t items = 16;
  std::uint64_t seed = 0;

  void add(CLI::App* sub) {
    sub->add_option("--ckpt", ckpt, "Checkpoint file")->required();
    sub->add_option("--mode", mode, "decompose, heatmaps or subspace")
        ->required()
        ->check(CLI::IsMember({"decompose", "heatmaps", "subspace"}));
    sub->add_option("--out", out_dir, "Output directory")->required();
    sub->add_option("--n", n, "Sequence length (0: n-max)");
    sub->add_option("--items", items, "Random sequences averaged by decompose");
    sub->add_option("--seed", seed, "Seed for the decompose batch");
  }

  int run(std::ostream& out) {
    if (!fs::exists(ckpt)) throw UsageError("checkpoint not found: " + ckpt);
    const LoadedModel m = load_checkpoint(ckpt);
    const std::size_t len = n ? n : m.config.n_max;
    if (len > m.config.n_max) throw UsageError("--n exceeds the checkpoint's n-max");
    nlohmann::json report{{"mode", mode}, {"variant", variant_name(m.config.variant)}, {"n", len}};
    try {
      if (mode == "decompose") {
        if (items == 0) throw UsageError("--items must be positive");
        Rng rng(seed);
        std::vector<std::vector<int>> batch(items);
        for (auto& seq : batch) {
          seq.push_back(kClsId);
          while (seq.size() < len) {
            seq.push_back(kNumSpecialTokens +
                          static_cast<int>(rng.below(m.config.vocab_size - kNumSpecialTokens)));
          }
        }
        const CorrelationReport r = decompose_terms(m.params, m.config, batch);
        fs::create_directories(out_dir);
        for (const char* key : {"ww", "wp", "pw", "pp"}) {
          write_matrix_csv(r.terms.at(key), fs::path(out_dir) / ("decomposition_" + std::string(key) + ".csv"));
        }
        report["decomposition"] = to_json(r);
      } else if (mode == "heatmaps") {
        const auto files = export_positional_heatmaps(m.params, m.config, len, out_dir);
        report["heads"] = files.size();
        for (const auto& f : files) report["files"].push_back(f.filename().string());
      } else {
        report["subspace"] = to_json(subspace_diagnostics(m.params, m.config, len));
        fs::create_directories(out_dir);
      }
    } catch (const UnsupportedVariant& e) {
      throw UsageError(e.what());
    }
    write_text(fs::path(out_dir) / "report.json", report.dump(2) + "\n");
    out << "wrote " << (fs::path(out_dir) / "report.json").string() << '\n';
    return kExitOk;
  }
};

// gendata ---------------------------------------------------------------

struct GenDataCommand {
  std::string task = "position";
  std::size_t lines = 1000;
  std::size_t n = 32;
  std::uint64_t seed = 0;
  std::string out_dir;
  std::size_t alphabet = 4;
  double noise = 0.1;

  void add(CLI::App* sub) {
    sub->add_option("--task", task, "position or parity")->check(CLI::IsMember({"position", "parity"}));
    sub->add_option("--lines", lines, "Number of lines");
    sub->add_option("--n", n, "Sequence length including [CLS]");
    sub->add_option("--seed", seed, "Generator seed");
    sub->add_option("--out", out_dir, "Output directory (corpus.txt, vocab.txt)")->required();
    sub->add_option("--alphabet", alphabet, "Letters used");
    sub->add_option("--noise", noise, "Position task corruption rate");
  }

  int run(std::ostream& out) {
    Corpus corpus;
    validated([&] {
      corpus = task == "position" ? gen_position_task(lines, n, seed, PositionTask{alphabet, noise})
                                  : gen_parity_task(lines, n, seed, ParityTask{alphabet, 'a'});
    });
    fs::create_directories(out_dir);
    write_corpus(corpus, fs::path(out_dir) / "corpus.txt");
    Vocab::default_characters().save(fs::path(out_dir) / "vocab.txt");
    out << "wrote " << corpus.lines.size() << " lines to " << (fs::path(out_dir) / "corpus.txt").string() << '\n';
    return kExitOk;
  }
};

void apply_thread_limit() {
  const char* env = std::getenv("TUPE_THREADS");
  int threads = 1;
  if (env && *env) {
    char* end = nullptr;
    const long v = std::strtol(env, &end, 10);
    if (*end != '\0' || v < 1) throw UsageError(std::string("TUPE_THREADS must be a positive integer, got '") + env + "'");
    threads = static_cast<int>(v);
  }
  Eigen::setNbThreads(threads);
}

}  // namespace

int run_cli(const std::vector<std::string>& raw_args, std::ostream& out, std::ostream& err) {
  CLI::App app{"Positional-encoding transformer lab", "tupe"};
  app.option_defaults()->always_capture_default();
  app.require_subcommand(1);

  TrainCommand train;
  EvalCommand eval;
  GradCheckCommand gradcheck;
  VerifyToeplitzCommand toeplitz;
  AnalyzeCommand analyze;
  GenDataCommand gendata;

  CLI::App* train_app = app.add_subcommand("train", "Train a model and write a checkpoint and metric log");
  CLI::App* eval_app = app.add_subcommand("eval", "Accuracy of a checkpoint on a corpus");
  CLI::App* grad_app = app.add_subcommand("gradcheck", "Compare analytic and numeric gradients");
  CLI::App* toeplitz_app = app.add_subcommand("verify-toeplitz", "Check the Toeplitz factorization");
  CLI::App* analyze_app = app.add_subcommand("analyze", "Decomposition, heatmaps or subspace report");
  CLI::App* gendata_app = app.add_subcommand("gendata", "Write a synthetic corpus and vocabulary");
  train.add(train_app);
  eval.add(eval_app);
  gradcheck.add(grad_app);
  toeplitz.add(toeplitz_app);
  analyze.add(analyze_app);
  gendata.add(gendata_app);
  for (CLI::App* sub : {train_app, eval_app, grad_app, toeplitz_app, analyze_app, gendata_app}) {
    sub->add_option("--config", "Flat 'key = value' file; command-line flags take precedence");
  }

  try {
    apply_thread_limit();
    std::vector<std::string> args = expand_config(raw_args);
    std::reverse(args.begin(), args.end());
    try {
      app.parse(args);
    } catch (const CLI::ParseError& e) {
      const int code = app.exit(e, out, err);
      return code == 0 ? kExitOk : kExitUsage;
    }
    if (train_app->parsed()) return train.run(*train_app, out);
    if (eval_app->parsed()) return eval.run(out);
    if (grad_app->parsed()) return gradcheck.run(out, err);
    if (toeplitz_app->parsed()) return toeplitz.run(out, err);
    if (analyze_app->parsed()) return analyze.run(out);
    if (gendata_app->parsed()) return gendata.run(out);
    return kExitUsage;
  } catch (const UsageError& e) {
    err << "error: " << e.what() << '\n';
    return kExitUsage;
  } catch (const std::exception& e) {
    err << "error: " << e.what() << '\n';
    return kExitRuntime;
  }
}

int run_cli(int argc, char** argv) {
  std::vector<std::string> args(argv + 1, argv + argc);
  return run_cli(args, std::cout, std::cerr);
}

}  // namespace tupe
