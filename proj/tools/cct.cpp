// Command-line front end: train | eval | stats | gradcheck | experiment.

#include <algorithm>
#include <cctype>
#include <filesystem>
#include <fstream>
#include <iomanip>
#include <iostream>
#include <map>
#include <sstream>
#include <string>
#include <vector>

#include <CLI11.hpp>
#include <json.hpp>

#include "cct/cct.hpp"

namespace {

using cct::ErrorKind;
using cct::RunConfig;

struct OptionSpec {
  const char* key;
  const char* help;
};

// Keys shared by the config file, CCT_* environment variables and flags.
const std::vector<OptionSpec> kRunOptions = {
    {"model", "model name, e.g. cct-7/3x1, cvt-7/4, vit-lite-7/4"},
    {"dataset", "mnist | fashion-mnist | cifar10 | cifar100"},
    {"data-dir", "directory with the dataset files"},
    {"epochs", "training epochs"},
    {"stop-after", "end this invocation after the given epoch (resume later with --resume)"},
    {"batch-size", "mini-batch size"},
    {"lr", "peak learning rate"},
    {"min-lr", "final learning rate of the cosine schedule"},
    {"weight-decay", "decoupled AdamW weight decay"},
    {"warmup-epochs", "linear warmup epochs (default: 5% of epochs, at least 1)"},
    {"per-epoch-lr", "hold the learning rate constant within an epoch (true|false)"},
    {"label-smoothing", "label smoothing probability"},
    {"pos-emb", "learnable | sinusoidal | none"},
    {"pool", "seqpool | class-token (default depends on the family)"},
    {"seed", "random seed"},
    {"image-size", "resize images to this square size"},
    {"samples-per-class", "keep this many training samples per class"},
    {"limit-train", "use only the first N training samples"},
    {"limit-test", "use only the first N test samples"},
    {"augment", "enable crop/flip augmentation (true|false)"},
    {"hflip", "horizontal flip probability (default: dataset-specific)"},
    {"checkpoint", "train: directory for last/best checkpoints; eval: checkpoint file"},
    {"resume", "checkpoint file to continue training from"},
    {"threads", "worker threads (0: all cores)"},
    {"repeats", "independent runs with seeds seed..seed+N-1; the best is reported"},
    {"out", "CSV output path"},
    {"precision", "32 | 64"},
    {"prefetch", "prepare the next batch in the background (true|false)"},
};

std::string env_name(const std::string& key) {
  std::string s = "CCT_";
  for (char c : key) s += c == '-' ? '_' : static_cast<char>(std::toupper(static_cast<unsigned char>(c)));
  return s;
}

/// Holds raw option strings for one subcommand until they are folded into a RunConfig.
struct RunOptionSet {
  std::map<std::string, std::string> values;
  std::map<std::string, CLI::Option*> options;
  bool tuned = false;
  bool verbose = false;
  CLI::Option* tuned_opt = nullptr;
  CLI::Option* verbose_opt = nullptr;
  std::string config_file;

  void attach(CLI::App* app, const std::vector<std::string>& keys = {}) {
    app->add_option("--config", config_file, "flat key=value file using the flag names as keys")
        ->envname("CCT_CONFIG");
    for (const auto& spec : kRunOptions) {
      if (!keys.empty() && std::find(keys.begin(), keys.end(), spec.key) == keys.end()) continue;
      options[spec.key] =
          app->add_option(std::string("--") + spec.key, values[spec.key], spec.help)->envname(env_name(spec.key));
    }
    if (keys.empty() || std::find(keys.begin(), keys.end(), "tuned") != keys.end())
      tuned_opt = app->add_flag("--tuned", tuned, "use the tuned dropout/stochastic-depth rates")->envname("CCT_TUNED");
    verbose_opt = app->add_flag("--verbose", verbose, "per-step progress")->envname("CCT_VERBOSE");
  }

  /// Defaults < config file < environment < flags.
  RunConfig resolve() const {
    RunConfig cfg;
    if (!config_file.empty()) {
      std::ifstream is(config_file);
      if (!is) cct::fail(ErrorKind::io, "cannot read config file " + config_file);
      std::stringstream ss;
      ss << is.rdbuf();
      cfg.apply_text(ss.str());
    }
    for (const auto& [key, opt] : options)
      if (opt->count() > 0) cfg.set(key, values.at(key));
    if (tuned_opt && tuned_opt->count() > 0) cfg.tuned = tuned;
    if (verbose_opt && verbose_opt->count() > 0) cfg.verbose = verbose;
    return cfg;
  }
};

std::vector<std::string> split_list(const std::string& s) {
  std::vector<std::string> out;
  std::string cur;
  std::istringstream is(s);
  while (std::getline(is, cur, ','))
    if (!cur.empty()) out.push_back(cur);
  return out;
}

std::string with_suffix(const std::string& path, const std::string& tag) {
  if (path.empty()) return path;
  std::filesystem::path p(path);
  return (p.parent_path() / (p.stem().string() + tag + p.extension().string())).string();
}

void apply_threads(const RunConfig& cfg) {
  if (cfg.threads > 0) cct::set_num_threads(static_cast<int>(cfg.threads));
}

int cmd_train(const RunConfig& base) {
  cct::check_run_names(base);
  apply_threads(base);
  const auto data = cct::load_run_data(base);
  double best = -1;
  for (std::int64_t r = 0; r < base.repeats; ++r) {
    RunConfig cfg = base;
    cfg.seed = base.seed + static_cast<std::uint64_t>(r);
    if (base.repeats > 1) {
      cfg.out = with_suffix(base.out, ".r" + std::to_string(r));
      if (!base.checkpoint.empty()) cfg.checkpoint = (std::filesystem::path(base.checkpoint) / ("r" + std::to_string(r))).string();
    }
    const auto res = cct::train_run(cfg, data.train, data.test, &std::cerr);
    best = std::max(best, res.best_val_acc);
    const auto& last = res.history.empty() ? cct::EpochMetrics{} : res.history.back();
    std::cout << "run " << r << " seed " << cfg.seed << " best_val_acc " << std::fixed << std::setprecision(2)
              << res.best_val_acc << " (epoch " << res.best_epoch << ") final_val_acc " << last.val_acc << " params "
              << res.params << " wall_seconds " << std::setprecision(1) << res.wall_seconds << "\n";
  }
  if (base.repeats > 1) std::cout << "best_of_" << base.repeats << " " << std::fixed << std::setprecision(2) << best << "\n";
  return 0;
}

template <class T>
int eval_with(const cct::Checkpoint& ck, const RunConfig& overrides, const std::map<std::string, bool>& given) {
  RunConfig trained;
  auto model = cct::model_from_checkpoint<T>(ck, &trained);
  RunConfig cfg = trained;
  for (const char* key : {"dataset", "data-dir", "image-size", "limit-test"})
    if (given.count(key)) {
      if (std::string(key) == "dataset") cfg.dataset = overrides.dataset;
      if (std::string(key) == "data-dir") cfg.data_dir = overrides.data_dir;
      if (std::string(key) == "image-size") cfg.image_size = overrides.image_size;
      if (std::string(key) == "limit-test") cfg.limit_test = overrides.limit_test;
    }
  cfg.samples_per_class = 0;
  cfg.limit_train = 1;
  const auto data = cct::load_run_data(cfg);
  const auto r = cct::evaluate(model, data.test);
  std::cout << "top1 " << std::fixed << std::setprecision(4) << r.acc << " loss " << std::setprecision(6) << r.loss
            << " samples " << r.count << "\n";
  return 0;
}

int cmd_eval(const RunOptionSet& set) {
  const RunConfig o = set.resolve();
  apply_threads(o);
  if (o.checkpoint.empty()) cct::fail(ErrorKind::config, "eval needs --checkpoint <file>");
  const auto ck = cct::Checkpoint::load(o.checkpoint);
  std::map<std::string, bool> given;
  for (const auto& [k, opt] : set.options)
    if (opt->count() > 0) given[k] = true;
  const auto* first = ck.find("param/head.weight");
  if (first && first->dtype == cct::DType::f64) return eval_with<double>(ck, o, given);
  return eval_with<float>(ck, o, given);
}

int cmd_stats(const std::vector<std::string>& models, std::int64_t size, std::int64_t classes, std::int64_t channels,
              const std::string& pe, const std::string& pool, bool json) {
  cct::ModelOptions opt;
  opt.pe = cct::parse_pe_kind(pe);
  if (!pool.empty()) opt.pooling = cct::parse_pooling(pool);
  opt.channels = channels;
  std::vector<cct::ModelConfig> configs;
  for (const auto& name : models) configs.push_back(cct::make_config(name, classes, size, size, opt));
  if (!json)
    std::cout << std::left << std::setw(18) << "model" << std::right << std::setw(12) << "params" << std::setw(10)
              << "params_M" << std::setw(12) << "MACs_G" << std::setw(14) << "attn_MACs_G" << std::setw(8) << "seq"
              << std::setw(6) << "dim" << "\n";
  for (const auto& cfg : configs) {
    const auto& name = cfg.name;
    const auto params = cct::count_params(cfg);
    const auto macs = cct::count_macs(cfg, size, size);
    const auto seq = cfg.sequence_length(size, size) + (cfg.has_class_token() ? 1 : 0);
    if (json) {
      nlohmann::json j{{"model", name},
                       {"image_size", size},
                       {"classes", classes},
                       {"params", params},
                       {"macs", macs.layers},
                       {"attention_macs", macs.attention},
                       {"sequence_length", seq},
                       {"dim", cfg.dim()},
                       {"layers", cfg.backbone.layers},
                       {"heads", cfg.backbone.heads}};
      std::cout << j.dump() << "\n";
    } else {
      std::cout << std::left << std::setw(18) << name << std::right << std::setw(12) << params << std::setw(10)
                << std::fixed << std::setprecision(3) << static_cast<double>(params) / 1e6 << std::setw(12)
                << static_cast<double>(macs.layers) / 1e9 << std::setw(14) << static_cast<double>(macs.attention) / 1e9
                << std::setw(8) << seq << std::setw(6) << cfg.dim() << "\n";
    }
  }
  return 0;
}

int cmd_gradcheck(std::uint64_t seed) {
  const auto rows = cct::run_gradient_suite(seed);
  int failures = 0;
  std::cout << std::left << std::setw(26) << "kernel" << std::right << std::setw(14) << "max_error" << std::setw(10)
            << "tol" << std::setw(9) << "coords" << "  result\n";
  for (const auto& r : rows) {
    std::cout << std::left << std::setw(26) << r.name << std::right << std::scientific << std::setprecision(3)
              << std::setw(14) << r.max_error << std::setw(10) << std::setprecision(0) << r.tolerance << std::setw(9)
              << r.checked << "  " << (r.pass() ? "PASS" : "FAIL") << "\n";
    failures += !r.pass();
  }
  if (failures) cct::fail(ErrorKind::numeric, std::to_string(failures) + " gradient check(s) failed");
  return 0;
}

int cmd_experiment(const RunConfig& base, const std::string& kind, const std::string& models,
                   const std::string& values, bool inference, const std::string& weights) {
  cct::check_run_names(base);
  apply_threads(base);
  const auto k = cct::parse_experiment_kind(kind);
  for (const auto& m : split_list(models)) cct::parse_model_name(m);
  cct::ExperimentOptions opt;
  opt.models = split_list(models);
  for (const auto& v : split_list(values)) {
    try {
      opt.values.push_back(std::stoll(v));
    } catch (const std::exception&) {
      cct::fail(ErrorKind::config, "--values expects integers, got '" + v + "'");
    }
  }
  opt.inference_only = inference;
  opt.checkpoint = weights;
  RunConfig c = base;
  const std::string out = c.out;
  c.out.clear();
  RunConfig load_cfg = c;
  if (k != cct::ExperimentKind::pe_ablation) load_cfg.samples_per_class = 0;
  if (k == cct::ExperimentKind::resolution_sweep) load_cfg.image_size = 0;
  const auto data = cct::load_run_data(load_cfg);
  std::cout << cct::experiment_header() << "\n";
  const auto rows = cct::run_experiment(k, c, data.train, data.test, opt, out, &std::cerr);
  for (const auto& r : rows) std::cout << cct::experiment_row(r) << "\n";
  return 0;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Compact transformer training and analysis"};
  app.require_subcommand(1);

  auto* train = app.add_subcommand("train", "train a model and write metrics/checkpoints");
  RunOptionSet train_opts;
  train_opts.attach(train);

  auto* eval = app.add_subcommand("eval", "top-1 accuracy of a checkpoint on a test split");
  RunOptionSet eval_opts;
  eval_opts.attach(eval, {"checkpoint", "dataset", "data-dir", "image-size", "limit-test", "threads"});

  auto* stats = app.add_subcommand("stats", "parameter / MAC / sequence-length report");
  std::vector<std::string> stat_models;
  std::int64_t stat_size = 32, stat_classes = 10, stat_channels = 3;
  std::string stat_pe = "learnable", stat_pool;
  bool stat_json = false;
  stats->add_option("--model", stat_models, "model name(s); repeat or separate with commas")->required()->delimiter(',');
  stats->add_option("--image-size", stat_size, "square input size")->envname("CCT_IMAGE_SIZE");
  stats->add_option("--classes", stat_classes, "classifier outputs");
  stats->add_option("--channels", stat_channels, "input channels");
  stats->add_option("--pos-emb", stat_pe, "learnable | sinusoidal | none")->envname("CCT_POS_EMB");
  stats->add_option("--pool", stat_pool, "seqpool | class-token")->envname("CCT_POOL");
  stats->add_flag("--json", stat_json, "emit JSON lines instead of a table");

  auto* grad = app.add_subcommand("gradcheck", "finite-difference check of every differentiable kernel");
  std::uint64_t grad_seed = 1;
  grad->add_option("--seed", grad_seed, "seed for the random test shapes")->envname("CCT_SEED");

  auto* exp = app.add_subcommand("experiment", "PE ablation, samples-per-class and resolution sweeps");
  RunOptionSet exp_opts;
  exp_opts.attach(exp);
  std::string exp_kind, exp_models, exp_values, exp_weights;
  bool exp_inference = false;
  exp->add_option("--kind", exp_kind, "pe-ablation | samples-sweep | resolution-sweep")->required();
  exp->add_option("--models", exp_models, "comma-separated models for pe-ablation");
  exp->add_option("--values", exp_values, "comma-separated sweep points (k or image sizes)");
  exp->add_flag("--inference-only", exp_inference, "resolution sweep: evaluate one trained model at each size");
  exp->add_option("--weights", exp_weights, "resolution sweep: checkpoint to evaluate instead of training");

  try {
    app.parse(argc, argv);
  } catch (const CLI::CallForHelp& e) {
    return app.exit(e);
  } catch (const CLI::CallForAllHelp& e) {
    return app.exit(e);
  } catch (const CLI::ParseError& e) {
    std::string msg = e.what();
    std::replace(msg.begin(), msg.end(), '\n', ' ');
    std::cerr << "error[config]: " << msg << "\n";
    return cct::error_exit_code(ErrorKind::config);
  }

  try {
    if (*train) return cmd_train(train_opts.resolve());
    if (*eval) return cmd_eval(eval_opts);
    if (*stats) return cmd_stats(stat_models, stat_size, stat_classes, stat_channels, stat_pe, stat_pool, stat_json);
    if (*grad) return cmd_gradcheck(grad_seed);
    if (*exp) return cmd_experiment(exp_opts.resolve(), exp_kind, exp_models, exp_values, exp_inference, exp_weights);
  } catch (const cct::Error& e) {
    std::string msg = e.what();
    std::replace(msg.begin(), msg.end(), '\n', ' ');
    std::cerr << "error[" << cct::error_kind_name(e.kind()) << "]: " << msg << "\n";
    return cct::error_exit_code(e.kind());
  } catch (const std::filesystem::filesystem_error& e) {
    std::cerr << "error[io]: " << e.what() << "\n";
    return cct::error_exit_code(ErrorKind::io);
  } catch (const std::exception& e) {
    std::cerr << "error[internal]: " << e.what() << "\n";
    return 1;
  }
  return 0;
}
