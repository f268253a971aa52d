// Command-line driver: gen | pretrain | translate | train | eval | sweep.
#include "zerommt/pipeline.hpp"

#include <CLI11.hpp>

#include <fstream>
#include <iomanip>
#include <iostream>
#include <optional>

namespace fs = std::filesystem;
using namespace zerommt;

namespace {

struct Common {
  std::string config_path;
  std::optional<std::uint64_t> seed;
  std::string out = ".";
};

RunConfig resolve_config(const Common& c) {
  RunConfig config = c.config_path.empty() ? RunConfig{} : load_run_config(c.config_path);
  if (c.seed) {
    config.apply_seed(*c.seed);
    config.validate();
  }
  return config;
}

void write_text(const fs::path& path, const std::string& text) {
  std::ofstream out(path, std::ios::binary);
  out << text;
  if (!out) throw std::runtime_error("cannot write " + path.string());
}

Json stamped(const RunConfig& config, Json body) {
  body["version"] = version_string();
  body["config"] = to_json(config);
  return body;
}

void write_json(const fs::path& path, const Json& j) { write_text(path, j.dump(2) + "\n"); }

Checkpoint load_stage_checkpoint(const std::string& path, const char* stage) {
  try {
    return load_checkpoint(path);
  } catch (const std::exception& e) {
    throw StageError(stage, e.what());
  }
}

std::vector<Example> examples_for_training(const RunConfig& config, const Corpus& corpus, const ModelParams& base,
                                           const fs::path& corpus_dir, Json& pseudo_report) {
  if (config.targets == TargetSource::pseudo && fs::exists(corpus_dir / split_file::kMmtTrainPseudo)) {
    return read_examples(corpus_dir / split_file::kMmtTrainPseudo);
  }
  PseudoTranslationReport r;
  std::vector<Example> out = training_examples(config, corpus, base, &r);
  if (config.targets == TargetSource::pseudo) pseudo_report = r.to_json();
  return out;
}

void write_log(const fs::path& path, const RunConfig& config, const TrainResult& r) {
  std::ofstream out(path, std::ios::binary);
  write_train_log(out, r.log, provenance_lines(config));
  if (!out) throw std::runtime_error("cannot write " + path.string());
}

Json eval_json(const EvalReport& r) { return r.to_json(); }

int cmd_gen(const Common& c) {
  const RunConfig config = resolve_config(c);
  const Corpus corpus = generate_corpus(config);
  write_corpus(c.out, corpus, config);
  const Splits& s = corpus.splits;
  std::cout << "pretrain_parallel " << s.pretrain_parallel.size() << "\n"
            << "mmt_train " << s.mmt_train.size() << "\n"
            << "val_contrastive " << s.val_contrastive.size() << "\n"
            << "val_translation " << s.val_translation.size() << "\n"
            << "test_contrastive " << s.test_contrastive.size() << "\n"
            << "test_translation " << s.test_translation.size() << "\n";
  for (const std::string& note : s.notes) std::cout << "note: " << note << "\n";
  return 0;
}

int cmd_pretrain(const Common& c, const std::string& corpus_dir) {
  const RunConfig config = resolve_config(c);
  const Corpus corpus = read_corpus(corpus_dir, config);
  fs::create_directories(c.out);
  BaseOutcome base = run_pretrain(config, corpus);
  Checkpoint ckpt{base.params, config.pretrain.max_steps, 0.0, "base", to_json(config)};
  save_checkpoint(fs::path(c.out) / "base.ckpt", ckpt);
  {
    std::ofstream log(fs::path(c.out) / "pretrain_log.csv", std::ios::binary);
    for (const std::string& line : provenance_lines(config)) log << "# " << line << '\n';
    log << "step,loss\n" << std::setprecision(17);
    for (std::size_t i = 0; i < base.losses.size(); ++i) log << i + 1 << ',' << base.losses[i] << '\n';
  }
  write_json(fs::path(c.out) / "base_report.json", stamped(config, base.report.to_json()));
  std::cout << base.report.to_json().dump(2) << "\n";
  return 0;
}

int cmd_translate(const Common& c, const std::string& corpus_dir, const std::string& base_path) {
  RunConfig config = resolve_config(c);
  config.targets = TargetSource::pseudo;
  const Corpus corpus = read_corpus(corpus_dir, config);
  const Checkpoint base = load_stage_checkpoint(base_path, "translate");
  PseudoTranslationReport r;
  const std::vector<Example> out = training_examples(config, corpus, base.params, &r);
  fs::create_directories(c.out);
  write_examples(fs::path(c.out) / split_file::kMmtTrainPseudo, out);
  write_json(fs::path(c.out) / "pseudo_report.json", stamped(config, r.to_json()));
  std::cout << r.to_json().dump(2) << "\n";
  return 0;
}

int cmd_train(const Common& c, const std::string& corpus_dir, const std::string& base_path) {
  const RunConfig config = resolve_config(c);
  const Corpus corpus = read_corpus(corpus_dir, config);
  const Checkpoint base = load_stage_checkpoint(base_path, "train");
  Json pseudo = Json::object();
  const std::vector<Example> examples = examples_for_training(config, corpus, base.params, corpus_dir, pseudo);
  const TrainResult r = run_train(config, corpus, base.params, examples);
  fs::create_directories(c.out);
  save_checkpoint(fs::path(c.out) / "model.ckpt", r.best);
  write_log(fs::path(c.out) / "train_log.csv", config, r);
  Json summary{{"best_step", r.best.step}, {"selection_score", r.best.selection_score}, {"ablation", to_string(config.train.ablation)}};
  if (!pseudo.empty()) summary["pseudo_translation"] = pseudo;
  write_json(fs::path(c.out) / "train_report.json", stamped(config, summary));
  std::cout << summary.dump(2) << "\n";
  return 0;
}

int cmd_eval(const Common& c, const std::string& corpus_dir, const std::string& ckpt_path, double gamma) {
  const RunConfig config = resolve_config(c);
  const Corpus corpus = read_corpus(corpus_dir, config);
  const Checkpoint ckpt = load_stage_checkpoint(ckpt_path, "eval");
  const EvalReport guided = run_eval(config, corpus, ckpt, gamma);
  Json body{{"guided", eval_json(guided)}};
  if (gamma != 1.0 && ckpt.stage != "base") body["unguided"] = eval_json(run_eval(config, corpus, ckpt, 1.0));
  body["checkpoint_step"] = ckpt.step;
  fs::create_directories(c.out);
  write_json(fs::path(c.out) / "report.json", stamped(config, body));
  std::ofstream rows(fs::path(c.out) / "instances.csv", std::ios::binary);
  for (const std::string& line : provenance_lines(config)) rows << "# " << line << '\n';
  write_contrastive_csv(rows, guided.contrastive.rows);
  std::cout << body.dump(2) << "\n";
  return 0;
}

int cmd_sweep(const Common& c, const std::string& corpus_dir, const std::string& param, std::vector<double> values,
              const std::string& base_path, const std::string& ckpt_path) {
  RunConfig config = resolve_config(c);
  if (param != "lambda" && param != "gamma") throw StageError("sweep", "--param must be lambda or gamma");
  if (values.empty()) values = param == "lambda" ? config.lambdas : config.gammas;
  if (values.empty()) throw StageError("sweep", "no values to sweep");
  const Corpus corpus = read_corpus(corpus_dir, config);
  fs::create_directories(c.out);
  std::ofstream out(fs::path(c.out) / ("sweep_" + param + ".csv"), std::ios::binary);
  for (const std::string& line : provenance_lines(config)) out << "# " << line << '\n';
  out << param << ",contrastive_accuracy,bleu\n" << std::setprecision(17);

  if (param == "gamma") {
    if (ckpt_path.empty()) throw StageError("sweep", "--checkpoint is required for a gamma sweep");
    const Checkpoint ckpt = load_stage_checkpoint(ckpt_path, "sweep");
    for (double g : values) {
      const EvalReport r = run_eval(config, corpus, ckpt, g);
      out << g << ',' << r.contrastive.accuracy << ',' << r.bleu << '\n';
      std::cout << "gamma " << g << " contrastive " << r.contrastive.accuracy << " bleu " << r.bleu << std::endl;
    }
  } else {
    if (base_path.empty()) throw StageError("sweep", "--base is required for a lambda sweep");
    const Checkpoint base = load_stage_checkpoint(base_path, "sweep");
    Json pseudo = Json::object();
    const std::vector<Example> examples = examples_for_training(config, corpus, base.params, corpus_dir, pseudo);
    for (double l : values) {
      RunConfig run = config;
      run.train.loss.lambda = l;
      const TrainResult t = run_train(run, corpus, base.params, examples);
      const EvalReport r = run_eval(run, corpus, t.best, 1.0);
      out << l << ',' << r.contrastive.accuracy << ',' << r.bleu << '\n';
      std::cout << "lambda " << l << " contrastive " << r.contrastive.accuracy << " bleu " << r.bleu << std::endl;
    }
  }
  if (!out) throw std::runtime_error("cannot write sweep output");
  return 0;
}

void add_common(CLI::App* app, Common& c) {
  app->add_option("--config", c.config_path, "JSON run configuration")->check(CLI::ExistingFile);
  app->add_option("--seed", c.seed, "Run seed (overrides the config)");
  app->add_option("--out", c.out, "Output directory");
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Zero-shot multimodal translation on a synthetic corpus"};
  app.require_subcommand(1);
  app.set_version_flag("--version", version_string());

  Common common;
  std::string corpus_dir;
  std::string base_path;
  std::string ckpt_path;
  std::string param;
  std::vector<double> values;
  double gamma = 1.0;
  std::string ablation;
  std::string targets;

  CLI::App* gen = app.add_subcommand("gen", "Generate the synthetic corpus");
  add_common(gen, common);

  CLI::App* pretrain = app.add_subcommand("pretrain", "Train the text-only base model");
  add_common(pretrain, common);
  pretrain->add_option("--corpus", corpus_dir, "Corpus directory")->required();

  CLI::App* translate = app.add_subcommand("translate", "Pseudo-translate mmt_train with the frozen base");
  add_common(translate, common);
  translate->add_option("--corpus", corpus_dir, "Corpus directory")->required();
  translate->add_option("--base", base_path, "Base checkpoint")->required();

  CLI::App* train_cmd = app.add_subcommand("train", "Train adapters and projector");
  add_common(train_cmd, common);
  train_cmd->add_option("--corpus", corpus_dir, "Corpus directory")->required();
  train_cmd->add_option("--base", base_path, "Base checkpoint")->required();
  train_cmd->add_option("--mode", ablation, "full | no_vmlm | no_kl | mmt_no_kl");
  train_cmd->add_option("--targets", targets, "pseudo | gold");

  CLI::App* eval = app.add_subcommand("eval", "Evaluate a checkpoint on the test splits");
  add_common(eval, common);
  eval->add_option("--corpus", corpus_dir, "Corpus directory")->required();
  eval->add_option("--checkpoint", ckpt_path, "Checkpoint to evaluate")->required();
  eval->add_option("--gamma", gamma, "Guidance scale (1 = no guidance)");

  CLI::App* sweep = app.add_subcommand("sweep", "Sweep lambda (retraining) or gamma (one checkpoint)");
  add_common(sweep, common);
  sweep->add_option("--corpus", corpus_dir, "Corpus directory")->required();
  sweep->add_option("--param", param, "lambda | gamma")->required();
  sweep->add_option("--values", values, "Values to sweep (default: the config grid)")->delimiter(',');
  sweep->add_option("--base", base_path, "Base checkpoint (lambda sweep)");
  sweep->add_option("--checkpoint", ckpt_path, "Trained checkpoint (gamma sweep)");
  sweep->add_option("--mode", ablation, "Ablation mode for lambda retraining");

  CLI11_PARSE(app, argc, argv);

  try {
    if (!ablation.empty() || !targets.empty()) {
      // Applied through the config so every output records them.
      Json patch = Json::object();
      if (!ablation.empty()) patch["ablation"] = ablation;
      if (!targets.empty()) patch["targets"] = targets;
      const RunConfig base_config = resolve_config(common);
      Json merged = to_json(base_config);
      merged.merge_patch(patch);
      const fs::path resolved = fs::path(common.out) / "run_config.json";
      fs::create_directories(common.out);
      write_json(resolved, merged);
      common.config_path = resolved.string();
      common.seed.reset();
    }
    int rc = 0;
    if (*gen) rc = cmd_gen(common);
    if (*pretrain) rc = cmd_pretrain(common, corpus_dir);
    if (*translate) rc = cmd_translate(common, corpus_dir, base_path);
    if (*train_cmd) rc = cmd_train(common, corpus_dir, base_path);
    if (*eval) rc = cmd_eval(common, corpus_dir, ckpt_path, gamma);
    if (*sweep) rc = cmd_sweep(common, corpus_dir, param, values, base_path, ckpt_path);
    fs::create_directories(common.out);
    write_json(fs::path(common.out) / "run_config.json", to_json(resolve_config(common)));
    return rc;
  } catch (const StageError& e) {
    std::cerr << "error [" << e.stage() << "]: " << e.what() << "\n";
  } catch (const ConfigError& e) {
    std::cerr << "error [config]: " << e.what() << "\n";
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << "\n";
  }
  return 1;
}
