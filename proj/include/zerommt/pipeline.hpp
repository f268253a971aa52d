// End-to-end experiment stages shared by the command-line tool and the
// acceptance suite: corpus generation, base pretraining, pseudo-translation,
// extras training and evaluation.
#pragma once

#include "zerommt/evaluation.hpp"
#include "zerommt/run_config.hpp"

#include <filesystem>
#include <stdexcept>
#include <string>
#include <vector>

namespace zerommt {

/// An error tagged with the pipeline stage that raised it.
class StageError : public std::runtime_error {
 public:
  StageError(std::string stage, const std::string& what)
      : std::runtime_error(stage + ": " + what), stage_(std::move(stage)) {}
  [[nodiscard]] const std::string& stage() const { return stage_; }

 private:
  std::string stage_;
};

struct Corpus {
  World world;
  Splits splits;
};

/// World and splits for the config; a pure function of (config, seed).
Corpus generate_corpus(const RunConfig& config);
void write_corpus(const std::filesystem::path& dir, const Corpus& corpus, const RunConfig& config);
/// Reads the six split files; the world is rebuilt from world.json.
Corpus read_corpus(const std::filesystem::path& dir, const RunConfig& config);

struct BaseReport {
  double unambiguous_token_accuracy = 0.0;
  double mean_max_sense_probability = 0.0;
  double min_sense_probability = 0.0;  // smallest of p_a, p_b over instances
  double max_sense_probability = 0.0;  // largest of p_a, p_b over instances
  double final_loss = 0.0;

  [[nodiscard]] Json to_json() const;
};

struct BaseOutcome {
  ModelParams params;
  std::vector<double> losses;
  BaseReport report;
};

BaseOutcome run_pretrain(const RunConfig& config, const Corpus& corpus);
BaseReport measure_base(const ModelParams& base, const Corpus& corpus);

/// mmt_train with pseudo or gold targets, per config.targets.
std::vector<Example> training_examples(const RunConfig& config, const Corpus& corpus, const ModelParams& base,
                                       PseudoTranslationReport* report = nullptr);

TrainResult run_train(const RunConfig& config, const Corpus& corpus, const ModelParams& base,
                      std::span<const Example> examples);

/// Test-set evaluation at one guidance scale. A `base` stage checkpoint is
/// evaluated as the text-only model; gamma is ignored for it.
EvalReport run_eval(const RunConfig& config, const Corpus& corpus, const Checkpoint& checkpoint, double gamma);

/// Lines embedded at the top of every CSV output.
std::vector<std::string> provenance_lines(const RunConfig& config);

}  // namespace zerommt
