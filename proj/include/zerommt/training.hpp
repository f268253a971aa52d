// Base pretraining, extras-only training with Adam, and equal-weight model
// selection over validation checkpoints.
#pragma once

#include "zerommt/decoding.hpp"
#include "zerommt/example.hpp"
#include "zerommt/objectives.hpp"

#include <functional>
#include <iosfwd>
#include <map>
#include <optional>
#include <span>
#include <stdexcept>
#include <string>
#include <vector>

namespace zerommt {

class TrainingError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

/// Which loss terms a run optimizes.
///   full       vmlm + lambda * kl
///   no_vmlm    lambda * kl
///   no_kl      vmlm
///   mmt_no_kl  vmlm + lambda * (teacher-forced NLL on unmasked sources)
enum class AblationMode { full, no_vmlm, no_kl, mmt_no_kl };

AblationMode ablation_mode_from_string(const std::string& s);
std::string to_string(AblationMode m);

struct TrainConfig {
  double lr = 1e-4;
  double beta1 = 0.9;
  double beta2 = 0.99;
  double eps_adam = 1e-8;
  int batch_size = 32;
  int max_steps = 1000;
  std::uint64_t seed = 1;
  LossWeights loss;
  double mask_rate = 0.25;
  int eval_every = 100;
  AblationMode ablation = AblationMode::full;

  void validate() const;
};

Json to_json(const TrainConfig& c);
/// Reads the optimizer and schedule keys; `loss` and `ablation` are read by the run config.
TrainConfig train_config_from_json(const Json& j, TrainConfig defaults = {});

struct AdamState {
  int step = 0;
  std::map<std::string, Matrix> m;
  std::map<std::string, Matrix> v;
};

/// One bias-corrected Adam update of every tensor that has a gradient.
/// Throws TrainingError when a gradient targets a frozen tensor.
void adam_step(ModelParams& params, const std::map<std::string, Matrix>& grads, AdamState& state,
               const TrainConfig& config);

struct PretrainResult {
  ModelParams params;  // base frozen
  std::vector<double> losses;
};

/// Trains the text-only model on parallel text with teacher-forced NLL.
/// Images in the corpus are ignored.
PretrainResult pretrain_base(const ModelConfig& model, std::span<const Example> corpus, const TrainConfig& config);

struct TrainLogRow {
  int step = 0;
  double vmlm = 0.0;
  double kl = 0.0;
  double total = 0.0;
  std::optional<double> val_contrastive;
  std::optional<double> val_bleu;
};

struct ValidationSets {
  std::span<const ContrastiveInstance> contrastive;
  std::span<const Example> translation;
  BeamOptions beam;
};

struct SelectionCandidate {
  int step = 0;
  double contrastive = 0.0;
  double bleu = 0.0;
};

struct TrainResult {
  Checkpoint best;
  std::vector<TrainLogRow> log;
  std::vector<SelectionCandidate> candidates;
  std::vector<double> selection_scores;
};

/// Trains the extras of a copy of `frozen_base` (re-initialized from the run
/// seed). Validation runs every eval_every steps and after the last step; the
/// returned checkpoint is the select_model winner.
TrainResult train(const TrainConfig& config, const ModelParams& frozen_base, std::span<const Example> corpus,
                  const ValidationSets& validation);

/// 0.5 * minmax(contrastive) + 0.5 * minmax(bleu) per candidate; a metric
/// with zero range contributes 0.
std::vector<double> selection_scores(std::span<const SelectionCandidate> candidates);
/// Index of the highest selection score; ties go to the earliest step.
std::size_t select_model(std::span<const SelectionCandidate> candidates);

/// `step,vmlm,kl,total,val_contrastive,val_bleu` with empty cells for steps
/// without validation. `preamble` lines are written first, each prefixed by "# ".
void write_train_log(std::ostream& out, std::span<const TrainLogRow> rows, std::span<const std::string> preamble = {});

}  // namespace zerommt
