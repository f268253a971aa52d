// Every hyperparameter of an experiment in one strict JSON document.
#pragma once

#include "zerommt/decoding.hpp"
#include "zerommt/synthcorpus.hpp"
#include "zerommt/training.hpp"

#include <filesystem>
#include <string>
#include <vector>

namespace zerommt {

struct DecodeConfig {
  int beam_width = 4;
  int max_len = 24;
  bool length_normalize = false;
  CfgSpace cfg_space = CfgSpace::log;

  [[nodiscard]] BeamOptions beam() const;
};

struct RunConfig {
  std::uint64_t seed = 1;
  WorldSpec world;
  SplitSizes sizes;
  ModelConfig model;
  TrainConfig pretrain;
  TrainConfig train;
  DecodeConfig decode;
  std::vector<double> gammas = {1.0, 1.25, 1.5, 2.0, 2.5, 3.0};
  std::vector<double> lambdas = {0.01, 0.05, 0.1, 0.5, 1.0, 10.0};
  TargetSource targets = TargetSource::pseudo;

  RunConfig();
  void validate() const;
  /// Re-seeds every stage from one run seed.
  void apply_seed(std::uint64_t s);
};

/// Keys: seed, world, sizes, model, pretrain, train, loss, decode, gammas,
/// lambdas, ablation, targets. Unknown keys are rejected at every level.
RunConfig run_config_from_json(const Json& j);
Json to_json(const RunConfig& c);
RunConfig load_run_config(const std::filesystem::path& path);

/// Library version embedded in every output.
std::string version_string();

}  // namespace zerommt
