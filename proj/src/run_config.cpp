#include "zerommt/run_config.hpp"

#include <cmath>
#include <fstream>

namespace zerommt {

BeamOptions DecodeConfig::beam() const {
  BeamOptions o;
  o.width = beam_width;
  o.max_len = max_len;
  o.length_normalize = length_normalize;
  return o;
}

RunConfig::RunConfig() {
  pretrain.lr = 1e-3;
  pretrain.batch_size = 128;
  pretrain.max_steps = 1200;
  train.lr = 2e-3;
  train.max_steps = 2000;
  train.eval_every = 250;
  apply_seed(seed);
}

void RunConfig::apply_seed(std::uint64_t s) {
  seed = s;
  world.seed = s;
  pretrain.seed = s;
  train.seed = s;
}

void RunConfig::validate() const {
  world.validate();
  model.validate();
  pretrain.validate();
  train.validate();
  if (world.vocab_size() > model.vocab_size) {
    throw ConfigError("world needs " + std::to_string(world.vocab_size()) + " tokens but model.vocab_size is " +
                      std::to_string(model.vocab_size));
  }
  if (world.image_dim != model.image_dim) throw ConfigError("world.image_dim must equal model.image_dim");
  if (world.max_sentence_length + 2 > model.max_len) throw ConfigError("model.max_len too small for the longest sentence");
  if (decode.beam_width < 1) throw ConfigError("decode.beam_width must be >= 1");
  if (decode.max_len < 1 || decode.max_len > model.max_len) {
    throw ConfigError("decode.max_len must be in [1, model.max_len]");
  }
  for (double g : gammas) {
    if (!std::isfinite(g) || g < 0.0) throw ConfigError("gammas must be finite and >= 0");
  }
  for (double l : lambdas) {
    if (!std::isfinite(l) || l < 0.0) throw ConfigError("lambdas must be finite and >= 0");
  }
}

namespace {

DecodeConfig decode_config_from_json(const Json& j) {
  constexpr std::string_view where = "decode";
  reject_unknown_keys(j, {"beam_width", "max_len", "length_normalize", "cfg_space"}, where);
  DecodeConfig d;
  read_optional(j, "beam_width", d.beam_width, where);
  read_optional(j, "max_len", d.max_len, where);
  read_optional(j, "length_normalize", d.length_normalize, where);
  std::string space = to_string(d.cfg_space);
  read_optional(j, "cfg_space", space, where);
  d.cfg_space = cfg_space_from_string(space);
  return d;
}

LossWeights loss_from_json(const Json& j) {
  constexpr std::string_view where = "loss";
  reject_unknown_keys(j, {"lambda", "kl_mode"}, where);
  LossWeights w;
  read_optional(j, "lambda", w.lambda, where);
  std::string mode = to_string(w.kl_mode);
  read_optional(j, "kl_mode", mode, where);
  w.kl_mode = kl_mode_from_string(mode);
  return w;
}

}  // namespace

RunConfig run_config_from_json(const Json& j) {
  constexpr std::string_view where = "config";
  reject_unknown_keys(j,
                      {"seed", "world", "sizes", "model", "pretrain", "train", "loss", "decode", "gammas", "lambdas",
                       "ablation", "targets"},
                      where);
  RunConfig c;
  std::uint64_t seed = c.seed;
  read_optional(j, "seed", seed, where);
  c.apply_seed(seed);
  // Section seeds, when given, override the run seed.
  if (j.contains("world")) {
    Json w = j.at("world");
    if (w.is_object() && !w.contains("seed")) w["seed"] = seed;
    c.world = world_spec_from_json(w);
  }
  if (j.contains("sizes")) c.sizes = split_sizes_from_json(j.at("sizes"));
  if (j.contains("model")) c.model = model_config_from_json(j.at("model"));
  if (j.contains("pretrain")) c.pretrain = train_config_from_json(j.at("pretrain"), c.pretrain);
  if (j.contains("train")) c.train = train_config_from_json(j.at("train"), c.train);
  if (j.contains("loss")) c.train.loss = loss_from_json(j.at("loss"));
  if (j.contains("decode")) c.decode = decode_config_from_json(j.at("decode"));
  read_optional(j, "gammas", c.gammas, where);
  read_optional(j, "lambdas", c.lambdas, where);
  std::string ablation = to_string(c.train.ablation);
  read_optional(j, "ablation", ablation, where);
  c.train.ablation = ablation_mode_from_string(ablation);
  std::string targets = to_string(c.targets);
  read_optional(j, "targets", targets, where);
  c.targets = target_source_from_string(targets);
  c.validate();
  return c;
}

Json to_json(const RunConfig& c) {
  return Json{{"seed", c.seed},
              {"world", to_json(c.world)},
              {"sizes", to_json(c.sizes)},
              {"model", to_json(c.model)},
              {"pretrain", to_json(c.pretrain)},
              {"train", to_json(c.train)},
              {"loss", Json{{"lambda", c.train.loss.lambda}, {"kl_mode", to_string(c.train.loss.kl_mode)}}},
              {"decode",
               Json{{"beam_width", c.decode.beam_width},
                    {"max_len", c.decode.max_len},
                    {"length_normalize", c.decode.length_normalize},
                    {"cfg_space", to_string(c.decode.cfg_space)}}},
              {"gammas", c.gammas},
              {"lambdas", c.lambdas},
              {"ablation", to_string(c.train.ablation)},
              {"targets", to_string(c.targets)}};
}

RunConfig load_run_config(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw ConfigError("cannot open config " + path.string());
  Json j;
  try {
    j = Json::parse(in);
  } catch (const Json::exception& e) {
    throw ConfigError(path.string() + ": " + e.what());
  }
  return run_config_from_json(j);
}

std::string version_string() { return std::string("zerommt ") + ZEROMMT_VERSION; }

}  // namespace zerommt
