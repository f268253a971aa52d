#include "doctest.h"

#include "zerommt/evaluation.hpp"
#include "zerommt/synthcorpus.hpp"
#include "zerommt/training.hpp"

#include <cmath>
#include <sstream>

using namespace zerommt;

namespace {

WorldSpec tiny_world_spec() {
  WorldSpec w;
  w.n_plain_words = 6;
  w.n_ambiguous_words = 2;
  w.min_sentence_length = 2;
  w.max_sentence_length = 4;
  w.image_dim = 4;
  w.seed = 5;
  return w;
}

ModelConfig tiny_model(int vocab) {
  ModelConfig c;
  c.vocab_size = vocab;
  c.d_model = 16;
  c.n_heads = 2;
  c.n_layers_enc = 1;
  c.n_layers_dec = 1;
  c.d_ffn = 32;
  c.image_dim = 4;
  c.adapter_reduction = 4;
  c.max_len = 8;
  return c;
}

struct Fixture {
  World world;
  Splits splits;
  ModelConfig model;

  Fixture() : world(generate_world(tiny_world_spec(), 64)), model(tiny_model(world.vocab_size())) {
    SplitSizes sizes;
    sizes.pretrain_parallel = 600;
    sizes.mmt_train = 200;
    sizes.val_contrastive = 8;
    sizes.val_translation = 8;
    sizes.test_contrastive = 8;
    sizes.test_translation = 32;
    splits = generate_splits(world, sizes, 3);
  }
};

const Fixture& fixture() {
  static const Fixture f;
  return f;
}

const ModelParams& pretrained_base() {
  static const ModelParams base = [] {
    TrainConfig c;
    c.lr = 3e-3;
    c.max_steps = 300;
    c.batch_size = 32;
    c.seed = 2;
    return pretrain_base(fixture().model, fixture().splits.pretrain_parallel, c).params;
  }();
  return base;
}

TrainConfig short_run(int steps, double lambda) {
  TrainConfig c;
  c.lr = 1e-3;
  c.max_steps = steps;
  c.batch_size = 16;
  c.eval_every = steps;
  c.seed = 9;
  c.loss.lambda = lambda;
  return c;
}

ValidationSets validation() {
  BeamOptions beam;
  beam.max_len = 8;
  return {fixture().splits.val_contrastive, fixture().splits.val_translation, beam};
}

ModelParams one_tensor_params(double value) {
  ModelParams p;
  p.extras["w"] = Matrix::Constant(1, 1, value);
  p.frozen["w"] = false;
  p.base["b"] = Matrix::Constant(1, 1, 1.0);
  p.frozen["b"] = true;
  return p;
}

double mean_of(const std::vector<TrainLogRow>& log, std::size_t begin, std::size_t end, double TrainLogRow::*field) {
  double s = 0.0;
  for (std::size_t i = begin; i < end; ++i) s += log[i].*field;
  return s / static_cast<double>(end - begin);
}

}  // namespace

TEST_CASE("first Adam step moves each coordinate by almost exactly lr") {
  ModelParams p = one_tensor_params(0.0);
  p.extras["w"] = Matrix::Zero(2, 3);
  Matrix g(2, 3);
  g << 0.5, -2.0, 1e-3, 30.0, -0.01, 4.0;
  TrainConfig c;
  c.lr = 1e-3;
  AdamState s;
  adam_step(p, {{"w", g}}, s, c);
  for (Eigen::Index i = 0; i < g.size(); ++i) {
    const double step = std::abs(p.extras["w"].data()[i]);
    CHECK(step <= c.lr);
    CHECK(step >= 0.99 * c.lr);
    CHECK(std::signbit(p.extras["w"].data()[i]) != std::signbit(g.data()[i]));
  }
}

TEST_CASE("zero gradient leaves parameters unchanged") {
  ModelParams p = one_tensor_params(0.7);
  AdamState s;
  adam_step(p, {{"w", Matrix::Zero(1, 1)}}, s, TrainConfig{});
  CHECK(p.extras["w"](0, 0) == 0.7);
}

TEST_CASE("two Adam steps agree with a scalar recurrence") {
  TrainConfig c;
  c.lr = 0.01;
  ModelParams p = one_tensor_params(1.0);
  AdamState s;
  const double g1 = 0.3;
  const double g2 = -0.8;
  adam_step(p, {{"w", Matrix::Constant(1, 1, g1)}}, s, c);
  adam_step(p, {{"w", Matrix::Constant(1, 1, g2)}}, s, c);

  double w = 1.0, m = 0.0, v = 0.0;
  int t = 0;
  for (double g : {g1, g2}) {
    ++t;
    m = 0.9 * m + 0.1 * g;
    v = 0.99 * v + 0.01 * g * g;
    const double mh = m / (1.0 - std::pow(0.9, t));
    const double vh = v / (1.0 - std::pow(0.99, t));
    w -= 0.01 * mh / (std::sqrt(vh) + 1e-8);
  }
  CHECK(std::abs(p.extras["w"](0, 0) - w) < 1e-12);
  CHECK(s.step == 2);
}

TEST_CASE("a gradient for a frozen tensor is an error") {
  ModelParams p = one_tensor_params(0.0);
  AdamState s;
  CHECK_THROWS_AS(adam_step(p, {{"b", Matrix::Ones(1, 1)}}, s, TrainConfig{}), TrainingError);
  CHECK(p.base["b"](0, 0) == 1.0);
}

TEST_CASE("model selection on hand-scored candidates") {
  SUBCASE("a single candidate wins") {
    const std::vector<SelectionCandidate> c = {{100, 55.0, 30.0}};
    CHECK(select_model(c) == 0);
    CHECK(selection_scores(c) == std::vector<double>{0.0});
  }
  SUBCASE("equal scores go to the earliest step") {
    const std::vector<SelectionCandidate> c = {{100, 60.0, 20.0}, {200, 70.0, 10.0}, {300, 60.0, 20.0}};
    const std::vector<double> s = selection_scores(c);
    CHECK(s[0] == doctest::Approx(0.5));
    CHECK(s[1] == doctest::Approx(0.5));
    CHECK(select_model(c) == 0);
  }
  SUBCASE("normalized equal weighting") {
    // contrastive minmax 0, 1, 0.5; bleu minmax 1, 0, 0.8
    const std::vector<SelectionCandidate> c = {{100, 60.0, 30.0}, {200, 70.0, 20.0}, {300, 65.0, 28.0}};
    const std::vector<double> s = selection_scores(c);
    CHECK(s[0] == doctest::Approx(0.5));
    CHECK(s[1] == doctest::Approx(0.5));
    CHECK(s[2] == doctest::Approx(0.65));
    CHECK(select_model(c) == 2);
  }
  SUBCASE("a metric with zero range contributes nothing") {
    const std::vector<SelectionCandidate> c = {{100, 50.0, 10.0}, {200, 50.0, 40.0}};
    const std::vector<double> s = selection_scores(c);
    CHECK(s[0] == 0.0);
    CHECK(s[1] == 0.5);
    CHECK(select_model(c) == 1);
  }
}

TEST_CASE("pretraining learns the unambiguous lexicon") {
  const TransformerEvaluator eval(pretrained_base(), Variant::base);
  CHECK(token_accuracy(eval, fixture().splits.test_translation) >= 0.95);
  for (const auto& [name, frozen] : pretrained_base().frozen) {
    CAPTURE(name);
    CHECK(frozen == pretrained_base().base.contains(name));
  }
}

TEST_CASE("training never changes a base byte and lowers the VMLM loss") {
  const std::vector<std::uint8_t> before = base_bytes(pretrained_base());
  const TrainResult r = train(short_run(60, 0.1), pretrained_base(), fixture().splits.mmt_train, validation());
  CHECK(base_bytes(r.best.params) == before);
  REQUIRE(r.log.size() == 60);
  CHECK(mean_of(r.log, 50, 60, &TrainLogRow::vmlm) < mean_of(r.log, 0, 10, &TrainLogRow::vmlm));
  for (const TrainLogRow& row : r.log) {
    CHECK(std::isfinite(row.total));
    CHECK(row.total == row.vmlm + 0.1 * row.kl);
  }
  CHECK(r.log.back().val_contrastive.has_value());
  CHECK(r.candidates.size() == 1);
}

TEST_CASE("identical seeds give identical logs and checkpoints") {
  const TrainResult a = train(short_run(12, 0.1), pretrained_base(), fixture().splits.mmt_train, validation());
  const TrainResult b = train(short_run(12, 0.1), pretrained_base(), fixture().splits.mmt_train, validation());
  std::ostringstream la, lb;
  write_train_log(la, a.log);
  write_train_log(lb, b.log);
  CHECK(la.str() == lb.str());
  CHECK(serialize_checkpoint(a.best) == serialize_checkpoint(b.best));
}

TEST_CASE("a large lambda keeps the model closer to the base") {
  const TrainResult small = train(short_run(60, 0.01), pretrained_base(), fixture().splits.mmt_train, validation());
  const TrainResult large = train(short_run(60, 10.0), pretrained_base(), fixture().splits.mmt_train, validation());
  CHECK(mean_of(large.log, 30, 60, &TrainLogRow::kl) < mean_of(small.log, 30, 60, &TrainLogRow::kl));
}

TEST_CASE("ablation modes select their loss terms") {
  for (AblationMode mode : {AblationMode::no_vmlm, AblationMode::no_kl}) {
    TrainConfig c = short_run(4, 0.5);
    c.ablation = mode;
    const TrainResult r = train(c, pretrained_base(), fixture().splits.mmt_train, validation());
    for (const TrainLogRow& row : r.log) {
      if (mode == AblationMode::no_vmlm) {
        CHECK(row.vmlm == 0.0);
        CHECK(row.total == 0.5 * row.kl);
      } else {
        CHECK(row.kl == 0.0);
        CHECK(row.total == row.vmlm);
      }
    }
  }
  CHECK(ablation_mode_from_string(to_string(AblationMode::mmt_no_kl)) == AblationMode::mmt_no_kl);
  CHECK_THROWS(ablation_mode_from_string("none"));
}

TEST_CASE("train log has a fixed header and empty cells between validations") {
  std::vector<TrainLogRow> rows(2);
  rows[0] = {1, 0.5, 0.25, 0.525, std::nullopt, std::nullopt};
  rows[1] = {2, 0.25, 0.5, 0.3, 62.5, 99.0};
  const std::vector<std::string> preamble = {"seed 1"};
  std::ostringstream out;
  write_train_log(out, rows, preamble);
  std::istringstream in(out.str());
  std::string line;
  std::getline(in, line);
  CHECK(line == "# seed 1");
  std::getline(in, line);
  CHECK(line == "step,vmlm,kl,total,val_contrastive,val_bleu");
  std::getline(in, line);
  CHECK(line.starts_with("1,0.5,0.25,"));
  CHECK(line.ends_with(",,"));
  std::getline(in, line);
  CHECK(line.ends_with(",62.5,99"));
}

TEST_CASE("train config validation and strict keys") {
  TrainConfig c;
  c.lr = -1.0;
  CHECK_THROWS(c.validate());
  const TrainConfig d = train_config_from_json(Json{{"lr", 0.5}, {"max_steps", 7}});
  CHECK(d.lr == 0.5);
  CHECK(d.max_steps == 7);
  CHECK(d.beta2 == 0.99);
  CHECK_THROWS_AS(train_config_from_json(Json{{"learning_rate", 0.5}}), ConfigError);
}
