#include "zerommt/pipeline.hpp"

#include <algorithm>
#include <fstream>

namespace zerommt {

namespace {

template <typename F>
auto in_stage(const char* stage, F&& f) -> decltype(f()) {
  try {
    return f();
  } catch (const StageError&) {
    throw;
  } catch (const std::exception& e) {
    throw StageError(stage, e.what());
  }
}

}  // namespace

Corpus generate_corpus(const RunConfig& config) {
  return in_stage("gen", [&] {
    Corpus c{generate_world(config.world, config.model.vocab_size), {}};
    c.splits = generate_splits(c.world, config.sizes, config.seed);
    return c;
  });
}

void write_corpus(const std::filesystem::path& dir, const Corpus& corpus, const RunConfig& config) {
  in_stage("gen", [&] {
    write_splits(dir, corpus.splits);
    std::ofstream out(dir / split_file::kWorld);
    out << Json{{"version", version_string()}, {"world", to_json(corpus.world.spec)}, {"config", to_json(config)}}.dump(2)
        << '\n';
    if (!out) throw std::runtime_error("cannot write " + (dir / split_file::kWorld).string());
  });
}

Corpus read_corpus(const std::filesystem::path& dir, const RunConfig& config) {
  return in_stage("corpus", [&] {
    const std::filesystem::path world_path = dir / split_file::kWorld;
    std::ifstream in(world_path);
    if (!in) throw std::runtime_error("missing " + world_path.string());
    const Json j = Json::parse(in);
    Corpus c{generate_world(world_spec_from_json(j.at("world")), config.model.vocab_size), {}};
    c.splits.pretrain_parallel = read_examples(dir / split_file::kPretrain);
    c.splits.mmt_train = read_examples(dir / split_file::kMmtTrain);
    c.splits.val_contrastive = read_contrastive(dir / split_file::kValContrastive);
    c.splits.val_translation = read_examples(dir / split_file::kValTranslation);
    c.splits.test_contrastive = read_contrastive(dir / split_file::kTestContrastive);
    c.splits.test_translation = read_examples(dir / split_file::kTestTranslation);
    return c;
  });
}

Json BaseReport::to_json() const {
  return Json{{"unambiguous_token_accuracy", unambiguous_token_accuracy},
              {"mean_max_sense_probability", mean_max_sense_probability},
              {"min_sense_probability", min_sense_probability},
              {"max_sense_probability", max_sense_probability},
              {"final_loss", final_loss}};
}

BaseReport measure_base(const ModelParams& base, const Corpus& corpus) {
  const TransformerEvaluator model(base, Variant::base);
  BaseReport r;
  r.unambiguous_token_accuracy = token_accuracy(model, corpus.splits.test_translation);
  const std::vector<SenseSplit> split = sense_split(model, corpus.splits.test_contrastive);
  if (!split.empty()) {
    r.min_sense_probability = 1.0;
    double total = 0.0;
    for (const SenseSplit& s : split) {
      total += std::max(s.p_a, s.p_b);
      r.min_sense_probability = std::min({r.min_sense_probability, s.p_a, s.p_b});
      r.max_sense_probability = std::max({r.max_sense_probability, s.p_a, s.p_b});
    }
    r.mean_max_sense_probability = total / static_cast<double>(split.size());
  }
  return r;
}

BaseOutcome run_pretrain(const RunConfig& config, const Corpus& corpus) {
  return in_stage("pretrain", [&] {
    PretrainResult p = pretrain_base(config.model, corpus.splits.pretrain_parallel, config.pretrain);
    BaseOutcome out{std::move(p.params), std::move(p.losses), {}};
    out.report = measure_base(out.params, corpus);
    out.report.final_loss = out.losses.empty() ? 0.0 : out.losses.back();
    return out;
  });
}

std::vector<Example> training_examples(const RunConfig& config, const Corpus& corpus, const ModelParams& base,
                                       PseudoTranslationReport* report) {
  if (config.targets == TargetSource::gold) return corpus.splits.mmt_train;
  return in_stage("translate", [&] {
    const TransformerEvaluator model(base, Variant::base);
    PseudoTranslation p = pseudo_translate(corpus.world, model, corpus.splits.mmt_train, config.decode.beam());
    if (report) *report = p.report;
    return std::move(p.examples);
  });
}

TrainResult run_train(const RunConfig& config, const Corpus& corpus, const ModelParams& base,
                      std::span<const Example> examples) {
  return in_stage("train", [&] {
    ValidationSets val{corpus.splits.val_contrastive, corpus.splits.val_translation, config.decode.beam()};
    TrainResult r = train(config.train, base, examples, val);
    r.best.run_config = to_json(config);
    return r;
  });
}

EvalReport run_eval(const RunConfig& config, const Corpus& corpus, const Checkpoint& checkpoint, double gamma) {
  return in_stage("eval", [&] {
    const ModelParams& params = checkpoint.params;
    const BeamOptions beam = config.decode.beam();
    const bool text_only = checkpoint.stage == "base";
    const TransformerEvaluator base(params, Variant::base);
    const TransformerEvaluator mm(params, Variant::multimodal);
    const GuidedEvaluator guided(base, mm, text_only ? 0.0 : gamma, config.decode.cfg_space);
    const Evaluator& model = text_only ? static_cast<const Evaluator&>(base) : static_cast<const Evaluator&>(guided);

    EvalReport r;
    r.gamma = text_only ? 0.0 : gamma;
    r.contrastive = commute_accuracy(model, corpus.splits.test_contrastive);
    r.bleu = corpus_bleu(model, corpus.splits.test_translation, beam);
    r.sense_accuracy = 100.0 * sense_accuracy(model, corpus.splits.test_contrastive, beam);
    r.extra["stage"] = checkpoint.stage;
    r.extra["cfg_space"] = to_string(config.decode.cfg_space);
    r.extra["beam_width"] = beam.width;
    r.extra["tie_free"] = r.contrastive.ties == 0;
    return r;
  });
}

std::vector<std::string> provenance_lines(const RunConfig& config) {
  return {version_string(), "config " + to_json(config).dump()};
}

}  // namespace zerommt
