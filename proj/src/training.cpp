#include "zerommt/training.hpp"

#include "zerommt/evaluation.hpp"

#include <algorithm>
#include <cmath>
#include <iomanip>
#include <numeric>
#include <ostream>
#include <random>

namespace zerommt {

AblationMode ablation_mode_from_string(const std::string& s) {
  if (s == "full") return AblationMode::full;
  if (s == "no_vmlm") return AblationMode::no_vmlm;
  if (s == "no_kl") return AblationMode::no_kl;
  if (s == "mmt_no_kl") return AblationMode::mmt_no_kl;
  throw ConfigError("ablation must be one of full|no_vmlm|no_kl|mmt_no_kl, got '" + s + "'");
}

std::string to_string(AblationMode m) {
  switch (m) {
    case AblationMode::full: return "full";
    case AblationMode::no_vmlm: return "no_vmlm";
    case AblationMode::no_kl: return "no_kl";
    case AblationMode::mmt_no_kl: return "mmt_no_kl";
  }
  return "full";
}

void TrainConfig::validate() const {
  if (!(lr > 0.0) || !std::isfinite(lr)) throw ConfigError("train.lr must be > 0");
  if (!(beta1 > 0.0 && beta1 < 1.0)) throw ConfigError("train.beta1 must be in (0, 1)");
  if (!(beta2 > 0.0 && beta2 < 1.0)) throw ConfigError("train.beta2 must be in (0, 1)");
  if (!(eps_adam > 0.0)) throw ConfigError("train.eps_adam must be > 0");
  if (batch_size < 1) throw ConfigError("train.batch_size must be >= 1");
  if (max_steps < 1) throw ConfigError("train.max_steps must be >= 1");
  if (eval_every < 1) throw ConfigError("train.eval_every must be >= 1");
  if (!(mask_rate >= 0.0 && mask_rate <= 1.0)) throw ConfigError("train.mask_rate must be in [0, 1]");
  if (!std::isfinite(loss.lambda) || loss.lambda < 0.0) throw ConfigError("loss.lambda must be finite and >= 0");
}

Json to_json(const TrainConfig& c) {
  return Json{{"lr", c.lr},
              {"beta1", c.beta1},
              {"beta2", c.beta2},
              {"eps_adam", c.eps_adam},
              {"batch_size", c.batch_size},
              {"max_steps", c.max_steps},
              {"seed", c.seed},
              {"mask_rate", c.mask_rate},
              {"eval_every", c.eval_every}};
}

TrainConfig train_config_from_json(const Json& j, TrainConfig defaults) {
  constexpr std::string_view where = "train";
  reject_unknown_keys(j, {"lr", "beta1", "beta2", "eps_adam", "batch_size", "max_steps", "seed", "mask_rate", "eval_every"},
                      where);
  TrainConfig c = defaults;
  read_optional(j, "lr", c.lr, where);
  read_optional(j, "beta1", c.beta1, where);
  read_optional(j, "beta2", c.beta2, where);
  read_optional(j, "eps_adam", c.eps_adam, where);
  read_optional(j, "batch_size", c.batch_size, where);
  read_optional(j, "max_steps", c.max_steps, where);
  read_optional(j, "seed", c.seed, where);
  read_optional(j, "mask_rate", c.mask_rate, where);
  read_optional(j, "eval_every", c.eval_every, where);
  c.validate();
  return c;
}

void adam_step(ModelParams& params, const std::map<std::string, Matrix>& grads, AdamState& state,
               const TrainConfig& config) {
  for (const auto& [name, _] : grads) {
    if (params.is_frozen(name)) throw TrainingError("gradient for frozen tensor '" + name + "'");
  }
  ++state.step;
  const double c1 = 1.0 - std::pow(config.beta1, state.step);
  const double c2 = 1.0 - std::pow(config.beta2, state.step);
  for (const auto& [name, g] : grads) {
    Matrix& p = params.at(name);
    if (g.rows() != p.rows() || g.cols() != p.cols()) throw ShapeError("adam_step: gradient shape mismatch for " + name);
    auto [mi, m_new] = state.m.try_emplace(name, Matrix::Zero(p.rows(), p.cols()));
    auto [vi, v_new] = state.v.try_emplace(name, Matrix::Zero(p.rows(), p.cols()));
    Matrix& m = mi->second;
    Matrix& v = vi->second;
    m = config.beta1 * m + (1.0 - config.beta1) * g;
    v = config.beta2 * v + (1.0 - config.beta2) * g.cwiseProduct(g);
    p.array() -= config.lr * (m.array() / c1) / ((v.array() / c2).sqrt() + config.eps_adam);
  }
}

namespace {

/// Epoch-wise shuffled batches; a tail shorter than the batch size is skipped.
class BatchStream {
 public:
  BatchStream(std::size_t corpus_size, int batch_size, std::uint64_t seed)
      : order_(corpus_size), batch_(static_cast<std::size_t>(batch_size)), rng_(seed) {
    std::iota(order_.begin(), order_.end(), std::size_t{0});
    if (batch_ > corpus_size) batch_ = corpus_size;
    reshuffle();
  }

  std::vector<std::size_t> next() {
    if (cursor_ + batch_ > order_.size()) reshuffle();
    std::vector<std::size_t> out(order_.begin() + static_cast<long>(cursor_),
                                 order_.begin() + static_cast<long>(cursor_ + batch_));
    cursor_ += batch_;
    return out;
  }

 private:
  void reshuffle() {
    std::shuffle(order_.begin(), order_.end(), rng_);
    cursor_ = 0;
  }

  std::vector<std::size_t> order_;
  std::size_t batch_;
  std::size_t cursor_ = 0;
  std::mt19937_64 rng_;
};

std::vector<Example> gather(std::span<const Example> corpus, const std::vector<std::size_t>& idx) {
  std::vector<Example> out;
  out.reserve(idx.size());
  for (std::size_t i : idx) out.push_back(corpus[i]);
  return out;
}

void require_finite(double loss, int step, const char* stage) {
  if (!std::isfinite(loss)) {
    throw TrainingError(std::string(stage) + ": loss is not finite at step " + std::to_string(step));
  }
}

}  // namespace

PretrainResult pretrain_base(const ModelConfig& model, std::span<const Example> corpus, const TrainConfig& config) {
  config.validate();
  if (corpus.empty()) throw TrainingError("pretrain: corpus is empty");
  PretrainResult out{build_model(model, config.seed), {}};
  ModelParams& params = out.params;
  params.set_group_frozen(false, true);
  AdamState adam;
  BatchStream stream(corpus.size(), config.batch_size, config.seed);

  for (int step = 1; step <= config.max_steps; ++step) {
    const std::vector<Example> examples = gather(corpus, stream.next());
    std::vector<SourceInput> sources;
    std::vector<std::vector<int>> prefixes;
    std::vector<int> targets;
    for (const Example& e : examples) {
      sources.push_back(SourceInput{e.src, std::nullopt});
      prefixes.emplace_back(e.tgt.begin(), e.tgt.end() - 1);
      targets.insert(targets.end(), e.tgt.begin() + 1, e.tgt.end());
    }
    Graph g;
    ParamBinder bind(g, params, Trainable::base);
    const EncodedBatch enc = encode(bind, Variant::base, sources);
    const Var loss = mean_token_nll(decode_logits(bind, Variant::base, enc, prefixes), targets);
    require_finite(loss.scalar(), step, "pretrain");
    out.losses.push_back(loss.scalar());
    g.backward(loss);
    adam_step(params, bind.gradients(), adam, config);
  }
  params.set_group_frozen(true, false);
  return out;
}

std::vector<double> selection_scores(std::span<const SelectionCandidate> candidates) {
  if (candidates.empty()) return {};
  auto normalized = [&](auto metric) {
    double lo = metric(candidates.front());
    double hi = lo;
    for (const SelectionCandidate& c : candidates) {
      lo = std::min(lo, metric(c));
      hi = std::max(hi, metric(c));
    }
    std::vector<double> out;
    for (const SelectionCandidate& c : candidates) out.push_back(hi > lo ? (metric(c) - lo) / (hi - lo) : 0.0);
    return out;
  };
  const auto acc = normalized([](const SelectionCandidate& c) { return c.contrastive; });
  const auto bleu = normalized([](const SelectionCandidate& c) { return c.bleu; });
  std::vector<double> scores(candidates.size());
  for (std::size_t i = 0; i < scores.size(); ++i) scores[i] = 0.5 * acc[i] + 0.5 * bleu[i];
  return scores;
}

std::size_t select_model(std::span<const SelectionCandidate> candidates) {
  if (candidates.empty()) throw std::invalid_argument("select_model: no candidates");
  const std::vector<double> scores = selection_scores(candidates);
  std::size_t best = 0;
  for (std::size_t i = 1; i < scores.size(); ++i) {
    const bool better = scores[i] > scores[best];
    const bool tie_earlier = scores[i] == scores[best] && candidates[i].step < candidates[best].step;
    if (better || tie_earlier) best = i;
  }
  return best;
}

TrainResult train(const TrainConfig& config, const ModelParams& frozen_base, std::span<const Example> corpus,
                  const ValidationSets& validation) {
  config.validate();
  if (corpus.empty()) throw TrainingError("train: corpus is empty");
  if (validation.contrastive.empty() || validation.translation.empty()) {
    throw TrainingError("train: validation sets must be nonempty");
  }
  ModelParams params = frozen_base;
  params.extras = build_model(frozen_base.config, config.seed).extras;
  params.set_group_frozen(true, false);

  AdamState adam;
  BatchStream stream(corpus.size(), config.batch_size, config.seed);
  std::mt19937_64 mask_rng(config.seed ^ 0x9e3779b97f4a7c15ULL);
  const LossWeights& w = config.loss;

  TrainResult result;
  std::vector<std::map<std::string, Matrix>> snapshots;

  for (int step = 1; step <= config.max_steps; ++step) {
    const std::vector<Example> examples = gather(corpus, stream.next());
    const Batch batch = make_batch(examples, config.mask_rate, mask_rng);

    Graph g;
    ParamBinder bind(g, params, Trainable::extras);
    TrainLogRow row;
    row.step = step;
    Var total;
    switch (config.ablation) {
      case AblationMode::full: {
        const CombinedLoss l = combined_loss(bind, frozen_base, batch, w);
        total = l.total;
        row.vmlm = l.vmlm.scalar();
        row.kl = l.kl.scalar();
        break;
      }
      case AblationMode::no_vmlm: {
        const Var kl = kl_penalty(bind, frozen_base, batch, w.kl_mode);
        total = scale(kl, w.lambda);
        row.kl = kl.scalar();
        break;
      }
      case AblationMode::no_kl: {
        total = vmlm_loss(bind, batch);
        row.vmlm = total.scalar();
        break;
      }
      case AblationMode::mmt_no_kl: {
        const Var vmlm = vmlm_loss(bind, batch);
        const Var nll = translation_nll(bind, batch);
        total = add(vmlm, scale(nll, w.lambda));
        row.vmlm = vmlm.scalar();
        row.kl = nll.scalar();
        break;
      }
    }
    row.total = total.scalar();
    require_finite(row.total, step, "train");
    g.backward(total);
    adam_step(params, bind.gradients(), adam, config);

    if (step % config.eval_every == 0 || step == config.max_steps) {
      const TransformerEvaluator model(params, Variant::multimodal);
      SelectionCandidate c;
      c.step = step;
      c.contrastive = commute_accuracy(model, validation.contrastive).accuracy;
      c.bleu = corpus_bleu(model, validation.translation, validation.beam);
      row.val_contrastive = c.contrastive;
      row.val_bleu = c.bleu;
      result.candidates.push_back(c);
      snapshots.push_back(params.extras);
    }
    result.log.push_back(row);
  }

  const std::size_t best = select_model(result.candidates);
  result.selection_scores = selection_scores(result.candidates);
  params.extras = std::move(snapshots[best]);
  result.best.params = std::move(params);
  result.best.step = result.candidates[best].step;
  result.best.selection_score = result.selection_scores[best];
  result.best.stage = "mmt";
  return result;
}

void write_train_log(std::ostream& out, std::span<const TrainLogRow> rows, std::span<const std::string> preamble) {
  for (const std::string& line : preamble) out << "# " << line << '\n';
  out << "step,vmlm,kl,total,val_contrastive,val_bleu\n";
  out << std::setprecision(17);
  for (const TrainLogRow& r : rows) {
    out << r.step << ',' << r.vmlm << ',' << r.kl << ',' << r.total << ',';
    if (r.val_contrastive) out << *r.val_contrastive;
    out << ',';
    if (r.val_bleu) out << *r.val_bleu;
    out << '\n';
  }
}

}  // namespace zerommt
