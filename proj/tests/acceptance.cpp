// End-to-end acceptance run. Prints one PASS/FAIL line per criterion and
// exits non-zero when any criterion fails.
#include "oracles.hpp"
#include "zerommt/pipeline.hpp"

#include <array>
#include <chrono>
#include <cmath>
#include <cstdio>
#include <functional>
#include <iostream>
#include <random>
#include <sstream>
#include <string>
#include <string_view>

using namespace zerommt;

namespace {

using Clock = std::chrono::steady_clock;

double seconds_since(Clock::time_point t0) { return std::chrono::duration<double>(Clock::now() - t0).count(); }

std::string fmt(const char* f, auto... args) {
  char buf[512];
  std::snprintf(buf, sizeof buf, f, args...);
  return buf;
}

// Indexed by criterion; printed in order at the end.
std::array<std::string, 9> verdicts;
int failures = 0;

void report(int id, bool pass, const std::string& detail) {
  if (!pass) ++failures;
  verdicts[static_cast<std::size_t>(id)] = "criterion " + std::to_string(id) + ": " + (pass ? "PASS" : "FAIL") + "  " + detail;
  std::cout << "  [done] " << verdicts[static_cast<std::size_t>(id)] << std::endl;
}

std::size_t hash_bytes(const std::vector<std::uint8_t>& bytes) {
  return std::hash<std::string_view>{}(std::string_view(reinterpret_cast<const char*>(bytes.data()), bytes.size()));
}

// ---- 1: gradients ---------------------------------------------------------------

struct LossAt {
  double value;
  std::uint64_t signature;
};

LossAt combined_value(const ModelParams& params, const Batch& batch, const LossWeights& w) {
  Graph g;
  ParamBinder bind(g, params, Trainable::none);
  const double v = combined_loss(bind, params, batch, w).total.scalar();
  return {v, g.relu_signature()};
}

void criterion_gradients(const RunConfig& config, const Corpus& corpus) {
  const auto t0 = Clock::now();
  constexpr int kPoints = 5;
  constexpr int kCoordinates = 6;
  constexpr double kEps = 1e-5;
  std::mt19937_64 rng(config.seed);
  std::normal_distribution<double> jitter(0.0, 0.2);
  double worst = 0.0;
  int checked = 0;
  int skipped = 0;
  std::size_t tensors = 0;
  std::string worst_name;
  for (int point = 0; point < kPoints; ++point) {
    ModelParams params = build_model(config.model, config.seed + static_cast<std::uint64_t>(point));
    for (auto& [_, m] : params.extras) {
      for (Eigen::Index i = 0; i < m.size(); ++i) m.data()[i] += jitter(rng);
    }
    std::vector<Example> examples(corpus.splits.mmt_train.begin() + 4 * point,
                                  corpus.splits.mmt_train.begin() + 4 * point + 4);
    const Batch batch = make_batch(examples, config.train.mask_rate, rng);
    const LossWeights w = config.train.loss;

    Graph g;
    ParamBinder bind(g, params, Trainable::extras);
    g.backward(combined_loss(bind, params, batch, w).total);
    const std::uint64_t signature = g.relu_signature();
    const auto grads = bind.gradients();
    tensors = params.extras.size();
    for (const auto& [name, _] : params.extras) {
      const auto it = grads.find(name);
      const Matrix analytic = it == grads.end() ? Matrix::Zero(params.extras[name].rows(), params.extras[name].cols())
                                                : it->second;
      std::uniform_int_distribution<Eigen::Index> at(0, analytic.size() - 1);
      for (int c = 0; c < kCoordinates; ++c) {
        const Eigen::Index i = at(rng);
        ModelParams probe = params;
        double& x = probe.extras[name].data()[i];
        const double orig = x;
        x = orig + kEps;
        const LossAt up = combined_value(probe, batch, w);
        x = orig - kEps;
        const LossAt down = combined_value(probe, batch, w);
        if (up.signature != signature || down.signature != signature) {
          ++skipped;
          continue;
        }
        const double err = relative_error(analytic.data()[i], (up.value - down.value) / (2.0 * kEps));
        if (err > worst) {
          worst = err;
          worst_name = name;
        }
        ++checked;
      }
    }
  }
  const double elapsed = seconds_since(t0);
  report(1, worst < 1e-4 && elapsed < 60.0 && checked > 0,
         fmt("%zu trainable tensors x %d points: max rel err %.3g (%s), %d coordinates checked, %d on a ReLU kink "
             "skipped, %.1f s",
             tensors, kPoints, worst, worst_name.c_str(), checked, skipped, elapsed));
}

// ---- 2: identities --------------------------------------------------------------

void criterion_identities(const RunConfig& config, const Corpus& corpus, const ModelParams& base,
                          const ModelParams& trained) {
  std::mt19937_64 rng(config.seed);
  std::normal_distribution<double> d(0.0, 2.0);
  double kl_self = 0.0;
  double endpoint = 0.0;
  double sum_err = 0.0;
  auto check_pair = [&](const Vector& lt, const Vector& lm) {
    const Vector pt = lt.array().exp().matrix();
    const Vector pm = lm.array().exp().matrix();
    endpoint = std::max(endpoint, (cfg_distribution(pt, pm, 0.0) - pt).cwiseAbs().maxCoeff());
    endpoint = std::max(endpoint, (cfg_distribution(pt, pm, 1.0) - pm).cwiseAbs().maxCoeff());
    for (double gamma : {0.0, 0.5, 1.0, 2.0, 3.0}) {
      sum_err = std::max(sum_err, std::abs(cfg_distribution(pt, pm, gamma).sum() - 1.0));
    }
  };
  for (int trial = 0; trial < 100; ++trial) {
    Matrix logits(4, config.model.vocab_size);
    for (Eigen::Index i = 0; i < logits.size(); ++i) logits.data()[i] = d(rng);
    Matrix p(4, logits.cols());
    for (Eigen::Index r = 0; r < 4; ++r) p.row(r) = softmax(logits.row(r).transpose()).transpose();
    Graph g;
    const std::vector<int> targets = {4, 5, 6, 7};
    kl_self = std::max(kl_self, std::abs(mean_kl(p, g.constant(logits), KlMode::full, targets).scalar()));
    Vector other(logits.cols());
    for (Eigen::Index i = 0; i < other.size(); ++i) other(i) = d(rng);
    check_pair(log_softmax(logits.row(0).transpose()), log_softmax(other));
  }
  // The same identities on the trained model's next-token distributions.
  const TransformerEvaluator text(trained, Variant::base);
  const TransformerEvaluator mm(trained, Variant::multimodal);
  for (std::size_t k = 0; k < 16; ++k) {
    const ContrastiveInstance& c = corpus.splits.test_contrastive[k];
    const Matrix lt = text.teacher_forced_log_probs(c.src, std::nullopt, c.tgt_a);
    const Matrix lm = mm.teacher_forced_log_probs(c.src, c.img_a, c.tgt_a);
    for (Eigen::Index r = 0; r < lt.rows(); ++r) check_pair(lt.row(r).transpose(), lm.row(r).transpose());
  }
  // KL of the frozen base against itself through the training code path.
  std::mt19937_64 mask_rng(config.seed);
  std::vector<Example> text_only(corpus.splits.pretrain_parallel.begin(), corpus.splits.pretrain_parallel.begin() + 8);
  const Batch batch = make_batch(text_only, 0.0, mask_rng);
  const Matrix p_base = frozen_base_probs(base, batch);
  Graph g;
  ParamBinder bind(g, base, Trainable::none);
  std::vector<SourceInput> src;
  std::vector<std::vector<int>> prefixes;
  std::vector<int> targets;
  for (const Example& e : text_only) {
    src.push_back({e.src, std::nullopt});
    prefixes.emplace_back(e.tgt.begin(), e.tgt.end() - 1);
    targets.insert(targets.end(), e.tgt.begin() + 1, e.tgt.end());
  }
  const Var logits = decode_logits(bind, Variant::base, encode(bind, Variant::base, src), prefixes);
  kl_self = std::max(kl_self, std::abs(mean_kl(p_base, logits, KlMode::full, targets).scalar()));

  report(2, kl_self <= 1e-10 && endpoint <= 1e-9 && sum_err <= 1e-9,
         fmt("max |KL(p||p)| %.3g, max CFG endpoint deviation %.3g, max |sum - 1| %.3g", kl_self, endpoint, sum_err));
}

// ---- 7: oracles -----------------------------------------------------------------

void criterion_oracles() {
  std::mt19937_64 rng(2024);
  int beam_ok = 0;
  for (int trial = 0; trial < 100; ++trial) {
    const int vocab = 3 + static_cast<int>(rng() % 3);
    const int max_len = 1 + static_cast<int>(rng() % 4);
    const std::uint64_t seed = rng();
    const oracle::TableModel model(vocab, [seed, vocab](const std::vector<int>& p) {
      return oracle::random_prefix_log_probs(seed, p, vocab, 2.0);
    });
    BeamOptions o;
    o.width = static_cast<int>(std::pow(vocab, max_len));
    o.max_len = max_len;
    o.banned = {token::kPad, token::kBos};
    const DecodeResult r = beam_search(model, o);
    const oracle::Best best = oracle::enumerate_best(model, o.bos, o.eos, o.banned, max_len);
    if (r.finished && r.tokens == best.tokens && std::abs(r.log_prob - best.log_prob) < 1e-12) ++beam_ok;
  }

  using Corpus = std::vector<std::vector<int>>;
  struct BleuCase {
    Corpus hyps, refs;
  };
  std::vector<BleuCase> corpora = {
      {{{1, 2, 3, 4}}, {{1, 2, 3, 4}}},
      {{{1, 2, 3}}, {{1, 2, 3, 4}}},
      {{{5, 6, 7, 8}}, {{1, 2, 3, 4}}},
      {{{1}}, {{1, 2}}},
      {{{1, 1, 1, 1}}, {{1, 2, 1, 3}}},
      {{{1, 2, 3, 4, 5}, {6, 7}}, {{1, 2, 3, 4}, {6, 7, 8}}},
      {{{4, 3, 2, 1}}, {{1, 2, 3, 4}}},
  };
  std::uniform_int_distribution<int> tok(4, 8);
  for (int c = 0; c < 3; ++c) {
    BleuCase bc;
    for (int s = 0; s < 6; ++s) {
      std::vector<int> ref(static_cast<std::size_t>(3 + rng() % 6));
      for (int& t : ref) t = tok(rng);
      std::vector<int> hyp = ref;
      if (rng() % 2) hyp.erase(hyp.begin());
      if (rng() % 2) hyp.back() = tok(rng);
      bc.hyps.push_back(hyp);
      bc.refs.push_back(ref);
    }
    corpora.push_back(bc);
  }
  // Closed forms for the first five corpora.
  const std::vector<double> hand = {100.0, 100.0 * std::exp(1.0 - 4.0 / 3.0), 0.0, 100.0 * std::exp(-1.0), 0.0};
  int bleu_ok = 0;
  for (std::size_t i = 0; i < corpora.size(); ++i) {
    const double got = bleu(corpora[i].hyps, corpora[i].refs);
    const double want = i < hand.size() ? hand[i] : oracle::bleu(corpora[i].hyps, corpora[i].refs, 4);
    if (std::abs(got - want) < 1e-9 && std::abs(got - oracle::bleu(corpora[i].hyps, corpora[i].refs, 4)) < 1e-9) {
      ++bleu_ok;
    }
  }

  int ppl_ok = 0;
  for (int m = 0; m < 10; ++m) {
    const std::uint64_t seed = rng();
    const oracle::ContextFreeEvaluator model(7, [seed](const std::vector<int>& p) {
      return oracle::random_prefix_log_probs(seed, p, 7, 1.0 + 0.2 * static_cast<double>(seed % 5));
    });
    std::vector<int> target = {token::kBos};
    for (int j = 0; j < 1 + m % 5; ++j) target.push_back(4 + (m + j) % 3);
    target.push_back(token::kEos);
    const auto bound = model.bind(std::vector<int>{}, std::nullopt);
    const double got = sequence_perplexity(model, std::vector<int>{4}, std::nullopt, target);
    if (std::abs(got - oracle::perplexity(*bound, target)) < 1e-9) ++ppl_ok;
  }
  report(7, beam_ok == 100 && bleu_ok == static_cast<int>(corpora.size()) && ppl_ok == 10,
         fmt("beam = enumeration on %d/100 models, BLEU = oracle on %d/%zu corpora, perplexity = oracle on %d/10 models",
             beam_ok, bleu_ok, corpora.size(), ppl_ok));
}

// ---- 8: determinism -------------------------------------------------------------

struct SmallRun {
  std::string corpus_json;
  std::string log_csv;
  std::string report_json;
};

SmallRun small_run(const RunConfig& config) {
  const Corpus corpus = generate_corpus(config);
  const BaseOutcome base = run_pretrain(config, corpus);
  const std::vector<Example> examples = training_examples(config, corpus, base.params);
  const TrainResult trained = run_train(config, corpus, base.params, examples);
  SmallRun out;
  std::ostringstream corpus_text;
  for (const Example& e : examples) corpus_text << to_json(e).dump() << '\n';
  out.corpus_json = corpus_text.str();
  std::ostringstream log;
  write_train_log(log, trained.log, provenance_lines(config));
  out.log_csv = log.str();
  out.report_json = run_eval(config, corpus, trained.best, 2.0).to_json().dump();
  return out;
}

void criterion_determinism() {
  const auto t0 = Clock::now();
  RunConfig config;
  config.apply_seed(3);
  config.sizes.pretrain_parallel = 2000;
  config.sizes.mmt_train = 400;
  config.sizes.val_contrastive = 8;
  config.sizes.val_translation = 8;
  config.sizes.test_contrastive = 16;
  config.sizes.test_translation = 16;
  config.pretrain.max_steps = 60;
  config.train.max_steps = 40;
  config.train.eval_every = 20;
  const SmallRun a = small_run(config);
  const SmallRun b = small_run(config);
  report(8, a.corpus_json == b.corpus_json && a.log_csv == b.log_csv && a.report_json == b.report_json,
         fmt("two runs of one (config, seed): pseudo-targets %s, train log CSV (%zu bytes) %s, eval report %s, %.1f s",
             a.corpus_json == b.corpus_json ? "identical" : "DIFFER", a.log_csv.size(),
             a.log_csv == b.log_csv ? "identical" : "DIFFERS", a.report_json == b.report_json ? "identical" : "DIFFERS",
             seconds_since(t0)));
}

}  // namespace

int main() {
  std::cout << version_string() << " acceptance" << std::endl;
  const RunConfig config;
  config.validate();
  const auto t_start = Clock::now();
  const Corpus corpus = generate_corpus(config);

  criterion_gradients(config, corpus);
  criterion_oracles();

  // 4: base calibration
  const auto t_base = Clock::now();
  const BaseOutcome base = run_pretrain(config, corpus);
  Checkpoint base_ckpt{base.params, config.pretrain.max_steps, 0.0, "base", to_json(config)};
  const EvalReport base_eval = run_eval(config, corpus, base_ckpt, 1.0);
  const double base_seconds = seconds_since(t_base);
  report(4,
         base_eval.contrastive.accuracy == 50.0 && base_eval.contrastive.ties == 0 &&
             base.report.unambiguous_token_accuracy >= 0.95 && base_seconds < 300.0,
         fmt("base contrastive %.1f%% (%d ties), unambiguous token accuracy %.4f, BLEU %.2f, %.1f s",
             base_eval.contrastive.accuracy, base_eval.contrastive.ties, base.report.unambiguous_token_accuracy,
             base_eval.bleu, base_seconds));

  // 5: ablations
  PseudoTranslationReport pseudo;
  const std::vector<Example> examples = training_examples(config, corpus, base.params, &pseudo);
  const std::size_t base_hash = hash_bytes(base_bytes(base.params));
  struct Outcome {
    TrainResult result;
    EvalReport eval;
  };
  auto run_mode = [&](AblationMode mode) {
    RunConfig c = config;
    c.train.ablation = mode;
    Outcome o{run_train(c, corpus, base.params, examples), {}};
    o.eval = run_eval(c, corpus, o.result.best, 1.0);
    std::cout << "  " << to_string(mode) << ": contrastive " << o.eval.contrastive.accuracy << "%, BLEU " << o.eval.bleu
              << ", selected step " << o.result.best.step << std::endl;
    return o;
  };
  const Outcome full = run_mode(AblationMode::full);
  const Outcome no_vmlm = run_mode(AblationMode::no_vmlm);
  const Outcome no_kl = run_mode(AblationMode::no_kl);
  const Outcome mmt_no_kl = run_mode(AblationMode::mmt_no_kl);
  const double total_seconds = seconds_since(t_start);

  const double c_full = full.eval.contrastive.accuracy;
  const bool a = c_full >= 65.0 && std::abs(full.eval.bleu - base_eval.bleu) <= 2.0;
  const bool b = no_vmlm.eval.contrastive.accuracy >= 45.0 && no_vmlm.eval.contrastive.accuracy <= 55.0;
  const bool c_bleu = no_kl.eval.bleu <= full.eval.bleu - 10.0;
  const bool c_acc = no_kl.eval.contrastive.accuracy >= c_full - 2.0;
  const bool d = mmt_no_kl.eval.contrastive.accuracy <= c_full;
  report(5, a && b && c_bleu && c_acc && d && total_seconds < 1800.0,
         fmt("(a) full %.2f%% BLEU %.2f vs base %.2f [%s]; (b) no_vmlm %.2f%% [%s]; (c) no_kl BLEU %.2f vs full %.2f "
             "[%s], contrastive %.2f%% [%s]; (d) mmt_no_kl %.2f%% [%s]; %.1f s since corpus generation",
             c_full, full.eval.bleu, base_eval.bleu, a ? "ok" : "fail", no_vmlm.eval.contrastive.accuracy,
             b ? "ok" : "fail", no_kl.eval.bleu, full.eval.bleu, c_bleu ? "ok" : "fail",
             no_kl.eval.contrastive.accuracy, c_acc ? "ok" : "fail", mmt_no_kl.eval.contrastive.accuracy,
             d ? "ok" : "fail", total_seconds));

  // 3: freezing, over every training run above
  bool frozen = true;
  for (const Outcome* o : {&full, &no_vmlm, &no_kl, &mmt_no_kl}) {
    frozen = frozen && hash_bytes(base_bytes(o->result.best.params)) == base_hash &&
             base_bytes(o->result.best.params) == base_bytes(base.params);
  }
  report(3, frozen, fmt("base parameter hash %016zx unchanged after 4 training runs: %s", base_hash, frozen ? "yes" : "no"));

  criterion_identities(config, corpus, base.params, full.result.best.params);

  // 6: guidance sweep on the full-objective checkpoint
  const std::vector<double> grid = {1.0, 1.5, 2.0, 3.0};
  std::vector<double> acc, bl;
  for (double g : grid) {
    const EvalReport r = g == 1.0 ? full.eval : run_eval(config, corpus, full.result.best, g);
    acc.push_back(r.contrastive.accuracy);
    bl.push_back(r.bleu);
  }
  bool monotone = true;
  for (std::size_t i = 1; i < grid.size(); ++i) {
    monotone = monotone && acc[i] >= acc[i - 1] - 1.0 && bl[i] <= bl[i - 1] + 1.0;
  }
  const bool boost = acc[2] - acc[0] >= 2.0;
  const bool bleu_drop = bl[3] <= bl[0];
  std::ostringstream grid_text;
  for (std::size_t i = 0; i < grid.size(); ++i) {
    grid_text << (i ? ", " : "") << "g=" << grid[i] << ": " << fmt("%.2f%%/%.2f", acc[i], bl[i]);
  }
  report(6, boost && bleu_drop && monotone,
         fmt("contrastive/BLEU %s; gain at g=2 %.2f points, BLEU(3) <= BLEU(1) %s, monotone within 1 point %s",
             grid_text.str().c_str(), acc[2] - acc[0], bleu_drop ? "yes" : "no", monotone ? "yes" : "no"));

  criterion_determinism();

  std::cout << '\n';
  for (std::size_t id = 1; id < verdicts.size(); ++id) std::cout << verdicts[id] << '\n';
  std::cout << (failures == 0 ? "all criteria passed" : fmt("%d criteria failed", failures)) << std::endl;
  return failures == 0 ? 0 : 1;
}
