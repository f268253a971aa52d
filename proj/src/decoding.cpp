#include "zerommt/decoding.hpp"

#include <algorithm>
#include <cmath>
#include <stdexcept>

namespace zerommt {

CfgSpace cfg_space_from_string(const std::string& s) {
  if (s == "log") return CfgSpace::log;
  if (s == "prob_clip") return CfgSpace::prob_clip;
  throw ConfigError("cfg_space must be 'log' or 'prob_clip', got '" + s + "'");
}

std::string to_string(CfgSpace s) { return s == CfgSpace::log ? "log" : "prob_clip"; }

Matrix Evaluator::teacher_forced_log_probs(std::span<const int> source, const std::optional<Vector>& image,
                                           std::span<const int> target) const {
  if (target.size() < 2) throw std::invalid_argument("teacher forcing needs at least BOS and one token");
  std::vector<std::vector<int>> prefixes;
  for (std::size_t j = 1; j < target.size(); ++j) prefixes.emplace_back(target.begin(), target.begin() + static_cast<long>(j));
  return bind(source, image)->next_log_probs(prefixes);
}

// ---- transformer ------------------------------------------------------------

namespace {

class BoundTransformer final : public BoundModel {
 public:
  BoundTransformer(const ModelParams& params, Variant variant, EncoderStates enc)
      : params_(&params), variant_(variant), enc_(std::move(enc)) {}

  [[nodiscard]] int vocab_size() const override { return params_->config.vocab_size; }

  [[nodiscard]] Matrix next_log_probs(std::span<const std::vector<int>> prefixes) const override {
    Graph g;
    ParamBinder bind(g, *params_, Trainable::none);
    EncodedBatch batch;
    batch.states = g.constant(enc_.states);
    batch.offsets = {0, enc_.states.rows()};
    batch.text_mask = BoolMask::Constant(enc_.states.rows(), false);
    for (int p : enc_.text_positions) batch.text_mask(p) = true;
    const std::vector<int> to_source(prefixes.size(), 0);
    const Matrix& logits = decode_logits(bind, variant_, batch, prefixes, to_source).value();
    Matrix out(static_cast<Eigen::Index>(prefixes.size()), logits.cols());
    Eigen::Index row = -1;
    for (std::size_t p = 0; p < prefixes.size(); ++p) {
      row += static_cast<Eigen::Index>(prefixes[p].size());
      out.row(static_cast<Eigen::Index>(p)) = log_softmax(logits.row(row).transpose()).transpose();
    }
    return out;
  }

 private:
  const ModelParams* params_;
  Variant variant_;
  EncoderStates enc_;
};

}  // namespace

std::unique_ptr<BoundModel> TransformerEvaluator::bind(std::span<const int> source, const std::optional<Vector>& image) const {
  const std::optional<Vector> used = variant_ == Variant::multimodal ? image : std::nullopt;
  return std::make_unique<BoundTransformer>(*params_, variant_, encode(*params_, variant_, source, used));
}

Matrix TransformerEvaluator::teacher_forced_log_probs(std::span<const int> source, const std::optional<Vector>& image,
                                                      std::span<const int> target) const {
  if (target.size() < 2) throw std::invalid_argument("teacher forcing needs at least BOS and one token");
  Graph g;
  ParamBinder bind(g, *params_, Trainable::none);
  const SourceInput in{std::vector<int>(source.begin(), source.end()),
                       variant_ == Variant::multimodal ? image : std::nullopt};
  const EncodedBatch enc = encode(bind, variant_, std::span<const SourceInput>(&in, 1));
  const std::vector<int> prefix(target.begin(), target.end() - 1);
  const Matrix& logits = decode_logits(bind, variant_, enc, std::span<const std::vector<int>>(&prefix, 1)).value();
  Matrix out(logits.rows(), logits.cols());
  for (Eigen::Index r = 0; r < logits.rows(); ++r) out.row(r) = log_softmax(logits.row(r).transpose()).transpose();
  return out;
}

// ---- guidance ------------------------------------------------------------------

Vector cfg_log_probs(const Vector& log_p_text, const Vector& log_p_mm, double gamma, CfgSpace space) {
  if (log_p_text.size() != log_p_mm.size()) throw ShapeError("cfg: vocabulary sizes differ");
  if (!std::isfinite(gamma) || gamma < 0.0) throw std::invalid_argument("cfg: gamma must be finite and >= 0");
  if (gamma == 0.0) return log_p_text;
  if (gamma == 1.0) return log_p_mm;
  const double log_floor = std::log(kProbabilityFloor);
  if (space == CfgSpace::log) {
    const Vector lt = log_p_text.cwiseMax(log_floor);
    const Vector lm = log_p_mm.cwiseMax(log_floor);
    return log_softmax(lt + gamma * (lm - lt));
  }
  const Vector pt = log_p_text.array().exp().matrix();
  const Vector pm = log_p_mm.array().exp().matrix();
  Vector mixed = (pt + gamma * (pm - pt)).cwiseMax(kProbabilityFloor);
  mixed /= mixed.sum();
  return mixed.array().log().matrix();
}

namespace {

class BoundGuided final : public BoundModel {
 public:
  BoundGuided(std::unique_ptr<BoundModel> text, std::unique_ptr<BoundModel> mm, double gamma, CfgSpace space)
      : text_(std::move(text)), mm_(std::move(mm)), gamma_(gamma), space_(space) {}

  [[nodiscard]] int vocab_size() const override { return mm_->vocab_size(); }

  [[nodiscard]] Matrix next_log_probs(std::span<const std::vector<int>> prefixes) const override {
    if (gamma_ == 1.0) return mm_->next_log_probs(prefixes);
    if (gamma_ == 0.0) return text_->next_log_probs(prefixes);
    const Matrix lt = text_->next_log_probs(prefixes);
    const Matrix lm = mm_->next_log_probs(prefixes);
    Matrix out(lt.rows(), lt.cols());
    for (Eigen::Index r = 0; r < lt.rows(); ++r) {
      out.row(r) = cfg_log_probs(lt.row(r).transpose(), lm.row(r).transpose(), gamma_, space_).transpose();
    }
    return out;
  }

 private:
  std::unique_ptr<BoundModel> text_;
  std::unique_ptr<BoundModel> mm_;
  double gamma_;
  CfgSpace space_;
};

}  // namespace

GuidedEvaluator::GuidedEvaluator(const Evaluator& text_only, const Evaluator& multimodal, double gamma, CfgSpace space)
    : text_(&text_only), mm_(&multimodal), gamma_(gamma), space_(space) {
  if (!std::isfinite(gamma) || gamma < 0.0) throw std::invalid_argument("guidance scale must be finite and >= 0");
}

std::unique_ptr<BoundModel> GuidedEvaluator::bind(std::span<const int> source, const std::optional<Vector>& image) const {
  return std::make_unique<BoundGuided>(text_->bind(source, std::nullopt), mm_->bind(source, image), gamma_, space_);
}

Matrix GuidedEvaluator::teacher_forced_log_probs(std::span<const int> source, const std::optional<Vector>& image,
                                                 std::span<const int> target) const {
  if (gamma_ == 1.0) return mm_->teacher_forced_log_probs(source, image, target);
  if (gamma_ == 0.0) return text_->teacher_forced_log_probs(source, std::nullopt, target);
  const Matrix lt = text_->teacher_forced_log_probs(source, std::nullopt, target);
  const Matrix lm = mm_->teacher_forced_log_probs(source, image, target);
  Matrix out(lt.rows(), lt.cols());
  for (Eigen::Index r = 0; r < lt.rows(); ++r) {
    out.row(r) = cfg_log_probs(lt.row(r).transpose(), lm.row(r).transpose(), gamma_, space_).transpose();
  }
  return out;
}

// ---- beam search -----------------------------------------------------------------

DecodeResult beam_search(const BoundModel& model, const BeamOptions& opts) {
  if (opts.width < 1) throw std::invalid_argument("beam width must be >= 1");
  if (opts.max_len < 1) throw std::invalid_argument("beam max_len must be >= 1");
  const int vocab = model.vocab_size();
  std::vector<bool> allowed(static_cast<std::size_t>(vocab), true);
  for (int b : opts.banned) {
    if (b >= 0 && b < vocab) allowed[static_cast<std::size_t>(b)] = false;
  }

  auto score_of = [&](const Hypothesis& h) {
    if (!opts.length_normalize) return h.log_prob;
    return h.log_prob / static_cast<double>(h.tokens.size() - 1);
  };

  std::vector<Hypothesis> live{Hypothesis{{opts.bos}, 0.0}};
  std::vector<Hypothesis> finished;

  struct Candidate {
    double log_prob;
    std::size_t parent;
    int token;
  };

  for (int step = 0; step < opts.max_len && !live.empty(); ++step) {
    std::vector<std::vector<int>> prefixes;
    prefixes.reserve(live.size());
    for (const Hypothesis& h : live) prefixes.push_back(h.tokens);
    const Matrix logp = model.next_log_probs(prefixes);

    std::vector<Candidate> cands;
    cands.reserve(live.size() * static_cast<std::size_t>(vocab));
    for (std::size_t i = 0; i < live.size(); ++i) {
      for (int v = 0; v < vocab; ++v) {
        if (!allowed[static_cast<std::size_t>(v)]) continue;
        cands.push_back({live[i].log_prob + logp(static_cast<Eigen::Index>(i), v), i, v});
      }
    }
    const auto keep = std::min(cands.size(), static_cast<std::size_t>(opts.width));
    std::partial_sort(cands.begin(), cands.begin() + static_cast<long>(keep), cands.end(),
                      [](const Candidate& a, const Candidate& b) {
                        if (a.log_prob != b.log_prob) return a.log_prob > b.log_prob;
                        if (a.parent != b.parent) return a.parent < b.parent;
                        return a.token < b.token;
                      });

    std::vector<Hypothesis> next;
    for (std::size_t c = 0; c < keep; ++c) {
      Hypothesis h{live[cands[c].parent].tokens, cands[c].log_prob};
      h.tokens.push_back(cands[c].token);
      (cands[c].token == opts.eos ? finished : next).push_back(std::move(h));
    }
    live = std::move(next);

    // Unnormalised scores only decrease, so no live hypothesis can overtake.
    if (!opts.length_normalize && !finished.empty() && !live.empty()) {
      double best_finished = finished.front().log_prob;
      for (const Hypothesis& h : finished) best_finished = std::max(best_finished, h.log_prob);
      if (best_finished >= live.front().log_prob) break;
    }
  }

  DecodeResult result;
  const std::vector<Hypothesis>& pool = finished.empty() ? live : finished;
  if (pool.empty()) return result;
  const Hypothesis* best = &pool.front();
  for (const Hypothesis& h : pool) {
    if (score_of(h) > score_of(*best)) best = &h;
  }
  result.finished = !finished.empty();
  result.log_prob = best->log_prob;
  result.tokens.assign(best->tokens.begin() + 1, best->tokens.end());
  if (result.finished) result.tokens.pop_back();
  return result;
}

DecodeResult beam_search(const Evaluator& model, std::span<const int> source, const std::optional<Vector>& image,
                         const BeamOptions& opts) {
  return beam_search(*model.bind(source, image), opts);
}

DecodeResult cfg_beam_search(const Evaluator& text_only, const Evaluator& multimodal, std::span<const int> source,
                             const std::optional<Vector>& image, double gamma, const BeamOptions& opts, CfgSpace space) {
  const GuidedEvaluator guided(text_only, multimodal, gamma, space);
  return beam_search(guided, source, image, opts);
}

}  // namespace zerommt
