// Beam search and classifier-free guidance between the text-only and the
// multimodal next-token distributions.
#pragma once

#include "zerommt/model.hpp"

#include <memory>
#include <optional>
#include <span>
#include <string>
#include <vector>

namespace zerommt {

/// Next-token model bound to one (source, image) context.
class BoundModel {
 public:
  virtual ~BoundModel() = default;
  [[nodiscard]] virtual int vocab_size() const = 0;
  /// One row of next-token log-probabilities per prefix.
  [[nodiscard]] virtual Matrix next_log_probs(std::span<const std::vector<int>> prefixes) const = 0;
};

/// A conditional sequence model viewed as a pure function of (source, image, prefix).
class Evaluator {
 public:
  virtual ~Evaluator() = default;
  [[nodiscard]] virtual std::unique_ptr<BoundModel> bind(std::span<const int> source,
                                                         const std::optional<Vector>& image) const = 0;
  /// Log-probabilities at each teacher-forced position of `target` (BOS..EOS):
  /// row j scores target[j + 1] given target[0..j].
  [[nodiscard]] virtual Matrix teacher_forced_log_probs(std::span<const int> source, const std::optional<Vector>& image,
                                                        std::span<const int> target) const;
};

/// The transformer, as the base model f_theta or the multimodal model f_theta,beta.
class TransformerEvaluator final : public Evaluator {
 public:
  TransformerEvaluator(const ModelParams& params, Variant variant) : params_(&params), variant_(variant) {}
  [[nodiscard]] std::unique_ptr<BoundModel> bind(std::span<const int> source,
                                                 const std::optional<Vector>& image) const override;
  [[nodiscard]] Matrix teacher_forced_log_probs(std::span<const int> source, const std::optional<Vector>& image,
                                                std::span<const int> target) const override;

 private:
  const ModelParams* params_;
  Variant variant_;
};

enum class CfgSpace { log, prob_clip };

CfgSpace cfg_space_from_string(const std::string& s);
std::string to_string(CfgSpace s);

inline constexpr double kProbabilityFloor = 1e-12;

/// Guided log-distribution from text-only and multimodal log-probabilities.
/// log space: log p_text + gamma (log p_mm - log p_text), renormalised.
/// prob_clip: p_text + gamma (p_mm - p_text), floored and renormalised.
/// gamma == 0 and gamma == 1 return the respective input unchanged.
Vector cfg_log_probs(const Vector& log_p_text, const Vector& log_p_mm, double gamma, CfgSpace space = CfgSpace::log);

template <typename A, typename B>
Vector cfg_distribution(const Eigen::MatrixBase<A>& p_text, const Eigen::MatrixBase<B>& p_mm, double gamma,
                        CfgSpace space = CfgSpace::log) {
  if (p_text.size() != p_mm.size()) throw ShapeError("cfg_distribution: vocabulary sizes differ");
  if (gamma == 0.0) return p_text;
  if (gamma == 1.0) return p_mm;
  const Vector lt = p_text.template cast<double>().array().max(kProbabilityFloor).log().matrix();
  const Vector lm = p_mm.template cast<double>().array().max(kProbabilityFloor).log().matrix();
  return cfg_log_probs(lt, lm, gamma, space).array().exp().matrix();
}

/// Text-only and multimodal evaluators blended with classifier-free guidance.
/// The text-only side never sees the image.
class GuidedEvaluator final : public Evaluator {
 public:
  GuidedEvaluator(const Evaluator& text_only, const Evaluator& multimodal, double gamma, CfgSpace space = CfgSpace::log);
  [[nodiscard]] std::unique_ptr<BoundModel> bind(std::span<const int> source,
                                                 const std::optional<Vector>& image) const override;
  [[nodiscard]] Matrix teacher_forced_log_probs(std::span<const int> source, const std::optional<Vector>& image,
                                                std::span<const int> target) const override;

 private:
  const Evaluator* text_;
  const Evaluator* mm_;
  double gamma_;
  CfgSpace space_;
};

struct BeamOptions {
  int width = 4;
  int max_len = 24;  // generated tokens, EOS included
  int bos = token::kBos;
  int eos = token::kEos;
  std::vector<int> banned = {token::kPad, token::kBos, token::kMask};
  bool length_normalize = false;
};

struct Hypothesis {
  std::vector<int> tokens;  // BOS first
  double log_prob = 0.0;
};

struct DecodeResult {
  std::vector<int> tokens;  // generated tokens without BOS / EOS
  double log_prob = 0.0;
  bool finished = false;    // false when no hypothesis emitted EOS within max_len
};

DecodeResult beam_search(const BoundModel& model, const BeamOptions& opts);
DecodeResult beam_search(const Evaluator& model, std::span<const int> source, const std::optional<Vector>& image,
                         const BeamOptions& opts);
DecodeResult cfg_beam_search(const Evaluator& text_only, const Evaluator& multimodal, std::span<const int> source,
                             const std::optional<Vector>& image, double gamma, const BeamOptions& opts,
                             CfgSpace space = CfgSpace::log);

}  // namespace zerommt
