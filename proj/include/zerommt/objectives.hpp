// Training objectives: visually conditioned masked language modelling, the KL
// penalty against the frozen text-only model, and their weighted sum.
#pragma once

#include "zerommt/example.hpp"
#include "zerommt/model.hpp"

#include <random>
#include <span>

namespace zerommt {

/// `full` sums the KL over the whole vocabulary at each target position;
/// `realized` keeps only the term of the realized target token.
enum class KlMode { full, realized };

KlMode kl_mode_from_string(const std::string& s);
std::string to_string(KlMode m);

struct LossWeights {
  double lambda = 0.1;
  KlMode kl_mode = KlMode::full;
};

struct BatchItem {
  std::vector<int> src;         // unmasked source
  std::vector<int> masked_src;  // source with MASK at mask positions
  std::vector<int> mask;        // masked positions, ascending
  std::vector<int> tgt;         // BOS ... EOS
  std::optional<Vector> image;
};

struct Batch {
  std::vector<BatchItem> items;
  [[nodiscard]] std::size_t target_tokens() const;
};

/// Masks every source at `mask_rate` with draws from `rng`.
Batch make_batch(std::span<const Example> examples, double mask_rate, std::mt19937_64& rng);
/// Throws std::invalid_argument unless every target is BOS..EOS and masks are in range.
void validate_batch(const Batch& batch);

// ---- per-token reductions ----------------------------------------------------

/// Mean over rows of -log softmax(logits)[row, target].
Var mean_token_nll(Var logits, std::span<const int> targets);
/// Mean over rows of KL(base_probs_row || softmax(logits_row)). In realized
/// mode only the target token's term p log(p / q) contributes.
Var mean_kl(const Matrix& base_probs, Var logits, KlMode mode, std::span<const int> targets);

// ---- model-level losses --------------------------------------------------------

/// Next-token probabilities of the frozen text-only model at every
/// teacher-forced target position of the batch (unmasked sources, no image).
Matrix frozen_base_probs(const ModelParams& frozen, const Batch& batch);

/// Mean target-token NLL of the multimodal model given masked sources and images.
Var vmlm_loss(ParamBinder& bind, const Batch& batch);
/// Mean per-position KL from the frozen base to the multimodal model (unmasked sources, images).
Var kl_penalty(ParamBinder& bind, const ModelParams& frozen, const Batch& batch, KlMode mode = KlMode::full);
/// Teacher-forced NLL of the multimodal model on unmasked sources with images.
Var translation_nll(ParamBinder& bind, const Batch& batch);

struct CombinedLoss {
  Var total;
  Var vmlm;
  Var kl;
};

/// total = vmlm + lambda * kl
CombinedLoss combined_loss(ParamBinder& bind, const ModelParams& frozen, const Batch& batch, const LossWeights& weights);

struct LossValues {
  double total = 0.0;
  double vmlm = 0.0;
  double kl = 0.0;
};

LossValues evaluate_combined_loss(const ModelParams& params, const ModelParams& frozen, const Batch& batch,
                                  const LossWeights& weights);

}  // namespace zerommt
