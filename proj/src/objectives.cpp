#include "zerommt/objectives.hpp"

#include <cmath>
#include <stdexcept>

namespace zerommt {

KlMode kl_mode_from_string(const std::string& s) {
  if (s == "full") return KlMode::full;
  if (s == "realized") return KlMode::realized;
  throw ConfigError("kl_mode must be 'full' or 'realized', got '" + s + "'");
}

std::string to_string(KlMode m) { return m == KlMode::full ? "full" : "realized"; }

std::size_t Batch::target_tokens() const {
  std::size_t n = 0;
  for (const BatchItem& it : items) n += it.tgt.size() - 1;
  return n;
}

Batch make_batch(std::span<const Example> examples, double mask_rate, std::mt19937_64& rng) {
  Batch b;
  b.items.reserve(examples.size());
  for (const Example& ex : examples) {
    MaskedSource m = apply_source_mask(ex.src, mask_rate, rng);
    b.items.push_back(BatchItem{ex.src, std::move(m.tokens), std::move(m.masked_positions), ex.tgt, ex.image});
  }
  return b;
}

void validate_batch(const Batch& batch) {
  if (batch.items.empty()) throw std::invalid_argument("batch is empty");
  for (const BatchItem& it : batch.items) {
    if (it.tgt.size() < 2 || it.tgt.front() != token::kBos || it.tgt.back() != token::kEos) {
      throw std::invalid_argument("batch target must begin with BOS and end with EOS");
    }
    if (it.masked_src.size() != it.src.size()) throw std::invalid_argument("masked source length differs from source");
    for (int p : it.mask) {
      if (p < 0 || static_cast<std::size_t>(p) >= it.src.size()) throw std::invalid_argument("mask position outside source");
    }
  }
}

namespace {

struct TeacherForcing {
  std::vector<std::vector<int>> prefixes;
  std::vector<int> targets;
};

TeacherForcing teacher_forcing(const Batch& batch) {
  TeacherForcing tf;
  for (const BatchItem& it : batch.items) {
    tf.prefixes.emplace_back(it.tgt.begin(), it.tgt.end() - 1);
    tf.targets.insert(tf.targets.end(), it.tgt.begin() + 1, it.tgt.end());
  }
  return tf;
}

std::vector<SourceInput> sources(const Batch& batch, bool masked, bool with_images) {
  std::vector<SourceInput> out;
  out.reserve(batch.items.size());
  for (const BatchItem& it : batch.items) {
    out.push_back(SourceInput{masked ? it.masked_src : it.src, with_images ? it.image : std::nullopt});
  }
  return out;
}

Var multimodal_logits(ParamBinder& bind, const Batch& batch, bool masked, const TeacherForcing& tf) {
  const auto src = sources(batch, masked, true);
  const EncodedBatch enc = encode(bind, Variant::multimodal, src);
  return decode_logits(bind, Variant::multimodal, enc, tf.prefixes);
}

}  // namespace

Var mean_token_nll(Var logits, std::span<const int> targets) {
  if (targets.empty()) throw std::invalid_argument("mean_token_nll: no targets");
  return scale(cross_entropy(logits, targets), 1.0 / static_cast<double>(targets.size()));
}

Var mean_kl(const Matrix& base_probs, Var logits, KlMode mode, std::span<const int> targets) {
  const auto rows = static_cast<std::size_t>(base_probs.rows());
  if (rows == 0) throw std::invalid_argument("mean_kl: no positions");
  const double inv = 1.0 / static_cast<double>(rows);
  if (mode == KlMode::full) return scale(kl_divergence_rows(base_probs, logits), inv);

  if (targets.size() != rows) throw ShapeError("mean_kl: realized mode needs one target per row");
  // sum_j p_j log p_j - p_j log q_j: a constant plus a p-weighted NLL.
  std::vector<double> weights(rows);
  double entropy_part = 0.0;
  for (std::size_t r = 0; r < rows; ++r) {
    const double p = base_probs(static_cast<Eigen::Index>(r), targets[r]);
    weights[r] = p;
    if (p > 0.0) entropy_part += p * std::log(p);
  }
  Graph& g = *logits.graph;
  Matrix c(1, 1);
  c(0, 0) = entropy_part;
  return scale(add(g.constant(std::move(c)), cross_entropy(logits, targets, weights)), inv);
}

Matrix frozen_base_probs(const ModelParams& frozen, const Batch& batch) {
  Graph g;
  ParamBinder bind(g, frozen, Trainable::none);
  const TeacherForcing tf = teacher_forcing(batch);
  const auto src = sources(batch, false, false);
  const EncodedBatch enc = encode(bind, Variant::base, src);
  const Matrix& logits = decode_logits(bind, Variant::base, enc, tf.prefixes).value();
  Matrix probs(logits.rows(), logits.cols());
  for (Eigen::Index r = 0; r < logits.rows(); ++r) probs.row(r) = softmax(logits.row(r).transpose()).transpose();
  return probs;
}

Var vmlm_loss(ParamBinder& bind, const Batch& batch) {
  validate_batch(batch);
  const TeacherForcing tf = teacher_forcing(batch);
  return mean_token_nll(multimodal_logits(bind, batch, true, tf), tf.targets);
}

Var kl_penalty(ParamBinder& bind, const ModelParams& frozen, const Batch& batch, KlMode mode) {
  validate_batch(batch);
  const TeacherForcing tf = teacher_forcing(batch);
  const Matrix base = frozen_base_probs(frozen, batch);
  return mean_kl(base, multimodal_logits(bind, batch, false, tf), mode, tf.targets);
}

Var translation_nll(ParamBinder& bind, const Batch& batch) {
  validate_batch(batch);
  const TeacherForcing tf = teacher_forcing(batch);
  return mean_token_nll(multimodal_logits(bind, batch, false, tf), tf.targets);
}

CombinedLoss combined_loss(ParamBinder& bind, const ModelParams& frozen, const Batch& batch, const LossWeights& weights) {
  if (!std::isfinite(weights.lambda) || weights.lambda < 0.0) throw std::invalid_argument("lambda must be finite and >= 0");
  CombinedLoss out;
  out.vmlm = vmlm_loss(bind, batch);
  out.kl = kl_penalty(bind, frozen, batch, weights.kl_mode);
  out.total = add(out.vmlm, scale(out.kl, weights.lambda));
  return out;
}

LossValues evaluate_combined_loss(const ModelParams& params, const ModelParams& frozen, const Batch& batch,
                                  const LossWeights& weights) {
  Graph g;
  ParamBinder bind(g, params, Trainable::none);
  const CombinedLoss l = combined_loss(bind, frozen, batch, weights);
  return {l.total.scalar(), l.vmlm.scalar(), l.kl.scalar()};
}

}  // namespace zerommt
