// Contrastive disambiguation scoring, perplexity and corpus BLEU.
#pragma once

#include "zerommt/decoding.hpp"
#include "zerommt/example.hpp"

#include <iosfwd>
#include <span>
#include <string>
#include <vector>

namespace zerommt {

/// exp of the mean per-token negative log-probability of target[1..] under
/// teacher forcing. `target` is BOS ... EOS.
double sequence_perplexity(const Evaluator& model, std::span<const int> source, const std::optional<Vector>& image,
                           std::span<const int> target);

/// 1 iff ppl_correct < ppl_wrong; ties and reversals score 0.
inline int contrastive_score(double ppl_correct, double ppl_wrong) { return ppl_correct < ppl_wrong ? 1 : 0; }

/// One scored (instance, orientation) pair.
struct ContrastiveRow {
  int id = 0;
  char orientation = 'a';
  double ppl_correct = 0.0;
  double ppl_wrong = 0.0;
  int score = 0;
};

ContrastiveRow contrastive_evaluation(const Evaluator& model, int id, char orientation, std::span<const int> source,
                                      const Vector& image, std::span<const int> correct, std::span<const int> wrong);

struct ContrastiveSummary {
  double accuracy = 0.0;  // percent
  int wins = 0;
  int evaluations = 0;
  int ties = 0;
  double mean_ppl_correct = 0.0;
  double mean_ppl_wrong = 0.0;
  std::vector<ContrastiveRow> rows;

  /// Associative merge of partial summaries.
  void merge(const ContrastiveSummary& other);
  void finalize();
};

/// Mean contrastive score over both image orientations of every instance, x100.
ContrastiveSummary commute_accuracy(const Evaluator& model, std::span<const ContrastiveInstance> instances);

/// Fraction of (instance, orientation) decodes whose tokens at the positions
/// where the two translations differ match the correct translation.
double sense_accuracy(const Evaluator& model, std::span<const ContrastiveInstance> instances, const BeamOptions& opts);

/// Corpus BLEU in [0, 100] with uniform weights over n-gram orders 1..N, where
/// N = min(max_n, longest hypothesis length); no smoothing.
double bleu(std::span<const std::vector<int>> hypotheses, std::span<const std::vector<int>> references, int max_n = 4);

/// Beam-decodes every example (with its image) and scores the output against
/// the reference with BOS/EOS stripped.
double corpus_bleu(const Evaluator& model, std::span<const Example> examples, const BeamOptions& opts);

/// Fraction of teacher-forced target tokens (EOS included) that are the
/// argmax of the model's next-token distribution.
double token_accuracy(const Evaluator& model, std::span<const Example> examples);

/// Teacher-forced probabilities of the two candidate tokens at the first
/// position where tgt_a and tgt_b differ, with no image.
struct SenseSplit {
  double p_a = 0.0;
  double p_b = 0.0;
};
std::vector<SenseSplit> sense_split(const Evaluator& model, std::span<const ContrastiveInstance> instances);

/// Strips a leading BOS and trailing EOS.
std::vector<int> strip_specials(std::span<const int> target);

struct EvalReport {
  double gamma = 1.0;
  ContrastiveSummary contrastive;
  double bleu = 0.0;
  double sense_accuracy = 0.0;
  Json extra = Json::object();

  [[nodiscard]] Json to_json() const;
};

/// `id,orientation,ppl_correct,ppl_wrong,score`
void write_contrastive_csv(std::ostream& out, std::span<const ContrastiveRow> rows);

}  // namespace zerommt
