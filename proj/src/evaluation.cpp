#include "zerommt/evaluation.hpp"

#include "zerommt/parallel.hpp"

#include <algorithm>
#include <cmath>
#include <iomanip>
#include <map>
#include <numeric>
#include <ostream>
#include <stdexcept>

namespace zerommt {

double sequence_perplexity(const Evaluator& model, std::span<const int> source, const std::optional<Vector>& image,
                           std::span<const int> target) {
  if (target.size() < 2 || target.back() != token::kEos) {
    throw std::invalid_argument("sequence_perplexity: target must be BOS ... EOS");
  }
  const Matrix logp = model.teacher_forced_log_probs(source, image, target);
  double nll = 0.0;
  for (std::size_t j = 1; j < target.size(); ++j) nll -= logp(static_cast<Eigen::Index>(j - 1), target[j]);
  return std::exp(nll / static_cast<double>(target.size() - 1));
}

ContrastiveRow contrastive_evaluation(const Evaluator& model, int id, char orientation, std::span<const int> source,
                                      const Vector& image, std::span<const int> correct, std::span<const int> wrong) {
  ContrastiveRow row;
  row.id = id;
  row.orientation = orientation;
  row.ppl_correct = sequence_perplexity(model, source, image, correct);
  row.ppl_wrong = sequence_perplexity(model, source, image, wrong);
  row.score = contrastive_score(row.ppl_correct, row.ppl_wrong);
  return row;
}

void ContrastiveSummary::merge(const ContrastiveSummary& other) {
  wins += other.wins;
  evaluations += other.evaluations;
  ties += other.ties;
  rows.insert(rows.end(), other.rows.begin(), other.rows.end());
}

void ContrastiveSummary::finalize() {
  std::sort(rows.begin(), rows.end(), [](const ContrastiveRow& a, const ContrastiveRow& b) {
    return a.id != b.id ? a.id < b.id : a.orientation < b.orientation;
  });
  accuracy = evaluations == 0 ? 0.0 : 100.0 * static_cast<double>(wins) / static_cast<double>(evaluations);
  double sc = 0.0;
  double sw = 0.0;
  for (const ContrastiveRow& r : rows) {
    sc += r.ppl_correct;
    sw += r.ppl_wrong;
  }
  mean_ppl_correct = rows.empty() ? 0.0 : sc / static_cast<double>(rows.size());
  mean_ppl_wrong = rows.empty() ? 0.0 : sw / static_cast<double>(rows.size());
}

ContrastiveSummary commute_accuracy(const Evaluator& model, std::span<const ContrastiveInstance> instances) {
  if (instances.empty()) throw std::invalid_argument("commute_accuracy: no instances");
  std::vector<ContrastiveSummary> partial(instances.size());
  parallel_for(instances.size(), [&](std::size_t i) {
    const ContrastiveInstance& in = instances[i];
    ContrastiveSummary& s = partial[i];
    s.rows.push_back(contrastive_evaluation(model, in.id, 'a', in.src, in.img_a, in.tgt_a, in.tgt_b));
    s.rows.push_back(contrastive_evaluation(model, in.id, 'b', in.src, in.img_b, in.tgt_b, in.tgt_a));
    for (const ContrastiveRow& r : s.rows) {
      s.wins += r.score;
      s.ties += r.ppl_correct == r.ppl_wrong ? 1 : 0;
      s.evaluations += 1;
    }
  });
  ContrastiveSummary total;
  for (const ContrastiveSummary& s : partial) total.merge(s);
  total.finalize();
  return total;
}

double sense_accuracy(const Evaluator& model, std::span<const ContrastiveInstance> instances, const BeamOptions& opts) {
  if (instances.empty()) return 0.0;
  std::vector<int> hits(instances.size() * 2, 0);
  parallel_for(instances.size() * 2, [&](std::size_t k) {
    const ContrastiveInstance& in = instances[k / 2];
    const bool a = k % 2 == 0;
    const std::vector<int>& correct = a ? in.tgt_a : in.tgt_b;
    const std::vector<int>& wrong = a ? in.tgt_b : in.tgt_a;
    const DecodeResult out = beam_search(model, in.src, a ? in.img_a : in.img_b, opts);
    // out.tokens omits BOS, so target position j maps to out.tokens[j - 1].
    bool hit = true;
    for (std::size_t j = 1; j < std::min(correct.size(), wrong.size()); ++j) {
      if (correct[j] == wrong[j]) continue;
      hit = hit && j - 1 < out.tokens.size() && out.tokens[j - 1] == correct[j];
    }
    hits[k] = hit ? 1 : 0;
  });
  int total = 0;
  for (int h : hits) total += h;
  return static_cast<double>(total) / static_cast<double>(hits.size());
}

double bleu(std::span<const std::vector<int>> hypotheses, std::span<const std::vector<int>> references, int max_n) {
  if (hypotheses.empty()) throw std::invalid_argument("bleu: empty corpus");
  if (hypotheses.size() != references.size()) throw std::invalid_argument("bleu: hypothesis/reference count mismatch");
  if (max_n < 1) throw std::invalid_argument("bleu: max_n must be >= 1");
  std::size_t longest = 0;
  std::size_t hyp_len = 0;
  std::size_t ref_len = 0;
  for (std::size_t i = 0; i < hypotheses.size(); ++i) {
    longest = std::max(longest, hypotheses[i].size());
    hyp_len += hypotheses[i].size();
    ref_len += references[i].size();
  }
  const auto orders = static_cast<int>(std::min<std::size_t>(static_cast<std::size_t>(max_n), longest));
  if (orders == 0) return 0.0;

  double log_precision_sum = 0.0;
  for (int n = 1; n <= orders; ++n) {
    std::size_t matched = 0;
    std::size_t total = 0;
    for (std::size_t i = 0; i < hypotheses.size(); ++i) {
      auto count = [n](const std::vector<int>& s) {
        std::map<std::vector<int>, int> c;
        for (std::size_t at = 0; at + static_cast<std::size_t>(n) <= s.size(); ++at) {
          ++c[std::vector<int>(s.begin() + static_cast<long>(at), s.begin() + static_cast<long>(at) + n)];
        }
        return c;
      };
      const auto hc = count(hypotheses[i]);
      const auto rc = count(references[i]);
      for (const auto& [gram, k] : hc) {
        total += static_cast<std::size_t>(k);
        if (auto it = rc.find(gram); it != rc.end()) matched += static_cast<std::size_t>(std::min(k, it->second));
      }
    }
    if (matched == 0 || total == 0) return 0.0;
    log_precision_sum += std::log(static_cast<double>(matched) / static_cast<double>(total));
  }
  const double bp = hyp_len > ref_len ? 1.0 : std::exp(1.0 - static_cast<double>(ref_len) / static_cast<double>(hyp_len));
  return 100.0 * bp * std::exp(log_precision_sum / orders);
}

double token_accuracy(const Evaluator& model, std::span<const Example> examples) {
  if (examples.empty()) throw std::invalid_argument("token_accuracy: no examples");
  std::vector<int> hits(examples.size(), 0);
  std::vector<int> totals(examples.size(), 0);
  parallel_for(examples.size(), [&](std::size_t i) {
    const Example& e = examples[i];
    const Matrix logp = model.teacher_forced_log_probs(e.src, e.image, e.tgt);
    for (Eigen::Index r = 0; r < logp.rows(); ++r) {
      Eigen::Index arg = 0;
      logp.row(r).maxCoeff(&arg);
      hits[i] += arg == e.tgt[static_cast<std::size_t>(r) + 1] ? 1 : 0;
      totals[i] += 1;
    }
  });
  const double h = std::accumulate(hits.begin(), hits.end(), 0.0);
  return h / std::accumulate(totals.begin(), totals.end(), 0.0);
}

std::vector<SenseSplit> sense_split(const Evaluator& model, std::span<const ContrastiveInstance> instances) {
  std::vector<SenseSplit> out(instances.size());
  parallel_for(instances.size(), [&](std::size_t i) {
    const ContrastiveInstance& in = instances[i];
    std::size_t j = 1;
    while (j < in.tgt_a.size() && j < in.tgt_b.size() && in.tgt_a[j] == in.tgt_b[j]) ++j;
    if (j >= in.tgt_a.size() || j >= in.tgt_b.size()) throw std::invalid_argument("sense_split: translations do not differ");
    const Matrix logp = model.teacher_forced_log_probs(in.src, std::nullopt, in.tgt_a);
    const auto row = static_cast<Eigen::Index>(j - 1);
    out[i] = {std::exp(logp(row, in.tgt_a[j])), std::exp(logp(row, in.tgt_b[j]))};
  });
  return out;
}

std::vector<int> strip_specials(std::span<const int> target) {
  auto begin = target.begin();
  auto end = target.end();
  if (begin != end && *begin == token::kBos) ++begin;
  if (begin != end && *(end - 1) == token::kEos) --end;
  return {begin, end};
}

double corpus_bleu(const Evaluator& model, std::span<const Example> examples, const BeamOptions& opts) {
  std::vector<std::vector<int>> hyps(examples.size());
  std::vector<std::vector<int>> refs(examples.size());
  parallel_for(examples.size(), [&](std::size_t i) {
    hyps[i] = beam_search(model, examples[i].src, examples[i].image, opts).tokens;
    refs[i] = strip_specials(examples[i].tgt);
  });
  return bleu(hyps, refs);
}

Json EvalReport::to_json() const {
  return Json{{"gamma", gamma},
              {"contrastive_accuracy", contrastive.accuracy},
              {"contrastive_wins", contrastive.wins},
              {"contrastive_evaluations", contrastive.evaluations},
              {"contrastive_ties", contrastive.ties},
              {"bleu", bleu},
              {"bleu_convention", "corpus BLEU, orders 1..min(4, longest hypothesis), no smoothing"},
              {"sense_accuracy", sense_accuracy},
              {"mean_ppl_correct", contrastive.mean_ppl_correct},
              {"mean_ppl_wrong", contrastive.mean_ppl_wrong},
              {"extra", extra}};
}

void write_contrastive_csv(std::ostream& out, std::span<const ContrastiveRow> rows) {
  out << "id,orientation,ppl_correct,ppl_wrong,score\n";
  out << std::setprecision(17);
  for (const ContrastiveRow& r : rows) {
    out << r.id << ',' << r.orientation << ',' << r.ppl_correct << ',' << r.ppl_wrong << ',' << r.score << '\n';
  }
}

}  // namespace zerommt
