#include "doctest.h"

#include "oracles.hpp"
#include "zerommt/decoding.hpp"

#include <cmath>
#include <random>

using namespace zerommt;

namespace {

Vector probs(std::initializer_list<double> v) {
  Vector out(static_cast<Eigen::Index>(v.size()));
  Eigen::Index i = 0;
  for (double x : v) out(i++) = x;
  return out;
}

Vector logs(std::initializer_list<double> v) { return probs(v).array().log().matrix(); }

Vector random_distribution(int n, std::mt19937_64& rng) {
  std::normal_distribution<double> d(0.0, 2.0);
  Vector l(n);
  for (int i = 0; i < n; ++i) l(i) = d(rng);
  return softmax(l);
}

// Vocabulary PAD BOS EOS A B. Greedy takes A (0.6) then A or B (0.5) for 0.3;
// B then A gives 0.4 * 0.9 = 0.36. Every length-2 prefix ends.
constexpr int kA = 3;
constexpr int kB = 4;

Vector three_step(const std::vector<int>& prefix) {
  constexpr double z = 0.0;
  if (prefix.size() == 1) return logs({z, z, z, 0.6, 0.4});
  if (prefix.size() == 2) return prefix[1] == kA ? logs({z, z, z, 0.5, 0.5}) : logs({z, z, z, 0.9, 0.1});
  return logs({z, z, 1.0, z, z});
}

BeamOptions table_options(int width, int max_len) {
  BeamOptions o;
  o.width = width;
  o.max_len = max_len;
  o.banned = {token::kPad, token::kBos};
  return o;
}

}  // namespace

TEST_CASE("CFG at gamma 2 on a two-token vocabulary") {
  const Vector out = cfg_distribution(probs({0.8, 0.2}), probs({0.6, 0.4}), 2.0);
  const double a = 0.6 * 0.6 / 0.8;
  const double b = 0.4 * 0.4 / 0.2;
  CHECK(std::abs(out(0) - a / (a + b)) < 1e-12);
  CHECK(std::abs(out(1) - b / (a + b)) < 1e-12);
  CHECK(out(0) == doctest::Approx(0.36));
  CHECK(out(1) == doctest::Approx(0.64));
}

TEST_CASE("CFG endpoints return their inputs") {
  std::mt19937_64 rng(1);
  for (CfgSpace space : {CfgSpace::log, CfgSpace::prob_clip}) {
    const Vector t = random_distribution(6, rng);
    const Vector m = random_distribution(6, rng);
    CHECK((cfg_distribution(t, m, 0.0, space) - t).cwiseAbs().maxCoeff() < 1e-9);
    CHECK((cfg_distribution(t, m, 1.0, space) - m).cwiseAbs().maxCoeff() < 1e-9);
    const Vector lt = t.array().log().matrix();
    const Vector lm = m.array().log().matrix();
    CHECK(cfg_log_probs(lt, lm, 0.0, space) == lt);
    CHECK(cfg_log_probs(lt, lm, 1.0, space) == lm);
  }
}

TEST_CASE("CFG output is a distribution and the identity when both inputs agree") {
  std::mt19937_64 rng(2);
  std::uniform_real_distribution<double> g(0.0, 4.0);
  for (int trial = 0; trial < 200; ++trial) {
    const Vector t = random_distribution(7, rng);
    const Vector m = random_distribution(7, rng);
    const double gamma = g(rng);
    for (CfgSpace space : {CfgSpace::log, CfgSpace::prob_clip}) {
      const Vector out = cfg_distribution(t, m, gamma, space);
      CHECK(std::abs(out.sum() - 1.0) < 1e-9);
      CHECK(out.minCoeff() >= 0.0);
      CHECK((cfg_distribution(t, t, gamma, space) - t).cwiseAbs().maxCoeff() < 1e-9);
    }
  }
}

TEST_CASE("CFG argmax switches exactly once as gamma grows") {
  // p_mm prefers token 0, p_text prefers token 1; the log-odds are affine in gamma.
  std::mt19937_64 rng(3);
  std::uniform_real_distribution<double> u(0.05, 0.95);
  for (int trial = 0; trial < 50; ++trial) {
    const double pt = u(rng) * 0.5;
    const double pm = 0.5 + u(rng) * 0.5;
    const Vector t = probs({pt, 1.0 - pt});
    const Vector m = probs({pm, 1.0 - pm});
    const double lo_t = std::log(pt / (1.0 - pt));
    const double lo_m = std::log(pm / (1.0 - pm));
    const double crossing = -lo_t / (lo_m - lo_t);
    int switches = 0;
    int prev = -1;
    for (int i = 0; i <= 400; ++i) {
      const double gamma = 0.01 * i;
      const Vector out = cfg_distribution(t, m, gamma);
      const int arg = out(0) > out(1) ? 0 : 1;
      if (std::abs(gamma - crossing) > 1e-6) CHECK(arg == (gamma > crossing ? 0 : 1));
      if (prev >= 0 && arg != prev) ++switches;
      prev = arg;
    }
    CHECK(switches <= 1);
  }
}

TEST_CASE("prob_clip blends probabilities and floors negatives") {
  const Vector out = cfg_distribution(probs({0.8, 0.2}), probs({0.6, 0.4}), 1.5, CfgSpace::prob_clip);
  CHECK(out(0) == doctest::Approx(0.5));
  CHECK(out(1) == doctest::Approx(0.5));
  const Vector clipped = cfg_distribution(probs({0.5, 0.5}), probs({0.9, 0.1}), 3.0, CfgSpace::prob_clip);
  CHECK(clipped(1) < 1e-11);
  CHECK(std::abs(clipped.sum() - 1.0) < 1e-12);
}

TEST_CASE("width 1 is greedy decoding") {
  const oracle::TableModel model(5, three_step);
  const DecodeResult r = beam_search(model, table_options(1, 3));
  CHECK(r.tokens == std::vector<int>{kA, kA});
  CHECK(r.finished);
  CHECK(std::abs(r.log_prob - std::log(0.3)) < 1e-12);

  std::mt19937_64 rng(4);
  for (int trial = 0; trial < 20; ++trial) {
    const std::uint64_t seed = rng();
    const oracle::TableModel random(6, [seed](const std::vector<int>& p) {
      return oracle::random_prefix_log_probs(seed, p, 6, 1.5);
    });
    std::vector<int> greedy = {token::kBos};
    double lp = 0.0;
    for (int step = 0; step < 5; ++step) {
      const Vector row = oracle::random_prefix_log_probs(seed, greedy, 6, 1.5);
      int best = 2;
      for (int v = 2; v < 6; ++v) {
        if (row(v) > row(best)) best = v;
      }
      lp += row(best);
      greedy.push_back(best);
      if (best == token::kEos) break;
    }
    const DecodeResult r1 = beam_search(random, table_options(1, 5));
    std::vector<int> expected(greedy.begin() + 1, greedy.end());
    if (!expected.empty() && expected.back() == token::kEos) expected.pop_back();
    CHECK(r1.tokens == expected);
    CHECK(std::abs(r1.log_prob - lp) < 1e-12);
  }
}

TEST_CASE("width 2 beats greedy on the three-step model and matches enumeration") {
  const oracle::TableModel model(5, three_step);
  const DecodeResult r = beam_search(model, table_options(2, 3));
  const oracle::Best best = oracle::enumerate_best(model, token::kBos, token::kEos, {token::kPad, token::kBos}, 3);
  CHECK(r.tokens == std::vector<int>{kB, kA});
  CHECK(r.tokens == best.tokens);
  CHECK(std::abs(r.log_prob - std::log(0.36)) < 1e-12);
  CHECK(std::abs(best.log_prob - std::log(0.36)) < 1e-12);
}

TEST_CASE("a wide enough beam returns the global maximizer") {
  std::mt19937_64 rng(5);
  for (int trial = 0; trial < 30; ++trial) {
    const int vocab = 3 + static_cast<int>(rng() % 3);
    const int max_len = 1 + static_cast<int>(rng() % 4);
    const std::uint64_t seed = rng();
    const oracle::TableModel model(vocab, [seed, vocab](const std::vector<int>& p) {
      return oracle::random_prefix_log_probs(seed, p, vocab, 2.0);
    });
    const BeamOptions o = table_options(static_cast<int>(std::pow(vocab, max_len)), max_len);
    const DecodeResult r = beam_search(model, o);
    const oracle::Best best = oracle::enumerate_best(model, o.bos, o.eos, o.banned, max_len);
    CAPTURE(trial);
    CHECK(r.finished);
    CHECK(r.tokens == best.tokens);
    CHECK(std::abs(r.log_prob - best.log_prob) < 1e-12);
  }
}

TEST_CASE("no finished hypothesis returns the best unfinished one, flagged") {
  const oracle::TableModel model(5, [](const std::vector<int>&) { return logs({0.0, 0.0, 0.0, 0.7, 0.3}); });
  const DecodeResult r = beam_search(model, table_options(2, 3));
  CHECK_FALSE(r.finished);
  CHECK(r.tokens == std::vector<int>{kA, kA, kA});
  CHECK(std::abs(r.log_prob - 3.0 * std::log(0.7)) < 1e-12);
}

TEST_CASE("guided beam search at the endpoints is plain beam search") {
  std::mt19937_64 rng(6);
  for (int trial = 0; trial < 10; ++trial) {
    const std::uint64_t st = rng();
    const std::uint64_t sm = rng();
    const oracle::ContextFreeEvaluator text(6, [st](const std::vector<int>& p) {
      return oracle::random_prefix_log_probs(st, p, 6, 1.5);
    });
    const oracle::ContextFreeEvaluator mm(6, [sm](const std::vector<int>& p) {
      return oracle::random_prefix_log_probs(sm, p, 6, 1.5);
    });
    const std::vector<int> src = {4, 5};
    const BeamOptions o = table_options(4, 5);
    const DecodeResult g0 = cfg_beam_search(text, mm, src, std::nullopt, 0.0, o);
    const DecodeResult g1 = cfg_beam_search(text, mm, src, std::nullopt, 1.0, o);
    const DecodeResult b0 = beam_search(text, src, std::nullopt, o);
    const DecodeResult b1 = beam_search(mm, src, std::nullopt, o);
    CHECK(g0.tokens == b0.tokens);
    CHECK(g0.log_prob == b0.log_prob);
    CHECK(g1.tokens == b1.tokens);
    CHECK(g1.log_prob == b1.log_prob);
  }
}

TEST_CASE("guided teacher forcing uses the per-step blend") {
  const oracle::ContextFreeEvaluator text(5, [](const std::vector<int>&) { return logs({1e-9, 1e-9, 0.2, 0.5, 0.3}); });
  const oracle::ContextFreeEvaluator mm(5, [](const std::vector<int>&) { return logs({1e-9, 1e-9, 0.3, 0.2, 0.5}); });
  const GuidedEvaluator guided(text, mm, 2.0);
  const std::vector<int> src = {4};
  const std::vector<int> tgt = {token::kBos, kB, token::kEos};
  const Matrix lp = guided.teacher_forced_log_probs(src, std::nullopt, tgt);
  const Vector expected = cfg_log_probs(logs({1e-9, 1e-9, 0.2, 0.5, 0.3}), logs({1e-9, 1e-9, 0.3, 0.2, 0.5}), 2.0);
  REQUIRE(lp.rows() == 2);
  CHECK((lp.row(0).transpose() - expected).cwiseAbs().maxCoeff() < 1e-12);
}

TEST_CASE("invalid beam options and mismatched vocabularies are errors") {
  const oracle::TableModel model(5, three_step);
  CHECK_THROWS(beam_search(model, table_options(0, 3)));
  CHECK_THROWS(beam_search(model, table_options(2, 0)));
  CHECK_THROWS_AS(cfg_distribution(probs({0.5, 0.5}), probs({0.2, 0.3, 0.5}), 2.0), ShapeError);
  CHECK(cfg_space_from_string(to_string(CfgSpace::prob_clip)) == CfgSpace::prob_clip);
}
