#include "zerommt/synthcorpus.hpp"

#include "zerommt/parallel.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <limits>
#include <numeric>
#include <stdexcept>

namespace zerommt {

void WorldSpec::validate() const {
  if (n_plain_words < 1) throw ConfigError("world.n_plain_words must be >= 1");
  if (n_ambiguous_words < 0) throw ConfigError("world.n_ambiguous_words must be >= 0");
  if (2 * n_ambiguous_words > n_plain_words) {
    throw ConfigError("world: need n_plain_words >= 2 * n_ambiguous_words so every sense has its own cue word");
  }
  if (n_ambiguous_words > 0 && n_plain_words < 3) throw ConfigError("world: too few plain words for filler");
  if (min_sentence_length < 2 || max_sentence_length < min_sentence_length) {
    throw ConfigError("world: sentence length range must satisfy 2 <= min <= max");
  }
  if (!(ambiguity_rate >= 0.0 && ambiguity_rate <= 1.0)) throw ConfigError("world.ambiguity_rate must be in [0, 1]");
  if (!(context_cue_rate >= 0.0 && context_cue_rate <= 1.0)) throw ConfigError("world.context_cue_rate must be in [0, 1]");
  if (image_dim < 1) throw ConfigError("world.image_dim must be >= 1");
  if (!(sense_cluster_separation > 0.0) || !std::isfinite(sense_cluster_separation)) {
    throw ConfigError("world.sense_cluster_separation must be positive");
  }
}

Json to_json(const WorldSpec& s) {
  return Json{{"n_plain_words", s.n_plain_words},
              {"n_ambiguous_words", s.n_ambiguous_words},
              {"min_sentence_length", s.min_sentence_length},
              {"max_sentence_length", s.max_sentence_length},
              {"ambiguity_rate", s.ambiguity_rate},
              {"context_cue_rate", s.context_cue_rate},
              {"image_dim", s.image_dim},
              {"sense_cluster_separation", s.sense_cluster_separation},
              {"seed", s.seed}};
}

WorldSpec world_spec_from_json(const Json& j) {
  constexpr std::string_view where = "world";
  reject_unknown_keys(j,
                      {"n_plain_words", "n_ambiguous_words", "min_sentence_length", "max_sentence_length",
                       "ambiguity_rate", "context_cue_rate", "image_dim", "sense_cluster_separation", "seed"},
                      where);
  WorldSpec s;
  read_optional(j, "n_plain_words", s.n_plain_words, where);
  read_optional(j, "n_ambiguous_words", s.n_ambiguous_words, where);
  read_optional(j, "min_sentence_length", s.min_sentence_length, where);
  read_optional(j, "max_sentence_length", s.max_sentence_length, where);
  read_optional(j, "ambiguity_rate", s.ambiguity_rate, where);
  read_optional(j, "context_cue_rate", s.context_cue_rate, where);
  read_optional(j, "image_dim", s.image_dim, where);
  read_optional(j, "sense_cluster_separation", s.sense_cluster_separation, where);
  read_optional(j, "seed", s.seed, where);
  s.validate();
  return s;
}

// ---- world ---------------------------------------------------------------------

SentenceInfo World::analyze(std::span<const int> src) const {
  SentenceInfo info;
  for (std::size_t p = 0; p < src.size(); ++p) {
    const auto it = std::find(src_ambiguous.begin(), src_ambiguous.end(), src[p]);
    if (it == src_ambiguous.end()) continue;
    info.ambiguous_word = static_cast<int>(it - src_ambiguous.begin());
    info.ambiguous_position = static_cast<int>(p);
    break;
  }
  if (info.ambiguous_word < 0) return info;
  const auto& c = cue[static_cast<std::size_t>(info.ambiguous_word)];
  for (int s = 0; s < 2; ++s) {
    if (std::find(src.begin(), src.end(), c[static_cast<std::size_t>(s)]) != src.end()) info.cued_sense = s;
  }
  return info;
}

std::vector<int> World::translate(std::span<const int> src, int sense) const {
  std::vector<int> out{token::kBos};
  for (int w : src) {
    const auto plain = std::find(src_plain.begin(), src_plain.end(), w);
    if (plain != src_plain.end()) {
      out.push_back(tgt_plain[static_cast<std::size_t>(plain - src_plain.begin())]);
      continue;
    }
    const auto amb = std::find(src_ambiguous.begin(), src_ambiguous.end(), w);
    if (amb == src_ambiguous.end()) throw std::invalid_argument("translate: token " + std::to_string(w) + " is not a source word");
    if (sense != 0 && sense != 1) throw std::invalid_argument("translate: ambiguous word needs sense 0 or 1");
    out.push_back(tgt_sense[static_cast<std::size_t>(amb - src_ambiguous.begin())][static_cast<std::size_t>(sense)]);
  }
  out.push_back(token::kEos);
  return out;
}

double World::noise_sigma() const {
  return 1.0 / (spec.sense_cluster_separation * std::sqrt(static_cast<double>(spec.image_dim)));
}

Vector World::neutral_image(std::mt19937_64& rng) const {
  std::normal_distribution<double> noise(0.0, noise_sigma());
  Vector v(spec.image_dim);
  for (Eigen::Index d = 0; d < v.size(); ++d) v(d) = noise(rng);
  return v;
}

Vector World::sense_image(int word, int sense, std::mt19937_64& rng) const {
  return centroids.at(static_cast<std::size_t>(word)).at(static_cast<std::size_t>(sense)) + neutral_image(rng);
}

std::pair<int, int> World::classify_image(const Vector& image) const {
  std::pair<int, int> best{-1, -1};
  double best_d = std::numeric_limits<double>::infinity();
  for (std::size_t k = 0; k < centroids.size(); ++k) {
    for (int s = 0; s < 2; ++s) {
      const double d = (image - centroids[k][static_cast<std::size_t>(s)]).squaredNorm();
      if (d < best_d) {
        best_d = d;
        best = {static_cast<int>(k), s};
      }
    }
  }
  return best;
}

World generate_world(const WorldSpec& spec, int vocab_limit) {
  spec.validate();
  if (spec.vocab_size() > vocab_limit) {
    throw ConfigError("world needs " + std::to_string(spec.vocab_size()) + " vocabulary entries but the model has " +
                      std::to_string(vocab_limit));
  }
  World w;
  w.spec = spec;
  std::mt19937_64 rng(spec.seed);
  const int P = spec.n_plain_words;
  const int A = spec.n_ambiguous_words;
  int next = token::kFirstWord;
  for (int i = 0; i < P; ++i) w.src_plain.push_back(next++);
  for (int k = 0; k < A; ++k) w.src_ambiguous.push_back(next++);
  const int tgt_plain_base = next;
  next += P;

  std::vector<int> perm(static_cast<std::size_t>(P));
  std::iota(perm.begin(), perm.end(), 0);
  std::shuffle(perm.begin(), perm.end(), rng);
  for (int i = 0; i < P; ++i) w.tgt_plain.push_back(tgt_plain_base + perm[static_cast<std::size_t>(i)]);

  std::normal_distribution<double> gauss(0.0, 1.0);
  for (int k = 0; k < A; ++k) {
    w.tgt_sense.push_back({next, next + 1});
    next += 2;
    w.cue.push_back({w.src_plain[static_cast<std::size_t>((2 * k) % P)],
                     w.src_plain[static_cast<std::size_t>((2 * k + 1) % P)]});
    std::array<Vector, 2> c;
    for (Vector& v : c) {
      v.resize(spec.image_dim);
      for (Eigen::Index d = 0; d < v.size(); ++d) v(d) = gauss(rng);
      v /= v.norm();
    }
    w.centroids.push_back(std::move(c));
  }
  return w;
}

// ---- splits ----------------------------------------------------------------------

Json to_json(const SplitSizes& s) {
  return Json{{"pretrain_parallel", s.pretrain_parallel}, {"mmt_train", s.mmt_train},
              {"val_contrastive", s.val_contrastive},     {"val_translation", s.val_translation},
              {"test_contrastive", s.test_contrastive},   {"test_translation", s.test_translation}};
}

SplitSizes split_sizes_from_json(const Json& j) {
  constexpr std::string_view where = "sizes";
  reject_unknown_keys(j,
                      {"pretrain_parallel", "mmt_train", "val_contrastive", "val_translation", "test_contrastive",
                       "test_translation"},
                      where);
  SplitSizes s;
  read_optional(j, "pretrain_parallel", s.pretrain_parallel, where);
  read_optional(j, "mmt_train", s.mmt_train, where);
  read_optional(j, "val_contrastive", s.val_contrastive, where);
  read_optional(j, "val_translation", s.val_translation, where);
  read_optional(j, "test_contrastive", s.test_contrastive, where);
  read_optional(j, "test_translation", s.test_translation, where);
  for (int n : {s.pretrain_parallel, s.mmt_train, s.val_contrastive, s.val_translation, s.test_contrastive,
                s.test_translation}) {
    if (n < 1) throw ConfigError("sizes: every split size must be >= 1");
  }
  return s;
}

namespace {

enum class SentenceKind { any, unambiguous, ambiguous_uncued };

struct Sentence {
  std::vector<int> src;
  int word = -1;
  int sense = -1;
};

/// One independent generator per (seed, split, index), so examples can be
/// produced in any order.
std::mt19937_64 example_rng(std::uint64_t seed, int split, int index) {
  std::seed_seq seq{static_cast<std::uint32_t>(seed), static_cast<std::uint32_t>(seed >> 32U),
                    static_cast<std::uint32_t>(split), static_cast<std::uint32_t>(index)};
  return std::mt19937_64(seq);
}

Sentence sample_sentence(const World& w, SentenceKind kind, std::mt19937_64& rng) {
  const WorldSpec& s = w.spec;
  std::uniform_int_distribution<int> len_dist(s.min_sentence_length, s.max_sentence_length);
  std::bernoulli_distribution ambiguous(s.ambiguity_rate);
  std::bernoulli_distribution cued(s.context_cue_rate);
  const int n = len_dist(rng);
  const int P = s.n_plain_words;
  const bool has_amb = s.n_ambiguous_words > 0 &&
                       (kind == SentenceKind::ambiguous_uncued || (kind == SentenceKind::any && ambiguous(rng)));

  Sentence out;
  out.src.resize(static_cast<std::size_t>(n));
  if (!has_amb) {
    std::uniform_int_distribution<int> word(0, P - 1);
    for (int& t : out.src) t = w.src_plain[static_cast<std::size_t>(word(rng))];
    return out;
  }

  out.word = std::uniform_int_distribution<int>(0, s.n_ambiguous_words - 1)(rng);
  out.sense = std::uniform_int_distribution<int>(0, 1)(rng);
  const auto& cues = w.cue[static_cast<std::size_t>(out.word)];
  std::vector<int> filler;
  for (int t : w.src_plain) {
    if (t != cues[0] && t != cues[1]) filler.push_back(t);
  }
  std::uniform_int_distribution<std::size_t> pick(0, filler.size() - 1);
  for (int& t : out.src) t = filler[pick(rng)];

  std::uniform_int_distribution<int> pos(0, n - 1);
  const int amb_pos = pos(rng);
  out.src[static_cast<std::size_t>(amb_pos)] = w.src_ambiguous[static_cast<std::size_t>(out.word)];
  if (kind == SentenceKind::any && cued(rng)) {
    int cue_pos = std::uniform_int_distribution<int>(0, n - 2)(rng);
    if (cue_pos >= amb_pos) ++cue_pos;
    out.src[static_cast<std::size_t>(cue_pos)] = cues[static_cast<std::size_t>(out.sense)];
  }
  return out;
}

enum SplitIndex : int { kPretrain = 0, kMmt = 1, kValC = 2, kValT = 3, kTestC = 4, kTestT = 5 };

std::vector<Example> make_examples(const World& w, std::uint64_t seed, int split, int count, SentenceKind kind,
                                   bool with_image) {
  std::vector<Example> out(static_cast<std::size_t>(count));
  for (int i = 0; i < count; ++i) {
    std::mt19937_64 rng = example_rng(seed, split, i);
    const Sentence s = sample_sentence(w, kind, rng);
    Example& e = out[static_cast<std::size_t>(i)];
    e.id = i;
    e.src = s.src;
    e.tgt = w.translate(s.src, s.sense < 0 ? 0 : s.sense);
    if (with_image) e.image = s.word < 0 ? w.neutral_image(rng) : w.sense_image(s.word, s.sense, rng);
  }
  return out;
}

std::vector<ContrastiveInstance> make_contrastive(const World& w, std::uint64_t seed, int split, int count) {
  std::vector<ContrastiveInstance> out;
  if (w.spec.n_ambiguous_words == 0) return out;
  out.resize(static_cast<std::size_t>(count));
  for (int i = 0; i < count; ++i) {
    std::mt19937_64 rng = example_rng(seed, split, i);
    const Sentence s = sample_sentence(w, SentenceKind::ambiguous_uncued, rng);
    ContrastiveInstance& c = out[static_cast<std::size_t>(i)];
    c.id = i;
    c.src = s.src;
    c.tgt_a = w.translate(s.src, 0);
    c.tgt_b = w.translate(s.src, 1);
    c.img_a = w.sense_image(s.word, 0, rng);
    c.img_b = w.sense_image(s.word, 1, rng);
  }
  return out;
}

}  // namespace

Splits generate_splits(const World& world, const SplitSizes& sizes, std::uint64_t seed) {
  Splits out;
  out.pretrain_parallel = make_examples(world, seed, kPretrain, sizes.pretrain_parallel, SentenceKind::any, false);
  out.mmt_train = make_examples(world, seed, kMmt, sizes.mmt_train, SentenceKind::any, true);
  out.val_contrastive = make_contrastive(world, seed, kValC, sizes.val_contrastive);
  out.val_translation = make_examples(world, seed, kValT, sizes.val_translation, SentenceKind::unambiguous, true);
  out.test_contrastive = make_contrastive(world, seed, kTestC, sizes.test_contrastive);
  out.test_translation = make_examples(world, seed, kTestT, sizes.test_translation, SentenceKind::unambiguous, true);
  if (world.spec.n_ambiguous_words == 0) {
    out.notes.emplace_back("world has no ambiguous words: contrastive splits are empty");
  }
  return out;
}

// ---- pseudo-translation -----------------------------------------------------------

TargetSource target_source_from_string(const std::string& s) {
  if (s == "pseudo") return TargetSource::pseudo;
  if (s == "gold") return TargetSource::gold;
  throw ConfigError("targets must be 'pseudo' or 'gold', got '" + s + "'");
}

std::string to_string(TargetSource t) { return t == TargetSource::pseudo ? "pseudo" : "gold"; }

Json PseudoTranslationReport::to_json() const {
  auto rate = [](int num, int den) { return den == 0 ? 0.0 : static_cast<double>(num) / static_cast<double>(den); };
  return Json{{"translated", translated},
              {"dropped", dropped},
              {"unambiguous", unambiguous},
              {"unambiguous_mismatch", unambiguous_mismatch},
              {"unambiguous_mismatch_rate", rate(unambiguous_mismatch, unambiguous)},
              {"cued", cued},
              {"cued_sense_match", cued_sense_match},
              {"cued_sense_match_rate", rate(cued_sense_match, cued)},
              {"uncued", uncued},
              {"uncued_sense_0", uncued_sense_counts[0]},
              {"uncued_sense_1", uncued_sense_counts[1]},
              {"uncued_other", uncued_other}};
}

PseudoTranslation pseudo_translate(const World& world, const Evaluator& frozen_base, std::span<const Example> examples,
                                   const BeamOptions& opts) {
  std::vector<DecodeResult> decoded(examples.size());
  parallel_for(examples.size(), [&](std::size_t i) {
    decoded[i] = beam_search(frozen_base, examples[i].src, std::nullopt, opts);
  });

  PseudoTranslation out;
  PseudoTranslationReport& r = out.report;
  for (std::size_t i = 0; i < examples.size(); ++i) {
    const DecodeResult& d = decoded[i];
    if (!d.finished) {
      ++r.dropped;
      continue;
    }
    ++r.translated;
    Example e = examples[i];
    e.tgt.assign(1, token::kBos);
    e.tgt.insert(e.tgt.end(), d.tokens.begin(), d.tokens.end());
    e.tgt.push_back(token::kEos);

    const SentenceInfo info = world.analyze(e.src);
    if (info.ambiguous_word < 0) {
      ++r.unambiguous;
      if (e.tgt != world.translate(e.src, 0)) ++r.unambiguous_mismatch;
    } else {
      const auto& senses = world.tgt_sense[static_cast<std::size_t>(info.ambiguous_word)];
      const auto at = static_cast<std::size_t>(info.ambiguous_position);
      const int produced = at < d.tokens.size() ? d.tokens[at] : -1;
      const int sense = produced == senses[0] ? 0 : produced == senses[1] ? 1 : -1;
      if (info.cued_sense >= 0) {
        ++r.cued;
        if (sense == info.cued_sense) ++r.cued_sense_match;
      } else {
        ++r.uncued;
        if (sense < 0) {
          ++r.uncued_other;
        } else {
          ++r.uncued_sense_counts[static_cast<std::size_t>(sense)];
        }
      }
    }
    out.examples.push_back(std::move(e));
  }
  return out;
}

// ---- JSONL ------------------------------------------------------------------------

namespace {

Json vector_json(const Vector& v) {
  Json a = Json::array();
  for (Eigen::Index i = 0; i < v.size(); ++i) a.push_back(v(i));
  return a;
}

Vector vector_from_json(const Json& j, const char* key) {
  if (!j.is_array()) throw std::runtime_error(std::string("'") + key + "' must be an array of numbers");
  Vector v(static_cast<Eigen::Index>(j.size()));
  for (std::size_t i = 0; i < j.size(); ++i) {
    if (!j[i].is_number()) throw std::runtime_error(std::string("'") + key + "' must be an array of numbers");
    v(static_cast<Eigen::Index>(i)) = j[i].get<double>();
  }
  return v;
}

std::vector<int> ids_from_json(const Json& j, const char* key) {
  if (!j.is_array()) throw std::runtime_error(std::string("'") + key + "' must be an array of token ids");
  std::vector<int> out;
  for (const Json& t : j) {
    if (!t.is_number_integer()) throw std::runtime_error(std::string("'") + key + "' must be an array of token ids");
    out.push_back(t.get<int>());
  }
  return out;
}

const Json& required(const Json& obj, const char* key) {
  const auto it = obj.find(key);
  if (it == obj.end()) throw std::runtime_error(std::string("missing key '") + key + "'");
  return *it;
}

template <typename T>
void write_jsonl(const std::filesystem::path& path, std::span<const T> items) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw std::runtime_error("cannot open " + path.string() + " for writing");
  for (const T& item : items) out << to_json(item).dump() << '\n';
  if (!out) throw std::runtime_error("write failed: " + path.string());
}

template <typename T, typename Parse>
std::vector<T> read_jsonl(const std::filesystem::path& path, Parse parse) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw std::runtime_error("cannot open " + path.string());
  std::vector<T> out;
  std::string line;
  int line_no = 0;
  while (std::getline(in, line)) {
    ++line_no;
    if (line.empty()) continue;
    try {
      out.push_back(parse(Json::parse(line)));
    } catch (const std::exception& e) {
      throw std::runtime_error(path.string() + ":" + std::to_string(line_no) + ": " + e.what());
    }
  }
  return out;
}

Example example_from_json(const Json& j) {
  reject_unknown_keys(j, {"id", "src", "tgt", "img"}, "example");
  Example e;
  e.id = required(j, "id").get<int>();
  e.src = ids_from_json(required(j, "src"), "src");
  e.tgt = ids_from_json(required(j, "tgt"), "tgt");
  if (const auto it = j.find("img"); it != j.end()) e.image = vector_from_json(*it, "img");
  return e;
}

ContrastiveInstance contrastive_from_json(const Json& j) {
  reject_unknown_keys(j, {"id", "src", "img_a", "tgt_a", "img_b", "tgt_b"}, "contrastive instance");
  ContrastiveInstance c;
  c.id = required(j, "id").get<int>();
  c.src = ids_from_json(required(j, "src"), "src");
  c.img_a = vector_from_json(required(j, "img_a"), "img_a");
  c.tgt_a = ids_from_json(required(j, "tgt_a"), "tgt_a");
  c.img_b = vector_from_json(required(j, "img_b"), "img_b");
  c.tgt_b = ids_from_json(required(j, "tgt_b"), "tgt_b");
  return c;
}

}  // namespace

Json to_json(const Example& e) {
  Json j{{"id", e.id}, {"src", e.src}, {"tgt", e.tgt}};
  if (e.image) j["img"] = vector_json(*e.image);
  return j;
}

Json to_json(const ContrastiveInstance& c) {
  return Json{{"id", c.id},          {"src", c.src},     {"img_a", vector_json(c.img_a)},
              {"tgt_a", c.tgt_a},    {"img_b", vector_json(c.img_b)}, {"tgt_b", c.tgt_b}};
}

void write_examples(const std::filesystem::path& path, std::span<const Example> examples) {
  write_jsonl(path, examples);
}

std::vector<Example> read_examples(const std::filesystem::path& path) {
  return read_jsonl<Example>(path, example_from_json);
}

void write_contrastive(const std::filesystem::path& path, std::span<const ContrastiveInstance> instances) {
  write_jsonl(path, instances);
}

std::vector<ContrastiveInstance> read_contrastive(const std::filesystem::path& path) {
  return read_jsonl<ContrastiveInstance>(path, contrastive_from_json);
}

void write_splits(const std::filesystem::path& dir, const Splits& splits) {
  std::filesystem::create_directories(dir);
  write_examples(dir / split_file::kPretrain, splits.pretrain_parallel);
  write_examples(dir / split_file::kMmtTrain, splits.mmt_train);
  write_contrastive(dir / split_file::kValContrastive, splits.val_contrastive);
  write_examples(dir / split_file::kValTranslation, splits.val_translation);
  write_contrastive(dir / split_file::kTestContrastive, splits.test_contrastive);
  write_examples(dir / split_file::kTestTranslation, splits.test_translation);
}

}  // namespace zerommt
