// Synthetic bilingual world with ambiguous words whose translation depends on
// a sense that only a context cue or an image reveals.
//
// Vocabulary layout (one shared id space):
//   0..3                       PAD BOS EOS MASK
//   [src_plain]                source words with one translation
//   [src_ambiguous]            source words with two sense translations
//   [tgt_plain]                translations of src_plain (seeded permutation)
//   [tgt_sense]                2 per ambiguous word, index 2k + s
//
// Sentences translate word by word. The cue for sense s of ambiguous word k
// is the plain source word (2k + s) mod n_plain.
#pragma once

#include "zerommt/decoding.hpp"
#include "zerommt/example.hpp"

#include <array>
#include <cstdint>
#include <filesystem>
#include <random>
#include <span>
#include <string>
#include <vector>

namespace zerommt {

struct WorldSpec {
  int n_plain_words = 18;
  int n_ambiguous_words = 8;
  int min_sentence_length = 3;
  int max_sentence_length = 6;
  double ambiguity_rate = 0.6;
  double context_cue_rate = 0.9;
  int image_dim = 16;
  double sense_cluster_separation = 3.0;
  std::uint64_t seed = 17;

  [[nodiscard]] int vocab_size() const { return token::kFirstWord + 2 * n_plain_words + 3 * n_ambiguous_words; }
  void validate() const;
};

Json to_json(const WorldSpec& s);
WorldSpec world_spec_from_json(const Json& j);

/// What a source sentence contains.
struct SentenceInfo {
  int ambiguous_word = -1;      // index k, or -1
  int ambiguous_position = -1;  // position in the source
  int cued_sense = -1;          // sense revealed by a cue word, or -1
};

struct World {
  WorldSpec spec;
  std::vector<int> src_plain;
  std::vector<int> src_ambiguous;
  std::vector<int> tgt_plain;                // tgt_plain[i] translates src_plain[i]
  std::vector<std::array<int, 2>> tgt_sense;  // per ambiguous word
  std::vector<std::array<int, 2>> cue;        // cue source word per (k, s)
  std::vector<std::array<Vector, 2>> centroids;

  [[nodiscard]] int vocab_size() const { return spec.vocab_size(); }
  [[nodiscard]] SentenceInfo analyze(std::span<const int> src) const;
  /// BOS + word-by-word translation + EOS, with `sense` for the ambiguous word.
  [[nodiscard]] std::vector<int> translate(std::span<const int> src, int sense) const;
  [[nodiscard]] Vector sense_image(int word, int sense, std::mt19937_64& rng) const;
  /// Image of a scene with no ambiguous object: noise only.
  [[nodiscard]] Vector neutral_image(std::mt19937_64& rng) const;
  [[nodiscard]] double noise_sigma() const;
  /// Nearest-centroid sense classification: returns (word, sense).
  [[nodiscard]] std::pair<int, int> classify_image(const Vector& image) const;
};

/// Throws ConfigError when the lexicon would exceed `vocab_limit`.
World generate_world(const WorldSpec& spec, int vocab_limit);

struct SplitSizes {
  int pretrain_parallel = 60000;
  int mmt_train = 8000;
  int val_contrastive = 64;
  int val_translation = 64;
  int test_contrastive = 512;
  int test_translation = 256;
};

Json to_json(const SplitSizes& s);
SplitSizes split_sizes_from_json(const Json& j);

struct Splits {
  std::vector<Example> pretrain_parallel;
  std::vector<Example> mmt_train;
  std::vector<ContrastiveInstance> val_contrastive;
  std::vector<Example> val_translation;
  std::vector<ContrastiveInstance> test_contrastive;
  std::vector<Example> test_translation;
  std::vector<std::string> notes;
};

/// Every split is a pure function of (world, sizes, seed).
Splits generate_splits(const World& world, const SplitSizes& sizes, std::uint64_t seed);

enum class TargetSource { pseudo, gold };
TargetSource target_source_from_string(const std::string& s);
std::string to_string(TargetSource t);

struct PseudoTranslationReport {
  int translated = 0;
  int dropped = 0;
  int unambiguous = 0;
  int unambiguous_mismatch = 0;
  int cued = 0;
  int cued_sense_match = 0;
  int uncued = 0;
  std::array<int, 2> uncued_sense_counts{0, 0};
  int uncued_other = 0;

  [[nodiscard]] Json to_json() const;
};

struct PseudoTranslation {
  std::vector<Example> examples;
  PseudoTranslationReport report;
};

/// Replaces every target by the frozen model's beam translation of the source
/// (the image is not shown). Unfinished decodes are dropped.
PseudoTranslation pseudo_translate(const World& world, const Evaluator& frozen_base, std::span<const Example> examples,
                                   const BeamOptions& opts);

// ---- JSONL files ----------------------------------------------------------------

Json to_json(const Example& e);
Json to_json(const ContrastiveInstance& c);

void write_examples(const std::filesystem::path& path, std::span<const Example> examples);
std::vector<Example> read_examples(const std::filesystem::path& path);
void write_contrastive(const std::filesystem::path& path, std::span<const ContrastiveInstance> instances);
std::vector<ContrastiveInstance> read_contrastive(const std::filesystem::path& path);

/// File names of the six splits inside a corpus directory.
namespace split_file {
inline constexpr const char* kPretrain = "pretrain_parallel.jsonl";
inline constexpr const char* kMmtTrain = "mmt_train.jsonl";
inline constexpr const char* kMmtTrainPseudo = "mmt_train_pseudo.jsonl";
inline constexpr const char* kValContrastive = "val_contrastive.jsonl";
inline constexpr const char* kValTranslation = "val_translation.jsonl";
inline constexpr const char* kTestContrastive = "test_contrastive.jsonl";
inline constexpr const char* kTestTranslation = "test_translation.jsonl";
inline constexpr const char* kWorld = "world.json";
}  // namespace split_file

void write_splits(const std::filesystem::path& dir, const Splits& splits);

}  // namespace zerommt
