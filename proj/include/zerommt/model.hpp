// Transformer encoder-decoder with bottleneck adapters, a visual projector and
// a single visual token prepended to the encoder input.
//
// Parameters are split into the frozen base (text-only translation model) and
// the trainable extras (adapters + projector). Adapter up-projections start at
// zero, so a fresh model with no image reproduces the base model bit for bit.
#pragma once

#include "zerommt/json_util.hpp"
#include "zerommt/numerics.hpp"

#include <cstdint>
#include <filesystem>
#include <map>
#include <optional>
#include <random>
#include <span>
#include <string>
#include <vector>

namespace zerommt {

namespace token {
inline constexpr int kPad = 0;
inline constexpr int kBos = 1;
inline constexpr int kEos = 2;
inline constexpr int kMask = 3;
inline constexpr int kFirstWord = 4;
}  // namespace token

struct ModelConfig {
  int vocab_size = 64;
  int d_model = 64;
  int n_heads = 4;
  int n_layers_enc = 2;
  int n_layers_dec = 2;
  int d_ffn = 128;
  int image_dim = 16;
  int adapter_reduction = 8;
  int max_len = 24;
  bool visual_positional_encoding = false;

  [[nodiscard]] int adapter_width() const { return d_model / adapter_reduction; }
  /// Throws ConfigError on an inconsistent configuration.
  void validate() const;

  bool operator==(const ModelConfig&) const = default;
};

Json to_json(const ModelConfig& c);
ModelConfig model_config_from_json(const Json& j);

/// theta (base) and beta (extras). Every base tensor is frozen after
/// pretraining; every extras tensor is trainable.
struct ModelParams {
  ModelConfig config;
  std::map<std::string, Matrix> base;
  std::map<std::string, Matrix> extras;
  std::map<std::string, bool> frozen;

  [[nodiscard]] const Matrix& at(const std::string& name) const;
  [[nodiscard]] Matrix& at(const std::string& name);
  [[nodiscard]] bool is_frozen(const std::string& name) const { return frozen.at(name); }
  [[nodiscard]] std::size_t trainable_scalar_count() const;
  void set_group_frozen(bool base_frozen, bool extras_frozen);
};

ModelParams build_model(const ModelConfig& config, std::uint64_t seed);

/// Which variant of the network to run. `base` is the text-only model f_theta:
/// adapters are bypassed and any image is ignored.
enum class Variant { base, multimodal };

/// Which parameter group receives gradients in a forward pass.
enum class Trainable { none, base, extras };

/// Binds named parameters as graph leaves, once per graph.
class ParamBinder {
 public:
  ParamBinder(Graph& graph, const ModelParams& params, Trainable trainable);

  Var operator()(const std::string& name);
  [[nodiscard]] Graph& graph() const { return *graph_; }
  [[nodiscard]] const ModelParams& params() const { return *params_; }
  /// Gradients of every trainable leaf bound so far that received one.
  [[nodiscard]] std::map<std::string, Matrix> gradients() const;

 private:
  Graph* graph_;
  const ModelParams* params_;
  Trainable trainable_;
  std::map<std::string, Var> bound_;
};

struct SourceInput {
  std::vector<int> tokens;
  std::optional<Vector> image;
};

/// Packed encoder output for a batch. Rows [offsets[b], offsets[b+1]) belong
/// to example b; text_mask is false at visual positions.
struct EncodedBatch {
  Var states;
  std::vector<Eigen::Index> offsets;
  BoolMask text_mask;
};

/// Per decoder layer, one [Nq x Nk] cross-attention probability matrix per head.
using CrossAttentionTrace = std::vector<std::vector<Matrix>>;

EncodedBatch encode(ParamBinder& bind, Variant variant, std::span<const SourceInput> batch);

/// Teacher-forced decoder pass. Each prefix starts with BOS; the result packs
/// one logit row per prefix token, in order. Prefix p reads encoder segment
/// source_of_prefix[p] (or segment p when the mapping is empty).
Var decode_logits(ParamBinder& bind, Variant variant, const EncodedBatch& enc,
                  std::span<const std::vector<int>> prefixes, std::span<const int> source_of_prefix = {},
                  CrossAttentionTrace* trace = nullptr);

/// ReLU(W i + b) for one image, as a 1 x d_model row.
Var project_image(ParamBinder& bind, const Vector& image);

// ---- value-level convenience API --------------------------------------------

struct EncoderStates {
  Matrix states;
  std::vector<int> text_positions;
};

Vector project_image(const ModelParams& params, const Vector& image);
EncoderStates encode(const ModelParams& params, Variant variant, std::span<const int> source,
                     const std::optional<Vector>& image);
/// Next-token distribution after `prefix` (which starts with BOS).
Vector decode_step(const ModelParams& params, Variant variant, const EncoderStates& enc, std::span<const int> prefix,
                   CrossAttentionTrace* trace = nullptr);

struct MaskedSource {
  std::vector<int> tokens;
  std::vector<int> masked_positions;  // ascending
};

/// Replaces round(rate * n) positions (at least one when rate > 0), drawn
/// uniformly without replacement, by the MASK token.
MaskedSource apply_source_mask(std::span<const int> source, double mask_rate, std::mt19937_64& rng);

// ---- checkpoints ---------------------------------------------------------------

struct Checkpoint {
  ModelParams params;
  int step = 0;
  double selection_score = 0.0;
  std::string stage = "mmt";  // "base" for a pretrained text-only model
  Json run_config = Json::object();
};

inline constexpr std::uint32_t kCheckpointVersion = 1;

std::vector<std::uint8_t> serialize_checkpoint(const Checkpoint& ckpt);
Checkpoint deserialize_checkpoint(std::span<const std::uint8_t> bytes);
void save_checkpoint(const std::filesystem::path& path, const Checkpoint& ckpt);
Checkpoint load_checkpoint(const std::filesystem::path& path);

/// Little-endian bytes of every base tensor in name order.
std::vector<std::uint8_t> base_bytes(const ModelParams& params);

}  // namespace zerommt
