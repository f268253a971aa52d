#include "zerommt/model.hpp"

#include <algorithm>
#include <bit>
#include <cmath>
#include <cstring>
#include <fstream>
#include <numeric>

namespace zerommt {

static_assert(std::endian::native == std::endian::little, "checkpoint I/O assumes a little-endian host");

// ---- config ------------------------------------------------------------------

void ModelConfig::validate() const {
  auto fail = [](const std::string& msg) { throw ConfigError("model config: " + msg); };
  if (vocab_size <= token::kFirstWord) fail("vocab_size must exceed the 4 special tokens");
  if (d_model <= 0 || n_heads <= 0 || d_ffn <= 0 || image_dim <= 0 || max_len <= 0) fail("dimensions must be positive");
  if (n_layers_enc <= 0 || n_layers_dec <= 0) fail("layer counts must be positive");
  if (d_model % n_heads != 0) fail("d_model must be divisible by n_heads");
  if (adapter_reduction <= 0 || d_model / adapter_reduction < 1) fail("adapter bottleneck width must be >= 1");
}

Json to_json(const ModelConfig& c) {
  return Json{{"vocab_size", c.vocab_size},
              {"d_model", c.d_model},
              {"n_heads", c.n_heads},
              {"n_layers_enc", c.n_layers_enc},
              {"n_layers_dec", c.n_layers_dec},
              {"d_ffn", c.d_ffn},
              {"image_dim", c.image_dim},
              {"adapter_reduction", c.adapter_reduction},
              {"max_len", c.max_len},
              {"visual_positional_encoding", c.visual_positional_encoding}};
}

ModelConfig model_config_from_json(const Json& j) {
  constexpr std::string_view where = "model";
  reject_unknown_keys(j,
                      {"vocab_size", "d_model", "n_heads", "n_layers_enc", "n_layers_dec", "d_ffn", "image_dim",
                       "adapter_reduction", "max_len", "visual_positional_encoding"},
                      where);
  ModelConfig c;
  read_optional(j, "vocab_size", c.vocab_size, where);
  read_optional(j, "d_model", c.d_model, where);
  read_optional(j, "n_heads", c.n_heads, where);
  read_optional(j, "n_layers_enc", c.n_layers_enc, where);
  read_optional(j, "n_layers_dec", c.n_layers_dec, where);
  read_optional(j, "d_ffn", c.d_ffn, where);
  read_optional(j, "image_dim", c.image_dim, where);
  read_optional(j, "adapter_reduction", c.adapter_reduction, where);
  read_optional(j, "max_len", c.max_len, where);
  read_optional(j, "visual_positional_encoding", c.visual_positional_encoding, where);
  c.validate();
  return c;
}

// ---- parameters ----------------------------------------------------------------

const Matrix& ModelParams::at(const std::string& name) const {
  if (auto it = base.find(name); it != base.end()) return it->second;
  if (auto it = extras.find(name); it != extras.end()) return it->second;
  throw std::out_of_range("unknown parameter '" + name + "'");
}

Matrix& ModelParams::at(const std::string& name) {
  return const_cast<Matrix&>(std::as_const(*this).at(name));
}

std::size_t ModelParams::trainable_scalar_count() const {
  std::size_t n = 0;
  for (const auto* group : {&base, &extras}) {
    for (const auto& [name, m] : *group) {
      if (!frozen.at(name)) n += static_cast<std::size_t>(m.size());
    }
  }
  return n;
}

void ModelParams::set_group_frozen(bool base_frozen, bool extras_frozen) {
  for (const auto& [name, _] : base) frozen[name] = base_frozen;
  for (const auto& [name, _] : extras) frozen[name] = extras_frozen;
}

namespace {

std::string enc_name(int layer, const char* leaf) { return "enc." + std::to_string(layer) + "." + leaf; }
std::string dec_name(int layer, const char* leaf) { return "dec." + std::to_string(layer) + "." + leaf; }
std::string adapter_name(const char* side, int layer, const char* slot) {
  return std::string("adapter.") + side + "." + std::to_string(layer) + "." + slot;
}

class Initializer {
 public:
  explicit Initializer(std::uint64_t seed) : rng_(seed) {}

  Matrix uniform(Eigen::Index rows, Eigen::Index cols, double limit) {
    std::uniform_real_distribution<double> dist(-limit, limit);
    Matrix m(rows, cols);
    for (Eigen::Index i = 0; i < m.size(); ++i) m.data()[i] = dist(rng_);
    return m;
  }
  Matrix xavier(Eigen::Index rows, Eigen::Index cols) {
    return uniform(rows, cols, std::sqrt(6.0 / static_cast<double>(rows + cols)));
  }

 private:
  std::mt19937_64 rng_;
};

void add_layer_norm(std::map<std::string, Matrix>& group, const std::string& prefix, int d) {
  group[prefix + ".g"] = Matrix::Ones(1, d);
  group[prefix + ".b"] = Matrix::Zero(1, d);
}

void add_attention(std::map<std::string, Matrix>& group, Initializer& init, const std::string& prefix, int d) {
  for (const char* w : {".wq", ".wk", ".wv", ".wo"}) group[prefix + w] = init.xavier(d, d);
}

void add_ffn(std::map<std::string, Matrix>& group, Initializer& init, const std::string& prefix, int d, int f) {
  group[prefix + ".w1"] = init.xavier(d, f);
  group[prefix + ".b1"] = Matrix::Zero(1, f);
  group[prefix + ".w2"] = init.xavier(f, d);
  group[prefix + ".b2"] = Matrix::Zero(1, d);
}

void add_adapter(std::map<std::string, Matrix>& group, Initializer& init, const std::string& prefix, int d, int b) {
  group[prefix + ".down"] = init.xavier(d, b);
  group[prefix + ".down_b"] = Matrix::Zero(1, b);
  group[prefix + ".up"] = Matrix::Zero(b, d);
  group[prefix + ".up_b"] = Matrix::Zero(1, d);
}

Matrix sinusoidal_table(int rows, int d) {
  Matrix pe(rows, d);
  for (int pos = 0; pos < rows; ++pos) {
    for (int i = 0; i < d; ++i) {
      const double freq = std::pow(10000.0, -static_cast<double>(i - i % 2) / static_cast<double>(d));
      pe(pos, i) = (i % 2 == 0) ? std::sin(pos * freq) : std::cos(pos * freq);
    }
  }
  return pe;
}

}  // namespace

ModelParams build_model(const ModelConfig& config, std::uint64_t seed) {
  config.validate();
  const int d = config.d_model;
  const int f = config.d_ffn;
  const int b = config.adapter_width();
  Initializer init(seed);
  ModelParams p;
  p.config = config;

  p.base["embed"] = init.uniform(config.vocab_size, d, 1.0);
  for (int l = 0; l < config.n_layers_enc; ++l) {
    add_layer_norm(p.base, enc_name(l, "ln1"), d);
    add_attention(p.base, init, enc_name(l, "attn"), d);
    add_layer_norm(p.base, enc_name(l, "ln2"), d);
    add_ffn(p.base, init, enc_name(l, "ffn"), d, f);
  }
  add_layer_norm(p.base, "enc.ln_f", d);
  for (int l = 0; l < config.n_layers_dec; ++l) {
    add_layer_norm(p.base, dec_name(l, "ln1"), d);
    add_attention(p.base, init, dec_name(l, "self"), d);
    add_layer_norm(p.base, dec_name(l, "ln2"), d);
    add_attention(p.base, init, dec_name(l, "cross"), d);
    add_layer_norm(p.base, dec_name(l, "ln3"), d);
    add_ffn(p.base, init, dec_name(l, "ffn"), d, f);
  }
  add_layer_norm(p.base, "dec.ln_f", d);
  p.base["head.w"] = init.xavier(d, config.vocab_size);
  p.base["head.b"] = Matrix::Zero(1, config.vocab_size);

  for (int l = 0; l < config.n_layers_enc; ++l) {
    add_adapter(p.extras, init, adapter_name("enc", l, "attn"), d, b);
    add_adapter(p.extras, init, adapter_name("enc", l, "ffn"), d, b);
  }
  for (int l = 0; l < config.n_layers_dec; ++l) {
    add_adapter(p.extras, init, adapter_name("dec", l, "self"), d, b);
    add_adapter(p.extras, init, adapter_name("dec", l, "cross"), d, b);
    add_adapter(p.extras, init, adapter_name("dec", l, "ffn"), d, b);
  }
  // A zero projector would sit on the ReLU kink and never receive a gradient,
  // so its weight is random; the bias starts at zero.
  p.extras["projector.w"] = init.xavier(config.image_dim, d);
  p.extras["projector.b"] = Matrix::Zero(1, d);

  p.set_group_frozen(true, false);
  return p;
}

// ---- binder --------------------------------------------------------------------

ParamBinder::ParamBinder(Graph& graph, const ModelParams& params, Trainable trainable)
    : graph_(&graph), params_(&params), trainable_(trainable) {}

Var ParamBinder::operator()(const std::string& name) {
  if (auto it = bound_.find(name); it != bound_.end()) return it->second;
  const bool is_base = params_->base.contains(name);
  const bool trainable = (trainable_ == Trainable::base && is_base) || (trainable_ == Trainable::extras && !is_base);
  Var v = graph_->leaf(params_->at(name), trainable);
  bound_.emplace(name, v);
  return v;
}

std::map<std::string, Matrix> ParamBinder::gradients() const {
  std::map<std::string, Matrix> out;
  for (const auto& [name, v] : bound_) {
    if (const Matrix* g = graph_->grad(v)) out.emplace(name, *g);
  }
  return out;
}

// ---- forward pass ------------------------------------------------------------------

namespace {

const Matrix& positional_table(const ModelConfig& c) {
  // One extra row serves the visual token when it carries a position.
  thread_local std::map<std::pair<int, int>, Matrix> cache;
  auto key = std::make_pair(c.max_len + 1, c.d_model);
  auto it = cache.find(key);
  if (it == cache.end()) it = cache.emplace(key, sinusoidal_table(key.first, key.second)).first;
  return it->second;
}

Var adapter(ParamBinder& bind, const std::string& prefix, Var a) {
  Var hidden = relu(add_bias(matmul(a, bind(prefix + ".down")), bind(prefix + ".down_b")));
  Var delta = add_bias(matmul(hidden, bind(prefix + ".up")), bind(prefix + ".up_b"));
  return add(a, delta);
}

Var maybe_adapter(ParamBinder& bind, Variant variant, const std::string& prefix, Var a) {
  return variant == Variant::multimodal ? adapter(bind, prefix, a) : a;
}

Var attention_block(ParamBinder& bind, const std::string& prefix, Var queries, Var keys, const AttentionLayout& layout,
                    std::vector<Matrix>* trace) {
  Var q = matmul(queries, bind(prefix + ".wq"));
  Var k = matmul(keys, bind(prefix + ".wk"));
  Var v = matmul(keys, bind(prefix + ".wv"));
  return matmul(attention(q, k, v, layout, trace), bind(prefix + ".wo"));
}

Var ffn_block(ParamBinder& bind, const std::string& prefix, Var x) {
  Var h = relu(add_bias(matmul(x, bind(prefix + ".w1")), bind(prefix + ".b1")));
  return add_bias(matmul(h, bind(prefix + ".w2")), bind(prefix + ".b2"));
}

Var norm(ParamBinder& bind, const std::string& prefix, Var x) {
  return layer_norm(x, bind(prefix + ".g"), bind(prefix + ".b"));
}

void check_tokens(std::span<const int> ids, const ModelConfig& c, const char* what) {
  if (ids.empty()) throw std::invalid_argument(std::string(what) + ": empty sequence");
  if (static_cast<int>(ids.size()) > c.max_len) {
    throw std::invalid_argument(std::string(what) + ": length " + std::to_string(ids.size()) + " exceeds max_len " +
                                std::to_string(c.max_len));
  }
  for (int t : ids) {
    if (t < 0 || t >= c.vocab_size) throw std::invalid_argument(std::string(what) + ": token " + std::to_string(t) + " outside vocab");
  }
}

}  // namespace

Var project_image(ParamBinder& bind, const Vector& image) {
  const ModelConfig& c = bind.params().config;
  if (image.size() != c.image_dim) {
    throw std::invalid_argument("project_image: image has " + std::to_string(image.size()) + " values, expected " +
                                std::to_string(c.image_dim));
  }
  Var row = bind.graph().constant(image.transpose());
  return relu(add_bias(matmul(row, bind("projector.w")), bind("projector.b")));
}

EncodedBatch encode(ParamBinder& bind, Variant variant, std::span<const SourceInput> batch) {
  const ModelConfig& c = bind.params().config;
  if (batch.empty()) throw std::invalid_argument("encode: empty batch");
  Graph& g = bind.graph();
  const Matrix& pe = positional_table(c);

  std::vector<int> ids;
  for (const SourceInput& s : batch) {
    check_tokens(s.tokens, c, "encode");
    ids.insert(ids.end(), s.tokens.begin(), s.tokens.end());
  }
  Matrix positions(static_cast<Eigen::Index>(ids.size()), c.d_model);
  {
    Eigen::Index row = 0;
    for (const SourceInput& s : batch) {
      for (std::size_t p = 0; p < s.tokens.size(); ++p) positions.row(row++) = pe.row(static_cast<Eigen::Index>(p));
    }
  }
  Var x = add(embedding(bind("embed"), ids), g.constant(std::move(positions)));

  const bool visual = variant == Variant::multimodal;
  std::vector<Var> visual_rows;
  if (visual) {
    for (const SourceInput& s : batch) {
      if (!s.image) continue;
      Var v = project_image(bind, *s.image);
      if (c.visual_positional_encoding) v = add(v, g.constant(pe.row(c.max_len)));
      visual_rows.push_back(v);
    }
  }

  EncodedBatch enc;
  enc.offsets.push_back(0);
  if (!visual_rows.empty()) {
    // Interleave: [visual_b] ++ text_b for every example with an image.
    std::vector<Var> parts{x};
    parts.insert(parts.end(), visual_rows.begin(), visual_rows.end());
    Var stacked = concat_rows(parts);
    std::vector<int> order;
    std::vector<bool> is_text;
    int text_at = 0;
    int visual_at = static_cast<int>(ids.size());
    for (const SourceInput& s : batch) {
      if (s.image) {
        order.push_back(visual_at++);
        is_text.push_back(false);
      }
      for (std::size_t p = 0; p < s.tokens.size(); ++p) {
        order.push_back(text_at++);
        is_text.push_back(true);
      }
      enc.offsets.push_back(static_cast<Eigen::Index>(order.size()));
    }
    x = embedding(stacked, order);
    enc.text_mask = BoolMask(static_cast<Eigen::Index>(is_text.size()));
    for (std::size_t i = 0; i < is_text.size(); ++i) enc.text_mask(static_cast<Eigen::Index>(i)) = is_text[i];
  } else {
    for (const SourceInput& s : batch) enc.offsets.push_back(enc.offsets.back() + static_cast<Eigen::Index>(s.tokens.size()));
    enc.text_mask = BoolMask::Constant(static_cast<Eigen::Index>(ids.size()), true);
  }

  AttentionLayout self_layout;
  self_layout.n_heads = c.n_heads;
  for (std::size_t b = 0; b + 1 < enc.offsets.size(); ++b) {
    const Eigen::Index len = enc.offsets[b + 1] - enc.offsets[b];
    self_layout.segments.push_back({enc.offsets[b], len, enc.offsets[b], len});
  }

  for (int l = 0; l < c.n_layers_enc; ++l) {
    Var h = norm(bind, enc_name(l, "ln1"), x);
    Var a = attention_block(bind, enc_name(l, "attn"), h, h, self_layout, nullptr);
    x = add(x, maybe_adapter(bind, variant, adapter_name("enc", l, "attn"), a));
    Var f = ffn_block(bind, enc_name(l, "ffn"), norm(bind, enc_name(l, "ln2"), x));
    x = add(x, maybe_adapter(bind, variant, adapter_name("enc", l, "ffn"), f));
  }
  enc.states = norm(bind, "enc.ln_f", x);
  return enc;
}

Var decode_logits(ParamBinder& bind, Variant variant, const EncodedBatch& enc, std::span<const std::vector<int>> prefixes,
                  std::span<const int> source_of_prefix, CrossAttentionTrace* trace) {
  const ModelConfig& c = bind.params().config;
  const std::size_t n_sources = enc.offsets.size() - 1;
  if (prefixes.empty()) throw std::invalid_argument("decode: no prefixes");
  if (source_of_prefix.empty() && prefixes.size() != n_sources) {
    throw std::invalid_argument("decode: " + std::to_string(prefixes.size()) + " prefixes for " + std::to_string(n_sources) +
                                " encoded sources");
  }
  if (!source_of_prefix.empty() && source_of_prefix.size() != prefixes.size()) {
    throw std::invalid_argument("decode: source mapping length differs from prefix count");
  }
  Graph& g = bind.graph();
  const Matrix& pe = positional_table(c);

  std::vector<int> ids;
  AttentionLayout self_layout;
  AttentionLayout cross_layout;
  self_layout.n_heads = cross_layout.n_heads = c.n_heads;
  self_layout.causal = true;
  cross_layout.key_allowed = enc.text_mask;
  for (std::size_t p = 0; p < prefixes.size(); ++p) {
    const std::vector<int>& prefix = prefixes[p];
    if (static_cast<int>(prefix.size()) > c.max_len) {
      throw std::invalid_argument("decode: prefix length " + std::to_string(prefix.size()) + " exceeds max_len " +
                                  std::to_string(c.max_len));
    }
    check_tokens(prefix, c, "decode");
    if (prefix.front() != token::kBos) throw std::invalid_argument("decode: prefix must start with BOS");
    const auto q_begin = static_cast<Eigen::Index>(ids.size());
    const auto len = static_cast<Eigen::Index>(prefix.size());
    const int src = source_of_prefix.empty() ? static_cast<int>(p) : source_of_prefix[p];
    if (src < 0 || static_cast<std::size_t>(src) >= n_sources) throw std::invalid_argument("decode: bad source index");
    self_layout.segments.push_back({q_begin, len, q_begin, len});
    cross_layout.segments.push_back(
        {q_begin, len, enc.offsets[static_cast<std::size_t>(src)], enc.offsets[static_cast<std::size_t>(src) + 1] - enc.offsets[static_cast<std::size_t>(src)]});
    ids.insert(ids.end(), prefix.begin(), prefix.end());
  }
  Matrix positions(static_cast<Eigen::Index>(ids.size()), c.d_model);
  {
    Eigen::Index row = 0;
    for (const auto& prefix : prefixes) {
      for (std::size_t p = 0; p < prefix.size(); ++p) positions.row(row++) = pe.row(static_cast<Eigen::Index>(p));
    }
  }
  Var x = add(embedding(bind("embed"), ids), g.constant(std::move(positions)));
  if (trace) trace->assign(static_cast<std::size_t>(c.n_layers_dec), {});

  for (int l = 0; l < c.n_layers_dec; ++l) {
    Var h = norm(bind, dec_name(l, "ln1"), x);
    Var a = attention_block(bind, dec_name(l, "self"), h, h, self_layout, nullptr);
    x = add(x, maybe_adapter(bind, variant, adapter_name("dec", l, "self"), a));
    Var hc = norm(bind, dec_name(l, "ln2"), x);
    Var ca = attention_block(bind, dec_name(l, "cross"), hc, enc.states, cross_layout,
                             trace ? &(*trace)[static_cast<std::size_t>(l)] : nullptr);
    x = add(x, maybe_adapter(bind, variant, adapter_name("dec", l, "cross"), ca));
    Var f = ffn_block(bind, dec_name(l, "ffn"), norm(bind, dec_name(l, "ln3"), x));
    x = add(x, maybe_adapter(bind, variant, adapter_name("dec", l, "ffn"), f));
  }
  Var out = norm(bind, "dec.ln_f", x);
  return add_bias(matmul(out, bind("head.w")), bind("head.b"));
}

// ---- value-level API -------------------------------------------------------------------

Vector project_image(const ModelParams& params, const Vector& image) {
  Graph g;
  ParamBinder bind(g, params, Trainable::none);
  return project_image(bind, image).value().row(0).transpose();
}

EncoderStates encode(const ModelParams& params, Variant variant, std::span<const int> source,
                     const std::optional<Vector>& image) {
  Graph g;
  ParamBinder bind(g, params, Trainable::none);
  const SourceInput in{std::vector<int>(source.begin(), source.end()), image};
  EncodedBatch enc = encode(bind, variant, std::span<const SourceInput>(&in, 1));
  EncoderStates out;
  out.states = enc.states.value();
  for (Eigen::Index i = 0; i < enc.text_mask.size(); ++i) {
    if (enc.text_mask(i)) out.text_positions.push_back(static_cast<int>(i));
  }
  return out;
}

Vector decode_step(const ModelParams& params, Variant variant, const EncoderStates& enc, std::span<const int> prefix,
                   CrossAttentionTrace* trace) {
  Graph g;
  ParamBinder bind(g, params, Trainable::none);
  EncodedBatch batch;
  batch.states = g.constant(enc.states);
  batch.offsets = {0, enc.states.rows()};
  batch.text_mask = BoolMask::Constant(enc.states.rows(), false);
  for (int p : enc.text_positions) batch.text_mask(p) = true;
  const std::vector<int> pre(prefix.begin(), prefix.end());
  Var logits = decode_logits(bind, variant, batch, std::span<const std::vector<int>>(&pre, 1), {}, trace);
  return softmax(logits.value().row(logits.rows() - 1).transpose());
}

MaskedSource apply_source_mask(std::span<const int> source, double mask_rate, std::mt19937_64& rng) {
  if (!(mask_rate >= 0.0 && mask_rate <= 1.0)) throw std::invalid_argument("apply_source_mask: rate outside [0, 1]");
  const auto n = static_cast<int>(source.size());
  int count = static_cast<int>(std::lround(mask_rate * n));
  if (mask_rate > 0.0 && n > 0) count = std::max(count, 1);
  count = std::min(count, n);
  std::vector<int> idx(static_cast<std::size_t>(n));
  std::iota(idx.begin(), idx.end(), 0);
  // Partial Fisher-Yates: the first `count` slots are a uniform sample.
  for (int i = 0; i < count; ++i) {
    std::uniform_int_distribution<int> pick(i, n - 1);
    std::swap(idx[static_cast<std::size_t>(i)], idx[static_cast<std::size_t>(pick(rng))]);
  }
  MaskedSource out;
  out.tokens.assign(source.begin(), source.end());
  out.masked_positions.assign(idx.begin(), idx.begin() + count);
  std::sort(out.masked_positions.begin(), out.masked_positions.end());
  for (int p : out.masked_positions) out.tokens[static_cast<std::size_t>(p)] = token::kMask;
  return out;
}

// ---- checkpoints ---------------------------------------------------------------------

namespace {

constexpr char kMagic[8] = {'Z', 'M', 'M', 'T', 'C', 'K', 'P', 'T'};

template <typename T>
void put(std::vector<std::uint8_t>& out, T v) {
  const auto* p = reinterpret_cast<const std::uint8_t*>(&v);
  out.insert(out.end(), p, p + sizeof(T));
}

class Reader {
 public:
  explicit Reader(std::span<const std::uint8_t> bytes) : bytes_(bytes) {}
  template <typename T>
  T get() {
    need(sizeof(T));
    T v;
    std::memcpy(&v, bytes_.data() + at_, sizeof(T));
    at_ += sizeof(T);
    return v;
  }
  std::string string(std::size_t n) {
    need(n);
    std::string s(reinterpret_cast<const char*>(bytes_.data() + at_), n);
    at_ += n;
    return s;
  }
  void doubles(double* dst, std::size_t n) {
    need(n * sizeof(double));
    std::memcpy(dst, bytes_.data() + at_, n * sizeof(double));
    at_ += n * sizeof(double);
  }
  [[nodiscard]] bool done() const { return at_ == bytes_.size(); }

 private:
  void need(std::size_t n) const {
    if (bytes_.size() - at_ < n) throw std::runtime_error("checkpoint: truncated at byte " + std::to_string(at_));
  }
  std::span<const std::uint8_t> bytes_;
  std::size_t at_ = 0;
};

void put_tensor(std::vector<std::uint8_t>& out, const std::string& name, const Matrix& m, std::uint8_t group, bool frozen) {
  put<std::uint32_t>(out, static_cast<std::uint32_t>(name.size()));
  out.insert(out.end(), name.begin(), name.end());
  put<std::uint8_t>(out, group);
  put<std::uint8_t>(out, frozen ? 1 : 0);
  put<std::uint64_t>(out, static_cast<std::uint64_t>(m.rows()));
  put<std::uint64_t>(out, static_cast<std::uint64_t>(m.cols()));
  const auto* p = reinterpret_cast<const std::uint8_t*>(m.data());
  out.insert(out.end(), p, p + m.size() * static_cast<Eigen::Index>(sizeof(double)));
}

}  // namespace

std::vector<std::uint8_t> serialize_checkpoint(const Checkpoint& ckpt) {
  std::vector<std::uint8_t> out(std::begin(kMagic), std::end(kMagic));
  put<std::uint32_t>(out, kCheckpointVersion);
  const Json header{{"model", to_json(ckpt.params.config)},
                    {"step", ckpt.step},
                    {"selection_score", ckpt.selection_score},
                    {"stage", ckpt.stage},
                    {"run_config", ckpt.run_config}};
  const std::string text = header.dump();
  put<std::uint64_t>(out, text.size());
  out.insert(out.end(), text.begin(), text.end());
  put<std::uint64_t>(out, ckpt.params.base.size() + ckpt.params.extras.size());
  for (const auto& [name, m] : ckpt.params.base) put_tensor(out, name, m, 0, ckpt.params.frozen.at(name));
  for (const auto& [name, m] : ckpt.params.extras) put_tensor(out, name, m, 1, ckpt.params.frozen.at(name));
  return out;
}

Checkpoint deserialize_checkpoint(std::span<const std::uint8_t> bytes) {
  Reader r(bytes);
  if (r.string(sizeof(kMagic)) != std::string(kMagic, sizeof(kMagic))) throw std::runtime_error("checkpoint: bad magic");
  const auto version = r.get<std::uint32_t>();
  if (version != kCheckpointVersion) throw std::runtime_error("checkpoint: unsupported version " + std::to_string(version));
  const Json header = Json::parse(r.string(r.get<std::uint64_t>()));
  Checkpoint ckpt;
  ckpt.params.config = model_config_from_json(header.at("model"));
  ckpt.step = header.at("step").get<int>();
  ckpt.selection_score = header.at("selection_score").get<double>();
  ckpt.stage = header.at("stage").get<std::string>();
  ckpt.run_config = header.at("run_config");
  const auto count = r.get<std::uint64_t>();
  for (std::uint64_t t = 0; t < count; ++t) {
    const std::string name = r.string(r.get<std::uint32_t>());
    const auto group = r.get<std::uint8_t>();
    const auto frozen = r.get<std::uint8_t>();
    const auto rows = r.get<std::uint64_t>();
    const auto cols = r.get<std::uint64_t>();
    Matrix m(static_cast<Eigen::Index>(rows), static_cast<Eigen::Index>(cols));
    r.doubles(m.data(), static_cast<std::size_t>(m.size()));
    if (group > 1) throw std::runtime_error("checkpoint: tensor '" + name + "' has unknown group");
    (group == 0 ? ckpt.params.base : ckpt.params.extras)[name] = std::move(m);
    ckpt.params.frozen[name] = frozen != 0;
  }
  if (!r.done()) throw std::runtime_error("checkpoint: trailing bytes");
  return ckpt;
}

void save_checkpoint(const std::filesystem::path& path, const Checkpoint& ckpt) {
  const auto bytes = serialize_checkpoint(ckpt);
  std::ofstream out(path, std::ios::binary);
  if (!out) throw std::runtime_error("cannot write checkpoint " + path.string());
  out.write(reinterpret_cast<const char*>(bytes.data()), static_cast<std::streamsize>(bytes.size()));
}

Checkpoint load_checkpoint(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw std::runtime_error("cannot read checkpoint " + path.string());
  std::vector<std::uint8_t> bytes((std::istreambuf_iterator<char>(in)), std::istreambuf_iterator<char>());
  return deserialize_checkpoint(bytes);
}

std::vector<std::uint8_t> base_bytes(const ModelParams& params) {
  std::vector<std::uint8_t> out;
  for (const auto& [name, m] : params.base) put_tensor(out, name, m, 0, true);
  return out;
}

}  // namespace zerommt
