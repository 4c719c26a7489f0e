#include "condigsum/model.hpp"

#include <bit>
#include <cmath>
#include <cstring>
#include <fstream>
#include <istream>
#include <ostream>

#include <nlohmann/json.hpp>

#include "condigsum/error.hpp"

namespace condigsum {

using nlohmann::json;

void ModelConfig::validate() const {
  auto positive = [](std::size_t v, const char* name) {
    if (v < 1) throw ValidationError(std::string("model config: ") + name + " must be >= 1");
  };
  positive(vocab_size, "vocab_size");
  positive(d_model, "d_model");
  positive(n_heads, "n_heads");
  positive(ffn_dim, "ffn_dim");
  positive(n_encoder_layers, "n_encoder_layers");
  positive(n_decoder_layers, "n_decoder_layers");
  positive(max_positions, "max_positions");
  if (d_model % n_heads != 0) {
    throw ValidationError("model config: d_model " + std::to_string(d_model) +
                          " is not divisible by n_heads " + std::to_string(n_heads));
  }
  if (!(dropout >= 0.0 && dropout < 1.0)) {
    throw ValidationError("model config: dropout must lie in [0, 1)");
  }
}

json to_json(const ModelConfig& c) {
  return {{"vocab_size", c.vocab_size},
          {"d_model", c.d_model},
          {"n_heads", c.n_heads},
          {"ffn_dim", c.ffn_dim},
          {"n_encoder_layers", c.n_encoder_layers},
          {"n_decoder_layers", c.n_decoder_layers},
          {"max_positions", c.max_positions},
          {"dropout", c.dropout},
          {"pooling", c.pooling == Pooling::kMean ? "mean" : "first"}};
}

ModelConfig model_config_from_json(const json& j) {
  ModelConfig c;
  try {
    c.vocab_size = j.value("vocab_size", c.vocab_size);
    c.d_model = j.value("d_model", c.d_model);
    c.n_heads = j.value("n_heads", c.n_heads);
    c.ffn_dim = j.value("ffn_dim", c.ffn_dim);
    c.n_encoder_layers = j.value("n_encoder_layers", c.n_encoder_layers);
    c.n_decoder_layers = j.value("n_decoder_layers", c.n_decoder_layers);
    c.max_positions = j.value("max_positions", c.max_positions);
    c.dropout = j.value("dropout", c.dropout);
    const std::string pooling = j.value("pooling", std::string("mean"));
    if (pooling == "mean") {
      c.pooling = Pooling::kMean;
    } else if (pooling == "first") {
      c.pooling = Pooling::kFirst;
    } else {
      throw ParseError("model config: unknown pooling '" + pooling + "'");
    }
  } catch (const json::exception& e) {
    throw ParseError(std::string("model config: ") + e.what());
  }
  return c;
}

template <typename T>
Transformer<T>::Transformer(const ModelConfig& config, std::uint64_t seed) : config_(config) {
  config_.validate();
  Rng rng(seed);
  const std::size_t d = config_.d_model;
  token_embedding_ = add("embed.tokens", config_.vocab_size, d, Partition::kEncoder, &rng);
  position_embedding_ =
      add("embed.positions", config_.max_positions, d, Partition::kEncoder, &rng);
  for (std::size_t l = 0; l < config_.n_encoder_layers; ++l) {
    const std::string pre = "encoder.layer" + std::to_string(l) + ".";
    EncoderLayer layer{};
    layer.ln_attn = add_norm(pre + "ln_attn", Partition::kEncoder);
    layer.self_attn = add_attention(pre + "self_attn", Partition::kEncoder, rng);
    layer.ln_ffn = add_norm(pre + "ln_ffn", Partition::kEncoder);
    layer.ffn = add_ffn(pre + "ffn", Partition::kEncoder, rng);
    encoder_.push_back(layer);
  }
  encoder_norm_ = add_norm("encoder.ln_final", Partition::kEncoder);
  for (std::size_t l = 0; l < config_.n_decoder_layers; ++l) {
    const std::string pre = "decoder.layer" + std::to_string(l) + ".";
    DecoderLayer layer{};
    layer.ln_self = add_norm(pre + "ln_self", Partition::kDecoder);
    layer.self_attn = add_attention(pre + "self_attn", Partition::kDecoder, rng);
    layer.ln_cross = add_norm(pre + "ln_cross", Partition::kDecoder);
    layer.cross_attn = add_attention(pre + "cross_attn", Partition::kDecoder, rng);
    layer.ln_ffn = add_norm(pre + "ln_ffn", Partition::kDecoder);
    layer.ffn = add_ffn(pre + "ffn", Partition::kDecoder, rng);
    decoder_.push_back(layer);
  }
  decoder_norm_ = add_norm("decoder.ln_final", Partition::kDecoder);
  output_bias_ = add("output.bias", 1, config_.vocab_size, Partition::kDecoder, nullptr);
  regressor_weight_ = add("regressor.weight", 1, d, Partition::kEncoder, &rng);
  regressor_bias_ = add("regressor.bias", 1, 1, Partition::kEncoder, nullptr);
}

template <typename T>
std::size_t Transformer<T>::add(std::string name, std::size_t rows, std::size_t cols,
                                Partition part, Rng* init_rng) {
  Parameter<T> param{std::move(name), Tensor<T>(rows, cols), Tensor<T>(rows, cols)};
  if (init_rng != nullptr) {
    for (auto& x : param.value.data()) x = static_cast<T>(0.02 * standard_normal(*init_rng));
  }
  params_.push_back(std::move(param));
  partitions_.push_back(part);
  return params_.size() - 1;
}

template <typename T>
typename Transformer<T>::AttentionParams Transformer<T>::add_attention(const std::string& prefix,
                                                                       Partition part, Rng& rng) {
  const std::size_t d = config_.d_model;
  AttentionParams a{};
  a.q_w = add(prefix + ".q.weight", d, d, part, &rng);
  a.q_b = add(prefix + ".q.bias", 1, d, part, nullptr);
  a.k_w = add(prefix + ".k.weight", d, d, part, &rng);
  a.k_b = add(prefix + ".k.bias", 1, d, part, nullptr);
  a.v_w = add(prefix + ".v.weight", d, d, part, &rng);
  a.v_b = add(prefix + ".v.bias", 1, d, part, nullptr);
  a.o_w = add(prefix + ".o.weight", d, d, part, &rng);
  a.o_b = add(prefix + ".o.bias", 1, d, part, nullptr);
  return a;
}

template <typename T>
typename Transformer<T>::FfnParams Transformer<T>::add_ffn(const std::string& prefix,
                                                           Partition part, Rng& rng) {
  FfnParams f{};
  f.fc1_w = add(prefix + ".fc1.weight", config_.d_model, config_.ffn_dim, part, &rng);
  f.fc1_b = add(prefix + ".fc1.bias", 1, config_.ffn_dim, part, nullptr);
  f.fc2_w = add(prefix + ".fc2.weight", config_.ffn_dim, config_.d_model, part, &rng);
  f.fc2_b = add(prefix + ".fc2.bias", 1, config_.d_model, part, nullptr);
  return f;
}

template <typename T>
typename Transformer<T>::NormParams Transformer<T>::add_norm(const std::string& prefix,
                                                             Partition part) {
  NormParams n{};
  n.gain = add(prefix + ".gain", 1, config_.d_model, part, nullptr);
  params_[n.gain].value.fill(T(1));
  n.bias = add(prefix + ".bias", 1, config_.d_model, part, nullptr);
  return n;
}

template <typename T>
Parameter<T>& Transformer<T>::parameter(std::string_view name) {
  for (auto& p : params_) {
    if (p.name == name) return p;
  }
  throw ValidationError("no parameter named '" + std::string(name) + "'");
}

template <typename T>
const Parameter<T>& Transformer<T>::parameter(std::string_view name) const {
  return const_cast<Transformer*>(this)->parameter(name);
}

template <typename T>
std::size_t Transformer<T>::parameter_count() const {
  std::size_t total = 0;
  for (const auto& p : params_) total += p.value.size();
  return total;
}

template <typename T>
void Transformer<T>::zero_grad() {
  for (auto& p : params_) p.zero_grad();
}

template <typename T>
void Transformer<T>::check_ids(std::span<const TokenId> ids, const char* what) const {
  if (ids.empty()) throw ValidationError(std::string(what) + ": empty token sequence");
  if (ids.size() > config_.max_positions) {
    throw ValidationError(std::string(what) + ": length " + std::to_string(ids.size()) +
                          " exceeds max_positions " + std::to_string(config_.max_positions));
  }
  for (TokenId id : ids) {
    if (id >= config_.vocab_size) {
      throw ValidationError(std::string(what) + ": token id " + std::to_string(id) +
                            " outside vocabulary of size " + std::to_string(config_.vocab_size));
    }
  }
}

template <typename T>
Var Transformer<T>::linear(Tape<T>& tape, Var x, std::size_t w, std::size_t b) {
  return tape.add_row(tape.matmul(x, p(tape, w)), p(tape, b));
}

template <typename T>
Var Transformer<T>::norm(Tape<T>& tape, Var x, const NormParams& n) {
  return tape.layer_norm(x, p(tape, n.gain), p(tape, n.bias));
}

template <typename T>
Var Transformer<T>::attention(Tape<T>& tape, Var query_in, Var kv_in, const AttentionParams& a,
                              bool causal) {
  const std::size_t heads = config_.n_heads;
  const std::size_t dh = config_.d_model / heads;
  const Var q = tape.scale(linear(tape, query_in, a.q_w, a.q_b), T(1) / std::sqrt(T(dh)));
  const Var k = linear(tape, kv_in, a.k_w, a.k_b);
  const Var v = linear(tape, kv_in, a.v_w, a.v_b);
  const std::size_t lq = tape.value(q).rows();
  const std::size_t lk = tape.value(k).rows();
  std::vector<std::uint8_t> mask;
  if (causal) {
    if (lq != lk) throw ShapeError("causal attention needs equal query and key lengths");
    mask = causal_mask(lq);
  }
  std::vector<Var> outputs;
  outputs.reserve(heads);
  for (std::size_t h = 0; h < heads; ++h) {
    const Var qh = heads == 1 ? q : tape.slice_cols(q, h * dh, dh);
    const Var kh = heads == 1 ? k : tape.slice_cols(k, h * dh, dh);
    const Var vh = heads == 1 ? v : tape.slice_cols(v, h * dh, dh);
    Var scores = tape.matmul_nt(qh, kh);
    if (causal) scores = tape.masked_fill(scores, mask);
    outputs.push_back(tape.matmul(tape.softmax(scores), vh));
  }
  const Var merged = heads == 1 ? outputs[0] : tape.concat_cols(outputs);
  (void)lk;
  return linear(tape, merged, a.o_w, a.o_b);
}

template <typename T>
Var Transformer<T>::feed_forward(Tape<T>& tape, Var x, const FfnParams& f) {
  return linear(tape, tape.gelu(linear(tape, x, f.fc1_w, f.fc1_b)), f.fc2_w, f.fc2_b);
}

template <typename T>
Var Transformer<T>::embed(Tape<T>& tape, std::span<const TokenId> ids) {
  std::vector<std::uint32_t> positions(ids.size());
  for (std::size_t i = 0; i < positions.size(); ++i) positions[i] = static_cast<std::uint32_t>(i);
  const Var tokens = tape.embedding(p(tape, token_embedding_), ids);
  const Var pos = tape.embedding(p(tape, position_embedding_), positions);
  return tape.dropout(tape.add(tokens, pos), config_.dropout);
}

template <typename T>
Var Transformer<T>::encode(Tape<T>& tape, std::span<const TokenId> input) {
  check_ids(input, "encode");
  Var h = embed(tape, input);
  for (const auto& layer : encoder_) {
    const Var a = norm(tape, h, layer.ln_attn);
    h = tape.add(h, tape.dropout(attention(tape, a, a, layer.self_attn, false), config_.dropout));
    const Var f = norm(tape, h, layer.ln_ffn);
    h = tape.add(h, tape.dropout(feed_forward(tape, f, layer.ffn), config_.dropout));
  }
  return norm(tape, h, encoder_norm_);
}

template <typename T>
Var Transformer<T>::decode_logits(Tape<T>& tape, std::span<const TokenId> prefix, Var memory) {
  check_ids(prefix, "decode_logits");
  if (tape.value(memory).cols() != config_.d_model || tape.value(memory).rows() == 0) {
    throw ShapeError("decode_logits: memory has shape " + tape.value(memory).shape().str());
  }
  Var h = embed(tape, prefix);
  for (const auto& layer : decoder_) {
    const Var s = norm(tape, h, layer.ln_self);
    h = tape.add(h, tape.dropout(attention(tape, s, s, layer.self_attn, true), config_.dropout));
    const Var c = norm(tape, h, layer.ln_cross);
    h = tape.add(h,
                 tape.dropout(attention(tape, c, memory, layer.cross_attn, false), config_.dropout));
    const Var f = norm(tape, h, layer.ln_ffn);
    h = tape.add(h, tape.dropout(feed_forward(tape, f, layer.ffn), config_.dropout));
  }
  h = norm(tape, h, decoder_norm_);
  return tape.add_row(tape.matmul_nt(h, p(tape, token_embedding_)), p(tape, output_bias_));
}

template <typename T>
Var Transformer<T>::pool(Tape<T>& tape, Var hidden) const {
  if (tape.value(hidden).rows() == 0) throw ShapeError("pool: empty hidden states");
  return config_.pooling == Pooling::kMean ? tape.mean_rows(hidden) : tape.slice_rows(hidden, 0, 1);
}

template <typename T>
Var Transformer<T>::coherence_score(Tape<T>& tape, std::span<const TokenId> tokens) {
  const Var pooled = pool(tape, encode(tape, tokens));
  return tape.add(tape.matmul_nt(pooled, p(tape, regressor_weight_)), p(tape, regressor_bias_));
}

template <typename T>
template <typename U>
Transformer<U> Transformer<T>::cast() const {
  Transformer<U> out(config_, 0);
  for (std::size_t i = 0; i < params_.size(); ++i) {
    const auto& src = params_[i].value;
    auto& dst = out.params_[i].value;
    for (std::size_t j = 0; j < src.size(); ++j) dst[j] = static_cast<U>(src[j]);
  }
  return out;
}

template class Transformer<float>;
template class Transformer<double>;
template Transformer<double> Transformer<float>::cast<double>() const;
template Transformer<float> Transformer<double>::cast<float>() const;
template Transformer<float> Transformer<float>::cast<float>() const;
template Transformer<double> Transformer<double>::cast<double>() const;

namespace {

void write_f32(std::ostream& out, float v) {
  std::uint32_t bits = std::bit_cast<std::uint32_t>(v);
  unsigned char bytes[4];
  for (int i = 0; i < 4; ++i) bytes[i] = static_cast<unsigned char>(bits >> (8 * i));
  out.write(reinterpret_cast<const char*>(bytes), 4);
}

float read_f32(const unsigned char* bytes) {
  std::uint32_t bits = 0;
  for (int i = 0; i < 4; ++i) bits |= static_cast<std::uint32_t>(bytes[i]) << (8 * i);
  return std::bit_cast<float>(bits);
}

}  // namespace

template <typename T>
void save_checkpoint(const Transformer<T>& model, std::ostream& out) {
  json manifest = json::array();
  std::size_t offset = 0;
  for (const auto& p : model.parameters()) {
    manifest.push_back({{"name", p.name},
                        {"shape", {p.value.rows(), p.value.cols()}},
                        {"offset", offset}});
    offset += p.value.size() * sizeof(float);
  }
  const json header = {{"format_version", kCheckpointFormatVersion},
                       {"model_config", to_json(model.config())},
                       {"parameters", std::move(manifest)},
                       {"payload_bytes", offset}};
  out << header.dump() << '\n';
  for (const auto& p : model.parameters()) {
    for (T v : p.value.data()) write_f32(out, static_cast<float>(v));
  }
  if (!out) throw Error("failed to write checkpoint");
}

template <typename T>
void save_checkpoint(const Transformer<T>& model, const std::string& path) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw Error("cannot write checkpoint '" + path + "'");
  save_checkpoint(model, out);
}

template void save_checkpoint(const Transformer<float>&, std::ostream&);
template void save_checkpoint(const Transformer<double>&, std::ostream&);
template void save_checkpoint(const Transformer<float>&, const std::string&);
template void save_checkpoint(const Transformer<double>&, const std::string&);

Transformer<float> load_checkpoint(std::istream& in) {
  std::string line;
  if (!std::getline(in, line)) throw ParseError("checkpoint: missing header");
  json header;
  try {
    header = json::parse(line);
  } catch (const json::parse_error& e) {
    throw ParseError(std::string("checkpoint: malformed header: ") + e.what());
  }
  if (!header.contains("format_version") || !header.contains("model_config") ||
      !header.contains("parameters")) {
    throw ParseError("checkpoint: header lacks format_version, model_config or parameters");
  }
  if (header["format_version"].get<int>() != kCheckpointFormatVersion) {
    throw ParseError("checkpoint: unsupported format_version " +
                     header["format_version"].dump());
  }
  Transformer<float> model(model_config_from_json(header["model_config"]), 0);
  const auto& manifest = header["parameters"];
  auto params = model.parameters();
  if (manifest.size() != params.size()) {
    throw ValidationError("checkpoint: " + std::to_string(manifest.size()) +
                          " parameters stored, model config implies " +
                          std::to_string(params.size()));
  }
  std::string payload((std::istreambuf_iterator<char>(in)), std::istreambuf_iterator<char>());
  for (std::size_t i = 0; i < params.size(); ++i) {
    const auto& entry = manifest[i];
    auto& param = params[i];
    const std::string name = entry.at("name").get<std::string>();
    const auto shape = entry.at("shape");
    const std::size_t rows = shape.at(0).get<std::size_t>();
    const std::size_t cols = shape.at(1).get<std::size_t>();
    if (name != param.name || rows != param.value.rows() || cols != param.value.cols()) {
      throw ValidationError("checkpoint: parameter '" + name + "' " + Shape{rows, cols}.str() +
                            " does not match expected '" + param.name + "' " +
                            param.value.shape().str());
    }
    const std::size_t offset = entry.at("offset").get<std::size_t>();
    const std::size_t bytes = param.value.size() * sizeof(float);
    if (offset + bytes > payload.size()) {
      throw ParseError("checkpoint: payload truncated at parameter '" + name + "'");
    }
    const auto* base = reinterpret_cast<const unsigned char*>(payload.data()) + offset;
    for (std::size_t j = 0; j < param.value.size(); ++j) param.value[j] = read_f32(base + 4 * j);
    if (!param.value.all_finite()) {
      throw ValidationError("checkpoint: parameter '" + name + "' holds non-finite values");
    }
  }
  return model;
}

Transformer<float> load_checkpoint(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw Error("cannot open checkpoint '" + path + "'");
  return load_checkpoint(in);
}

}  // namespace condigsum
