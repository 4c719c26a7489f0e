#pragma once

#include <cstddef>
#include <cstdint>
#include <iosfwd>
#include <span>
#include <string>
#include <string_view>
#include <vector>

#include <nlohmann/json_fwd.hpp>

#include "condigsum/corpus.hpp"
#include "condigsum/tensor.hpp"

namespace condigsum {

/// How encoder states are reduced to the snippet vector fed to the
/// coherence regressor.
enum class Pooling { kMean, kFirst };

struct ModelConfig {
  std::size_t vocab_size = 0;
  std::size_t d_model = 64;
  std::size_t n_heads = 4;
  std::size_t ffn_dim = 128;
  std::size_t n_encoder_layers = 2;
  std::size_t n_decoder_layers = 2;
  std::size_t max_positions = 256;
  double dropout = 0.1;
  Pooling pooling = Pooling::kMean;

  void validate() const;
  bool operator==(const ModelConfig&) const = default;
};

nlohmann::json to_json(const ModelConfig& c);
ModelConfig model_config_from_json(const nlohmann::json& j);

/// Which parameters an update may touch. kEncoder covers the token and
/// positional embeddings, the encoder stack and the coherence regressor;
/// kDecoder covers the decoder stack and the output bias.
enum class Partition { kEncoder, kDecoder };

/// Encoder-decoder transformer (pre-norm) whose input embedding is shared by
/// encoder and decoder and tied to the output projection, plus a linear
/// coherence regressor over pooled encoder states.
template <typename T>
class Transformer {
 public:
  Transformer(const ModelConfig& config, std::uint64_t seed);

  const ModelConfig& config() const { return config_; }

  std::span<Parameter<T>> parameters() { return params_; }
  std::span<const Parameter<T>> parameters() const { return params_; }
  Partition partition(std::size_t index) const { return partitions_[index]; }
  Parameter<T>& parameter(std::string_view name);
  const Parameter<T>& parameter(std::string_view name) const;
  std::size_t parameter_count() const;
  void zero_grad();

  /// Encoder output [len x d_model]. Dropout is active iff the tape is training.
  Var encode(Tape<T>& tape, std::span<const TokenId> input);
  /// Next-token logits [len x vocab] for a BOS-initial prefix.
  Var decode_logits(Tape<T>& tape, std::span<const TokenId> prefix, Var memory);
  /// [len x d] -> [1 x d]
  Var pool(Tape<T>& tape, Var hidden) const;
  /// Unnormalized score w1 . pool(encode(tokens)) + b1, as [1 x 1].
  Var coherence_score(Tape<T>& tape, std::span<const TokenId> tokens);

  /// Copies values into a model of another precision with the same config.
  template <typename U>
  Transformer<U> cast() const;

 private:
  struct AttentionParams {
    std::size_t q_w, q_b, k_w, k_b, v_w, v_b, o_w, o_b;
  };
  struct FfnParams {
    std::size_t fc1_w, fc1_b, fc2_w, fc2_b;
  };
  struct NormParams {
    std::size_t gain, bias;
  };
  struct EncoderLayer {
    NormParams ln_attn, ln_ffn;
    AttentionParams self_attn;
    FfnParams ffn;
  };
  struct DecoderLayer {
    NormParams ln_self, ln_cross, ln_ffn;
    AttentionParams self_attn, cross_attn;
    FfnParams ffn;
  };

  template <typename U>
  friend class Transformer;

  std::size_t add(std::string name, std::size_t rows, std::size_t cols, Partition part,
                  Rng* init_rng);
  AttentionParams add_attention(const std::string& prefix, Partition part, Rng& rng);
  FfnParams add_ffn(const std::string& prefix, Partition part, Rng& rng);
  NormParams add_norm(const std::string& prefix, Partition part);

  Var p(Tape<T>& tape, std::size_t index) { return tape.parameter(params_[index]); }
  Var linear(Tape<T>& tape, Var x, std::size_t w, std::size_t b);
  Var norm(Tape<T>& tape, Var x, const NormParams& n);
  Var attention(Tape<T>& tape, Var query_in, Var kv_in, const AttentionParams& a, bool causal);
  Var feed_forward(Tape<T>& tape, Var x, const FfnParams& f);
  Var embed(Tape<T>& tape, std::span<const TokenId> ids);
  void check_ids(std::span<const TokenId> ids, const char* what) const;

  ModelConfig config_;
  std::vector<Parameter<T>> params_;
  std::vector<Partition> partitions_;
  std::size_t token_embedding_ = 0;
  std::size_t position_embedding_ = 0;
  std::vector<EncoderLayer> encoder_;
  NormParams encoder_norm_{};
  std::vector<DecoderLayer> decoder_;
  NormParams decoder_norm_{};
  std::size_t output_bias_ = 0;
  std::size_t regressor_weight_ = 0;
  std::size_t regressor_bias_ = 0;
};

inline constexpr int kCheckpointFormatVersion = 1;

/// Checkpoint layout: one line of JSON {format_version, model_config,
/// parameters: [{name, shape, offset}], payload_bytes}, a newline, then the
/// little-endian float32 payload in manifest order. Offsets are relative to
/// the payload start.
template <typename T>
void save_checkpoint(const Transformer<T>& model, std::ostream& out);
template <typename T>
void save_checkpoint(const Transformer<T>& model, const std::string& path);

/// Throws ParseError on malformed files and ValidationError when the stored
/// shapes disagree with the stored config.
Transformer<float> load_checkpoint(std::istream& in);
Transformer<float> load_checkpoint(const std::string& path);

extern template class Transformer<float>;
extern template class Transformer<double>;

}  // namespace condigsum
