#pragma once

#include <optional>
#include <random>
#include <string>
#include <vector>

#include "hierattn/params.hpp"
#include "hierattn/tape.hpp"

namespace hierattn {

enum class LayerKind { AudioSelf, TextSelf, Cross, SpeechSelf };

std::string to_string(LayerKind kind);

// Identifies an attention layer. `depth` counts layers of the same kind within one
// sentence (or within the speech block); `sentence` is -1 at speech level.
struct LayerId {
  LayerKind kind = LayerKind::TextSelf;
  int depth = 0;
  int sentence = -1;

  bool operator==(const LayerId&) const = default;
};

// Attention probabilities as recorded on the tape, one q×k node per head.
struct AttentionRecord {
  LayerId id;
  std::vector<Var> heads;
};

// Materialized attention map: probs is [h×q×k]; grads has the same shape once a
// backward pass has run.
struct AttentionTrace {
  LayerId id;
  Tensor probs;
  std::optional<Tensor> grads;

  std::size_t heads() const { return probs.shape().at(0); }
  std::size_t queries() const { return probs.shape().at(1); }
  std::size_t keys() const { return probs.shape().at(2); }
};

AttentionTrace snapshot(const AttentionRecord& record);
std::vector<AttentionTrace> snapshot(const std::vector<AttentionRecord>& records);

struct TraceSink {
  std::vector<AttentionRecord> records;
  int sentence = -1;
};

// Everything a forward pass needs besides parameters.
struct ForwardContext {
  Tape& tape;
  TraceSink* traces = nullptr;
  double dropout_rate = 0.0;
  std::mt19937_64* rng = nullptr;  // null disables dropout

  Var maybe_dropout(Var x) const;
};

struct AttentionLayerParams {
  Parameter* w_q = nullptr;
  Parameter* b_q = nullptr;
  Parameter* w_k = nullptr;
  Parameter* b_k = nullptr;
  Parameter* w_v = nullptr;
  Parameter* b_v = nullptr;
  Parameter* w_o = nullptr;
  Parameter* b_o = nullptr;
  std::size_t n_heads = 1;
  std::size_t d_model = 0;
};

struct LayerNormParams {
  Parameter* gamma = nullptr;
  Parameter* beta = nullptr;
};

struct FeedForwardParams {
  Parameter* w1 = nullptr;
  Parameter* b1 = nullptr;
  Parameter* w2 = nullptr;
  Parameter* b2 = nullptr;
};

struct EncoderBlockParams {
  AttentionLayerParams self_attn;
  LayerNormParams norm1, norm2;
  FeedForwardParams ff;
};

struct DecoderBlockParams {
  AttentionLayerParams self_attn;
  AttentionLayerParams cross_attn;
  LayerNormParams norm1, norm2, norm3;
  FeedForwardParams ff;
};

AttentionLayerParams make_attention(ParameterStore& store, const std::string& prefix, std::size_t d_model,
                                    std::size_t n_heads, std::mt19937_64& rng);
LayerNormParams make_layer_norm(ParameterStore& store, const std::string& prefix, std::size_t d_model);
FeedForwardParams make_feed_forward(ParameterStore& store, const std::string& prefix, std::size_t d_model,
                                    std::size_t d_ff, std::mt19937_64& rng);
EncoderBlockParams make_encoder_block(ParameterStore& store, const std::string& prefix, std::size_t d_model,
                                      std::size_t n_heads, std::size_t d_ff, std::mt19937_64& rng);
DecoderBlockParams make_decoder_block(ParameterStore& store, const std::string& prefix, std::size_t d_model,
                                      std::size_t n_heads, std::size_t d_ff, std::mt19937_64& rng);

// Scaled dot-product attention over all heads, concatenated and output-projected.
// Post-softmax probabilities are recorded into ctx.traces under `id`.
Var multi_head_attention(const ForwardContext& ctx, Var queries, Var keys_values, const AttentionLayerParams& p,
                         LayerId id);

Var layer_norm(const ForwardContext& ctx, Var x, const LayerNormParams& p);
Var feed_forward(const ForwardContext& ctx, Var x, const FeedForwardParams& p);

// Post-norm transformer encoder layer. Emits one trace.
Var encoder_block_forward(const ForwardContext& ctx, Var x, const EncoderBlockParams& p, LayerId id);

// Unmasked self-attention over text, cross-attention into audio memory, feed-forward.
// Emits a text-self trace (depth self_depth) followed by a cross trace (depth cross_depth).
Var decoder_fusion_block_forward(const ForwardContext& ctx, Var text_x, Var audio_mem, const DecoderBlockParams& p,
                                 int self_depth, int cross_depth);

// out[i] = x[i] + table[i]; throws CapacityError when x has more rows than the table.
Var add_positional_embeddings(Var x, Var table);

}  // namespace hierattn
