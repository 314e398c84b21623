#include "hierattn/attention.hpp"

#include <cmath>

#include "hierattn/errors.hpp"

namespace hierattn {

std::string to_string(LayerKind kind) {
  switch (kind) {
    case LayerKind::AudioSelf: return "audio-self";
    case LayerKind::TextSelf: return "text-self";
    case LayerKind::Cross: return "cross";
    case LayerKind::SpeechSelf: return "speech-self";
  }
  return "unknown";
}

AttentionTrace snapshot(const AttentionRecord& record) {
  if (record.heads.empty()) throw ContractError("attention record without heads");
  const std::size_t h = record.heads.size();
  const std::size_t q = record.heads[0].rows();
  const std::size_t k = record.heads[0].cols();
  AttentionTrace trace{record.id, Tensor({h, q, k}), std::nullopt};
  const bool have_grads = record.heads[0].has_grad();
  Tensor grads;
  if (have_grads) grads = Tensor({h, q, k});
  for (std::size_t i = 0; i < h; ++i) {
    const Var& head = record.heads[i];
    std::copy(head.value().data().begin(), head.value().data().end(),
              trace.probs.data().begin() + static_cast<std::ptrdiff_t>(i * q * k));
    if (have_grads) {
      const Tensor& g = head.grad();
      std::copy(g.data().begin(), g.data().end(), grads.data().begin() + static_cast<std::ptrdiff_t>(i * q * k));
    }
  }
  if (have_grads) trace.grads = std::move(grads);
  return trace;
}

std::vector<AttentionTrace> snapshot(const std::vector<AttentionRecord>& records) {
  std::vector<AttentionTrace> out;
  out.reserve(records.size());
  for (const auto& r : records) out.push_back(snapshot(r));
  return out;
}

Var ForwardContext::maybe_dropout(Var x) const {
  if (!rng || dropout_rate <= 0.0) return x;
  return dropout(x, dropout_rate, *rng);
}

AttentionLayerParams make_attention(ParameterStore& store, const std::string& prefix, std::size_t d_model,
                                    std::size_t n_heads, std::mt19937_64& rng) {
  if (n_heads == 0 || d_model == 0 || d_model % n_heads != 0) {
    throw DimensionError("attention: d_model " + std::to_string(d_model) + " not divisible by n_heads " +
                         std::to_string(n_heads));
  }
  AttentionLayerParams p;
  p.n_heads = n_heads;
  p.d_model = d_model;
  p.w_q = &store.add(prefix + ".w_q", init::xavier_uniform(d_model, d_model, rng));
  p.b_q = &store.add(prefix + ".b_q", Tensor({1, d_model}));
  p.w_k = &store.add(prefix + ".w_k", init::xavier_uniform(d_model, d_model, rng));
  p.b_k = &store.add(prefix + ".b_k", Tensor({1, d_model}));
  p.w_v = &store.add(prefix + ".w_v", init::xavier_uniform(d_model, d_model, rng));
  p.b_v = &store.add(prefix + ".b_v", Tensor({1, d_model}));
  p.w_o = &store.add(prefix + ".w_o", init::xavier_uniform(d_model, d_model, rng));
  p.b_o = &store.add(prefix + ".b_o", Tensor({1, d_model}));
  return p;
}

LayerNormParams make_layer_norm(ParameterStore& store, const std::string& prefix, std::size_t d_model) {
  return {&store.add(prefix + ".gamma", Tensor({1, d_model}, 1.0)), &store.add(prefix + ".beta", Tensor({1, d_model}))};
}

FeedForwardParams make_feed_forward(ParameterStore& store, const std::string& prefix, std::size_t d_model,
                                    std::size_t d_ff, std::mt19937_64& rng) {
  FeedForwardParams p;
  p.w1 = &store.add(prefix + ".w1", init::xavier_uniform(d_model, d_ff, rng));
  p.b1 = &store.add(prefix + ".b1", Tensor({1, d_ff}));
  p.w2 = &store.add(prefix + ".w2", init::xavier_uniform(d_ff, d_model, rng));
  p.b2 = &store.add(prefix + ".b2", Tensor({1, d_model}));
  return p;
}

EncoderBlockParams make_encoder_block(ParameterStore& store, const std::string& prefix, std::size_t d_model,
                                      std::size_t n_heads, std::size_t d_ff, std::mt19937_64& rng) {
  EncoderBlockParams p;
  p.self_attn = make_attention(store, prefix + ".self_attn", d_model, n_heads, rng);
  p.norm1 = make_layer_norm(store, prefix + ".norm1", d_model);
  p.ff = make_feed_forward(store, prefix + ".ff", d_model, d_ff, rng);
  p.norm2 = make_layer_norm(store, prefix + ".norm2", d_model);
  return p;
}

DecoderBlockParams make_decoder_block(ParameterStore& store, const std::string& prefix, std::size_t d_model,
                                      std::size_t n_heads, std::size_t d_ff, std::mt19937_64& rng) {
  DecoderBlockParams p;
  p.self_attn = make_attention(store, prefix + ".self_attn", d_model, n_heads, rng);
  p.norm1 = make_layer_norm(store, prefix + ".norm1", d_model);
  p.cross_attn = make_attention(store, prefix + ".cross_attn", d_model, n_heads, rng);
  p.norm2 = make_layer_norm(store, prefix + ".norm2", d_model);
  p.ff = make_feed_forward(store, prefix + ".ff", d_model, d_ff, rng);
  p.norm3 = make_layer_norm(store, prefix + ".norm3", d_model);
  return p;
}

namespace {

Var linear(Tape& tape, Var x, const Parameter& w, const Parameter& b) {
  return add_row(matmul(x, tape.parameter(w)), tape.parameter(b));
}

}  // namespace

Var multi_head_attention(const ForwardContext& ctx, Var queries, Var keys_values, const AttentionLayerParams& p,
                         LayerId id) {
  if (queries.rows() == 0 || keys_values.rows() == 0) throw DimensionError("attention over an empty sequence");
  if (queries.cols() != p.d_model || keys_values.cols() != p.d_model) {
    throw DimensionError("attention: inputs " + shape_string(queries.shape()) + " / " +
                         shape_string(keys_values.shape()) + " do not match d_model " + std::to_string(p.d_model));
  }
  Tape& tape = ctx.tape;
  const std::size_t dh = p.d_model / p.n_heads;
  const double inv_sqrt = 1.0 / std::sqrt(static_cast<double>(dh));

  Var q = linear(tape, queries, *p.w_q, *p.b_q);
  Var k = linear(tape, keys_values, *p.w_k, *p.b_k);
  Var v = linear(tape, keys_values, *p.w_v, *p.b_v);

  AttentionRecord record{id, {}};
  std::vector<Var> head_out;
  head_out.reserve(p.n_heads);
  for (std::size_t h = 0; h < p.n_heads; ++h) {
    Var qh = slice_cols(q, h * dh, dh);
    Var kh = slice_cols(k, h * dh, dh);
    Var vh = slice_cols(v, h * dh, dh);
    Var probs = softmax_rows(scale(matmul_nt(qh, kh), inv_sqrt));
    record.heads.push_back(probs);
    head_out.push_back(matmul(probs, vh));
  }
  if (ctx.traces) ctx.traces->records.push_back(std::move(record));
  Var merged = p.n_heads == 1 ? head_out[0] : concat_cols(head_out);
  return linear(tape, merged, *p.w_o, *p.b_o);
}

Var layer_norm(const ForwardContext& ctx, Var x, const LayerNormParams& p) {
  return layer_norm(x, ctx.tape.parameter(*p.gamma), ctx.tape.parameter(*p.beta));
}

Var feed_forward(const ForwardContext& ctx, Var x, const FeedForwardParams& p) {
  Var h = gelu(linear(ctx.tape, x, *p.w1, *p.b1));
  return linear(ctx.tape, h, *p.w2, *p.b2);
}

Var encoder_block_forward(const ForwardContext& ctx, Var x, const EncoderBlockParams& p, LayerId id) {
  Var attn = multi_head_attention(ctx, x, x, p.self_attn, id);
  Var h = layer_norm(ctx, add(x, ctx.maybe_dropout(attn)), p.norm1);
  Var ff = feed_forward(ctx, h, p.ff);
  return layer_norm(ctx, add(h, ctx.maybe_dropout(ff)), p.norm2);
}

Var decoder_fusion_block_forward(const ForwardContext& ctx, Var text_x, Var audio_mem, const DecoderBlockParams& p,
                                 int self_depth, int cross_depth) {
  const int sentence = ctx.traces ? ctx.traces->sentence : -1;
  Var self = multi_head_attention(ctx, text_x, text_x, p.self_attn, {LayerKind::TextSelf, self_depth, sentence});
  Var h1 = layer_norm(ctx, add(text_x, ctx.maybe_dropout(self)), p.norm1);
  Var cross = multi_head_attention(ctx, h1, audio_mem, p.cross_attn, {LayerKind::Cross, cross_depth, sentence});
  Var h2 = layer_norm(ctx, add(h1, ctx.maybe_dropout(cross)), p.norm2);
  Var ff = feed_forward(ctx, h2, p.ff);
  return layer_norm(ctx, add(h2, ctx.maybe_dropout(ff)), p.norm3);
}

Var add_positional_embeddings(Var x, Var table) {
  if (x.rows() > table.rows()) {
    throw CapacityError("sequence of length " + std::to_string(x.rows()) + " exceeds positional capacity " +
                        std::to_string(table.rows()));
  }
  if (x.cols() != table.cols()) throw DimensionError("positional table width mismatch");
  return add(x, slice_rows(table, 0, x.rows()));
}

}  // namespace hierattn
