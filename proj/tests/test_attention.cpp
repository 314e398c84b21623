#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include "doctest.h"

#include <cmath>

#include "hierattn/attention.hpp"
#include "hierattn/errors.hpp"
#include "reference.hpp"
#include "support.hpp"

using namespace hierattn;
using testsupport::random_tensor;

namespace {

// Replaces every parameter (including zero-initialized biases and unit gains) with random values.
void randomize(ParameterStore& store, std::mt19937_64& rng, double scale = 0.5) {
  for (auto& p : store) p.value = random_tensor(p.value.rows(), p.value.cols(), rng, -scale, scale);
}

double row_sum_error(const AttentionTrace& t) {
  double worst = 0.0;
  for (std::size_t h = 0; h < t.heads(); ++h) {
    for (std::size_t q = 0; q < t.queries(); ++q) {
      double s = 0.0;
      for (std::size_t k = 0; k < t.keys(); ++k) s += t.probs[(h * t.queries() + q) * t.keys() + k];
      worst = std::max(worst, std::abs(s - 1.0));
    }
  }
  return worst;
}

std::pair<double, double> moments(std::span<const double> row) {
  double mean = 0.0, var = 0.0;
  for (double v : row) mean += v;
  mean /= static_cast<double>(row.size());
  for (double v : row) var += (v - mean) * (v - mean);
  return {mean, var / static_cast<double>(row.size())};
}

}  // namespace

TEST_CASE("multi-head attention") {
  std::mt19937_64 rng(11);
  ParameterStore store;
  const AttentionLayerParams p = make_attention(store, "attn", 8, 2, rng);
  randomize(store, rng);

  SUBCASE("single position attends to itself") {
    Tape tape;
    TraceSink sink;
    const ForwardContext ctx{tape, &sink};
    Var x = tape.constant(random_tensor(1, 8, rng));
    (void)multi_head_attention(ctx, x, x, p, {LayerKind::TextSelf, 0, 0});
    const AttentionTrace t = snapshot(sink.records.at(0));
    CHECK(t.heads() == 2);
    for (double v : t.probs.data()) CHECK(v == 1.0);
  }

  SUBCASE("identical keys give uniform rows") {
    Tape tape;
    TraceSink sink;
    const ForwardContext ctx{tape, &sink};
    const Tensor row = random_tensor(1, 8, rng);
    Tensor kv({5, 8});
    for (std::size_t r = 0; r < 5; ++r) std::copy(row.data().begin(), row.data().end(), kv.row(r).begin());
    (void)multi_head_attention(ctx, tape.constant(random_tensor(3, 8, rng)), tape.constant(kv), p,
                               {LayerKind::Cross, 0, 0});
    const AttentionTrace t = snapshot(sink.records.at(0));
    for (double v : t.probs.data()) CHECK(std::abs(v - 0.2) < 1e-15);
  }

  SUBCASE("per-head decomposition") {
    const Tensor x = random_tensor(3, 8, rng);
    Tape tape;
    TraceSink sink;
    const ForwardContext ctx{tape, &sink};
    const Tensor out = multi_head_attention(ctx, tape.constant(x), tape.constant(x), p, {}).value();
    std::vector<Tensor> probs;
    const Tensor expect = reference::attention(x, x, p, &probs);
    CHECK(max_abs_diff(out, expect) < 1e-12);
    const AttentionTrace t = snapshot(sink.records.at(0));
    for (std::size_t h = 0; h < 2; ++h) {
      for (std::size_t i = 0; i < 9; ++i) CHECK(std::abs(t.probs[h * 9 + i] - probs[h][i]) < 1e-12);
    }
    CHECK(row_sum_error(t) < 1e-9);
  }

  SUBCASE("errors") {
    Tape tape;
    const ForwardContext ctx{tape};
    Var good = tape.constant(random_tensor(2, 8, rng));
    CHECK_THROWS_AS(multi_head_attention(ctx, tape.constant(Tensor({2, 6})), good, p, {}), DimensionError);
    CHECK_THROWS_AS(multi_head_attention(ctx, good, tape.constant(Tensor({0, 8})), p, {}), DimensionError);
    ParameterStore other;
    CHECK_THROWS_AS(make_attention(other, "bad", 9, 2, rng), DimensionError);
  }
}

TEST_CASE("encoder block") {
  std::mt19937_64 rng(12);
  ParameterStore store;
  const EncoderBlockParams p = make_encoder_block(store, "enc", 8, 2, 16, rng);

  SUBCASE("shape, trace count and normalized output") {
    for (std::size_t n : {1u, 4u, 9u}) {
      const Tensor x = random_tensor(n, 8, rng, -3.0, 3.0);
      Tape tape;
      TraceSink sink;
      const ForwardContext ctx{tape, &sink};
      const Tensor y = encoder_block_forward(ctx, tape.constant(x), p, {LayerKind::AudioSelf, 0, 0}).value();
      CHECK(y.shape() == Shape{n, 8});
      REQUIRE(sink.records.size() == 1);
      CHECK(sink.records[0].id.kind == LayerKind::AudioSelf);
      // Default gains and offsets: rows are standardized up to the eps in the denominator,
      // var(out) = v / (v + eps) with v the pre-norm row variance.
      const Tensor h = reference::layer_norm(reference::plus(x, reference::attention(x, x, p.self_attn)),
                                             p.norm1.gamma->value, p.norm1.beta->value);
      const Tensor z = reference::plus(h, reference::feed_forward(h, p.ff));
      for (std::size_t r = 0; r < n; ++r) {
        const auto [mean, var] = moments(y.row(r));
        const double v = moments(z.row(r)).second;
        CHECK(std::abs(mean) < 1e-9);
        CHECK(std::abs(var - v / (v + 1e-5)) < 1e-12);
        CHECK(std::abs(var - 1.0) <= 1e-5 / v + 1e-12);
      }
    }
  }

  randomize(store, rng);

  SUBCASE("single token follows the hand trace") {
    const Tensor x = random_tensor(1, 8, rng);
    Tape tape;
    TraceSink sink;
    const ForwardContext ctx{tape, &sink};
    const Tensor y = encoder_block_forward(ctx, tape.constant(x), p, {}).value();
    const AttentionTrace t = snapshot(sink.records[0]);
    for (double v : t.probs.data()) CHECK(v == 1.0);
    // With one key the attention output is the value projection pushed through w_o.
    const Tensor attn = reference::linear(reference::linear(x, p.self_attn.w_v->value, p.self_attn.b_v->value),
                                          p.self_attn.w_o->value, p.self_attn.b_o->value);
    const Tensor h = reference::layer_norm(reference::plus(x, attn), p.norm1.gamma->value, p.norm1.beta->value);
    const Tensor expect =
        reference::layer_norm(reference::plus(h, reference::feed_forward(h, p.ff)), p.norm2.gamma->value,
                              p.norm2.beta->value);
    CHECK(max_abs_diff(y, expect) < 1e-12);
  }

  SUBCASE("matches the reference block") {
    const Tensor x = random_tensor(5, 8, rng);
    Tape tape;
    const ForwardContext ctx{tape};
    CHECK(max_abs_diff(encoder_block_forward(ctx, tape.constant(x), p, {}).value(), reference::encoder_block(x, p)) <
          1e-12);
  }

  SUBCASE("deterministic traces") {
    const Tensor x = random_tensor(4, 8, rng);
    auto run = [&] {
      Tape tape;
      TraceSink sink;
      const ForwardContext ctx{tape, &sink};
      (void)encoder_block_forward(ctx, tape.constant(x), p, {});
      return snapshot(sink.records[0]).probs;
    };
    CHECK(run() == run());
  }
}

TEST_CASE("two stacked encoder blocks pass a finite-difference check") {
  std::mt19937_64 rng(13);
  ParameterStore store;
  const EncoderBlockParams b0 = make_encoder_block(store, "enc0", 8, 2, 16, rng);
  const EncoderBlockParams b1 = make_encoder_block(store, "enc1", 8, 2, 16, rng);
  Parameter& x = store.add("x", random_tensor(4, 8, rng));
  randomize(store, rng);
  const auto r = testsupport::fd_check_store(store, [&](Tape& tape) {
    const ForwardContext ctx{tape};
    Var h = encoder_block_forward(ctx, tape.parameter(x), b0, {});
    return testsupport::weighted_sum(encoder_block_forward(ctx, h, b1, {}));
  });
  INFO("worst entry " << r.worst);
  CHECK(r.max_rel_error < 1e-4);
}

TEST_CASE("decoder fusion block") {
  std::mt19937_64 rng(14);
  ParameterStore store;
  DecoderBlockParams p = make_decoder_block(store, "dec", 8, 2, 16, rng);
  randomize(store, rng);
  const Tensor text = random_tensor(3, 8, rng);
  const Tensor audio = random_tensor(5, 8, rng);

  SUBCASE("trace kinds and shapes") {
    Tape tape;
    TraceSink sink;
    sink.sentence = 4;
    const ForwardContext ctx{tape, &sink};
    const Tensor y = decoder_fusion_block_forward(ctx, tape.constant(text), tape.constant(audio), p, 3, 1).value();
    CHECK(y.shape() == Shape{3, 8});
    REQUIRE(sink.records.size() == 2);
    CHECK(sink.records[0].id == LayerId{LayerKind::TextSelf, 3, 4});
    CHECK(sink.records[1].id == LayerId{LayerKind::Cross, 1, 4});
    const AttentionTrace cross = snapshot(sink.records[1]);
    CHECK(cross.queries() == 3);
    CHECK(cross.keys() == 5);
    CHECK(row_sum_error(cross) < 1e-9);
    CHECK(max_abs_diff(y, reference::decoder_block(text, audio, p)) < 1e-12);
  }

  SUBCASE("single audio key") {
    Tape tape;
    TraceSink sink;
    const ForwardContext ctx{tape, &sink};
    (void)decoder_fusion_block_forward(ctx, tape.constant(text), tape.constant(random_tensor(1, 8, rng)), p, 0, 0);
    const AttentionTrace t = snapshot(sink.records[1]);
    for (double v : t.probs.data()) CHECK(v == 1.0);
  }

  SUBCASE("zeroed audio memory removes the cross path") {
    p.cross_attn.b_v->value.fill(0.0);
    p.cross_attn.b_o->value.fill(0.0);
    Tape tape;
    const ForwardContext ctx{tape};
    const Tensor y =
        decoder_fusion_block_forward(ctx, tape.constant(text), tape.constant(Tensor({5, 8})), p, 0, 0).value();
    const Tensor h1 = reference::layer_norm(reference::plus(text, reference::attention(text, text, p.self_attn)),
                                            p.norm1.gamma->value, p.norm1.beta->value);
    const Tensor h2 = reference::layer_norm(h1, p.norm2.gamma->value, p.norm2.beta->value);
    const Tensor expect = reference::layer_norm(reference::plus(h2, reference::feed_forward(h2, p.ff)),
                                                p.norm3.gamma->value, p.norm3.beta->value);
    CHECK(max_abs_diff(y, expect) < 1e-12);
  }

  SUBCASE("width mismatch between modalities") {
    Tape tape;
    const ForwardContext ctx{tape};
    CHECK_THROWS_AS(decoder_fusion_block_forward(ctx, tape.constant(text), tape.constant(Tensor({5, 4})), p, 0, 0),
                    DimensionError);
  }
}

TEST_CASE("positional embeddings") {
  std::mt19937_64 rng(15);
  Tape tape;
  const Tensor x = random_tensor(3, 4, rng);
  SUBCASE("zero table is the identity") {
    CHECK(add_positional_embeddings(tape.constant(x), tape.constant(Tensor({6, 4}))).value() == x);
  }
  SUBCASE("order sensitivity") {
    const Var table = tape.constant(random_tensor(6, 4, rng));
    Tensor swapped = x;
    std::swap_ranges(swapped.row(0).begin(), swapped.row(0).end(), swapped.row(1).begin());
    const Tensor a = add_positional_embeddings(tape.constant(x), table).value();
    const Tensor b = add_positional_embeddings(tape.constant(swapped), table).value();
    bool rows_match = true;
    for (std::size_t c = 0; c < 4; ++c) rows_match = rows_match && a(0, c) == b(1, c);
    CHECK_FALSE(rows_match);
  }
  SUBCASE("capacity boundary") {
    const Var table = tape.constant(random_tensor(3, 4, rng));
    CHECK_NOTHROW(add_positional_embeddings(tape.constant(x), table));
    CHECK_THROWS_AS(add_positional_embeddings(tape.constant(random_tensor(4, 4, rng)), table), CapacityError);
  }
}

TEST_CASE("layer kind names") {
  CHECK(to_string(LayerKind::AudioSelf) == "audio-self");
  CHECK(to_string(LayerKind::TextSelf) == "text-self");
  CHECK(to_string(LayerKind::Cross) == "cross");
  CHECK(to_string(LayerKind::SpeechSelf) == "speech-self");
}

TEST_CASE("snapshot carries gradients after backward") {
  std::mt19937_64 rng(16);
  ParameterStore store;
  const AttentionLayerParams p = make_attention(store, "attn", 4, 2, rng);
  Tape tape;
  TraceSink sink;
  const ForwardContext ctx{tape, &sink};
  Var x = tape.constant(random_tensor(3, 4, rng));
  Var y = multi_head_attention(ctx, x, x, p, {});
  CHECK_FALSE(snapshot(sink.records[0]).grads.has_value());
  tape.backward(testsupport::weighted_sum(y));
  const AttentionTrace t = snapshot(sink.records[0]);
  REQUIRE(t.grads.has_value());
  CHECK(t.grads->shape() == t.probs.shape());
}
