#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include "doctest.h"

#include <cmath>
#include <fstream>

#include "hierattn/errors.hpp"
#include "hierattn/model.hpp"
#include "reference.hpp"
#include "support.hpp"

using namespace hierattn;
using testsupport::random_sample;
using testsupport::random_tensor;
using testsupport::toy_model_config;

namespace {

ModelConfig small_config(Architecture arch = Architecture::Proposed) {
  ModelConfig c = toy_model_config();
  c.arch = arch;
  c.vocab_size = 20;
  c.patch_dim = 6;
  return c;
}

SpeechSample small_sample(const ModelConfig& c, std::size_t n, std::mt19937_64& rng, std::size_t tokens = 3,
                          PatchGrid grid = {2, 2}) {
  return random_sample(n, tokens, grid, c.patch_dim, c.vocab_size, rng);
}

struct Recorded {
  Tensor logits;
  std::vector<AttentionTrace> traces;
};

Recorded forward_backward(const HierModel& m, const SpeechSample& s) {
  Tape tape;
  TraceSink sink;
  const ForwardContext ctx{tape, &sink};
  Var logits = m.proposed_forward(ctx, s);
  tape.backward(element(logits, 0, 1));
  return {logits.value(), snapshot(sink.records)};
}

double depressed_logit(const HierModel& m, const SpeechSample& s) {
  Tape tape(false);
  const ForwardContext ctx{tape};
  return m.proposed_forward(ctx, s).value()[1];
}

}  // namespace

TEST_CASE("model config") {
  ModelConfig c;
  CHECK(c.fusion_blocks == 8);
  CHECK(c.speech_layers == 6);
  CHECK(c.max_sentences == 42);
  const nlohmann::json j = c;
  CHECK(j.get<ModelConfig>() == c);
  CHECK(nlohmann::json::object().get<ModelConfig>() == ModelConfig{});
  c.n_heads = 5;
  CHECK_THROWS_AS(c.validate(), std::invalid_argument);
  CHECK_THROWS_AS(HierModel{c}, std::invalid_argument);
  CHECK(architecture_from_string("baseline") == Architecture::Baseline);
  CHECK_THROWS_AS(architecture_from_string("other"), std::invalid_argument);
}

TEST_CASE("encode_sentence") {
  std::mt19937_64 rng(21);
  const HierModel m(small_config());
  const SpeechSample s = small_sample(m.config(), 1, rng, 3, {2, 3});
  Tape tape;
  const ForwardContext ctx{tape};
  const SentenceStates st = m.encode_sentence(ctx, s.sentences[0]);
  CHECK(st.audio.rows() == 7);
  CHECK(st.text.rows() == 4);

  SUBCASE("identical content gives identical states") {
    SentencePair copy = s.sentences[0];
    copy.index = 9;
    const SentenceStates st2 = m.encode_sentence(ctx, copy);
    CHECK(st2.audio.value() == st.audio.value());
    CHECK(st2.text.value() == st.text.value());
  }

  SUBCASE("text encoder depth 0 passes embeddings and positions through") {
    ModelConfig c = small_config();
    c.text_layers = 0;
    const HierModel bare(c);
    const SentencePair& sp = s.sentences[0];
    const Tensor ht = bare.encode_sentence(ctx, sp).text.value();
    const Tensor& embed = bare.params().find("text.embed")->value;
    const Tensor& cls = bare.params().find("text.cls")->value;
    const Tensor& pos = bare.params().find("text.pos")->value;
    for (std::size_t col = 0; col < c.d_model; ++col) {
      CHECK(ht(0, col) == cls(0, col) + pos(0, col));
      for (std::size_t t = 0; t < sp.tokens.size(); ++t) CHECK(ht(t + 1, col) == embed(sp.tokens[t], col) + pos(t + 1, col));
    }
  }

  SUBCASE("invalid sentences") {
    SentencePair bad = s.sentences[0];
    bad.tokens.clear();
    CHECK_THROWS_AS(m.encode_sentence(ctx, bad), DimensionError);
    bad = s.sentences[0];
    bad.tokens[0] = 20;
    CHECK_THROWS_AS(m.encode_sentence(ctx, bad), DimensionError);
    bad = s.sentences[0];
    bad.audio_patches = Tensor({0, 6});
    CHECK_THROWS_AS(m.encode_sentence(ctx, bad), DimensionError);
    bad = s.sentences[0];
    bad.audio_patches = Tensor({2, 5});
    CHECK_THROWS_AS(m.encode_sentence(ctx, bad), DimensionError);
    bad = s.sentences[0];
    bad.tokens.assign(m.config().max_tokens + 1, 1);
    CHECK_THROWS_AS(m.encode_sentence(ctx, bad), CapacityError);
  }
}

TEST_CASE("fuse_cross_modal") {
  std::mt19937_64 rng(22);
  ModelConfig c = small_config();
  c.fusion_blocks = 8;
  const HierModel m(c);
  const SpeechSample s = small_sample(c, 1, rng, 4, {1, 3});

  SUBCASE("census and determinism") {
    Tape tape;
    TraceSink sink;
    sink.sentence = 0;
    const ForwardContext ctx{tape, &sink};
    const SentenceStates st = m.encode_sentence(ctx, s.sentences[0]);
    const std::size_t before = sink.records.size();
    const Tensor e1 = m.fuse_cross_modal(ctx, st).value();
    std::size_t cross = 0, self = 0;
    for (std::size_t i = before; i < sink.records.size(); ++i) {
      const AttentionTrace t = snapshot(sink.records[i]);
      if (t.id.kind == LayerKind::Cross) {
        CHECK(t.keys() == 4);
        CHECK(t.id.depth == static_cast<int>(cross));
        ++cross;
      } else {
        CHECK(t.id.kind == LayerKind::TextSelf);
        ++self;
      }
    }
    CHECK(cross == 8);
    CHECK(self == 8);
    CHECK(e1.shape() == Shape{1, c.d_model});
    CHECK(m.fuse_cross_modal(ctx, st).value() == e1);
  }

  SUBCASE("depth 1 equals one hand-composed decoder block") {
    ModelConfig c1 = small_config();
    c1.fusion_blocks = 1;
    const HierModel m1(c1);
    Tape tape;
    const ForwardContext ctx{tape};
    const SentenceStates st = m1.encode_sentence(ctx, s.sentences[0]);
    const Tensor e = m1.fuse_cross_modal(ctx, st).value();
    const Tensor full = reference::decoder_block(st.text.value(), st.audio.value(), m1.fusion_block(0));
    double worst = 0.0;
    for (std::size_t col = 0; col < c1.d_model; ++col) worst = std::max(worst, std::abs(e(0, col) - full(0, col)));
    CHECK(worst < 1e-12);
  }
}

TEST_CASE("speech_forward") {
  std::mt19937_64 rng(23);
  const HierModel m(small_config());
  const std::size_t d = m.config().d_model;

  SUBCASE("single sentence") {
    Tape tape;
    TraceSink sink;
    const ForwardContext ctx{tape, &sink};
    const Var e[] = {tape.constant(random_tensor(1, d, rng))};
    const Tensor logits = m.speech_forward(ctx, e).value();
    CHECK(logits.shape() == Shape{1, 2});
    REQUIRE(sink.records.size() == m.config().speech_layers);
    for (std::size_t l = 0; l < sink.records.size(); ++l) {
      const AttentionTrace t = snapshot(sink.records[l]);
      CHECK(t.id == LayerId{LayerKind::SpeechSelf, static_cast<int>(l), -1});
      CHECK(t.queries() == 2);
      CHECK(t.keys() == 2);
    }
  }

  SUBCASE("six layers by default") {
    ModelConfig c = small_config();
    c.speech_layers = 6;
    const HierModel m6(c);
    Tape tape;
    TraceSink sink;
    const ForwardContext ctx{tape, &sink};
    const Var e[] = {tape.constant(random_tensor(1, d, rng)), tape.constant(random_tensor(1, d, rng))};
    (void)m6.speech_forward(ctx, e);
    CHECK(sink.records.size() == 6);
  }

  SUBCASE("order sensitivity") {
    Tape tape;
    const ForwardContext ctx{tape};
    const Var a = tape.constant(random_tensor(1, d, rng)), b = tape.constant(random_tensor(1, d, rng));
    const Var ab[] = {a, b}, ba[] = {b, a};
    CHECK(m.speech_forward(ctx, ab).value() != m.speech_forward(ctx, ba).value());
  }

  SUBCASE("errors") {
    Tape tape;
    const ForwardContext ctx{tape};
    CHECK_THROWS_AS(m.speech_forward(ctx, {}), DimensionError);
    std::vector<Var> many(m.config().max_sentences + 1, tape.constant(random_tensor(1, d, rng)));
    CHECK_THROWS_AS(m.speech_forward(ctx, many), CapacityError);
    const HierModel base(small_config(Architecture::Baseline));
    const Var e[] = {many[0]};
    CHECK_THROWS_AS(base.speech_forward(ctx, e), ContractError);
  }
}

TEST_CASE("proposed_forward trace census") {
  std::mt19937_64 rng(24);
  ModelConfig c = small_config();
  c.d_model = 4;
  c.n_heads = 2;
  c.d_ff = 4;
  c.audio_layers = 2;
  c.text_layers = 2;
  c.fusion_blocks = 8;
  c.speech_layers = 6;
  const HierModel m(c);
  for (std::size_t n = 1; n <= c.max_sentences; ++n) {
    const SpeechSample s = small_sample(c, n, rng, 1, {1, 1});
    Tape tape(false);
    TraceSink sink;
    const ForwardContext ctx{tape, &sink};
    (void)m.proposed_forward(ctx, s);
    REQUIRE(sink.records.size() == n * (2 + 2 + 8 + 8) + 6);
    CHECK(traces_per_sentence(c) == 20);
    // Per sentence: audio-self, text-self (encoder), then alternating text-self/cross.
    for (std::size_t j = 0; j < n; ++j) {
      const auto* r = &sink.records[j * 20];
      CHECK(r[0].id == LayerId{LayerKind::AudioSelf, 0, static_cast<int>(j)});
      CHECK(r[1].id == LayerId{LayerKind::AudioSelf, 1, static_cast<int>(j)});
      CHECK(r[2].id == LayerId{LayerKind::TextSelf, 0, static_cast<int>(j)});
      CHECK(r[3].id == LayerId{LayerKind::TextSelf, 1, static_cast<int>(j)});
      for (int b = 0; b < 8; ++b) {
        CHECK(r[4 + 2 * b].id == LayerId{LayerKind::TextSelf, 2 + b, static_cast<int>(j)});
        CHECK(r[5 + 2 * b].id == LayerId{LayerKind::Cross, b, static_cast<int>(j)});
      }
    }
    CHECK(sink.records.back().id == LayerId{LayerKind::SpeechSelf, 5, -1});
  }
  SpeechSample too_long = small_sample(c, c.max_sentences + 1, rng, 1, {1, 1});
  Tape tape;
  const ForwardContext ctx{tape};
  CHECK_THROWS_AS(m.proposed_forward(ctx, too_long), CapacityError);
  CHECK_THROWS_AS(m.proposed_forward(ctx, SpeechSample{}), DimensionError);
}

TEST_CASE("proposed_forward gradients") {
  std::mt19937_64 rng(25);
  const HierModel m(small_config());
  const SpeechSample s = small_sample(m.config(), 5, rng);
  const Recorded r = forward_backward(m, s);
  CHECK(all_finite(r.logits));
  for (const auto& t : r.traces) {
    REQUIRE(t.grads.has_value());
    CHECK(t.grads->shape() == t.probs.shape());
  }
}

TEST_CASE("gradient with respect to attention probabilities") {
  // Scaling a layer's query projection by (1 + eps) scales its pre-softmax logits S
  // by the same factor, so dy/deps = sum(dy/dS * S). dy/dS follows from the recorded
  // A and dy/dA through the softmax Jacobian; S = log A up to a per-row constant that
  // the Jacobian annihilates.
  std::mt19937_64 rng(26);
  HierModel m(small_config());
  const SpeechSample s = small_sample(m.config(), 2, rng);
  const Recorded r = forward_backward(m, s);

  auto predicted = [](const AttentionTrace& t) {
    const std::size_t q = t.queries(), k = t.keys();
    double total = 0.0;
    for (std::size_t h = 0; h < t.heads(); ++h) {
      for (std::size_t i = 0; i < q; ++i) {
        const std::size_t base = (h * q + i) * k;
        double dot = 0.0;
        for (std::size_t j = 0; j < k; ++j) dot += t.probs[base + j] * (*t.grads)[base + j];
        for (std::size_t j = 0; j < k; ++j) {
          const double a = t.probs[base + j];
          total += a * ((*t.grads)[base + j] - dot) * std::log(a);
        }
      }
    }
    return total;
  };

  auto measured = [&](const AttentionLayerParams& p) {
    const Tensor wq = p.w_q->value, bq = p.b_q->value;
    auto at = [&](double f) {
      p.w_q->value = scaled(wq, f);
      p.b_q->value = scaled(bq, f);
      return depressed_logit(m, s);
    };
    const double h = 1e-5;
    const double d = (at(1.0 + h) - at(1.0 - h)) / (2.0 * h);
    p.w_q->value = wq;
    p.b_q->value = bq;
    return d;
  };

  // Both fusion attentions of sentence 0 and both speech layers.
  const std::size_t per = traces_per_sentence(m.config());
  const AttentionTrace& text_self = r.traces[2];
  const AttentionTrace& cross = r.traces[3];
  REQUIRE(cross.id == LayerId{LayerKind::Cross, 0, 0});
  const AttentionTrace& speech0 = r.traces[2 * per];
  const AttentionTrace& speech1 = r.traces[2 * per + 1];

  // Sentence 0 and 1 share the fusion parameters, so the measured derivative sums both sentences.
  const double fused_self = predicted(text_self) + predicted(r.traces[per + 2]);
  const double fused_cross = predicted(cross) + predicted(r.traces[per + 3]);
  CHECK(testsupport::rel_error(fused_self, measured(m.fusion_block(0).self_attn)) < 1e-3);
  CHECK(testsupport::rel_error(fused_cross, measured(m.fusion_block(0).cross_attn)) < 1e-3);
  CHECK(testsupport::rel_error(predicted(speech0), measured(m.speech_block(0).self_attn)) < 1e-3);
  CHECK(testsupport::rel_error(predicted(speech1), measured(m.speech_block(1).self_attn)) < 1e-3);
}

TEST_CASE("baseline_forward") {
  std::mt19937_64 rng(27);
  const HierModel m(small_config(Architecture::Baseline));
  const SpeechSample s = small_sample(m.config(), 42, rng, 2, {1, 2});
  Tape tape(false);
  const ForwardContext ctx{tape};
  std::vector<Tensor> logits;
  for (const auto& sp : s.sentences) logits.push_back(m.baseline_forward(ctx, sp).value());
  CHECK(logits.size() == 42);
  CHECK(m.baseline_forward(ctx, s.sentences[0]).value() == logits[0]);
  const Tensor head_b = m.params().find("head.b")->value;
  CHECK(m.classify(ctx, tape.constant(Tensor({1, m.config().d_model}))).value() == head_b);
  CHECK(m.params().find("speech.cls") == nullptr);
}

TEST_CASE("depth-0 speech block reduces to the baseline head") {
  // With no speech layers the head reads row 0 of [cls; e] + positions. Setting the
  // speech [cls] to e - pos[0] makes that row equal to e.
  std::mt19937_64 rng(28);
  ModelConfig c = small_config();
  c.speech_layers = 0;
  HierModel proposed(c);
  ModelConfig cb = c;
  cb.arch = Architecture::Baseline;
  HierModel baseline(cb);
  for (auto& p : baseline.params()) p.value = proposed.params().find(p.name)->value;

  const SpeechSample s = small_sample(c, 1, rng);
  Tape tape(false);
  const ForwardContext ctx{tape};
  const Tensor e = proposed.sentence_embedding(ctx, s.sentences[0]).value();
  const Tensor& pos = proposed.params().find("speech.pos")->value;
  Tensor& cls = proposed.params().find("speech.cls")->value;
  for (std::size_t col = 0; col < c.d_model; ++col) cls(0, col) = e(0, col) - pos(0, col);

  const Tensor a = proposed.proposed_forward(ctx, s).value();
  const Tensor b = baseline.baseline_forward(ctx, s.sentences[0]).value();
  CHECK(max_abs_diff(a, b) < 1e-12);
}

TEST_CASE("end-to-end finite-difference check on the toy model") {
  CorpusConfig cc = testsupport::toy_corpus_config();
  const Corpus corpus = generate_corpus(cc);
  ModelConfig mc = toy_model_config();
  HierModel m(mc);
  const SpeechSample& s = corpus.train[0];
  REQUIRE(s.sentences.size() == 2);
  const auto r = testsupport::fd_check_store(m.params(), [&](Tape& tape) {
    const ForwardContext ctx{tape};
    return element(m.proposed_forward(ctx, s), 0, 1);
  });
  INFO("worst " << r.worst << " over " << r.checked);
  CHECK(r.max_rel_error < 1e-4);
}

TEST_CASE("prediction and voting") {
  CHECK(predict(Tensor::matrix({{0.2, 0.3}})) == kDepressed);
  CHECK(predict(Tensor::matrix({{0.3, 0.2}})) == kNormal);
  CHECK(predict(Tensor::matrix({{0.5, 0.5}})) == kNormal);
  CHECK_THROWS_AS(predict(Tensor::matrix({{1, 2, 3}})), DimensionError);
  const auto p = class_probabilities(Tensor::matrix({{0.0, std::log(3.0)}}));
  CHECK(p[0] == doctest::Approx(0.25));
  CHECK(p[1] == doctest::Approx(0.75));

  std::vector<int> votes(42, kNormal);
  std::fill_n(votes.begin(), 21, kDepressed);
  CHECK(majority_vote(votes) == kNormal);
  CHECK(majority_vote(votes, 21) == kNormal);
  votes[21] = kDepressed;
  CHECK(majority_vote(votes) == kDepressed);
  CHECK(majority_vote(std::vector<int>(7, kNormal)) == kNormal);
  CHECK(majority_vote(std::vector<int>{1, 1, 0}) == kDepressed);
  CHECK(majority_vote(std::vector<int>{1, 0}) == kNormal);
  CHECK_THROWS_AS(majority_vote(std::vector<int>{}), std::invalid_argument);
}

TEST_CASE("checkpoints") {
  std::mt19937_64 rng(29);
  testsupport::TempDir dir("ckpt");
  HierModel m(small_config());
  for (auto& p : m.params()) p.value = random_tensor(p.value.rows(), p.value.cols(), rng);
  save_checkpoint(m, dir.path);

  const HierModel back = load_checkpoint(dir.path);
  CHECK(back.config() == m.config());
  REQUIRE(back.params().size() == m.params().size());
  for (std::size_t i = 0; i < m.params().size(); ++i) {
    CHECK(back.params()[i].name == m.params()[i].name);
    CHECK(back.params()[i].value == m.params()[i].value);
  }
  CHECK(checkpoint_id(back) == checkpoint_id(m));
  const nlohmann::json manifest = nlohmann::json::parse(std::ifstream(dir.path / "manifest.json"));
  CHECK(manifest.at("parameters").size() == m.params().size());
  CHECK(manifest.at("parameters")[0].contains("offset"));

  SUBCASE("different weights change the id") {
    HierModel other(small_config());
    CHECK(checkpoint_id(other) != checkpoint_id(m));
  }
  SUBCASE("truncated payload") {
    std::filesystem::resize_file(dir.path / "params.bin", std::filesystem::file_size(dir.path / "params.bin") - 5);
    CHECK_THROWS_AS(load_checkpoint(dir.path), ParseError);
  }
  SUBCASE("corrupt manifest") {
    std::ofstream(dir.path / "manifest.json") << "{ not json";
    CHECK_THROWS_AS(load_checkpoint(dir.path), ParseError);
  }
  SUBCASE("missing directory") { CHECK_THROWS(load_checkpoint(dir.path / "absent")); }
}
