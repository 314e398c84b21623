#include "hierattn/relevancy.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>

#include "hierattn/errors.hpp"

namespace hierattn {

std::string to_string(RelevancyKind kind) {
  switch (kind) {
    case RelevancyKind::SS: return "ss";
    case RelevancyKind::TT: return "tt";
    case RelevancyKind::AA: return "aa";
    case RelevancyKind::TA: return "ta";
  }
  return "?";
}

WeightedAttentionMap weighted_attention(const AttentionTrace& trace) {
  if (!trace.grads) {
    throw ContractError("weighted_attention: " + to_string(trace.id.kind) + " trace at depth " +
                        std::to_string(trace.id.depth) + " has no gradients");
  }
  const Tensor& a = trace.probs;
  const Tensor& g = *trace.grads;
  if (a.rank() != 3 || g.shape() != a.shape()) {
    throw DimensionError("weighted_attention: probs " + shape_string(a.shape()) + " vs grads " +
                         shape_string(g.shape()));
  }
  const std::size_t h = a.shape()[0], q = a.shape()[1], k = a.shape()[2];
  Tensor out({q, k});
  const std::size_t plane = q * k;
  for (std::size_t head = 0; head < h; ++head) {
    for (std::size_t i = 0; i < plane; ++i) {
      const double w = g[head * plane + i] * a[head * plane + i];
      if (w > 0.0) out[i] += w;
    }
  }
  const double inv_h = 1.0 / static_cast<double>(h);
  for (double& v : out.data()) v *= inv_h;
  return {std::move(out), trace.id};
}

RelevancyMap init_relevancy(RelevancyKind kind, std::size_t rows, std::size_t cols) {
  if (rows == 0 || cols == 0) throw DimensionError("relevancy map dimensions must be positive");
  if (kind == RelevancyKind::TA) return {kind, Tensor({rows, cols}), 0};
  if (rows != cols) throw DimensionError(to_string(kind) + " relevancy map must be square");
  return {kind, Tensor::identity(rows), 0};
}

namespace {

void require_shape(const Tensor& m, std::size_t rows, std::size_t cols, const char* what) {
  if (m.rank() != 2 || m.rows() != rows || m.cols() != cols) {
    throw DimensionError(std::string(what) + ": got " + shape_string(m.shape()) + ", expected [" +
                         std::to_string(rows) + "x" + std::to_string(cols) + "]");
  }
}

}  // namespace

void update_self(RelevancyMap& r, const WeightedAttentionMap& abar) {
  if (r.kind == RelevancyKind::TA) throw ContractError("update_self applies to ss/tt/aa maps");
  const std::size_t n = r.matrix.rows();
  require_shape(abar.matrix, n, n, "update_self Ā");
  add_inplace(r.matrix, matmul(abar.matrix, r.matrix));
  ++r.updates;
}

void update_cross_via_self(RelevancyMap& r_ta, const WeightedAttentionMap& abar) {
  if (r_ta.kind != RelevancyKind::TA) throw ContractError("update_cross_via_self applies to the ta map");
  const std::size_t t = r_ta.matrix.rows();
  require_shape(abar.matrix, t, t, "update_cross_via_self Ā");
  add_inplace(r_ta.matrix, matmul(abar.matrix, r_ta.matrix));
  ++r_ta.updates;
}

Tensor normalize_aa(const RelevancyMap& r_aa) {
  const std::size_t n = r_aa.matrix.rows();
  require_shape(r_aa.matrix, n, n, "normalize_aa");
  Tensor hat = r_aa.matrix;
  for (std::size_t i = 0; i < n; ++i) hat(i, i) -= 1.0;
  for (std::size_t i = 0; i < n; ++i) {
    auto row = hat.row(i);
    const double s = std::accumulate(row.begin(), row.end(), 0.0);
    if (s != 0.0) {
      for (double& v : row) v /= s;
    }
  }
  for (std::size_t i = 0; i < n; ++i) hat(i, i) += 1.0;
  return hat;
}

void update_cross(RelevancyMap& r_ta, const WeightedAttentionMap& abar, const Tensor& rbar_aa) {
  if (r_ta.kind != RelevancyKind::TA) throw ContractError("update_cross applies to the ta map");
  const std::size_t t = r_ta.matrix.rows(), a = r_ta.matrix.cols();
  require_shape(abar.matrix, t, a, "update_cross Ā");
  require_shape(rbar_aa, a, a, "update_cross R̄_aa");
  add_inplace(r_ta.matrix, matmul(abar.matrix, rbar_aa));
  ++r_ta.updates;
}

std::vector<double> speech_level_interpret(std::span<const AttentionTrace> traces, std::size_t n_sentences,
                                           std::optional<std::size_t> expected_layers) {
  if (n_sentences == 0) throw DimensionError("speech_level_interpret: no sentences");
  if (expected_layers && traces.size() != *expected_layers) {
    throw ContractError("speech_level_interpret: expected " + std::to_string(*expected_layers) +
                        " speech-level traces, got " + std::to_string(traces.size()));
  }
  const std::size_t s = n_sentences + 1;
  RelevancyMap r_ss = init_relevancy(RelevancyKind::SS, s);
  for (std::size_t l = 0; l < traces.size(); ++l) {
    const AttentionTrace& tr = traces[l];
    if (tr.id.kind != LayerKind::SpeechSelf || tr.id.depth != static_cast<int>(l)) {
      throw ContractError("speech_level_interpret: trace " + std::to_string(l) + " is " + to_string(tr.id.kind) +
                          " depth " + std::to_string(tr.id.depth) + ", expected speech-self depth " +
                          std::to_string(l));
    }
    update_self(r_ss, weighted_attention(tr));
  }
  auto row = r_ss.matrix.row(0);
  return {row.begin() + 1, row.end()};
}

SentenceCensus sentence_census(const ModelConfig& cfg) {
  return {cfg.audio_layers, cfg.text_layers + cfg.fusion_blocks, cfg.fusion_blocks};
}

SentenceRelevancy sentence_level_interpret(std::span<const AttentionTrace> traces, std::size_t n_tokens,
                                           std::size_t n_patches, std::optional<SentenceCensus> expected) {
  if (n_tokens == 0 || n_patches == 0) throw DimensionError("sentence_level_interpret: empty modality");
  const std::size_t t = n_tokens + 1;
  const std::size_t a = n_patches + 1;

  SentenceCensus seen;
  const int sentence = traces.empty() ? -1 : traces.front().id.sentence;
  for (const auto& tr : traces) {
    const auto where = to_string(tr.id.kind) + " depth " + std::to_string(tr.id.depth);
    if (tr.id.sentence != sentence) throw ContractError("sentence_level_interpret: traces span several sentences");
    std::size_t* counter = nullptr;
    std::size_t q = 0, k = 0;
    switch (tr.id.kind) {
      case LayerKind::AudioSelf:
        if (seen.cross > 0) throw ContractError("sentence_level_interpret: " + where + " after a cross layer");
        counter = &seen.audio_self;
        q = k = a;
        break;
      case LayerKind::TextSelf:
        counter = &seen.text_self;
        q = k = t;
        break;
      case LayerKind::Cross:
        counter = &seen.cross;
        q = t;
        k = a;
        break;
      case LayerKind::SpeechSelf:
        throw ContractError("sentence_level_interpret: speech-level trace in sentence traces");
    }
    if (tr.id.depth != static_cast<int>(*counter)) {
      throw ContractError("sentence_level_interpret: misordered trace " + where + ", expected depth " +
                          std::to_string(*counter));
    }
    if (expected && expected->text_self >= expected->cross) {
      // fusion block b emits text-self (depth text_encoder + b) then cross (depth b)
      const std::size_t text_encoder = expected->text_self - expected->cross;
      if (tr.id.kind == LayerKind::Cross && seen.text_self != text_encoder + seen.cross + 1) {
        throw ContractError("sentence_level_interpret: " + where + " out of fusion-block order");
      }
      if (tr.id.kind == LayerKind::TextSelf && seen.text_self >= text_encoder &&
          seen.cross != seen.text_self - text_encoder) {
        throw ContractError("sentence_level_interpret: " + where + " out of fusion-block order");
      }
    }
    ++*counter;
    if (tr.probs.rank() != 3 || tr.queries() != q || tr.keys() != k) {
      throw DimensionError("sentence_level_interpret: " + where + " has shape " + shape_string(tr.probs.shape()));
    }
  }
  if (expected && (seen.audio_self != expected->audio_self || seen.text_self != expected->text_self ||
                   seen.cross != expected->cross)) {
    throw ContractError("sentence_level_interpret: trace census does not match the model structure");
  }

  RelevancyMap r_tt = init_relevancy(RelevancyKind::TT, t);
  RelevancyMap r_aa = init_relevancy(RelevancyKind::AA, a);
  RelevancyMap r_ta = init_relevancy(RelevancyKind::TA, t, a);
  for (const auto& tr : traces) {
    const WeightedAttentionMap abar = weighted_attention(tr);
    switch (tr.id.kind) {
      case LayerKind::AudioSelf:
        update_self(r_aa, abar);
        break;
      case LayerKind::TextSelf:
        update_self(r_tt, abar);
        update_cross_via_self(r_ta, abar);
        break;
      case LayerKind::Cross:
        update_cross(r_ta, abar, normalize_aa(r_aa));
        break;
      case LayerKind::SpeechSelf:
        break;
    }
  }

  SentenceRelevancy out;
  auto tt0 = r_tt.matrix.row(0);
  out.token_scores.assign(tt0.begin() + 1, tt0.end());
  auto ta0 = r_ta.matrix.row(0);
  out.audio_cls_score = ta0[0];
  out.patch_scores.assign(ta0.begin() + 1, ta0.end());
  return out;
}

std::vector<std::size_t> rank_descending(std::span<const double> scores) {
  std::vector<std::size_t> order(scores.size());
  std::iota(order.begin(), order.end(), std::size_t{0});
  std::stable_sort(order.begin(), order.end(), [&](std::size_t x, std::size_t y) { return scores[x] > scores[y]; });
  return order;
}

RecordedPass record_depressed_gradients(const HierModel& model, const SpeechSample& sample) {
  if (model.config().arch != Architecture::Proposed) {
    throw ContractError("hierarchical interpretation needs the proposed architecture");
  }
  Tape tape;
  TraceSink sink;
  const ForwardContext ctx{tape, &sink, 0.0, nullptr};
  Var logits = model.proposed_forward(ctx, sample);
  tape.backward(element(logits, 0, kDepressed));
  return {logits.value(), snapshot(sink.records)};
}

InterpretationResult hierarchical_interpret(const HierModel& model, const SpeechSample& sample, std::size_t top_k) {
  const std::size_t n = sample.sentences.size();
  if (top_k < 1 || top_k > n) {
    throw std::out_of_range("top_k " + std::to_string(top_k) + " outside 1.." + std::to_string(n));
  }
  const ModelConfig& cfg = model.config();
  RecordedPass pass = record_depressed_gradients(model, sample);

  const std::size_t per_sentence = traces_per_sentence(cfg);
  if (pass.traces.size() != n * per_sentence + cfg.speech_layers) {
    throw ContractError("hierarchical_interpret: unexpected trace census " + std::to_string(pass.traces.size()));
  }
  const std::span<const AttentionTrace> all(pass.traces);

  InterpretationResult result;
  result.sample_id = sample.participant_id;
  result.checkpoint_id = checkpoint_id(model);
  result.class_probs = class_probabilities(pass.logits);
  result.sentence_scores = speech_level_interpret(all.subspan(n * per_sentence), n, cfg.speech_layers);

  const auto order = rank_descending(result.sentence_scores);
  for (std::size_t r = 0; r < top_k; ++r) {
    const std::size_t j = order[r];
    const SentencePair& s = sample.sentences[j];
    SentenceRelevancy rel = sentence_level_interpret(all.subspan(j * per_sentence, per_sentence), s.tokens.size(),
                                                     s.audio_patches.rows(), sentence_census(cfg));
    result.selected.push_back({j, std::move(rel.token_scores), std::move(rel.patch_scores), rel.audio_cls_score,
                               sample.grid});
  }
  return result;
}

void to_json(nlohmann::json& j, const InterpretationResult& r) {
  j = nlohmann::json{{"sample_id", r.sample_id},
                     {"checkpoint_id", r.checkpoint_id},
                     {"sentence_scores", r.sentence_scores},
                     {"class_probs", r.class_probs}};
  auto& sel = j["selected"] = nlohmann::json::array();
  for (const auto& s : r.selected) {
    sel.push_back({{"index", s.index},
                   {"token_scores", s.token_scores},
                   {"patch_scores", s.patch_scores},
                   {"audio_cls_score", s.audio_cls_score},
                   {"patch_grid", {{"rows", s.grid.rows}, {"cols", s.grid.cols}}}});
  }
}

namespace {

bool is_score_array(const nlohmann::json& v) {
  if (!v.is_array()) return false;
  return std::all_of(v.begin(), v.end(), [](const nlohmann::json& x) { return x.is_number() && x.get<double>() >= 0.0; });
}

}  // namespace

std::vector<std::string> validate_interpretation_json(const nlohmann::json& j) {
  std::vector<std::string> errors;
  if (!j.is_object()) return {"document is not an object"};
  if (!j.contains("sample_id") || !j["sample_id"].is_string()) errors.push_back("sample_id: string required");
  if (!j.contains("sentence_scores") || !is_score_array(j["sentence_scores"])) {
    errors.push_back("sentence_scores: array of non-negative numbers required");
  }
  if (!j.contains("class_probs") || !j["class_probs"].is_array() || j["class_probs"].size() != 2) {
    errors.push_back("class_probs: array of two numbers required");
  } else {
    double total = 0.0;
    for (const auto& p : j["class_probs"]) {
      if (!p.is_number()) errors.push_back("class_probs: non-numeric entry");
      else total += p.get<double>();
    }
    if (std::abs(total - 1.0) > 1e-9) errors.push_back("class_probs: must sum to 1");
  }
  if (!j.contains("selected") || !j["selected"].is_array()) {
    errors.push_back("selected: array required");
    return errors;
  }
  const std::size_t n = j.contains("sentence_scores") && j["sentence_scores"].is_array() ? j["sentence_scores"].size() : 0;
  std::vector<std::size_t> seen;
  for (std::size_t i = 0; i < j["selected"].size(); ++i) {
    const auto& s = j["selected"][i];
    const std::string at = "selected[" + std::to_string(i) + "]";
    if (!s.is_object()) {
      errors.push_back(at + ": object required");
      continue;
    }
    if (!s.contains("index") || !s["index"].is_number_unsigned() || s["index"].get<std::size_t>() >= n) {
      errors.push_back(at + ".index: valid sentence index required");
    } else {
      const auto idx = s["index"].get<std::size_t>();
      if (std::find(seen.begin(), seen.end(), idx) != seen.end()) errors.push_back(at + ".index: duplicate");
      seen.push_back(idx);
    }
    if (!s.contains("token_scores") || !is_score_array(s["token_scores"]) || s["token_scores"].empty()) {
      errors.push_back(at + ".token_scores: non-empty array of non-negative numbers required");
    }
    if (!s.contains("patch_scores") || !is_score_array(s["patch_scores"]) || s["patch_scores"].empty()) {
      errors.push_back(at + ".patch_scores: non-empty array of non-negative numbers required");
    }
    if (!s.contains("audio_cls_score") || !s["audio_cls_score"].is_number() || s["audio_cls_score"].get<double>() < 0) {
      errors.push_back(at + ".audio_cls_score: non-negative number required");
    }
    const auto& g = s.contains("patch_grid") ? s["patch_grid"] : nlohmann::json();
    if (!g.is_object() || !g.contains("rows") || !g.contains("cols") || !g["rows"].is_number_unsigned() ||
        !g["cols"].is_number_unsigned()) {
      errors.push_back(at + ".patch_grid: {rows, cols} required");
    } else if (s.contains("patch_scores") && s["patch_scores"].is_array() &&
               g["rows"].get<std::size_t>() * g["cols"].get<std::size_t>() != s["patch_scores"].size()) {
      errors.push_back(at + ".patch_grid: rows*cols must equal the number of patch scores");
    }
  }
  if (n > 0 && errors.empty()) {
    // selection must follow descending sentence score
    const auto& scores = j["sentence_scores"];
    for (std::size_t i = 1; i < j["selected"].size(); ++i) {
      const double prev = scores[j["selected"][i - 1]["index"].get<std::size_t>()].get<double>();
      const double cur = scores[j["selected"][i]["index"].get<std::size_t>()].get<double>();
      if (cur > prev) errors.push_back("selected: not ordered by descending sentence score");
    }
  }
  return errors;
}

}  // namespace hierattn
