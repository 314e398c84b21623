#pragma once

#include <optional>
#include <span>
#include <string>
#include <vector>

#include "json.hpp"

#include "hierattn/attention.hpp"
#include "hierattn/model.hpp"

namespace hierattn {

// Relevancy maps of the hierarchical interpretation:
//   ss  speech-level sentence↔sentence (square, index 0 = speech [cls])
//   tt  text token↔token (square, index 0 = text [cls])
//   aa  audio patch↔patch (square, index 0 = audio [cls])
//   ta  text→audio (t×a), starts at zero
enum class RelevancyKind { SS, TT, AA, TA };

std::string to_string(RelevancyKind kind);

struct RelevancyMap {
  RelevancyKind kind = RelevancyKind::SS;
  Tensor matrix;
  std::size_t updates = 0;
};

// Head-averaged, zero-clamped product of attention probabilities and their gradients.
struct WeightedAttentionMap {
  Tensor matrix;  // q×k
  LayerId source;
};

WeightedAttentionMap weighted_attention(const AttentionTrace& trace);

// Identity for ss/tt/aa (rows must equal cols), zeros for ta.
RelevancyMap init_relevancy(RelevancyKind kind, std::size_t rows, std::size_t cols);
inline RelevancyMap init_relevancy(RelevancyKind kind, std::size_t n) { return init_relevancy(kind, n, n); }

// R ← R + Ā·R for a square map.
void update_self(RelevancyMap& r, const WeightedAttentionMap& abar);
// R_ta ← R_ta + Ā·R_ta with Ā from a text-source self-attention layer.
void update_cross_via_self(RelevancyMap& r_ta, const WeightedAttentionMap& abar);
// Splits R_aa = I + R̂, divides every nonzero row of R̂ by its sum, re-adds I.
// Rows of R̂ that sum to zero stay zero.
Tensor normalize_aa(const RelevancyMap& r_aa);
// R_ta ← R_ta + Ā·R̄_aa with Ā from a cross-attention layer.
void update_cross(RelevancyMap& r_ta, const WeightedAttentionMap& abar, const Tensor& rbar_aa);

// Sentence scores from the speech-level traces: row 0 of R_ss without the [cls] column.
std::vector<double> speech_level_interpret(std::span<const AttentionTrace> traces, std::size_t n_sentences,
                                           std::optional<std::size_t> expected_layers = std::nullopt);

struct SentenceRelevancy {
  std::vector<double> token_scores;  // one per text token ([cls] excluded)
  std::vector<double> patch_scores;  // one per audio patch ([cls] excluded)
  double audio_cls_score = 0.0;      // R_ta[0][0]
};

// Expected number of traces of each kind for one sentence.
struct SentenceCensus {
  std::size_t audio_self = 0;
  std::size_t text_self = 0;
  std::size_t cross = 0;
};

SentenceCensus sentence_census(const ModelConfig& cfg);

// Runs the three-map update sequence over one sentence's traces in forward order.
// n_tokens / n_patches exclude the [cls] positions.
SentenceRelevancy sentence_level_interpret(std::span<const AttentionTrace> traces, std::size_t n_tokens,
                                           std::size_t n_patches,
                                           std::optional<SentenceCensus> expected = std::nullopt);

// Indices sorted by descending score; ties go to the lower index.
std::vector<std::size_t> rank_descending(std::span<const double> scores);

struct SelectedSentence {
  std::size_t index = 0;
  std::vector<double> token_scores;
  std::vector<double> patch_scores;
  double audio_cls_score = 0.0;
  PatchGrid grid;
};

struct InterpretationResult {
  std::string sample_id;
  std::string checkpoint_id;
  std::vector<double> sentence_scores;
  std::vector<SelectedSentence> selected;  // in rank order
  std::vector<double> class_probs;
};

// Traces of one proposed-model forward pass with gradients of the depressed logit.
struct RecordedPass {
  Tensor logits;
  std::vector<AttentionTrace> traces;
};

RecordedPass record_depressed_gradients(const HierModel& model, const SpeechSample& sample);

// Speech-level ranking followed by sentence-level maps for the top_k sentences,
// all from one forward pass and one backward pass from the depressed logit.
InterpretationResult hierarchical_interpret(const HierModel& model, const SpeechSample& sample, std::size_t top_k = 2);

void to_json(nlohmann::json& j, const InterpretationResult& r);
// Returns human-readable schema violations; empty when the document is valid.
std::vector<std::string> validate_interpretation_json(const nlohmann::json& j);

}  // namespace hierattn
