#pragma once

#include <cstdint>
#include <filesystem>
#include <span>
#include <string>
#include <vector>

#include "json.hpp"

#include "hierattn/attention.hpp"
#include "hierattn/params.hpp"
#include "hierattn/sample.hpp"

namespace hierattn {

enum class Architecture { Proposed, Baseline };

std::string to_string(Architecture arch);
Architecture architecture_from_string(const std::string& s);

struct ModelConfig {
  Architecture arch = Architecture::Proposed;
  std::size_t d_model = 32;
  std::size_t n_heads = 4;
  std::size_t d_ff = 64;
  std::size_t audio_layers = 2;
  std::size_t text_layers = 2;
  std::size_t fusion_blocks = 8;
  std::size_t speech_layers = 6;
  std::size_t vocab_size = 64;
  std::size_t patch_dim = 16;
  std::size_t max_tokens = 32;
  std::size_t max_patches = 64;
  std::size_t max_sentences = 42;
  double dropout = 0.0;
  std::uint64_t seed = 7;

  void validate() const;
  bool operator==(const ModelConfig&) const = default;
};

void to_json(nlohmann::json& j, const ModelConfig& cfg);
// Missing keys keep their defaults.
void from_json(const nlohmann::json& j, ModelConfig& cfg);

// Number of attention traces one sentence contributes to a forward pass.
std::size_t traces_per_sentence(const ModelConfig& cfg);

// Hidden states of one sentence after the modality encoders, [cls] at row 0.
struct SentenceStates {
  Var audio;  // (a0+1)×d
  Var text;   // (t0+1)×d
};

// Sentence-level block (audio/text encoders + cross-modal fusion) followed either by
// the speech-level encoder (proposed) or directly by the classifier (baseline).
// Logit index 1 is the depressed class.
class HierModel {
 public:
  explicit HierModel(ModelConfig cfg);

  HierModel(const HierModel&) = delete;
  HierModel& operator=(const HierModel&) = delete;
  HierModel(HierModel&&) = default;
  HierModel& operator=(HierModel&&) = default;

  const ModelConfig& config() const noexcept { return cfg_; }
  ParameterStore& params() noexcept { return store_; }
  const ParameterStore& params() const noexcept { return store_; }

  void validate(const SentencePair& s) const;
  void validate(const SpeechSample& sample) const;

  SentenceStates encode_sentence(const ForwardContext& ctx, const SentencePair& s) const;
  // Text [cls] row of the fused sequence, 1×d.
  Var fuse_cross_modal(const ForwardContext& ctx, const SentenceStates& states) const;
  Var sentence_embedding(const ForwardContext& ctx, const SentencePair& s) const;
  // Speech [cls] → 1×2 logits.
  Var speech_forward(const ForwardContext& ctx, std::span<const Var> embeddings) const;
  Var proposed_forward(const ForwardContext& ctx, const SpeechSample& sample) const;
  Var baseline_forward(const ForwardContext& ctx, const SentencePair& s) const;
  // Classifier head alone on a 1×d representation.
  Var classify(const ForwardContext& ctx, Var representation) const;

  // Copies parameter values from a model with identical structure.
  void copy_parameters_from(const HierModel& other);

  const DecoderBlockParams& fusion_block(std::size_t i) const { return fusion_.at(i); }
  const EncoderBlockParams& speech_block(std::size_t i) const { return speech_.at(i); }

 private:
  void build(std::mt19937_64& rng);

  ModelConfig cfg_;
  ParameterStore store_;

  Parameter* patch_proj_w_ = nullptr;
  Parameter* patch_proj_b_ = nullptr;
  Parameter* audio_cls_ = nullptr;
  Parameter* audio_pos_ = nullptr;
  std::vector<EncoderBlockParams> audio_enc_;

  Parameter* token_embed_ = nullptr;
  Parameter* text_cls_ = nullptr;
  Parameter* text_pos_ = nullptr;
  std::vector<EncoderBlockParams> text_enc_;

  std::vector<DecoderBlockParams> fusion_;

  Parameter* speech_cls_ = nullptr;
  Parameter* speech_pos_ = nullptr;
  std::vector<EncoderBlockParams> speech_;

  Parameter* head_w_ = nullptr;
  Parameter* head_b_ = nullptr;
};

// argmax over two logits, ties toward class 0 (normal).
int predict(const Tensor& logits);
std::vector<double> class_probabilities(const Tensor& logits);

// 1 iff strictly more than threshold_count predictions are 1.
int majority_vote(std::span<const int> sentence_preds, std::size_t threshold_count);
// Default threshold floor(n/2).
int majority_vote(std::span<const int> sentence_preds);

// Checkpoint: <dir>/manifest.json + <dir>/params.bin.
void save_checkpoint(const HierModel& model, const std::filesystem::path& dir);
HierModel load_checkpoint(const std::filesystem::path& dir);
// Stable identifier derived from config and parameter bytes.
std::string checkpoint_id(const HierModel& model);

}  // namespace hierattn
