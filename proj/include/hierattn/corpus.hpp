#pragma once

#include <cstdint>
#include <filesystem>
#include <iosfwd>
#include <string>
#include <vector>

#include "json.hpp"

#include "hierattn/sample.hpp"

namespace hierattn {

enum class EvidenceModality { Both, TextOnly, AudioOnly };

std::string to_string(EvidenceModality m);

struct CorpusConfig {
  std::size_t n_train = 200;
  std::size_t n_test = 60;
  std::size_t min_sentences = 5;
  std::size_t max_sentences = 12;
  std::size_t vocab_size = 64;
  std::size_t evidence_vocab = 8;  // ids [vocab_size - evidence_vocab, vocab_size) are reserved for evidence
  std::size_t min_tokens = 4;
  std::size_t max_tokens = 10;
  PatchGrid patch_grid{8, 4};
  std::size_t patch_dim = 16;
  double signal_fraction = 0.2;
  double signal_strength = 1.5;
  std::size_t evidence_tokens = 2;   // per evidence sentence
  std::size_t evidence_patches = 4;  // per evidence sentence
  EvidenceModality modality = EvidenceModality::Both;
  std::uint64_t seed = 1234;

  void validate() const;
};

void to_json(nlohmann::json& j, const CorpusConfig& c);
void from_json(const nlohmann::json& j, CorpusConfig& c);

struct SentenceEvidence {
  std::size_t sentence = 0;
  std::vector<std::size_t> token_positions;  // positions within the sentence's token list
  std::vector<std::size_t> patch_indices;    // row indices into audio_patches
};

// Ground truth for one speech; empty for negative speeches.
struct SampleEvidence {
  std::vector<SentenceEvidence> sentences;

  bool is_evidence_sentence(std::size_t j) const;
  const SentenceEvidence* find(std::size_t j) const;
};

struct Corpus {
  CorpusConfig config;
  std::vector<SpeechSample> train;
  std::vector<SpeechSample> test;
  std::vector<SampleEvidence> train_key;  // parallel to train
  std::vector<SampleEvidence> test_key;   // parallel to test
};

Corpus generate_corpus(const CorpusConfig& config);

struct LabeledSegment {
  const SentencePair* sentence = nullptr;
  int label = kNormal;
  std::size_t sample = 0;  // index into the source list
};

// Every sentence inherits its speech's label.
std::vector<LabeledSegment> segment_labeled_view(const std::vector<SpeechSample>& samples);

// Sample file: one JSON header line, then per sentence a JSON line followed by the
// patch tensor in binary tensor form.
void save_sample(std::ostream& out, const SpeechSample& sample, std::size_t vocab_size);
void save_sample(const std::filesystem::path& path, const SpeechSample& sample, std::size_t vocab_size);
SpeechSample load_sample(std::istream& in);
SpeechSample load_external(const std::filesystem::path& path);

// Corpus directory: corpus.json (config + evidence key), train/ and test/ sample files.
void save_corpus(const Corpus& corpus, const std::filesystem::path& dir);
Corpus load_corpus(const std::filesystem::path& dir);

}  // namespace hierattn
