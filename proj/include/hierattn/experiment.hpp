#pragma once

#include <cstdint>
#include <filesystem>
#include <string>

#include "json.hpp"

#include "hierattn/corpus.hpp"
#include "hierattn/model.hpp"
#include "hierattn/train.hpp"

namespace hierattn {

// Everything one proposed-vs-baseline run needs. Config files hold optional
// "corpus", "model" and "train" objects; absent keys keep defaults.
struct ExperimentConfig {
  CorpusConfig corpus;
  ModelConfig model;
  TrainConfig train;
};

void to_json(nlohmann::json& j, const ExperimentConfig& c);
void from_json(const nlohmann::json& j, ExperimentConfig& c);
ExperimentConfig load_experiment_config(const std::filesystem::path& path);

// Sets the corpus, model and training seeds from one value.
void apply_seed(ExperimentConfig& c, std::uint64_t seed);

// Model config with vocabulary, patch width and capacities matched to a corpus.
ModelConfig model_for_corpus(ModelConfig m, const CorpusConfig& corpus, std::size_t max_sentences);

// Builds and trains one architecture on the corpus training split.
HierModel train_model(Architecture arch, const std::vector<SpeechSample>& train, const CorpusConfig& corpus,
                      const ExperimentConfig& cfg, TrainHistory* history = nullptr, const LogSink& log = {});

EvalReport evaluate_model(const HierModel& model, const std::vector<SpeechSample>& test, std::size_t max_sentences);

struct CompareReport {
  EvalReport proposed;
  EvalReport baseline;
  std::string proposed_checkpoint;
  std::string baseline_checkpoint;
  TrainHistory proposed_history;
  TrainHistory baseline_history;
};

// Trains both architectures on the same corpus and evaluates them on its test split.
CompareReport run_compare(const Corpus& corpus, const ExperimentConfig& cfg);

void to_json(nlohmann::json& j, const CompareReport& r);

}  // namespace hierattn
