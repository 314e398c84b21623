#include "hierattn/experiment.hpp"

#include <algorithm>
#include <fstream>

#include "hierattn/errors.hpp"

namespace hierattn {

void to_json(nlohmann::json& j, const ExperimentConfig& c) {
  j = nlohmann::json{{"corpus", c.corpus}, {"model", c.model}, {"train", c.train}};
}

void from_json(const nlohmann::json& j, ExperimentConfig& c) {
  if (!j.is_object()) throw std::invalid_argument("config must be a JSON object");
  if (j.contains("corpus")) j.at("corpus").get_to(c.corpus);
  if (j.contains("model")) j.at("model").get_to(c.model);
  if (j.contains("train")) j.at("train").get_to(c.train);
}

ExperimentConfig load_experiment_config(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw std::runtime_error("cannot open config " + path.string());
  ExperimentConfig c;
  try {
    from_json(nlohmann::json::parse(in), c);
  } catch (const nlohmann::json::exception& e) {
    throw std::invalid_argument("bad config " + path.string() + ": " + e.what());
  }
  return c;
}

void apply_seed(ExperimentConfig& c, std::uint64_t seed) {
  c.corpus.seed = seed;
  c.model.seed = seed;
  c.train.seed = seed;
}

ModelConfig model_for_corpus(ModelConfig m, const CorpusConfig& corpus, std::size_t max_sentences) {
  m.vocab_size = corpus.vocab_size;
  m.patch_dim = corpus.patch_dim;
  m.max_tokens = std::max(m.max_tokens, corpus.max_tokens);
  m.max_patches = std::max(m.max_patches, corpus.patch_grid.count());
  m.max_sentences = std::max(m.max_sentences, max_sentences);
  return m;
}

HierModel train_model(Architecture arch, const std::vector<SpeechSample>& train, const CorpusConfig& corpus,
                      const ExperimentConfig& cfg, TrainHistory* history, const LogSink& log) {
  ModelConfig mc = model_for_corpus(cfg.model, corpus, cfg.train.max_sentences);
  mc.arch = arch;
  HierModel model(mc);
  TrainHistory h;
  if (arch == Architecture::Proposed) {
    h = train_proposed(model, train, cfg.train, log);
  } else {
    std::vector<SpeechSample> capped;
    capped.reserve(train.size());
    for (const auto& s : train) capped.push_back(truncated(s, cfg.train.max_sentences));
    h = train_baseline(model, segment_labeled_view(capped), cfg.train, log);
  }
  if (history) *history = std::move(h);
  return model;
}

EvalReport evaluate_model(const HierModel& model, const std::vector<SpeechSample>& test, std::size_t max_sentences) {
  const EvalMode mode = model.config().arch == Architecture::Proposed ? EvalMode::Proposed : EvalMode::BaselineVote;
  return evaluate(model, test, mode, max_sentences);
}

CompareReport run_compare(const Corpus& corpus, const ExperimentConfig& cfg) {
  CompareReport r;
  {
    HierModel m = train_model(Architecture::Proposed, corpus.train, corpus.config, cfg, &r.proposed_history);
    r.proposed = evaluate_model(m, corpus.test, cfg.train.max_sentences);
    r.proposed_checkpoint = checkpoint_id(m);
  }
  {
    HierModel m = train_model(Architecture::Baseline, corpus.train, corpus.config, cfg, &r.baseline_history);
    r.baseline = evaluate_model(m, corpus.test, cfg.train.max_sentences);
    r.baseline_checkpoint = checkpoint_id(m);
  }
  return r;
}

void to_json(nlohmann::json& j, const CompareReport& r) {
  j = nlohmann::json{
      {"proposed",
       {{"checkpoint_id", r.proposed_checkpoint}, {"epoch_loss", r.proposed_history.epoch_loss}, {"eval", r.proposed}}},
      {"baseline",
       {{"checkpoint_id", r.baseline_checkpoint}, {"epoch_loss", r.baseline_history.epoch_loss}, {"eval", r.baseline}}},
      {"proposed_beats_baseline", r.proposed.f1 > r.baseline.f1}};
}

}  // namespace hierattn
