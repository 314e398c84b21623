#pragma once

#include <cstdint>
#include <functional>
#include <span>
#include <string>
#include <vector>

#include "json.hpp"

#include "hierattn/corpus.hpp"
#include "hierattn/model.hpp"

namespace hierattn {

struct TrainConfig {
  double learning_rate = 3e-5;
  std::size_t epochs = 20;
  std::size_t accumulation_steps = 72;  // proposed model: samples per optimizer step
  std::size_t batch_size = 128;         // baseline: segments per optimizer step
  std::size_t max_sentences = 42;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double epsilon = 1e-8;
  std::uint64_t seed = 99;

  void validate() const;
};

void to_json(nlohmann::json& j, const TrainConfig& c);
void from_json(const nlohmann::json& j, TrainConfig& c);

// One gradient tensor per model parameter, in store order.
class GradientBuffer {
 public:
  explicit GradientBuffer(const ParameterStore& store);

  void zero();
  // Adds the parameter gradients recorded on `tape` after its backward pass.
  void accumulate(const Tape& tape, const ParameterStore& store);
  std::span<Tensor> tensors() noexcept { return grads_; }
  std::span<const Tensor> tensors() const noexcept { return grads_; }
  double max_abs_diff(const GradientBuffer& other) const;

 private:
  std::vector<Tensor> grads_;
};

class Adam {
 public:
  Adam(const ParameterStore& store, double lr, double beta1, double beta2, double epsilon);

  // Applies one update using grad * grad_scale.
  void step(ParameterStore& store, const GradientBuffer& grads, double grad_scale);
  std::size_t steps() const noexcept { return t_; }

 private:
  double lr_, beta1_, beta2_, eps_;
  std::size_t t_ = 0;
  std::vector<Tensor> m_, v_;
};

struct LogRecord {
  std::size_t epoch = 0;
  std::size_t step = 0;
  double loss = 0.0;  // mean loss over the samples in the optimizer step
};

using LogSink = std::function<void(const LogRecord&)>;
std::string to_jsonl(const LogRecord& r);

struct TrainHistory {
  std::vector<double> epoch_loss;  // mean per-sample loss
  std::size_t optimizer_steps = 0;
};

// Thrown when the loss stops being finite.
class TrainingDiverged : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

// First max_sentences sentences of a speech.
SpeechSample truncated(const SpeechSample& s, std::size_t max_sentences);

// Cross-entropy loss and parameter gradients for one speech (no dropout).
double speech_gradients(const HierModel& model, const SpeechSample& sample, GradientBuffer& into);

// Speech-level training, batch size 1 with gradient accumulation over accumulation_steps.
TrainHistory train_proposed(HierModel& model, const std::vector<SpeechSample>& train, const TrainConfig& cfg,
                            const LogSink& log = {});

// Sentence-level training on segment labels with minibatches of batch_size.
TrainHistory train_baseline(HierModel& model, const std::vector<LabeledSegment>& segments, const TrainConfig& cfg,
                            const LogSink& log = {});

struct EvalReport {
  double precision = 0.0;
  double recall = 0.0;
  double f1 = 0.0;
  std::size_t tp = 0, fp = 0, tn = 0, fn = 0;
  std::vector<int> predictions;
  std::vector<int> labels;
};

void to_json(nlohmann::json& j, const EvalReport& r);

// Precision/recall/F1 for the depressed class; zero when undefined.
EvalReport metrics_from_predictions(std::span<const int> predictions, std::span<const int> labels);

enum class EvalMode { Proposed, BaselineVote };

EvalReport evaluate(const HierModel& model, const std::vector<SpeechSample>& test, EvalMode mode,
                    std::size_t max_sentences = 42);

}  // namespace hierattn
