#include "hierattn/train.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>
#include <random>

#include "hierattn/errors.hpp"

namespace hierattn {

void TrainConfig::validate() const {
  if (!(learning_rate > 0.0)) throw std::invalid_argument("learning_rate must be positive");
  if (epochs == 0) throw std::invalid_argument("epochs must be positive");
  if (accumulation_steps == 0) throw std::invalid_argument("accumulation_steps must be at least 1");
  if (batch_size == 0) throw std::invalid_argument("batch_size must be positive");
  if (max_sentences == 0) throw std::invalid_argument("max_sentences must be positive");
  if (!(beta1 >= 0.0 && beta1 < 1.0) || !(beta2 >= 0.0 && beta2 < 1.0) || !(epsilon > 0.0)) {
    throw std::invalid_argument("invalid Adam hyperparameters");
  }
}

void to_json(nlohmann::json& j, const TrainConfig& c) {
  j = nlohmann::json{{"learning_rate", c.learning_rate},
                     {"epochs", c.epochs},
                     {"accumulation_steps", c.accumulation_steps},
                     {"batch_size", c.batch_size},
                     {"max_sentences", c.max_sentences},
                     {"beta1", c.beta1},
                     {"beta2", c.beta2},
                     {"epsilon", c.epsilon},
                     {"seed", c.seed}};
}

void from_json(const nlohmann::json& j, TrainConfig& c) {
  c.learning_rate = j.value("learning_rate", c.learning_rate);
  c.epochs = j.value("epochs", c.epochs);
  c.accumulation_steps = j.value("accumulation_steps", c.accumulation_steps);
  c.batch_size = j.value("batch_size", c.batch_size);
  c.max_sentences = j.value("max_sentences", c.max_sentences);
  c.beta1 = j.value("beta1", c.beta1);
  c.beta2 = j.value("beta2", c.beta2);
  c.epsilon = j.value("epsilon", c.epsilon);
  c.seed = j.value("seed", c.seed);
}

GradientBuffer::GradientBuffer(const ParameterStore& store) {
  grads_.reserve(store.size());
  for (const auto& p : store) grads_.emplace_back(p.value.shape());
}

void GradientBuffer::zero() {
  for (auto& g : grads_) g.fill(0.0);
}

void GradientBuffer::accumulate(const Tape& tape, const ParameterStore& store) {
  tape.for_each_parameter_grad([&](const Parameter& p, const Tensor& g) { add_inplace(grads_[store.index_of(p)], g); });
}

double GradientBuffer::max_abs_diff(const GradientBuffer& other) const {
  double m = 0.0;
  for (std::size_t i = 0; i < grads_.size(); ++i) m = std::max(m, hierattn::max_abs_diff(grads_[i], other.grads_[i]));
  return m;
}

Adam::Adam(const ParameterStore& store, double lr, double beta1, double beta2, double epsilon)
    : lr_(lr), beta1_(beta1), beta2_(beta2), eps_(epsilon) {
  for (const auto& p : store) {
    m_.emplace_back(p.value.shape());
    v_.emplace_back(p.value.shape());
  }
}

void Adam::step(ParameterStore& store, const GradientBuffer& grads, double grad_scale) {
  ++t_;
  const double bc1 = 1.0 - std::pow(beta1_, static_cast<double>(t_));
  const double bc2 = 1.0 - std::pow(beta2_, static_cast<double>(t_));
  const auto gs = grads.tensors();
  for (std::size_t i = 0; i < store.size(); ++i) {
    auto w = store[i].value.data();
    auto g = gs[i].data();
    auto m = m_[i].data();
    auto v = v_[i].data();
    for (std::size_t k = 0; k < w.size(); ++k) {
      const double gk = g[k] * grad_scale;
      m[k] = beta1_ * m[k] + (1.0 - beta1_) * gk;
      v[k] = beta2_ * v[k] + (1.0 - beta2_) * gk * gk;
      w[k] -= lr_ * (m[k] / bc1) / (std::sqrt(v[k] / bc2) + eps_);
    }
  }
}

std::string to_jsonl(const LogRecord& r) {
  return nlohmann::json{{"epoch", r.epoch}, {"step", r.step}, {"loss", r.loss}}.dump();
}

SpeechSample truncated(const SpeechSample& s, std::size_t max_sentences) {
  if (s.sentences.size() <= max_sentences) return s;
  SpeechSample out{s.participant_id, s.label, s.grid, {}};
  out.sentences.assign(s.sentences.begin(), s.sentences.begin() + static_cast<std::ptrdiff_t>(max_sentences));
  return out;
}

namespace {

double checked_loss(Var loss, const std::string& where) {
  const double v = loss.value()[0];
  if (!std::isfinite(v)) throw TrainingDiverged("non-finite loss " + std::to_string(v) + " at " + where);
  return v;
}

}  // namespace

double speech_gradients(const HierModel& model, const SpeechSample& sample, GradientBuffer& into) {
  Tape tape;
  const ForwardContext ctx{tape, nullptr, 0.0, nullptr};
  Var logits = model.proposed_forward(ctx, sample);
  const int label[] = {sample.label};
  Var loss = cross_entropy(logits, label);
  tape.backward(loss);
  into.accumulate(tape, model.params());
  return loss.value()[0];
}

TrainHistory train_proposed(HierModel& model, const std::vector<SpeechSample>& train, const TrainConfig& cfg,
                            const LogSink& log) {
  cfg.validate();
  if (model.config().arch != Architecture::Proposed) throw ContractError("train_proposed needs the proposed model");
  if (train.empty()) throw std::invalid_argument("empty training set");
  std::mt19937_64 rng(cfg.seed);
  Adam adam(model.params(), cfg.learning_rate, cfg.beta1, cfg.beta2, cfg.epsilon);
  GradientBuffer grads(model.params());
  TrainHistory history;

  std::vector<std::size_t> order(train.size());
  std::iota(order.begin(), order.end(), std::size_t{0});
  for (std::size_t epoch = 0; epoch < cfg.epochs; ++epoch) {
    std::shuffle(order.begin(), order.end(), rng);
    double epoch_loss = 0.0, window_loss = 0.0;
    std::size_t in_window = 0;
    for (std::size_t i = 0; i < order.size(); ++i) {
      const SpeechSample sample = truncated(train[order[i]], cfg.max_sentences);
      Tape tape;
      const ForwardContext ctx{tape, nullptr, model.config().dropout, &rng};
      Var logits = model.proposed_forward(ctx, sample);
      const int label[] = {sample.label};
      Var loss = cross_entropy(logits, label);
      const double l = checked_loss(loss, "epoch " + std::to_string(epoch) + ", sample " + sample.participant_id);
      tape.backward(loss);
      grads.accumulate(tape, model.params());
      epoch_loss += l;
      window_loss += l;
      ++in_window;
      if (in_window == cfg.accumulation_steps || i + 1 == order.size()) {
        adam.step(model.params(), grads, 1.0 / static_cast<double>(in_window));
        grads.zero();
        ++history.optimizer_steps;
        if (log) log({epoch, history.optimizer_steps, window_loss / static_cast<double>(in_window)});
        window_loss = 0.0;
        in_window = 0;
      }
    }
    history.epoch_loss.push_back(epoch_loss / static_cast<double>(order.size()));
  }
  return history;
}

TrainHistory train_baseline(HierModel& model, const std::vector<LabeledSegment>& segments, const TrainConfig& cfg,
                            const LogSink& log) {
  cfg.validate();
  if (segments.empty()) throw std::invalid_argument("empty segment view");
  std::mt19937_64 rng(cfg.seed);
  Adam adam(model.params(), cfg.learning_rate, cfg.beta1, cfg.beta2, cfg.epsilon);
  GradientBuffer grads(model.params());
  TrainHistory history;

  std::vector<std::size_t> order(segments.size());
  std::iota(order.begin(), order.end(), std::size_t{0});
  for (std::size_t epoch = 0; epoch < cfg.epochs; ++epoch) {
    std::shuffle(order.begin(), order.end(), rng);
    double epoch_loss = 0.0;
    for (std::size_t start = 0; start < order.size(); start += cfg.batch_size) {
      const std::size_t end = std::min(order.size(), start + cfg.batch_size);
      double batch_loss = 0.0;
      for (std::size_t i = start; i < end; ++i) {
        const LabeledSegment& seg = segments[order[i]];
        Tape tape;
        const ForwardContext ctx{tape, nullptr, model.config().dropout, &rng};
        Var logits = model.baseline_forward(ctx, *seg.sentence);
        const int label[] = {seg.label};
        Var loss = cross_entropy(logits, label);
        batch_loss += checked_loss(loss, "epoch " + std::to_string(epoch) + ", segment " + std::to_string(order[i]));
        tape.backward(loss);
        grads.accumulate(tape, model.params());
      }
      const auto n = static_cast<double>(end - start);
      adam.step(model.params(), grads, 1.0 / n);
      grads.zero();
      ++history.optimizer_steps;
      epoch_loss += batch_loss;
      if (log) log({epoch, history.optimizer_steps, batch_loss / n});
    }
    history.epoch_loss.push_back(epoch_loss / static_cast<double>(order.size()));
  }
  return history;
}

void to_json(nlohmann::json& j, const EvalReport& r) {
  j = nlohmann::json{{"precision", r.precision},
                     {"recall", r.recall},
                     {"f1", r.f1},
                     {"confusion", {{"tp", r.tp}, {"fp", r.fp}, {"tn", r.tn}, {"fn", r.fn}}},
                     {"predictions", r.predictions},
                     {"labels", r.labels}};
}

EvalReport metrics_from_predictions(std::span<const int> predictions, std::span<const int> labels) {
  if (predictions.size() != labels.size()) throw DimensionError("one prediction per label required");
  if (predictions.empty()) throw std::invalid_argument("empty evaluation set");
  EvalReport r;
  r.predictions.assign(predictions.begin(), predictions.end());
  r.labels.assign(labels.begin(), labels.end());
  for (std::size_t i = 0; i < predictions.size(); ++i) {
    const bool p = predictions[i] == kDepressed, y = labels[i] == kDepressed;
    if (p && y) ++r.tp;
    else if (p && !y) ++r.fp;
    else if (!p && y) ++r.fn;
    else ++r.tn;
  }
  r.precision = r.tp + r.fp ? static_cast<double>(r.tp) / static_cast<double>(r.tp + r.fp) : 0.0;
  r.recall = r.tp + r.fn ? static_cast<double>(r.tp) / static_cast<double>(r.tp + r.fn) : 0.0;
  r.f1 = r.precision + r.recall > 0.0 ? 2.0 * r.precision * r.recall / (r.precision + r.recall) : 0.0;
  return r;
}

EvalReport evaluate(const HierModel& model, const std::vector<SpeechSample>& test, EvalMode mode,
                    std::size_t max_sentences) {
  if (test.empty()) throw std::invalid_argument("empty test set");
  std::vector<int> preds, labels;
  for (const auto& full : test) {
    const SpeechSample sample = truncated(full, max_sentences);
    labels.push_back(sample.label);
    if (mode == EvalMode::Proposed) {
      Tape tape(false);
      const ForwardContext ctx{tape};
      preds.push_back(predict(model.proposed_forward(ctx, sample).value()));
    } else {
      std::vector<int> votes;
      for (const auto& s : sample.sentences) {
        Tape tape(false);
        const ForwardContext ctx{tape};
        votes.push_back(predict(model.baseline_forward(ctx, s).value()));
      }
      preds.push_back(majority_vote(votes));
    }
  }
  return metrics_from_predictions(preds, labels);
}

}  // namespace hierattn
