#pragma once

#include <algorithm>
#include <cmath>
#include <filesystem>
#include <functional>
#include <random>
#include <span>
#include <string>
#include <vector>

#include <unistd.h>

#include "hierattn/corpus.hpp"
#include "hierattn/model.hpp"
#include "hierattn/tape.hpp"
#include "hierattn/tensor.hpp"

namespace testsupport {

using namespace hierattn;

inline Tensor random_tensor(std::size_t rows, std::size_t cols, std::mt19937_64& rng, double lo = -1.0,
                            double hi = 1.0) {
  std::uniform_real_distribution<double> u(lo, hi);
  Tensor t({rows, cols});
  for (auto& v : t.data()) v = u(rng);
  return t;
}

inline double rel_error(double analytic, double numeric, double floor = 1e-6) {
  return std::abs(analytic - numeric) / std::max({std::abs(analytic), std::abs(numeric), floor});
}

// Scalar-valued function of taped inputs.
using ScalarFn = std::function<Var(Tape&, std::span<const Var>)>;

// Worst relative error between tape gradients and central differences over every
// entry of every input.
inline double fd_max_rel_error(const ScalarFn& f, const std::vector<Tensor>& inputs, double h = 1e-5) {
  std::vector<Parameter> params;
  for (std::size_t i = 0; i < inputs.size(); ++i) params.push_back({"x" + std::to_string(i), inputs[i]});

  auto evaluate = [&](bool track) {
    Tape tape(track);
    std::vector<Var> vars;
    for (const auto& p : params) vars.push_back(tape.parameter(p));
    Var out = f(tape, vars);
    return out.value()[0];
  };

  Tape tape;
  std::vector<Var> vars;
  for (const auto& p : params) vars.push_back(tape.parameter(p));
  tape.backward(f(tape, vars));
  std::vector<Tensor> grads;
  for (const auto& v : vars) grads.push_back(v.has_grad() ? v.grad() : Tensor(v.shape()));

  double worst = 0.0;
  for (std::size_t i = 0; i < params.size(); ++i) {
    for (std::size_t k = 0; k < params[i].value.size(); ++k) {
      const double orig = params[i].value[k];
      params[i].value[k] = orig + h;
      const double up = evaluate(false);
      params[i].value[k] = orig - h;
      const double down = evaluate(false);
      params[i].value[k] = orig;
      worst = std::max(worst, rel_error(grads[i][k], (up - down) / (2.0 * h)));
    }
  }
  return worst;
}

struct FdResult {
  double max_rel_error = 0.0;
  std::string worst;  // parameter name and flat index of the worst entry
  std::size_t checked = 0;
};

// Central differences over every scalar of every parameter in `store`, against the
// tape gradients of f. f must build its graph from `store` parameters.
inline FdResult fd_check_store(ParameterStore& store, const std::function<Var(Tape&)>& f, double h = 1e-5) {
  Tape tape;
  tape.backward(f(tape));
  std::vector<Tensor> grads;
  for (const auto& p : store) grads.emplace_back(p.value.shape());
  tape.for_each_parameter_grad([&](const Parameter& p, const Tensor& g) { grads[store.index_of(p)] = g; });

  auto value = [&] {
    Tape t(false);
    return f(t).value()[0];
  };
  FdResult r;
  for (std::size_t i = 0; i < store.size(); ++i) {
    Tensor& w = store[i].value;
    for (std::size_t k = 0; k < w.size(); ++k) {
      const double orig = w[k];
      w[k] = orig + h;
      const double up = value();
      w[k] = orig - h;
      const double down = value();
      w[k] = orig;
      const double e = rel_error(grads[i][k], (up - down) / (2.0 * h));
      ++r.checked;
      if (e > r.max_rel_error) {
        r.max_rel_error = e;
        r.worst = store[i].name + "[" + std::to_string(k) + "]";
      }
    }
  }
  return r;
}

// Reduces any tensor to a scalar with fixed, non-uniform weights so that every
// output entry carries a distinct gradient.
inline Var weighted_sum(Var x, std::uint64_t seed = 5) {
  std::mt19937_64 rng(seed);
  return sum(hadamard(x, x.tape().constant(random_tensor(x.rows(), x.cols(), rng))));
}

// 2-sentence toy setup: d_model 8, one layer per encoder, one fusion block, 2 speech layers.
inline ModelConfig toy_model_config() {
  ModelConfig m;
  m.d_model = 8;
  m.n_heads = 2;
  m.d_ff = 16;
  m.audio_layers = 1;
  m.text_layers = 1;
  m.fusion_blocks = 1;
  m.speech_layers = 2;
  m.dropout = 0.0;
  return m;
}

inline CorpusConfig toy_corpus_config() {
  CorpusConfig c;
  c.n_train = 4;
  c.n_test = 2;
  c.min_sentences = 2;
  c.max_sentences = 2;
  c.signal_fraction = 1.0;
  return c;
}

inline SpeechSample random_sample(std::size_t n_sentences, std::size_t n_tokens, const PatchGrid& grid,
                                  std::size_t patch_dim, std::size_t vocab, std::mt19937_64& rng) {
  SpeechSample s;
  s.participant_id = "rand";
  s.grid = grid;
  std::uniform_int_distribution<std::size_t> tok(0, vocab - 1);
  for (std::size_t j = 0; j < n_sentences; ++j) {
    SentencePair p;
    p.index = j;
    p.audio_patches = random_tensor(grid.count(), patch_dim, rng);
    for (std::size_t t = 0; t < n_tokens; ++t) p.tokens.push_back(tok(rng));
    s.sentences.push_back(std::move(p));
  }
  return s;
}

struct TempDir {
  std::filesystem::path path;
  explicit TempDir(const std::string& name) {
    path = std::filesystem::temp_directory_path() / ("hierattn_" + name + "_" + std::to_string(::getpid()));
    std::filesystem::remove_all(path);
    std::filesystem::create_directories(path);
  }
  ~TempDir() {
    std::error_code ec;
    std::filesystem::remove_all(path, ec);
  }
};

}  // namespace testsupport
