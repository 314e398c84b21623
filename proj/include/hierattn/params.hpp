#pragma once

#include <deque>
#include <random>
#include <string>
#include <string_view>

#include "hierattn/tape.hpp"

namespace hierattn {

// Owns every trainable tensor of a model. Element addresses are stable, so layer
// structs hold plain Parameter pointers into the store.
class ParameterStore {
 public:
  ParameterStore() = default;
  ParameterStore(const ParameterStore&) = delete;
  ParameterStore& operator=(const ParameterStore&) = delete;
  ParameterStore(ParameterStore&&) = default;
  ParameterStore& operator=(ParameterStore&&) = default;

  Parameter& add(std::string name, Tensor init);
  Parameter* find(std::string_view name);
  const Parameter* find(std::string_view name) const;
  std::size_t index_of(const Parameter& p) const;

  std::size_t size() const noexcept { return params_.size(); }
  std::size_t scalar_count() const;
  auto begin() { return params_.begin(); }
  auto end() { return params_.end(); }
  auto begin() const { return params_.begin(); }
  auto end() const { return params_.end(); }
  Parameter& operator[](std::size_t i) { return params_[i]; }
  const Parameter& operator[](std::size_t i) const { return params_[i]; }

 private:
  std::deque<Parameter> params_;
};

namespace init {

Tensor xavier_uniform(std::size_t fan_in, std::size_t fan_out, std::mt19937_64& rng);
Tensor normal(std::size_t rows, std::size_t cols, double stddev, std::mt19937_64& rng);

}  // namespace init

}  // namespace hierattn
