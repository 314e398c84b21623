#include "hierattn/params.hpp"

#include <cmath>

#include "hierattn/errors.hpp"

namespace hierattn {

Parameter& ParameterStore::add(std::string name, Tensor init) {
  if (find(name)) throw ContractError("duplicate parameter name: " + name);
  params_.push_back(Parameter{std::move(name), std::move(init)});
  return params_.back();
}

Parameter* ParameterStore::find(std::string_view name) {
  for (auto& p : params_)
    if (p.name == name) return &p;
  return nullptr;
}

const Parameter* ParameterStore::find(std::string_view name) const {
  for (const auto& p : params_)
    if (p.name == name) return &p;
  return nullptr;
}

std::size_t ParameterStore::index_of(const Parameter& p) const {
  for (std::size_t i = 0; i < params_.size(); ++i)
    if (&params_[i] == &p) return i;
  throw ContractError("parameter " + p.name + " does not belong to this store");
}

std::size_t ParameterStore::scalar_count() const {
  std::size_t n = 0;
  for (const auto& p : params_) n += p.value.size();
  return n;
}

namespace init {

Tensor xavier_uniform(std::size_t fan_in, std::size_t fan_out, std::mt19937_64& rng) {
  const double limit = std::sqrt(6.0 / static_cast<double>(fan_in + fan_out));
  std::uniform_real_distribution<double> dist(-limit, limit);
  Tensor t({fan_in, fan_out});
  for (double& v : t.data()) v = dist(rng);
  return t;
}

Tensor normal(std::size_t rows, std::size_t cols, double stddev, std::mt19937_64& rng) {
  std::normal_distribution<double> dist(0.0, stddev);
  Tensor t({rows, cols});
  for (double& v : t.data()) v = dist(rng);
  return t;
}

}  // namespace init

}  // namespace hierattn
