#include "mcl/params.hpp"

#include <stdexcept>

namespace mcl {

void ParameterSet::add(std::string name, Tensor value) {
  for (const auto& p : items_)
    if (p.name == name) throw std::invalid_argument("duplicate parameter " + name);
  items_.push_back(Parameter{std::move(name), std::move(value)});
}

std::size_t ParameterSet::index_of(const std::string& name) const {
  for (std::size_t i = 0; i < items_.size(); ++i)
    if (items_[i].name == name) return i;
  throw std::out_of_range("no parameter named " + name);
}

const Tensor& ParameterSet::get(const std::string& name) const { return items_[index_of(name)].value; }
Tensor& ParameterSet::get(const std::string& name) { return items_[index_of(name)].value; }

std::size_t ParameterSet::scalar_count() const {
  std::size_t n = 0;
  for (const auto& p : items_) n += p.value.size();
  return n;
}

std::vector<ad::Var> ParameterSet::bind(ad::Tape& tape) const {
  std::vector<ad::Var> vars;
  vars.reserve(items_.size());
  for (const auto& p : items_) vars.push_back(tape.leaf(p.value, true));
  return vars;
}

std::vector<ad::Var> ParameterSet::bind_constant(ad::Tape& tape) const {
  std::vector<ad::Var> vars;
  vars.reserve(items_.size());
  for (const auto& p : items_) vars.push_back(tape.constant(p.value));
  return vars;
}

bool ParameterSet::operator==(const ParameterSet& other) const {
  if (items_.size() != other.items_.size()) return false;
  for (std::size_t i = 0; i < items_.size(); ++i)
    if (items_[i].name != other.items_[i].name || !(items_[i].value == other.items_[i].value)) return false;
  return true;
}

}  // namespace mcl
