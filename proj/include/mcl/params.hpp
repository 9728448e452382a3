#pragma once

#include <string>
#include <vector>

#include "mcl/tape.hpp"

namespace mcl {

struct Parameter {
  std::string name;
  Tensor value;
};

/// Ordered, named collection of tensors (weights or buffers).
class ParameterSet {
 public:
  void add(std::string name, Tensor value);

  std::vector<Parameter>& items() { return items_; }
  const std::vector<Parameter>& items() const { return items_; }
  std::size_t size() const { return items_.size(); }

  const Tensor& get(const std::string& name) const;
  Tensor& get(const std::string& name);
  std::size_t index_of(const std::string& name) const;

  /// Total number of scalars.
  std::size_t scalar_count() const;

  /// Records every tensor as a requires-grad leaf, in order.
  std::vector<ad::Var> bind(ad::Tape& tape) const;
  /// Records every tensor as a constant, in order.
  std::vector<ad::Var> bind_constant(ad::Tape& tape) const;

  bool operator==(const ParameterSet& other) const;

 private:
  std::vector<Parameter> items_;
};

}  // namespace mcl
