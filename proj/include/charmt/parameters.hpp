#pragma once

#include <map>
#include <string>

#include "charmt/tensor.hpp"

namespace charmt {

/// Named trainable tensors, iterated in sorted name order.
class ParameterSet {
 public:
  using Map = std::map<std::string, Tensor>;

  /// Throws std::invalid_argument on a duplicate name.
  void add(const std::string& name, Tensor tensor);

  const Tensor& at(const std::string& name) const;
  Tensor& at(const std::string& name);
  bool contains(const std::string& name) const { return tensors_.count(name) != 0; }

  std::size_t size() const { return tensors_.size(); }
  /// Total number of scalar parameters.
  std::size_t scalar_count() const;

  void zero_grad();

  Map::const_iterator begin() const { return tensors_.begin(); }
  Map::const_iterator end() const { return tensors_.end(); }
  Map::iterator begin() { return tensors_.begin(); }
  Map::iterator end() { return tensors_.end(); }

 private:
  Map tensors_;
};

}  // namespace charmt
