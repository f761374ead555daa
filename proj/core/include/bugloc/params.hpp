#pragma once

#include <cstdint>
#include <string>
#include <unordered_map>
#include <vector>

#include "bugloc/tensor.hpp"

namespace bugloc {

/// Named tensor map with stable insertion order. The order defines both the
/// parameter-initialization draw order and the checkpoint directory order,
/// so it is part of every determinism contract in this library.
class ParamStore {
 public:
  Tensor& add(const std::string& name, Tensor t);
  bool contains(const std::string& name) const {
    return tensors_.count(name) > 0;
  }
  Tensor& at(const std::string& name);
  const Tensor& at(const std::string& name) const;
  const std::vector<std::string>& names() const { return names_; }
  std::size_t size() const { return names_.size(); }

  /// Hash over names, shapes and raw value bits; two stores with equal
  /// hashes are bit-identical for practical purposes (frozen-weight checks).
  std::uint64_t content_hash() const;

 private:
  std::vector<std::string> names_;
  std::unordered_map<std::string, Tensor> tensors_;
};

}  // namespace bugloc
