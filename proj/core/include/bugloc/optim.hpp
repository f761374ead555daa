#pragma once

#include <cstdint>
#include <map>
#include <string>

#include "bugloc/params.hpp"
#include "bugloc/tensor.hpp"

namespace bugloc {

struct AdamConfig {
  double learning_rate = 1e-3;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double epsilon = 1e-8;
};

/// Adaptive moment estimation with bias correction. Moment buffers are keyed
/// by parameter name and created lazily on the first step that touches them.
class AdamOptimizer {
 public:
  explicit AdamOptimizer(AdamConfig config = {}) : config_(config) {}

  /// Applies one update to every parameter named in `grads`.
  void step(ParamStore& params, const std::map<std::string, Tensor>& grads);

 private:
  AdamConfig config_;
  std::int64_t t_ = 0;
  std::map<std::string, Tensor> m_, v_;
};

}  // namespace bugloc
