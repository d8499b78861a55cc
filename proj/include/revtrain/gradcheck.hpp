#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include "revtrain/arch.hpp"
#include "revtrain/model.hpp"

namespace revtrain {

// One training step (zero_grad, forward, softmax cross-entropy, backward);
// returns a copy of every parameter gradient in named_params() order.
template <typename T>
std::vector<BasicTensor<T>> mode_gradients(SequentialModel<T>& model, const BasicTensor<T>& x,
                                           const std::vector<int>& labels, BackpropMode mode);

struct TensorError {
  std::string name;
  double error = 0.0;
};

struct GradcheckReport {
  BackpropMode mode = BackpropMode::stored;
  std::vector<TensorError> vs_stored;  // per parameter tensor
  std::vector<TensorError> vs_numeric;  // stored-mode gradients against central differences
  double worst_vs_stored = 0.0;
  double worst_vs_numeric = 0.0;

  double worst() const { return worst_vs_stored > worst_vs_numeric ? worst_vs_stored : worst_vs_numeric; }
};

struct GradcheckOptions {
  std::uint64_t seed = 1;
  std::int64_t batch = 2;
  std::int64_t fd_coords = 6;  // probed coordinates per tensor; 0 skips finite differences
  double fd_step = 1e-6;
};

// Mode-`mode` gradients against Stored-mode gradients (relative error per
// tensor, floored as in compare_gradients), and Stored gradients against
// central differences (|a - n| / max(1, |n|), worst probed coordinate).
template <typename T>
GradcheckReport gradcheck(const ArchSpec& spec, BackpropMode mode, const GradcheckOptions& opt = {});

std::string gradcheck_csv(const GradcheckReport& r);

}  // namespace revtrain
