#pragma once

#include "idiolex/autograd.h"

#include <vector>

namespace idiolex::optim {

struct AdamConfig {
  double beta1 = 0.9;
  double beta2 = 0.999;
  double eps = 1e-8;
  double weight_decay = 0.0;  // decoupled (AdamW) when positive
};

class Adam {
 public:
  Adam(std::vector<ag::Parameter*> params, AdamConfig cfg = {});

  /// One update with learning rate `lr` from the gradients currently held.
  void step(double lr);
  void zero_grad();
  long steps_taken() const { return t_; }

 private:
  std::vector<ag::Parameter*> params_;
  AdamConfig cfg_;
  std::vector<Mat> m_;
  std::vector<Mat> v_;
  long t_ = 0;
};

/// lr * min(1, step / warmup) for 1-based `step`; warmup 0 means no warmup.
double warmup_constant_lr(double lr, long step, long warmup);

/// Linear warmup to lr, then linear decay to 0 at `total` steps.
double warmup_linear_decay_lr(double lr, long step, long warmup, long total);

}  // namespace idiolex::optim
