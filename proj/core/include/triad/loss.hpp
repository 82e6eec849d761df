#pragma once

#include <cstddef>
#include <string>
#include <vector>

#include "triad/tensor.hpp"

namespace triad::loss {

struct AlignmentWeights {
  double a2g = 1.0;
  double a2p = 1.0;
  double g2p = 1.0;
};

struct LossReport {
  double a2g = 0.0;
  double a2p = 0.0;
  double g2p = 0.0;
  double total = 0.0;
  std::size_t epoch = 0;
  std::string split = "train";
};

// Cosine of the angle between two nonzero vectors.
double cosine_sim(const double* a, const double* b, std::size_t d);
double cosine_sim(const std::vector<double>& a, const std::vector<double>& b);

// Directed NT-Xent loss with anchors in `a` and the 2*M candidate pool formed
// by all rows of `a` followed by all rows of `b`; the positive for anchor i is
// row i of `b`. Asymmetric in (a, b).
double ntxent_loss(const Tensor& a, const Tensor& b, double tau);

// Same value, also accumulating d(loss)/d(a) and d(loss)/d(b) scaled by
// `grad_scale` into the given gradient tensors.
double ntxent_loss_backward(const Tensor& a, const Tensor& b, double tau, double grad_scale,
                            Tensor& da, Tensor& db);

// The three symmetric pair losses and their weighted total.
LossReport alignment_loss(const Tensor& phi_a, const Tensor& phi_w, const Tensor& phi_cf,
                          double tau, const AlignmentWeights& weights);

}  // namespace triad::loss
