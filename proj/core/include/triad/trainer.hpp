#pragma once

#include <cstdint>
#include <limits>
#include <string>
#include <vector>

#include "triad/cf.hpp"
#include "triad/corpus.hpp"
#include "triad/encoders.hpp"
#include "triad/loss.hpp"

namespace triad::train {

struct TrainConfig {
  double temperature = 0.1;
  loss::AlignmentWeights lambdas;
  std::size_t batch_size = 128;
  double learning_rate = 1e-4;
  std::size_t max_epochs = 50;
  std::size_t patience = 10;
  std::uint64_t seed = 0;
  double adam_beta1 = 0.9;
  double adam_beta2 = 0.999;
  double adam_eps = 1e-8;
};

class Adam {
 public:
  Adam(std::vector<nn::Param*> params, double lr, double beta1 = 0.9, double beta2 = 0.999,
       double eps = 1e-8);

  void step();
  void zero_grads();

 private:
  std::vector<nn::Param*> params_;
  std::vector<std::vector<double>> m_, v_;
  double lr_, beta1_, beta2_, eps_;
  std::size_t t_ = 0;
};

struct TrainResult {
  std::vector<loss::LossReport> history;  // one train + one validation row per epoch
  std::size_t best_epoch = 0;
  double best_validation = std::numeric_limits<double>::infinity();
  std::size_t epochs_run = 0;
};

// Joint contrastive optimization of the model's encoders. The model is left
// holding the parameters of its best validation epoch.
TrainResult train_alignment(enc::Model& model, const Corpus& corpus, const SplitAssignment& split,
                            const cf::CfFactors* factors, const TrainConfig& cfg);

struct BaselineReport {
  double genre_bce = 0.0;
  double cf_mse = 0.0;
  double total = 0.0;
  std::size_t epoch = 0;
  std::string split = "train";
};

struct BaselineResult {
  std::vector<BaselineReport> history;
  std::size_t best_epoch = 0;
  double best_validation = std::numeric_limits<double>::infinity();
  std::size_t epochs_run = 0;
};

// Mean binary cross-entropy over logistic outputs; logits are clipped at +-30.
double bce_with_logits(const Tensor& logits, const Tensor& targets);
double bce_with_logits_backward(const Tensor& logits, const Tensor& targets, Tensor& dlogits);
double mse(const Tensor& pred, const Tensor& target);
double mse_backward(const Tensor& pred, const Tensor& target, Tensor& dpred);

// Baseline training: same loop shape as train_alignment, minimizing the
// direct prediction losses of the model's heads.
BaselineResult train_baseline(enc::Model& model, const Corpus& corpus,
                              const SplitAssignment& split, const cf::CfFactors* factors,
                              const TrainConfig& cfg);

}  // namespace triad::train
