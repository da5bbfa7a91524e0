#pragma once

#include <array>
#include <vector>

#include "dihc/ops.hpp"
#include "dihc/tensor.hpp"

namespace dihc {

struct SharpenConfig {
  float temperature = 0.1f;
};

struct ConsistencyWeights {
  float alpha1 = 1.0f;
  float alpha2 = 0.75f;
  float alpha3 = 0.5f;
};

struct RampSchedule {
  double base = 0.1;
  int t_max = 1000;
  double lambda_sup = 1.0;
  bool squared = false;  // exp(-5 (1 - t/t_max)^2) variant, off by default
};

struct LossBreakdown {
  double l_sup = 0.0;
  double l_mc = 0.0;
  double l_dihc = 0.0;
  double lambda_cst = 0.0;
  double l_total = 0.0;
};

// Per-model full-resolution foreground probabilities, scales s=1..S where
// s=1 is the final decoder output and s=S the deepest block.
struct MultiScalePrediction {
  int model_index = 0;
  std::vector<Tensor> probs;  // probs[s-1] has shape [N,D,H,W]
};

// A consistency term: sharpened scale-1 prediction of `producer` regularizes
// `consumer`'s map at `consumer_scale`.
struct ConsistencyPair {
  int producer;        // 1..3
  int consumer;        // 1..3
  int consumer_scale;  // 1 (mutual) or 2..3 (diagonal)
};

// All ordered (i, j), i != j, both at scale 1.
std::vector<ConsistencyPair> mc_pairs();
// The six diagonal pairs; scale-2 targets carry alpha2, scale-3 alpha3.
// No self-pairs and no scale-4 targets.
std::vector<ConsistencyPair> dihc_pairs();

Tensor dice_loss(const Tensor& p, const Tensor& y, float smooth = 1e-5f);

// Unweighted sum of dice_loss over all models and the first num_scales
// scales of each prediction. y covers the labelled slots only.
Tensor deep_supervised_loss(const std::array<MultiScalePrediction, 3>& preds, const Tensor& y,
                            int num_scales = 4, float smooth = 1e-5f);

Tensor sharpen(const Tensor& p, const SharpenConfig& cfg, bool detach = true);

Tensor mutual_consistency_loss(const std::array<MultiScalePrediction, 3>& preds,
                               const ConsistencyWeights& w, const SharpenConfig& cfg,
                               bool detach_pseudo = true);

Tensor diagonal_consistency_loss(const std::array<MultiScalePrediction, 3>& preds,
                                 const ConsistencyWeights& w, const SharpenConfig& cfg,
                                 bool detach_pseudo = true);

// 0.1 * exp(-5 (1 - t/t_max)); t clamped to [0, t_max].
double ramp_weight(int t, const RampSchedule& sched);

std::pair<Tensor, LossBreakdown> total_loss(const Tensor& l_sup, const Tensor& l_mc,
                                            const Tensor& l_dihc, int t,
                                            const RampSchedule& sched);

}  // namespace dihc
