#pragma once

#include <array>
#include <memory>
#include <string>
#include <vector>

#include "dihc/losses.hpp"
#include "dihc/ops.hpp"
#include "dihc/rng.hpp"
#include "dihc/tensor.hpp"

namespace dihc {

enum class DecoderUpsample { kTrilinear, kTransposedConv, kNearest };

struct SubModelConfig {
  int model_index = 1;  // 1..3
  NormMode norm_mode = NormMode::kGroup;
  DecoderUpsample upsample_mode = DecoderUpsample::kTrilinear;
  int base_channels = 8;
  int depth = 4;
  int num_classes = 2;  // binary task: single sigmoid channel
  int group_norm_groups = 4;
};

// The diversified defaults: model 1 = (group, trilinear),
// model 2 = (batch, transposed conv), model 3 = (instance, nearest).
SubModelConfig default_submodel_config(int model_index);

struct EnsembleConfig {
  std::array<SubModelConfig, 3> models = {default_submodel_config(1), default_submodel_config(2),
                                          default_submodel_config(3)};
  int patch = 32;
  uint64_t seed = 1;
};

// V-Net-style encoder-decoder: `depth` levels of two conv+norm+relu blocks,
// stride-2 conv downsampling, skip concatenation, one 1x1x1 projection head
// per decoder level. Heads are upsampled to full resolution with trilinear
// interpolation for every model; the configured upsample mode applies only
// to the decoder pathway.
class SubModel {
 public:
  SubModel(const SubModelConfig& cfg, uint64_t seed);

  MultiScalePrediction forward_multiscale(const Tensor& x, bool training);

  const SubModelConfig& config() const { return cfg_; }
  NamedParams& params() { return params_; }
  const NamedParams& params() const { return params_; }
  // named running-statistic buffers (batch-norm layers only)
  std::vector<std::pair<std::string, std::vector<float>*>> norm_buffers();

  long conv_param_count() const;
  long upsample_param_count() const;

 private:
  struct ConvUnit {
    Tensor weight, bias, gamma, beta;
    std::shared_ptr<NormState> norm;
    int stride = 1;
  };
  struct Head {
    Tensor weight, bias;
    int factor = 1;
  };

  ConvUnit make_conv_unit(const std::string& name, int c_in, int c_out, int stride, Rng& rng);
  Head make_head(const std::string& name, int c_in, int factor, Rng& rng);
  Tensor run_conv_unit(ConvUnit& u, const Tensor& x, bool training);

  SubModelConfig cfg_;
  std::vector<ConvUnit> enc_;    // two per level
  std::vector<ConvUnit> down_;   // depth-1
  std::vector<ConvUnit> dec_;    // two per decoder level (depth-1 levels)
  std::vector<Tensor> up_weights_;  // transposed-conv mode only
  std::vector<Head> heads_;      // depth heads, index 0 = scale 1
  NamedParams params_;
};

using Ensemble = std::array<std::unique_ptr<SubModel>, 3>;

Ensemble build_ensemble(const EnsembleConfig& cfg);

std::array<MultiScalePrediction, 3> ensemble_forward(Ensemble& models, const Tensor& x,
                                                     bool training);

}  // namespace dihc
