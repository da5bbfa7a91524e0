#include "dihc/network.hpp"

#include <cmath>
#include <stdexcept>

#include "dihc/rng.hpp"

namespace dihc {

SubModelConfig default_submodel_config(int model_index) {
  SubModelConfig cfg;
  cfg.model_index = model_index;
  switch (model_index) {
    case 1:
      cfg.norm_mode = NormMode::kGroup;
      cfg.upsample_mode = DecoderUpsample::kTrilinear;
      break;
    case 2:
      cfg.norm_mode = NormMode::kBatch;
      cfg.upsample_mode = DecoderUpsample::kTransposedConv;
      break;
    case 3:
      cfg.norm_mode = NormMode::kInstance;
      cfg.upsample_mode = DecoderUpsample::kNearest;
      break;
    default:
      throw std::invalid_argument("model_index must be 1..3, got " + std::to_string(model_index));
  }
  return cfg;
}

namespace {

Tensor he_uniform(const Shape& shape, long fan_in, Rng& rng) {
  const float bound = std::sqrt(6.0f / static_cast<float>(fan_in));
  std::vector<float> v(static_cast<size_t>(shape_numel(shape)));
  for (auto& x : v) x = rng.uniform(-bound, bound);
  return Tensor::from_vector(shape, std::move(v), /*requires_grad=*/true);
}

}  // namespace

SubModel::ConvUnit SubModel::make_conv_unit(const std::string& name, int c_in, int c_out,
                                            int stride, Rng& rng) {
  ConvUnit u;
  u.stride = stride;
  u.weight = he_uniform({c_out, c_in, 3, 3, 3}, static_cast<long>(c_in) * 27, rng);
  u.bias = Tensor::zeros({c_out}, /*requires_grad=*/true);
  u.gamma = Tensor::full({c_out}, 1.f, /*requires_grad=*/true);
  u.beta = Tensor::zeros({c_out}, /*requires_grad=*/true);
  u.norm = std::make_shared<NormState>();
  u.norm->mode = cfg_.norm_mode;
  u.norm->groups = cfg_.group_norm_groups;
  params_.push_back({name + "/weight", u.weight});
  params_.push_back({name + "/bias", u.bias});
  params_.push_back({name + "/gamma", u.gamma});
  params_.push_back({name + "/beta", u.beta});
  if (cfg_.norm_mode == NormMode::kBatch) {
    u.norm->running_mean.assign(c_out, 0.f);
    u.norm->running_var.assign(c_out, 1.f);
  }
  return u;
}

SubModel::Head SubModel::make_head(const std::string& name, int c_in, int factor, Rng& rng) {
  Head h;
  h.factor = factor;
  h.weight = he_uniform({1, c_in, 1, 1, 1}, c_in, rng);
  h.bias = Tensor::zeros({1}, /*requires_grad=*/true);
  params_.push_back({name + "/weight", h.weight});
  params_.push_back({name + "/bias", h.bias});
  return h;
}

SubModel::SubModel(const SubModelConfig& cfg, uint64_t seed) : cfg_(cfg) {
  if (cfg.num_classes != 2) {
    throw std::invalid_argument(
        "SubModel: only the binary task (num_classes=2, single sigmoid channel) is implemented");
  }
  if (cfg.depth < 2) throw std::invalid_argument("SubModel: depth must be >= 2");
  if (cfg.base_channels < 1) throw std::invalid_argument("SubModel: base_channels must be >= 1");
  Rng rng = derive_rng(seed, {0x5eed});

  const int depth = cfg.depth;
  auto ch = [&](int level) { return cfg.base_channels << level; };

  // encoder
  for (int level = 0; level < depth; ++level) {
    const int cin = level == 0 ? 1 : ch(level);
    enc_.push_back(make_conv_unit("enc" + std::to_string(level + 1) + "/conv1", cin, ch(level), 1, rng));
    enc_.push_back(make_conv_unit("enc" + std::to_string(level + 1) + "/conv2", ch(level), ch(level), 1, rng));
    if (level + 1 < depth) {
      down_.push_back(
          make_conv_unit("down" + std::to_string(level + 1) + "/conv", ch(level), ch(level + 1), 2, rng));
    }
  }

  // decoder, deepest level first: up(level+1) + skip(level) -> two convs
  for (int level = depth - 2; level >= 0; --level) {
    const std::string tag = "dec" + std::to_string(level + 1);
    if (cfg.upsample_mode == DecoderUpsample::kTransposedConv) {
      const int c = ch(level + 1);
      Tensor w = he_uniform({c, c, 2, 2, 2}, static_cast<long>(c) * 8, rng);
      up_weights_.push_back(w);
      params_.push_back({"up" + std::to_string(level + 1) + "/weight", w});
    }
    const int cat = ch(level + 1) + ch(level);
    dec_.push_back(make_conv_unit(tag + "/conv1", cat, ch(level), 1, rng));
    dec_.push_back(make_conv_unit(tag + "/conv2", ch(level), ch(level), 1, rng));
  }

  // projection heads: heads_[s-1] reads the decoder features at scale s
  for (int s = 1; s <= depth; ++s) {
    const int level = s - 1;
    heads_.push_back(make_head("head" + std::to_string(s), ch(level), 1 << level, rng));
  }
}

Tensor SubModel::run_conv_unit(ConvUnit& u, const Tensor& x, bool training) {
  Tensor y = conv3d(x, u.weight, u.bias, u.stride, 1);
  u.norm->training = training;
  y = normalize(y, u.gamma, u.beta, *u.norm);
  return relu(y);
}

MultiScalePrediction SubModel::forward_multiscale(const Tensor& x, bool training) {
  if (x.shape().size() != 5 || x.shape()[1] != 1) {
    throw std::invalid_argument("forward_multiscale: input must be [N,1,D,H,W], got " +
                                shape_str(x.shape()));
  }
  const int div = 1 << (cfg_.depth - 1);
  for (int axis = 2; axis < 5; ++axis) {
    if (x.shape()[axis] % div != 0) {
      throw std::invalid_argument("forward_multiscale: spatial dim " + std::to_string(axis) +
                                  " of " + shape_str(x.shape()) + " not divisible by " +
                                  std::to_string(div));
    }
  }

  const int depth = cfg_.depth;
  std::vector<Tensor> skips;  // encoder output per level
  Tensor h = x;
  for (int level = 0; level < depth; ++level) {
    h = run_conv_unit(enc_[2 * level], h, training);
    h = run_conv_unit(enc_[2 * level + 1], h, training);
    skips.push_back(h);
    if (level + 1 < depth) h = run_conv_unit(down_[level], h, training);
  }

  // decoder features per scale; scale depth is the bottleneck itself
  std::vector<Tensor> features(depth);
  features[depth - 1] = skips[depth - 1];
  Tensor d = skips[depth - 1];
  for (int level = depth - 2; level >= 0; --level) {
    Tensor up;
    switch (cfg_.upsample_mode) {
      case DecoderUpsample::kTrilinear:
        up = upsample(d, 2, UpsampleMode::kTrilinear);
        break;
      case DecoderUpsample::kNearest:
        up = upsample(d, 2, UpsampleMode::kNearest);
        break;
      case DecoderUpsample::kTransposedConv:
        up = conv_transpose3d(d, up_weights_[depth - 2 - level], 2);
        break;
    }
    Tensor cat = concat_channels(up, skips[level]);
    const int base = 2 * (depth - 2 - level);
    d = run_conv_unit(dec_[base], cat, training);
    d = run_conv_unit(dec_[base + 1], d, training);
    features[level] = d;
  }

  MultiScalePrediction pred;
  pred.model_index = cfg_.model_index;
  const int N = x.shape()[0];
  const Shape full{N, x.shape()[2], x.shape()[3], x.shape()[4]};
  for (int s = 1; s <= depth; ++s) {
    Head& head = heads_[s - 1];
    Tensor logits = conv3d(features[s - 1], head.weight, head.bias, 1, 0);
    if (head.factor > 1) logits = upsample(logits, head.factor, UpsampleMode::kTrilinear);
    pred.probs.push_back(reshape(sigmoid(logits), full));
  }
  return pred;
}

std::vector<std::pair<std::string, std::vector<float>*>> SubModel::norm_buffers() {
  std::vector<std::pair<std::string, std::vector<float>*>> out;
  auto add = [&](const std::string& name, ConvUnit& u) {
    if (u.norm->mode != NormMode::kBatch) return;
    out.push_back({name + "/running_mean", &u.norm->running_mean});
    out.push_back({name + "/running_var", &u.norm->running_var});
  };
  const int depth = cfg_.depth;
  for (int level = 0; level < depth; ++level) {
    add("enc" + std::to_string(level + 1) + "/conv1", enc_[2 * level]);
    add("enc" + std::to_string(level + 1) + "/conv2", enc_[2 * level + 1]);
    if (level + 1 < depth) add("down" + std::to_string(level + 1) + "/conv", down_[level]);
  }
  for (int level = depth - 2; level >= 0; --level) {
    const int base = 2 * (depth - 2 - level);
    add("dec" + std::to_string(level + 1) + "/conv1", dec_[base]);
    add("dec" + std::to_string(level + 1) + "/conv2", dec_[base + 1]);
  }
  return out;
}

long SubModel::conv_param_count() const {
  long n = 0;
  for (const auto& [name, p] : params_) {
    if (name.find("/weight") != std::string::npos && name.rfind("up", 0) != 0) n += p.numel();
    if (name.find("/bias") != std::string::npos) n += p.numel();
  }
  return n;
}

long SubModel::upsample_param_count() const {
  long n = 0;
  for (const auto& [name, p] : params_) {
    if (name.rfind("up", 0) == 0) n += p.numel();
  }
  return n;
}

Ensemble build_ensemble(const EnsembleConfig& cfg) {
  const int div = 1 << (cfg.models[0].depth - 1);
  if (cfg.patch % div != 0) {
    throw std::invalid_argument("EnsembleConfig: patch " + std::to_string(cfg.patch) +
                                " not divisible by " + std::to_string(div));
  }
  Ensemble models;
  for (int i = 0; i < 3; ++i) {
    const uint64_t seed = derive_rng(cfg.seed, {0xe45, static_cast<uint64_t>(i + 1)}).next_u64();
    models[i] = std::make_unique<SubModel>(cfg.models[i], seed);
  }
  return models;
}

std::array<MultiScalePrediction, 3> ensemble_forward(Ensemble& models, const Tensor& x,
                                                     bool training) {
  return {models[0]->forward_multiscale(x, training),
          models[1]->forward_multiscale(x, training),
          models[2]->forward_multiscale(x, training)};
}

}  // namespace dihc
