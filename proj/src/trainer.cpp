#include "dihc/trainer.hpp"

#include <cmath>
#include <cstdio>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <sstream>

namespace dihc {

void validate_config(const TrainConfig& cfg) {
  if (cfg.t_max <= 0) throw ConfigError("t_max must be > 0");
  if (cfg.ablation.dihc && !cfg.ablation.ms) {
    throw ConfigError("enable_dihc requires enable_ms: the diagonal pairs target intermediate scales");
  }
  if (!(cfg.labelled_fraction > 0.0) || cfg.labelled_fraction > 1.0) {
    throw ConfigError("labelled_fraction must be in (0, 1]");
  }
  if (cfg.eval_every <= 0) throw ConfigError("eval_every must be > 0");
  if (cfg.patch % (1 << (cfg.depth - 1)) != 0) {
    throw ConfigError("patch must be divisible by 2^(depth-1)");
  }
  if (cfg.labelled_per_batch < 1 || cfg.unlabelled_per_batch < 1) {
    throw ConfigError("batch slots must be >= 1");
  }
  if (!(cfg.weights.alpha1 >= cfg.weights.alpha2 && cfg.weights.alpha2 >= cfg.weights.alpha3) ||
      cfg.weights.alpha3 < 0.f) {
    throw ConfigError("consistency weights must satisfy alpha1 >= alpha2 >= alpha3 >= 0");
  }
  if (!(cfg.sharpen.temperature > 0.f)) throw ConfigError("sharpen temperature must be > 0");
}

std::array<SubModelConfig, 3> apply_imd(const TrainConfig& cfg, bool enable_imd) {
  std::array<SubModelConfig, 3> out;
  for (int i = 0; i < 3; ++i) {
    SubModelConfig c = enable_imd ? default_submodel_config(i + 1) : default_submodel_config(2);
    c.model_index = i + 1;
    c.base_channels = cfg.base_channels;
    c.depth = cfg.depth;
    out[i] = c;
  }
  return out;
}

std::string runlog_csv(const RunLog& log) {
  std::ostringstream os;
  os << "step,l_sup,l_mc,l_dihc,lambda_cst,l_total,disagreement\n";
  char buf[256];
  for (const auto& s : log.steps) {
    std::snprintf(buf, sizeof(buf), "%d,%.9g,%.9g,%.9g,%.9g,%.9g,%.9g\n", s.step, s.loss.l_sup,
                  s.loss.l_mc, s.loss.l_dihc, s.loss.lambda_cst, s.loss.l_total, s.disagreement);
    os << buf;
  }
  return os.str();
}

Trainer::Trainer(TrainConfig cfg, DatasetSplit split, std::vector<Sample> eval_set)
    : cfg_(cfg), split_(std::move(split)), eval_set_(std::move(eval_set)) {
  validate_config(cfg_);
  EnsembleConfig ec;
  ec.models = apply_imd(cfg_, cfg_.ablation.imd);
  ec.patch = cfg_.patch;
  ec.seed = cfg_.seed;
  models_ = build_ensemble(ec);
  for (int i = 0; i < 3; ++i) {
    for (auto& [name, p] : models_[i]->params()) {
      all_params_.push_back({"m" + std::to_string(i + 1) + "/" + name, p});
    }
  }
  optimizer_ = std::make_unique<SgdOptimizer>(all_params_, cfg_.lr, cfg_.momentum,
                                              cfg_.weight_decay);
  sched_.base = cfg_.ramp_base;
  sched_.lambda_sup = cfg_.lambda_sup;
  sched_.squared = cfg_.ramp_squared;
  // normalize by the final step index so the logged schedule spans
  // [base*e^-5, base] exactly over t = 0..t_max-1
  sched_.t_max = cfg_.t_max > 1 ? cfg_.t_max - 1 : 1;
}

double Trainer::disagreement(const std::array<MultiScalePrediction, 3>& preds) const {
  const Tensor& p1 = preds[0].probs[0];
  const Tensor& p2 = preds[1].probs[0];
  const Tensor& p3 = preds[2].probs[0];
  const float* a = p1.data();
  const float* b = p2.data();
  const float* c = p3.data();
  double acc = 0.0;
  const long n = p1.numel();
  for (long i = 0; i < n; ++i) {
    acc += std::abs(a[i] - b[i]) + std::abs(b[i] - c[i]) + std::abs(a[i] - c[i]);
  }
  return acc / static_cast<double>(n);
}

LossBreakdown Trainer::train_step(int t) {
  if (t >= cfg_.t_max) throw std::invalid_argument("train_step: t must be < t_max");

  BatchSpec bs;
  bs.labelled_per_batch = cfg_.labelled_per_batch;
  bs.unlabelled_per_batch = cfg_.unlabelled_per_batch;
  bs.seed = cfg_.seed;
  bs.augment = cfg_.augment;
  Batch batch = next_batch(split_, bs, t);

  auto preds = ensemble_forward(models_, batch.x, /*training=*/true);

  const int L = cfg_.labelled_per_batch;
  std::array<MultiScalePrediction, 3> labelled_preds;
  for (int m = 0; m < 3; ++m) {
    labelled_preds[m].model_index = preds[m].model_index;
    for (const auto& p : preds[m].probs) {
      labelled_preds[m].probs.push_back(slice_batch(p, 0, L));
    }
  }
  const int scales = cfg_.ablation.ms ? cfg_.depth : 1;
  Tensor l_sup = deep_supervised_loss(labelled_preds, batch.y, scales, cfg_.dice_smooth);

  ConsistencyWeights w = cfg_.weights;
  if (!cfg_.consistency) w = {0.f, 0.f, 0.f};
  Tensor l_mc = mutual_consistency_loss(preds, w, cfg_.sharpen, cfg_.detach_pseudo);
  Tensor l_dihc = cfg_.ablation.dihc
                      ? diagonal_consistency_loss(preds, w, cfg_.sharpen, cfg_.detach_pseudo)
                      : Tensor::scalar(0.f);

  auto [total, breakdown] = total_loss(l_sup, l_mc, l_dihc, t, sched_);

  if (!std::isfinite(breakdown.l_total)) {
    std::ostringstream os;
    os << "non-finite loss at step " << t << ": l_sup=" << breakdown.l_sup
       << " l_mc=" << breakdown.l_mc << " l_dihc=" << breakdown.l_dihc;
    throw NumericalError(os.str());
  }

  backward(total);
  optimizer_->step();

  StepLog row;
  row.step = t;
  row.loss = breakdown;
  row.disagreement = disagreement(preds);
  log_.steps.push_back(row);
  return breakdown;
}

std::vector<MetricReport> Trainer::evaluate() {
  if (eval_set_.empty()) throw std::invalid_argument("evaluate: empty evaluation set");
  NoGradGuard no_grad;
  std::vector<MetricReport> reports;
  for (size_t i = 0; i < eval_set_.size(); ++i) {
    const auto& s = eval_set_[i];
    const int D = s.vol.shape[0], H = s.vol.shape[1], W = s.vol.shape[2];
    Tensor x = Tensor::from_vector({1, 1, D, H, W}, s.vol.v);
    MultiScalePrediction pred = models_[0]->forward_multiscale(x, /*training=*/false);
    char id[32];
    std::snprintf(id, sizeof(id), "case_%03zu", i);
    reports.push_back(
        evaluate_masks(threshold_mask(pred.probs[0], s.mask.shape), s.mask, id));
  }
  return reports;
}

RunLog Trainer::run(const std::string& out_dir) {
  namespace fs = std::filesystem;
  const bool write = !out_dir.empty();
  if (write) fs::create_directories(out_dir);

  double best_dice = -1.0;
  for (int t = step_; t < cfg_.t_max; ++t) {
    train_step(t);
    step_ = t + 1;
    const bool eval_now = !eval_set_.empty() &&
                          ((t + 1) % cfg_.eval_every == 0 || t + 1 == cfg_.t_max);
    if (eval_now) {
      auto reports = evaluate();
      log_.evals.push_back({t + 1, reports});
      const double mean_dice = mean_report(reports).dice;
      if (write && mean_dice > best_dice) {
        best_dice = mean_dice;
        save_checkpoint(out_dir + "/checkpoint_best.dckp");
      }
    }
  }
  if (write) {
    save_checkpoint(out_dir + "/checkpoint_final.dckp");
    std::ofstream(out_dir + "/runlog.csv") << runlog_csv(log_);
    if (!log_.evals.empty()) {
      std::ofstream(out_dir + "/eval_final.csv") << metrics_csv(log_.evals.back().second, true);
      std::ostringstream hist;
      hist << "step,case_id,dice,jaccard,asd,hd95\n";
      char buf[224];
      for (const auto& [st, reports] : log_.evals) {
        for (const auto& r : reports) {
          std::snprintf(buf, sizeof(buf), "%d,%s,%.9g,%.9g,%.9g,%.9g\n", st, r.case_id.c_str(),
                        r.dice, r.jaccard, r.asd, r.hd95);
          hist << buf;
        }
      }
      std::ofstream(out_dir + "/eval_history.csv") << hist.str();
    }
  }
  return log_;
}

namespace {

std::vector<float> pack_u64(uint64_t v) {
  std::vector<float> out(4);
  for (int i = 0; i < 4; ++i) out[i] = static_cast<float>((v >> (16 * i)) & 0xffff);
  return out;
}

uint64_t unpack_u64(const std::vector<float>& v) {
  uint64_t out = 0;
  for (int i = 0; i < 4 && i < static_cast<int>(v.size()); ++i) {
    out |= static_cast<uint64_t>(static_cast<uint32_t>(v[i]) & 0xffff) << (16 * i);
  }
  return out;
}

}  // namespace

void Trainer::save_checkpoint(const std::string& path) const {
  std::vector<CheckpointBlob> blobs;
  blobs.push_back({"meta/step", {static_cast<float>(step_)}});
  blobs.push_back({"meta/seed", pack_u64(cfg_.seed)});
  blobs.push_back({"meta/arch",
                   {static_cast<float>(cfg_.base_channels), static_cast<float>(cfg_.depth),
                    static_cast<float>(cfg_.patch), cfg_.ablation.imd ? 1.f : 0.f}});
  for (const auto& [name, p] : all_params_) {
    blobs.push_back({name, p.values()});
  }
  for (int i = 0; i < 3; ++i) {
    for (auto& [name, buf] : models_[i]->norm_buffers()) {
      blobs.push_back({"m" + std::to_string(i + 1) + "/" + name, *buf});
    }
  }
  const auto& vel = const_cast<Trainer*>(this)->optimizer_->velocities();
  for (size_t i = 0; i < all_params_.size(); ++i) {
    blobs.push_back({"opt/" + all_params_[i].first, vel[i]});
  }
  write_checkpoint(path, blobs);
}

void Trainer::load_checkpoint(const std::string& path) {
  auto blobs = read_checkpoint(path);
  auto find = [&](const std::string& name) -> const CheckpointBlob* {
    for (const auto& b : blobs) {
      if (b.name == name) return &b;
    }
    return nullptr;
  };
  const CheckpointBlob* step_blob = find("meta/step");
  if (!step_blob || step_blob->data.empty()) {
    throw DvolError(DvolError::Kind::kBadHeader, path + ": missing meta/step");
  }
  step_ = static_cast<int>(step_blob->data[0]);
  if (const CheckpointBlob* arch = find("meta/arch")) {
    const CheckpointArch a = checkpoint_arch(blobs);
    if (a.base_channels != cfg_.base_channels || a.depth != cfg_.depth || a.patch != cfg_.patch ||
        a.imd != cfg_.ablation.imd) {
      throw ConfigError(path + ": checkpoint architecture does not match config");
    }
    (void)arch;
  }
  if (const CheckpointBlob* seed_blob = find("meta/seed")) {
    const uint64_t seed = unpack_u64(seed_blob->data);
    if (seed != cfg_.seed) {
      throw ConfigError(path + ": checkpoint seed does not match config seed");
    }
  }
  for (auto& [name, p] : all_params_) {
    const CheckpointBlob* b = find(name);
    if (!b) throw DvolError(DvolError::Kind::kBadHeader, path + ": missing parameter " + name);
    if (static_cast<long>(b->data.size()) != p.numel()) {
      throw DvolError(DvolError::Kind::kBadHeader, path + ": size mismatch for " + name);
    }
    p.values() = b->data;
  }
  for (int i = 0; i < 3; ++i) {
    for (auto& [name, buf] : models_[i]->norm_buffers()) {
      const std::string full = "m" + std::to_string(i + 1) + "/" + name;
      const CheckpointBlob* b = find(full);
      if (!b) throw DvolError(DvolError::Kind::kBadHeader, path + ": missing buffer " + full);
      *buf = b->data;
    }
  }
  auto& vel = optimizer_->velocities();
  for (size_t i = 0; i < all_params_.size(); ++i) {
    const CheckpointBlob* b = find("opt/" + all_params_[i].first);
    if (!b) {
      throw DvolError(DvolError::Kind::kBadHeader,
                      path + ": missing optimizer state for " + all_params_[i].first);
    }
    vel[i] = b->data;
  }
}

uint64_t checkpoint_seed(const std::vector<CheckpointBlob>& blobs) {
  for (const auto& b : blobs) {
    if (b.name == "meta/seed") return unpack_u64(b.data);
  }
  throw DvolError(DvolError::Kind::kBadHeader, "checkpoint is missing meta/seed");
}

int checkpoint_step(const std::vector<CheckpointBlob>& blobs) {
  for (const auto& b : blobs) {
    if (b.name == "meta/step" && !b.data.empty()) return static_cast<int>(b.data[0]);
  }
  throw DvolError(DvolError::Kind::kBadHeader, "checkpoint is missing meta/step");
}

CheckpointArch checkpoint_arch(const std::vector<CheckpointBlob>& blobs) {
  for (const auto& b : blobs) {
    if (b.name == "meta/arch" && b.data.size() >= 4) {
      return {static_cast<int>(b.data[0]), static_cast<int>(b.data[1]),
              static_cast<int>(b.data[2]), b.data[3] != 0.f};
    }
  }
  throw DvolError(DvolError::Kind::kBadHeader, "checkpoint is missing meta/arch");
}

// ---- checkpoint container ----------------------------------------------------

namespace {
constexpr char kCkptMagic[4] = {'D', 'C', 'K', 'P'};
constexpr uint32_t kCkptVersion = 1;

void put_u32(std::ofstream& os, uint32_t v) {
  unsigned char b[4] = {static_cast<unsigned char>(v & 0xff),
                        static_cast<unsigned char>((v >> 8) & 0xff),
                        static_cast<unsigned char>((v >> 16) & 0xff),
                        static_cast<unsigned char>((v >> 24) & 0xff)};
  os.write(reinterpret_cast<char*>(b), 4);
}

uint32_t get_u32(std::ifstream& is, const std::string& path) {
  unsigned char b[4];
  is.read(reinterpret_cast<char*>(b), 4);
  if (!is) throw DvolError(DvolError::Kind::kTruncatedPayload, path + ": truncated checkpoint");
  return static_cast<uint32_t>(b[0]) | (static_cast<uint32_t>(b[1]) << 8) |
         (static_cast<uint32_t>(b[2]) << 16) | (static_cast<uint32_t>(b[3]) << 24);
}
}  // namespace

void write_checkpoint(const std::string& path, const std::vector<CheckpointBlob>& blobs) {
  std::ofstream os(path, std::ios::binary);
  if (!os) throw DvolError(DvolError::Kind::kIo, path + ": cannot open for writing");
  os.write(kCkptMagic, 4);
  put_u32(os, kCkptVersion);
  put_u32(os, static_cast<uint32_t>(blobs.size()));
  for (const auto& b : blobs) {
    put_u32(os, static_cast<uint32_t>(b.name.size()));
    os.write(b.name.data(), b.name.size());
    put_u32(os, static_cast<uint32_t>(b.data.size() & 0xffffffff));
    put_u32(os, static_cast<uint32_t>(b.data.size() >> 32));
    os.write(reinterpret_cast<const char*>(b.data.data()), b.data.size() * sizeof(float));
  }
  if (!os) throw DvolError(DvolError::Kind::kIo, path + ": write failed");
}

std::vector<CheckpointBlob> read_checkpoint(const std::string& path) {
  std::ifstream is(path, std::ios::binary);
  if (!is) throw DvolError(DvolError::Kind::kIo, path + ": cannot open");
  char magic[4];
  is.read(magic, 4);
  if (!is || std::memcmp(magic, kCkptMagic, 4) != 0) {
    throw DvolError(DvolError::Kind::kMagicMismatch, path + ": bad checkpoint magic");
  }
  const uint32_t version = get_u32(is, path);
  if (version != kCkptVersion) {
    throw DvolError(DvolError::Kind::kBadHeader,
                    path + ": unsupported checkpoint version " + std::to_string(version));
  }
  const uint32_t count = get_u32(is, path);
  std::vector<CheckpointBlob> blobs;
  blobs.reserve(count);
  for (uint32_t i = 0; i < count; ++i) {
    CheckpointBlob b;
    const uint32_t name_len = get_u32(is, path);
    if (name_len > 4096) {
      throw DvolError(DvolError::Kind::kBadHeader, path + ": blob name too long");
    }
    b.name.resize(name_len);
    is.read(b.name.data(), name_len);
    const uint64_t lo = get_u32(is, path);
    const uint64_t hi = get_u32(is, path);
    const uint64_t n = lo | (hi << 32);
    if (n > (1ull << 31)) {
      throw DvolError(DvolError::Kind::kBadHeader, path + ": blob too large");
    }
    b.data.resize(n);
    is.read(reinterpret_cast<char*>(b.data.data()), n * sizeof(float));
    if (static_cast<uint64_t>(is.gcount()) != n * sizeof(float)) {
      throw DvolError(DvolError::Kind::kTruncatedPayload, path + ": truncated blob " + b.name);
    }
    blobs.push_back(std::move(b));
  }
  return blobs;
}

}  // namespace dihc
