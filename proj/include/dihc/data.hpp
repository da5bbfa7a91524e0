#pragma once

#include <cstdint>
#include <optional>
#include <stdexcept>
#include <string>
#include <vector>

#include "dihc/metrics.hpp"
#include "dihc/rng.hpp"
#include "dihc/tensor.hpp"

namespace dihc {

struct Volume {
  Shape shape;  // [D,H,W]
  std::vector<float> v;
  long numel() const { return shape_numel(shape); }
};

struct Sample {
  Volume vol;
  BinaryMask mask;
};

struct DatasetSplit {
  std::vector<Sample> labelled;
  std::vector<Volume> unlabelled;
};

struct BatchSpec {
  int labelled_per_batch = 2;
  int unlabelled_per_batch = 2;
  uint64_t seed = 0;
  bool augment = false;
};

struct Batch {
  Tensor x;                        // [B,1,D,H,W]
  Tensor y;                        // [labelled_per_batch,D,H,W]
  std::vector<int> labelled_slots; // always {0..labelled_per_batch-1}
};

// Each sample holds 1-2 random ellipsoids over a background, with intensity
// contrast >= 0.5, additive Gaussian noise (sigma 0.1) and a smooth intensity
// bias field. Masks are the exact ellipsoid union; foreground fraction is
// kept within [2%, 40%]. noise_free disables noise and bias for oracle
// thresholding tests.
std::vector<Sample> generate_synthetic(int n_volumes, int shape, uint64_t seed,
                                       bool noise_free = false);

// First ceil(fraction*n) samples after a seeded shuffle keep their masks.
DatasetSplit split_dataset(std::vector<Sample> data, double labelled_fraction, uint64_t seed);

// Random axis flips (p=0.5 each) and one 90-degree rotation in a random
// axis pair; volume and mask are transformed identically.
struct AugmentDraw {
  bool flip[3] = {false, false, false};
  int rot_axes[2] = {0, 1};
  int rot_quarter = 0;  // quarter turns, 0..3
};
AugmentDraw draw_augment(uint64_t seed);

std::pair<Volume, std::optional<BinaryMask>> augment(const Volume& v,
                                                     const std::optional<BinaryMask>& m,
                                                     uint64_t seed);

// Layout: labelled slots first, then unlabelled; epoch-reshuffled streams,
// deterministic in (spec.seed, t). An empty unlabelled set falls back to
// labelled volumes (without using their masks) with a warning on stderr.
Batch next_batch(const DatasetSplit& split, const BatchSpec& spec, int t);

// In-place per-volume z-score.
void zscore(Volume& v);

// ---- DVOL file format -------------------------------------------------------
// little-endian: magic "DVOL" | u32 version=1 | u32 dtype (0=f32, 1=u8 mask)
// | u32 D,H,W | payload row-major.

class DvolError : public std::runtime_error {
 public:
  enum class Kind { kMagicMismatch, kBadHeader, kTruncatedPayload, kIo };
  DvolError(Kind kind, const std::string& msg) : std::runtime_error(msg), kind_(kind) {}
  Kind kind() const { return kind_; }

 private:
  Kind kind_;
};

void write_volume(const std::string& path, const Volume& v);
void write_mask(const std::string& path, const BinaryMask& m);
Volume read_volume(const std::string& path);
BinaryMask read_mask(const std::string& path);

// Dataset manifest: lines `path<TAB>labelled|unlabelled`. Paths with a mask
// file (path with "vol" replaced by "msk") are written as labelled.
struct ManifestEntry {
  std::string path;
  bool labelled;
};
void write_manifest(const std::string& path, const std::vector<ManifestEntry>& entries);
std::vector<ManifestEntry> read_manifest(const std::string& path);

}  // namespace dihc
