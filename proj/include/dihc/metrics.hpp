#pragma once

#include <array>
#include <cstdint>
#include <string>
#include <vector>

#include "dihc/tensor.hpp"

namespace dihc {

struct BinaryMask {
  Shape shape;  // [D,H,W]
  std::vector<uint8_t> v;

  long numel() const { return shape_numel(shape); }
  uint8_t at(int z, int y, int x) const {
    return v[(static_cast<long>(z) * shape[1] + y) * shape[2] + x];
  }
};

struct MetricReport {
  std::string case_id;
  double dice = 0.0;     // percent
  double jaccard = 0.0;  // percent
  double asd = 0.0;      // voxels
  double hd95 = 0.0;     // voxels
  bool surface_defined = true;  // false when either surface is empty
};

// dice = 2|P∩G| / (|P|+|G|) * 100, jaccard = |P∩G| / |P∪G| * 100.
// Both-empty masks score (100, 100) by convention.
std::pair<double, double> dice_jaccard(const BinaryMask& pred, const BinaryMask& gt);

// Foreground voxels with at least one background 6-neighbor; voxels on the
// volume border treat the outside as background.
std::vector<std::array<int, 3>> extract_surface(const BinaryMask& m);

struct SurfaceDistances {
  double asd = 0.0;
  double hd95 = 0.0;
  bool defined = false;
};

// Symmetric average surface distance and 95th-percentile Hausdorff distance
// in voxel units; undefined when either surface is empty. Minimum distances
// are exact (integer squared distances), the percentile interpolates
// linearly between order statistics, hd95 takes the max over directions.
SurfaceDistances surface_distances(const std::vector<std::array<int, 3>>& a,
                                   const std::vector<std::array<int, 3>>& b);

MetricReport evaluate_masks(const BinaryMask& pred, const BinaryMask& gt,
                            const std::string& case_id);

// Rows `case_id,dice,jaccard,asd,hd95`; appends a mean row when requested.
std::string metrics_csv(const std::vector<MetricReport>& rows, bool include_mean);
MetricReport mean_report(const std::vector<MetricReport>& rows);

// Threshold a probability map (strict > 0.5) into a mask.
BinaryMask threshold_mask(const Tensor& probs, const Shape& spatial_shape);

}  // namespace dihc
