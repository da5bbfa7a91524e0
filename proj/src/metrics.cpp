#include "dihc/metrics.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <sstream>
#include <stdexcept>

namespace dihc {

std::pair<double, double> dice_jaccard(const BinaryMask& pred, const BinaryMask& gt) {
  if (pred.shape != gt.shape) {
    throw std::invalid_argument("dice_jaccard: shape mismatch " + shape_str(pred.shape) + " vs " +
                                shape_str(gt.shape));
  }
  long inter = 0, np = 0, ng = 0;
  for (size_t i = 0; i < pred.v.size(); ++i) {
    const bool p = pred.v[i] != 0, g = gt.v[i] != 0;
    inter += (p && g);
    np += p;
    ng += g;
  }
  if (np == 0 && ng == 0) return {100.0, 100.0};
  const double dice = 200.0 * inter / static_cast<double>(np + ng);
  const long uni = np + ng - inter;
  const double jaccard = uni == 0 ? 100.0 : 100.0 * inter / static_cast<double>(uni);
  return {dice, jaccard};
}

std::vector<std::array<int, 3>> extract_surface(const BinaryMask& m) {
  std::vector<std::array<int, 3>> surface;
  const int D = m.shape[0], H = m.shape[1], W = m.shape[2];
  for (int z = 0; z < D; ++z) {
    for (int y = 0; y < H; ++y) {
      for (int x = 0; x < W; ++x) {
        if (!m.at(z, y, x)) continue;
        const bool border = z == 0 || z == D - 1 || y == 0 || y == H - 1 || x == 0 || x == W - 1;
        bool is_surface = border;
        if (!is_surface) {
          is_surface = !m.at(z - 1, y, x) || !m.at(z + 1, y, x) || !m.at(z, y - 1, x) ||
                       !m.at(z, y + 1, x) || !m.at(z, y, x - 1) || !m.at(z, y, x + 1);
        }
        if (is_surface) surface.push_back({z, y, x});
      }
    }
  }
  return surface;
}

namespace {

// Exact nearest squared distances from every point of `from` to `to`.
std::vector<long> min_sq_distances(const std::vector<std::array<int, 3>>& from,
                                   const std::vector<std::array<int, 3>>& to) {
  std::vector<long> out(from.size());
  for (size_t i = 0; i < from.size(); ++i) {
    long best = std::numeric_limits<long>::max();
    const int z = from[i][0], y = from[i][1], x = from[i][2];
    for (const auto& q : to) {
      const long dz = z - q[0], dy = y - q[1], dx = x - q[2];
      const long d2 = dz * dz + dy * dy + dx * dx;
      if (d2 < best) {
        best = d2;
        if (best == 0) break;
      }
    }
    out[i] = best;
  }
  return out;
}

// Linear interpolation between order statistics at rank p*(n-1).
double percentile(std::vector<double> vals, double p) {
  std::sort(vals.begin(), vals.end());
  const double rank = p * static_cast<double>(vals.size() - 1);
  const size_t lo = static_cast<size_t>(rank);
  if (lo + 1 >= vals.size()) return vals.back();
  const double frac = rank - static_cast<double>(lo);
  return vals[lo] + frac * (vals[lo + 1] - vals[lo]);
}

}  // namespace

SurfaceDistances surface_distances(const std::vector<std::array<int, 3>>& a,
                                   const std::vector<std::array<int, 3>>& b) {
  SurfaceDistances r;
  if (a.empty() || b.empty()) {
    r.defined = false;
    r.asd = std::numeric_limits<double>::quiet_NaN();
    r.hd95 = std::numeric_limits<double>::quiet_NaN();
    return r;
  }
  const auto d2ab = min_sq_distances(a, b);
  const auto d2ba = min_sq_distances(b, a);
  std::vector<double> dab(d2ab.size()), dba(d2ba.size());
  double sab = 0.0, sba = 0.0;
  for (size_t i = 0; i < d2ab.size(); ++i) {
    dab[i] = std::sqrt(static_cast<double>(d2ab[i]));
    sab += dab[i];
  }
  for (size_t i = 0; i < d2ba.size(); ++i) {
    dba[i] = std::sqrt(static_cast<double>(d2ba[i]));
    sba += dba[i];
  }
  r.asd = 0.5 * (sab / static_cast<double>(dab.size()) + sba / static_cast<double>(dba.size()));
  r.hd95 = std::max(percentile(dab, 0.95), percentile(dba, 0.95));
  r.defined = true;
  return r;
}

MetricReport evaluate_masks(const BinaryMask& pred, const BinaryMask& gt,
                            const std::string& case_id) {
  MetricReport rep;
  rep.case_id = case_id;
  auto [d, j] = dice_jaccard(pred, gt);
  rep.dice = d;
  rep.jaccard = j;
  const auto sd = surface_distances(extract_surface(pred), extract_surface(gt));
  rep.asd = sd.asd;
  rep.hd95 = sd.hd95;
  rep.surface_defined = sd.defined;
  return rep;
}

MetricReport mean_report(const std::vector<MetricReport>& rows) {
  MetricReport m;
  m.case_id = "mean";
  if (rows.empty()) return m;
  for (const auto& r : rows) {
    m.dice += r.dice;
    m.jaccard += r.jaccard;
    m.asd += r.asd;
    m.hd95 += r.hd95;
    m.surface_defined = m.surface_defined && r.surface_defined;
  }
  const double n = static_cast<double>(rows.size());
  m.dice /= n;
  m.jaccard /= n;
  m.asd /= n;
  m.hd95 /= n;
  return m;
}

std::string metrics_csv(const std::vector<MetricReport>& rows, bool include_mean) {
  std::ostringstream os;
  os << "case_id,dice,jaccard,asd,hd95\n";
  char buf[192];
  auto emit = [&](const MetricReport& r) {
    std::snprintf(buf, sizeof(buf), "%s,%.9g,%.9g,%.9g,%.9g\n", r.case_id.c_str(), r.dice,
                  r.jaccard, r.asd, r.hd95);
    os << buf;
  };
  for (const auto& r : rows) emit(r);
  if (include_mean) emit(mean_report(rows));
  return os.str();
}

BinaryMask threshold_mask(const Tensor& probs, const Shape& spatial_shape) {
  if (shape_numel(spatial_shape) != probs.numel()) {
    throw std::invalid_argument("threshold_mask: shape mismatch");
  }
  BinaryMask m;
  m.shape = spatial_shape;
  m.v.resize(probs.numel());
  const float* p = probs.data();
  for (long i = 0; i < probs.numel(); ++i) m.v[i] = p[i] > 0.5f ? 1 : 0;
  return m;
}

}  // namespace dihc
