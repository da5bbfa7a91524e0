#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include "dihc/ops.hpp"

namespace dihc {

// Double-precision scalar-loop references, independent of the production
// kernels. Finite differences run against these, never against the f32 path.
namespace refmath {

struct DArray {
  Shape shape;
  std::vector<double> v;
};

DArray conv3d(const DArray& in, const DArray& w, const std::vector<double>& bias,
              int stride, int pad);
DArray conv_transpose3d(const DArray& in, const DArray& w);
DArray upsample(const DArray& in, int factor, UpsampleMode mode);
// batch mode with use_running: running stats are treated as constants
DArray normalize(const DArray& in, const std::vector<double>& gamma,
                 const std::vector<double>& beta, NormMode mode, int groups, double eps,
                 bool use_running, const std::vector<double>& running_mean,
                 const std::vector<double>& running_var);
double sharpen(double p, double temperature);

}  // namespace refmath

struct GradCheckResult {
  std::string op;
  double worst_rel = 0.0;
  int seeds = 0;
  bool pass = true;
};

// Runs finite-difference checks (eps=1e-3, central, 64-bit references) for
// every differentiable op. corrupt_op, when non-empty, perturbs that op's
// analytic gradient so the detector itself can be exercised.
std::vector<GradCheckResult> run_gradcheck_suite(uint64_t seed, int seeds_per_op,
                                                 const std::string& corrupt_op = "");

}  // namespace dihc
