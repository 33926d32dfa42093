#pragma once

// Independent reference computations used by the unit and acceptance
// suites. Nothing here calls into the code paths it is used to check.

#include "shdl/grid.hpp"
#include "shdl/scatternet.hpp"

#include <functional>
#include <random>
#include <vector>

namespace oracle {

using shdl::Grid;

/// Smooth random image: Gaussian-filtered white noise plus a few random
/// blobs and bars, normalized to zero mean and unit variance.
Grid smooth_random_image(int rows, int cols, std::mt19937_64& rng);

/// One level of a critically-sampled 2D Daubechies-4 DWT with periodic
/// extension. Returns {LL, LH, HL, HH}, each half size.
std::vector<Grid> dwt2_level(const Grid& x);

/// Scattering analogue built from the critically-sampled real DWT instead of
/// the DTCWT: same log, averaging, and resolutions.
std::vector<Grid> dwt_scatter_baseline(const Grid& image, const shdl::scatternet::ScatterConfig& config);

double sample_skewness(const std::vector<double>& v);

/// Central finite-difference gradient of f at x.
std::vector<double> finite_difference(const std::function<double(const std::vector<double>&)>& f,
                                      std::vector<double> x, double step);

/// Maximum relative error |a-b| / max(|a|, |b|, floor) over entries.
double max_relative_error(const std::vector<double>& a, const std::vector<double>& b, double floor);

/// Soft-margin SVM dual solved by accelerated projected gradient onto
/// {0 <= a <= C, y.a = 0}. Returns the dual variables.
std::vector<double> svm_dual_projected_gradient(const Eigen::MatrixXd& kernel, const std::vector<int>& labels,
                                                double c, int iterations);
double svm_dual_objective(const Eigen::MatrixXd& kernel, const std::vector<int>& labels,
                          const std::vector<double>& alpha);

/// Fraction of 2D DFT energy with both |fx| and |fy| >= 1/4 cycles/sample,
/// by direct summation.
double high_quadrant_energy_ratio(const Grid& g);

double spearman(const std::vector<double>& x, const std::vector<double>& y);

}  // namespace oracle
