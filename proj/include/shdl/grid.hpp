#pragma once

#include <Eigen/Dense>

#include <stdexcept>
#include <string>

namespace shdl {

/// Real-valued 2D grid, row-major (rows = image height).
using Grid = Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;

struct DimensionError : std::invalid_argument {
    using std::invalid_argument::invalid_argument;
};
struct ParameterError : std::invalid_argument {
    using std::invalid_argument::invalid_argument;
};
struct ConfigError : std::invalid_argument {
    using std::invalid_argument::invalid_argument;
};

/// Grayscale image validated on construction: at least 16x16 and finite.
class GrayImage {
public:
    static constexpr int kMinSide = 16;

    explicit GrayImage(Grid pixels);

    int width() const { return static_cast<int>(pixels_.cols()); }
    int height() const { return static_cast<int>(pixels_.rows()); }
    const Grid& pixels() const { return pixels_; }

private:
    Grid pixels_;
};

/// Subtract the mean and divide by the standard deviation. A flat input
/// maps to all zeros.
Grid normalize(const Grid& g);

/// Bilinear resize with pixel-center alignment.
Grid resize_bilinear(const Grid& g, int rows, int cols);

/// Resamples the box [x, x + w] x [y, y + h] onto a rows x cols grid.
/// Continuous coordinates put pixel (r, c) over [c, c + 1) x [r, r + 1);
/// bilinear sampling with edge replication.
Grid crop_resize(const Grid& g, double x, double y, double w, double h, int rows, int cols);

/// Crop symmetrically (or pad by edge replication) to the requested size.
Grid center_fit(const Grid& g, int rows, int cols);

/// Integer translation by (dy, dx); pixels entering from outside replicate the edge.
Grid translate(const Grid& g, int dy, int dx);

/// Rotation about the grid center by `degrees` (counter-clockwise on screen),
/// bilinear sampling with edge replication.
Grid rotate(const Grid& g, double degrees);

/// Separable Gaussian blur with half-sample symmetric boundary. sigma <= 0 is
/// the identity.
Grid gaussian_blur(const Grid& g, double sigma);

/// Index into [0, n) under half-sample symmetric extension (end samples repeated).
inline long reflect_index(long i, long n) {
    const long period = 2 * n;
    long m = i % period;
    if (m < 0) m += period;
    return m < n ? m : period - 1 - m;
}

double relative_l2(const Grid& a, const Grid& b);

}  // namespace shdl
