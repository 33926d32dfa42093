#include "shdl/grid.hpp"

#include <algorithm>
#include <cmath>
#include <numbers>
#include <vector>

namespace shdl {

GrayImage::GrayImage(Grid pixels) : pixels_(std::move(pixels)) {
    if (pixels_.rows() < kMinSide || pixels_.cols() < kMinSide) {
        throw DimensionError("GrayImage must be at least 16x16, got " +
                             std::to_string(pixels_.rows()) + "x" + std::to_string(pixels_.cols()));
    }
    if (!pixels_.allFinite()) throw ParameterError("GrayImage contains non-finite values");
}

Grid normalize(const Grid& g) {
    const double mean = g.mean();
    Grid centered = g.array() - mean;
    const double var = centered.squaredNorm() / static_cast<double>(g.size());
    if (var <= 0.0) return Grid::Zero(g.rows(), g.cols());
    return centered / std::sqrt(var);
}

namespace {

double sample_clamped(const Grid& g, double y, double x) {
    const double yc = std::clamp(y, 0.0, static_cast<double>(g.rows() - 1));
    const double xc = std::clamp(x, 0.0, static_cast<double>(g.cols() - 1));
    const long y0 = static_cast<long>(std::floor(yc));
    const long x0 = static_cast<long>(std::floor(xc));
    const long y1 = std::min<long>(y0 + 1, g.rows() - 1);
    const long x1 = std::min<long>(x0 + 1, g.cols() - 1);
    const double fy = yc - static_cast<double>(y0);
    const double fx = xc - static_cast<double>(x0);
    const double top = g(y0, x0) * (1.0 - fx) + g(y0, x1) * fx;
    const double bottom = g(y1, x0) * (1.0 - fx) + g(y1, x1) * fx;
    return top * (1.0 - fy) + bottom * fy;
}

}  // namespace

Grid resize_bilinear(const Grid& g, int rows, int cols) {
    if (rows <= 0 || cols <= 0) throw DimensionError("resize target must be positive");
    Grid out(rows, cols);
    const double sy = static_cast<double>(g.rows()) / rows;
    const double sx = static_cast<double>(g.cols()) / cols;
    for (int r = 0; r < rows; ++r) {
        const double y = (r + 0.5) * sy - 0.5;
        for (int c = 0; c < cols; ++c) {
            out(r, c) = sample_clamped(g, y, (c + 0.5) * sx - 0.5);
        }
    }
    return out;
}

Grid crop_resize(const Grid& g, double x, double y, double w, double h, int rows, int cols) {
    if (rows <= 0 || cols <= 0) throw DimensionError("crop_resize target must be positive");
    if (!(w > 0.0) || !(h > 0.0)) throw DimensionError("crop_resize box must be nonempty");
    Grid out(rows, cols);
    const double sy = h / rows;
    const double sx = w / cols;
    for (int r = 0; r < rows; ++r) {
        const double yy = y + (r + 0.5) * sy - 0.5;
        for (int c = 0; c < cols; ++c) out(r, c) = sample_clamped(g, yy, x + (c + 0.5) * sx - 0.5);
    }
    return out;
}

Grid center_fit(const Grid& g, int rows, int cols) {
    Grid out(rows, cols);
    const long off_r = (g.rows() - rows) / 2;
    const long off_c = (g.cols() - cols) / 2;
    for (int r = 0; r < rows; ++r) {
        const long sr = std::clamp<long>(r + off_r, 0, g.rows() - 1);
        for (int c = 0; c < cols; ++c) {
            out(r, c) = g(sr, std::clamp<long>(c + off_c, 0, g.cols() - 1));
        }
    }
    return out;
}

Grid translate(const Grid& g, int dy, int dx) {
    Grid out(g.rows(), g.cols());
    for (long r = 0; r < g.rows(); ++r) {
        const long sr = std::clamp<long>(r - dy, 0, g.rows() - 1);
        for (long c = 0; c < g.cols(); ++c) {
            out(r, c) = g(sr, std::clamp<long>(c - dx, 0, g.cols() - 1));
        }
    }
    return out;
}

Grid rotate(const Grid& g, double degrees) {
    const double t = degrees * std::numbers::pi / 180.0;
    const double ct = std::cos(t);
    const double st = std::sin(t);
    const double cy = (g.rows() - 1) / 2.0;
    const double cx = (g.cols() - 1) / 2.0;
    Grid out(g.rows(), g.cols());
    for (long r = 0; r < g.rows(); ++r) {
        for (long c = 0; c < g.cols(); ++c) {
            // inverse map of the forward rotation (y axis points down)
            const double x = c - cx;
            const double y = r - cy;
            const double sx = ct * x - st * y;
            const double sy = st * x + ct * y;
            out(r, c) = sample_clamped(g, sy + cy, sx + cx);
        }
    }
    return out;
}

Grid gaussian_blur(const Grid& g, double sigma) {
    if (sigma <= 0.0) return g;
    const int radius = std::max(1, static_cast<int>(std::ceil(3.5 * sigma)));
    std::vector<double> k(2 * radius + 1);
    double sum = 0.0;
    for (int i = -radius; i <= radius; ++i) {
        k[i + radius] = std::exp(-0.5 * i * i / (sigma * sigma));
        sum += k[i + radius];
    }
    for (double& v : k) v /= sum;

    Grid tmp(g.rows(), g.cols());
    for (long r = 0; r < g.rows(); ++r) {
        for (long c = 0; c < g.cols(); ++c) {
            double acc = 0.0;
            for (int i = -radius; i <= radius; ++i) acc += k[i + radius] * g(r, reflect_index(c + i, g.cols()));
            tmp(r, c) = acc;
        }
    }
    Grid out(g.rows(), g.cols());
    for (long r = 0; r < g.rows(); ++r) {
        for (long c = 0; c < g.cols(); ++c) {
            double acc = 0.0;
            for (int i = -radius; i <= radius; ++i) acc += k[i + radius] * tmp(reflect_index(r + i, g.rows()), c);
            out(r, c) = acc;
        }
    }
    return out;
}

double relative_l2(const Grid& a, const Grid& b) {
    const double denom = a.norm();
    return denom == 0.0 ? (b.norm() == 0.0 ? 0.0 : INFINITY) : (a - b).norm() / denom;
}

}  // namespace shdl
