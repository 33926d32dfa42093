#include "shdl/png_io.hpp"

#include <png.h>

#include <algorithm>
#include <cmath>
#include <cstring>
#include <stdexcept>
#include <vector>

namespace shdl {

Grid quantize_gray8(const Grid& pixels) {
    return pixels.unaryExpr([](double v) { return std::round(std::clamp(v, 0.0, 255.0)); });
}

void write_png_gray8(const std::filesystem::path& path, const Grid& pixels) {
    png_image image;
    std::memset(&image, 0, sizeof(image));
    image.version = PNG_IMAGE_VERSION;
    image.width = static_cast<png_uint_32>(pixels.cols());
    image.height = static_cast<png_uint_32>(pixels.rows());
    image.format = PNG_FORMAT_GRAY;

    std::vector<png_byte> buffer(static_cast<std::size_t>(pixels.size()));
    const Grid q = quantize_gray8(pixels);
    for (Eigen::Index i = 0; i < q.size(); ++i) buffer[static_cast<std::size_t>(i)] = static_cast<png_byte>(q.data()[i]);

    if (!png_image_write_to_file(&image, path.c_str(), 0, buffer.data(), 0, nullptr)) {
        throw std::runtime_error("png write failed for " + path.string() + ": " + image.message);
    }
}

Grid read_png_gray8(const std::filesystem::path& path) {
    png_image image;
    std::memset(&image, 0, sizeof(image));
    image.version = PNG_IMAGE_VERSION;
    if (!png_image_begin_read_from_file(&image, path.c_str())) {
        throw std::runtime_error("png read failed for " + path.string() + ": " + image.message);
    }
    image.format = PNG_FORMAT_GRAY;
    std::vector<png_byte> buffer(PNG_IMAGE_SIZE(image));
    if (!png_image_finish_read(&image, nullptr, buffer.data(), 0, nullptr)) {
        png_image_free(&image);
        throw std::runtime_error("png decode failed for " + path.string() + ": " + image.message);
    }
    Grid out(image.height, image.width);
    for (Eigen::Index i = 0; i < out.size(); ++i) out.data()[i] = buffer[static_cast<std::size_t>(i)];
    return out;
}

}  // namespace shdl
