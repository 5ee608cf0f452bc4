#include "nbscan/png_io.hpp"

#include <png.h>

#include <cstring>
#include <vector>

#include "nbscan/errors.hpp"

namespace nbscan {

torch::Tensor read_png(const std::filesystem::path& path) {
    png_image image;
    std::memset(&image, 0, sizeof(image));
    image.version = PNG_IMAGE_VERSION;
    if (!png_image_begin_read_from_file(&image, path.c_str()))
        throw IngestionError("cannot read PNG " + path.string() + ": " + image.message);
    image.format = PNG_FORMAT_RGB;
    std::vector<png_byte> buffer(PNG_IMAGE_SIZE(image));
    if (!png_image_finish_read(&image, nullptr, buffer.data(), 0, nullptr)) {
        png_image_free(&image);
        throw IngestionError("cannot decode PNG " + path.string() + ": " + image.message);
    }
    const auto height = static_cast<int64_t>(image.height);
    const auto width = static_cast<int64_t>(image.width);
    auto hwc = torch::from_blob(buffer.data(), {height, width, 3}, torch::kUInt8).clone();
    return hwc.permute({2, 0, 1}).contiguous().to(torch::kFloat) / 255.0;
}

void write_png(const std::filesystem::path& path, const torch::Tensor& image) {
    if (image.dim() != 3 || (image.size(0) != 1 && image.size(0) != 3))
        throw ArgumentError("write_png expects a 1 x H x W or 3 x H x W tensor");
    const auto hwc = (image.detach().to(torch::kFloat).clamp(0.0, 1.0) * 255.0)
                         .round()
                         .to(torch::kUInt8)
                         .permute({1, 2, 0})
                         .contiguous();
    png_image out;
    std::memset(&out, 0, sizeof(out));
    out.version = PNG_IMAGE_VERSION;
    out.width = static_cast<png_uint_32>(image.size(2));
    out.height = static_cast<png_uint_32>(image.size(1));
    out.format = image.size(0) == 1 ? PNG_FORMAT_GRAY : PNG_FORMAT_RGB;
    if (!png_image_write_to_file(&out, path.c_str(), 0, hwc.data_ptr<uint8_t>(), 0, nullptr))
        throw IoError("cannot write PNG " + path.string() + ": " + out.message);
}

}  // namespace nbscan
