#pragma once

#include <filesystem>

#include <torch/torch.h>

namespace nbscan {

/// Reads an 8-bit PNG as a 3 x H x W float tensor in [0, 1] (grey and alpha
/// inputs are converted to RGB).  Throws IngestionError naming the file.
torch::Tensor read_png(const std::filesystem::path& path);

/// Writes a C x H x W tensor in [0, 1] (C = 1 or 3) as an 8-bit PNG.
void write_png(const std::filesystem::path& path, const torch::Tensor& image);

}  // namespace nbscan
