#pragma once

// Raster file I/O. Files are 8-bit; in memory, intensities are floats in [0,1].

#include <filesystem>

#include "bvit/core_types.hpp"

namespace bvit {

// Loads a grayscale or color raster as RGB (channels = 3) or, with
// grayscale = true, as a single channel. Throws DataError if unreadable.
Image load_image(const std::filesystem::path& path, bool grayscale = false);

// Writes 1- or 3-channel images as 8-bit rasters (format from extension),
// rounding v * 255 after clamping to [0,1]. Throws DataError on failure.
void save_image(const std::filesystem::path& path, const Image& image);

// Same as save_image, but writes to a temporary sibling and renames it
// into place so concurrent readers never observe a partial file.
void save_image_atomic(const std::filesystem::path& path, const Image& image);

// Rounds every value to the nearest multiple of 1/255 (what a save/load
// round trip produces).
Image quantize_8bit(const Image& image);

}  // namespace bvit
