#include "bvit/image.hpp"

#include <opencv2/imgcodecs.hpp>
#include <opencv2/imgproc.hpp>

#include <algorithm>
#include <atomic>
#include <cmath>
#include <system_error>
#include <unistd.h>

#include "bvit/error.hpp"

namespace bvit {
namespace {

std::uint8_t to_byte(float v) {
  const float c = std::clamp(v, 0.0f, 1.0f);
  return static_cast<std::uint8_t>(std::lround(c * 255.0f));
}

}  // namespace

Image load_image(const std::filesystem::path& path, bool grayscale) {
  cv::Mat mat = cv::imread(path.string(), grayscale ? cv::IMREAD_GRAYSCALE : cv::IMREAD_COLOR);
  if (mat.empty()) throw DataError("cannot read image '" + path.string() + "'");
  if (!grayscale) cv::cvtColor(mat, mat, cv::COLOR_BGR2RGB);
  Image out(mat.cols, mat.rows, mat.channels());
  for (int y = 0; y < mat.rows; ++y) {
    const std::uint8_t* row = mat.ptr<std::uint8_t>(y);
    float* dst = out.pixels.data() + out.index(0, y);
    for (int i = 0; i < mat.cols * mat.channels(); ++i) dst[i] = row[i] / 255.0f;
  }
  return out;
}

void save_image(const std::filesystem::path& path, const Image& image) {
  if (image.channels != 1 && image.channels != 3) {
    throw ShapeError("save_image supports 1 or 3 channels, got " + std::to_string(image.channels));
  }
  cv::Mat mat(image.height, image.width, image.channels == 1 ? CV_8UC1 : CV_8UC3);
  for (int y = 0; y < image.height; ++y) {
    std::uint8_t* row = mat.ptr<std::uint8_t>(y);
    const float* src = image.pixels.data() + image.index(0, y);
    for (int i = 0; i < image.width * image.channels; ++i) row[i] = to_byte(src[i]);
  }
  if (image.channels == 3) cv::cvtColor(mat, mat, cv::COLOR_RGB2BGR);
  if (path.has_parent_path()) {
    std::error_code ec;
    std::filesystem::create_directories(path.parent_path(), ec);
  }
  bool ok = false;
  try {
    ok = cv::imwrite(path.string(), mat);
  } catch (const cv::Exception& e) {
    throw DataError("cannot write image '" + path.string() + "': " + e.what());
  }
  if (!ok) throw DataError("cannot write image '" + path.string() + "'");
}

void save_image_atomic(const std::filesystem::path& path, const Image& image) {
  static std::atomic<unsigned> counter{0};
  auto tmp = path;
  tmp += ".tmp" + std::to_string(::getpid()) + "_" + std::to_string(counter++) +
         path.extension().string();
  save_image(tmp, image);
  std::error_code ec;
  std::filesystem::rename(tmp, path, ec);
  if (ec) {
    std::filesystem::remove(tmp, ec);
    throw DataError("cannot move cache file into place: " + path.string());
  }
}

Image quantize_8bit(const Image& image) {
  Image out = image;
  for (float& v : out.pixels) v = to_byte(v) / 255.0f;
  return out;
}

}  // namespace bvit
