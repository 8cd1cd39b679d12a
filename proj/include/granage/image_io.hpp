#pragma once

#include <cstdint>
#include <filesystem>
#include <string>
#include <vector>

#include <opencv2/imgcodecs.hpp>
#include <opencv2/imgproc.hpp>

#include "granage/common.hpp"
#include "granage/tensor.hpp"

namespace granage::data {

// Decoded 8-bit image, interleaved RGB.
struct ImageU8 {
  int width = 0;
  int height = 0;
  std::vector<uint8_t> pixels;  // height*width*3

  size_t expected_bytes() const { return static_cast<size_t>(width) * height * 3; }
};

// Channel scaling applied after the /255 step: v = (u/255 - mean) / std.
// Defaults map [0,255] onto [-1,1].
struct Normalization {
  double mean = 0.5;
  double std = 0.5;
};

inline ImageU8 decode_image(const std::string& path) {
  cv::Mat bgr = cv::imread(path, cv::IMREAD_COLOR);
  if (bgr.empty()) throw RuntimeError("image: cannot decode: " + path);
  cv::Mat rgb;
  cv::cvtColor(bgr, rgb, cv::COLOR_BGR2RGB);
  ImageU8 img;
  img.width = rgb.cols;
  img.height = rgb.rows;
  img.pixels.assign(rgb.data, rgb.data + img.expected_bytes());
  return img;
}

inline ImageU8 resize_image(const ImageU8& img, int size) {
  if (img.width == size && img.height == size) return img;
  cv::Mat src(img.height, img.width, CV_8UC3, const_cast<uint8_t*>(img.pixels.data()));
  cv::Mat dst;
  cv::resize(src, dst, cv::Size(size, size), 0, 0, cv::INTER_LINEAR);
  ImageU8 out;
  out.width = size;
  out.height = size;
  out.pixels.assign(dst.data, dst.data + out.expected_bytes());
  return out;
}

inline void encode_png(const std::string& path, const ImageU8& img) {
  cv::Mat rgb(img.height, img.width, CV_8UC3, const_cast<uint8_t*>(img.pixels.data()));
  cv::Mat bgr;
  cv::cvtColor(rgb, bgr, cv::COLOR_RGB2BGR);
  if (!cv::imwrite(path, bgr, {cv::IMWRITE_PNG_COMPRESSION, 6}))
    throw RuntimeError("image: cannot write: " + path);
}

// Resize to input_size^2 and normalize into a {3,S,S} tensor (CHW).
inline Tensor preprocess(const ImageU8& img, int input_size, Normalization norm = {}) {
  if (img.width <= 0 || img.height <= 0 || img.pixels.size() != img.expected_bytes())
    throw ValueError("image: malformed image buffer");
  const ImageU8 sized = resize_image(img, input_size);
  Tensor t({3, input_size, input_size});
  const size_t plane = static_cast<size_t>(input_size) * input_size;
  for (size_t i = 0; i < plane; ++i)
    for (int c = 0; c < 3; ++c)
      t.data[c * plane + i] = (sized.pixels[i * 3 + c] / 255.0 - norm.mean) / norm.std;
  return t;
}

}  // namespace granage::data
