#include "mimicry/image.hpp"

#include <png.h>

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <memory>
#include <string>

#include "mimicry/error.hpp"

namespace mimicry {

Image::Image(int h, int w, double fill) : height(h), width(w) {
  if (h < 0 || w < 0) throw ArgumentError("image dimensions must be nonnegative");
  data.assign(static_cast<std::size_t>(kChannels) * h * w, fill);
}

void validate(const Image& image) {
  if (image.data.size() != static_cast<std::size_t>(Image::kChannels) * image.height * image.width) {
    throw ArgumentError("image buffer does not match its dimensions");
  }
  for (double v : image.data) {
    if (!std::isfinite(v) || v < 0.0 || v > 1.0) {
      throw ArgumentError("image values must be finite and within [0, 1]");
    }
  }
}

void clamp01(Image& image) {
  for (double& v : image.data) v = std::clamp(v, 0.0, 1.0);
}

Image clamped01(Image image) {
  clamp01(image);
  return image;
}

namespace {

void require_same_shape(const Image& a, const Image& b) {
  if (!a.same_shape(b)) throw ArgumentError("image shapes differ");
}

}  // namespace

double linf_distance(const Image& a, const Image& b) {
  require_same_shape(a, b);
  double m = 0.0;
  for (std::size_t i = 0; i < a.size(); ++i) m = std::max(m, std::abs(a.data[i] - b.data[i]));
  return m;
}

double l2_distance(const Image& a, const Image& b) {
  require_same_shape(a, b);
  double s = 0.0;
  for (std::size_t i = 0; i < a.size(); ++i) {
    const double d = a.data[i] - b.data[i];
    s += d * d;
  }
  return std::sqrt(s);
}

double mean_squared_error(const Image& a, const Image& b) {
  require_same_shape(a, b);
  if (a.empty()) return 0.0;
  const double d = l2_distance(a, b);
  return d * d / static_cast<double>(a.size());
}

Image resize_bilinear(const Image& image, int height, int width) {
  if (height <= 0 || width <= 0) throw ArgumentError("resize target must be positive");
  if (image.empty()) throw ArgumentError("cannot resize an empty image");
  if (height == image.height && width == image.width) return image;

  Image out(height, width);
  const double sy = static_cast<double>(image.height) / height;
  const double sx = static_cast<double>(image.width) / width;
  for (int y = 0; y < height; ++y) {
    const double fy = std::clamp((y + 0.5) * sy - 0.5, 0.0, image.height - 1.0);
    const int y0 = static_cast<int>(std::floor(fy));
    const int y1 = std::min(y0 + 1, image.height - 1);
    const double wy = fy - y0;
    for (int x = 0; x < width; ++x) {
      const double fx = std::clamp((x + 0.5) * sx - 0.5, 0.0, image.width - 1.0);
      const int x0 = static_cast<int>(std::floor(fx));
      const int x1 = std::min(x0 + 1, image.width - 1);
      const double wx = fx - x0;
      for (int c = 0; c < Image::kChannels; ++c) {
        const double top = (1.0 - wx) * image.at(c, y0, x0) + wx * image.at(c, y0, x1);
        const double bottom = (1.0 - wx) * image.at(c, y1, x0) + wx * image.at(c, y1, x1);
        out.at(c, y, x) = (1.0 - wy) * top + wy * bottom;
      }
    }
  }
  return out;
}

Image downsample_box(const Image& image, int factor) {
  if (factor <= 0 || image.height % factor != 0 || image.width % factor != 0) {
    throw ArgumentError("box downsampling factor must divide the image size");
  }
  if (factor == 1) return image;
  Image out(image.height / factor, image.width / factor);
  const double norm = 1.0 / (factor * factor);
  for (int c = 0; c < Image::kChannels; ++c) {
    for (int y = 0; y < out.height; ++y) {
      for (int x = 0; x < out.width; ++x) {
        double s = 0.0;
        for (int dy = 0; dy < factor; ++dy) {
          for (int dx = 0; dx < factor; ++dx) s += image.at(c, y * factor + dy, x * factor + dx);
        }
        out.at(c, y, x) = s * norm;
      }
    }
  }
  return out;
}

Image center_crop_resize(const Image& image, int side) {
  if (side <= 0) throw ArgumentError("crop side must be positive");
  if (image.empty()) throw ArgumentError("cannot crop an empty image");
  const int m = std::min(image.height, image.width);
  const int y0 = (image.height - m) / 2;
  const int x0 = (image.width - m) / 2;

  Image crop(m, m);
  for (int c = 0; c < Image::kChannels; ++c) {
    for (int y = 0; y < m; ++y) {
      for (int x = 0; x < m; ++x) crop.at(c, y, x) = image.at(c, y0 + y, x0 + x);
    }
  }
  return resize_bilinear(crop, side, side);
}

int quantize_level(double value) noexcept {
  return static_cast<int>(std::lround(std::clamp(value, 0.0, 1.0) * 255.0));
}

Image quantize8(const Image& image) {
  Image out = image;
  for (double& v : out.data) v = quantize_level(v) / 255.0;
  return out;
}

namespace {

struct FileCloser {
  void operator()(std::FILE* f) const noexcept {
    if (f) std::fclose(f);
  }
};
using FilePtr = std::unique_ptr<std::FILE, FileCloser>;

bool has_png_extension(const std::filesystem::path& path) {
  std::string ext = path.extension().string();
  std::transform(ext.begin(), ext.end(), ext.begin(), [](unsigned char c) { return std::tolower(c); });
  return ext == ".png";
}

}  // namespace

void save_image_lossless(const Image& image, const std::filesystem::path& path) {
  if (!has_png_extension(path)) {
    throw IoError("refusing to persist image in a non-lossless format: " + path.string());
  }
  validate(image);

  FilePtr file(std::fopen(path.c_str(), "wb"));
  if (!file) throw IoError("cannot open for writing: " + path.string());

  png_structp png = png_create_write_struct(PNG_LIBPNG_VER_STRING, nullptr, nullptr, nullptr);
  if (!png) throw IoError("png_create_write_struct failed");
  png_infop info = png_create_info_struct(png);
  if (!info) {
    png_destroy_write_struct(&png, nullptr);
    throw IoError("png_create_info_struct failed");
  }

  std::vector<png_byte> rows(static_cast<std::size_t>(image.height) * image.width * 3);
  for (int y = 0; y < image.height; ++y) {
    for (int x = 0; x < image.width; ++x) {
      for (int c = 0; c < 3; ++c) {
        rows[(static_cast<std::size_t>(y) * image.width + x) * 3 + c] =
            static_cast<png_byte>(quantize_level(image.at(c, y, x)));
      }
    }
  }
  std::vector<png_bytep> row_ptrs(image.height);
  for (int y = 0; y < image.height; ++y) row_ptrs[y] = rows.data() + static_cast<std::size_t>(y) * image.width * 3;

  if (setjmp(png_jmpbuf(png))) {
    png_destroy_write_struct(&png, &info);
    throw IoError("failed to encode png: " + path.string());
  }
  png_init_io(png, file.get());
  png_set_IHDR(png, info, image.width, image.height, 8, PNG_COLOR_TYPE_RGB, PNG_INTERLACE_NONE,
               PNG_COMPRESSION_TYPE_DEFAULT, PNG_FILTER_TYPE_DEFAULT);
  png_set_compression_level(png, 9);
  png_write_info(png, info);
  png_write_image(png, row_ptrs.data());
  png_write_end(png, nullptr);
  png_destroy_write_struct(&png, &info);

  if (std::fflush(file.get()) != 0) throw IoError("failed to flush " + path.string());
}

Image load_image(const std::filesystem::path& path) {
  FilePtr file(std::fopen(path.c_str(), "rb"));
  if (!file) throw IoError("cannot open image: " + path.string());

  png_byte header[8];
  if (std::fread(header, 1, 8, file.get()) != 8 || png_sig_cmp(header, 0, 8) != 0) {
    throw IoError("not a PNG file: " + path.string());
  }

  png_structp png = png_create_read_struct(PNG_LIBPNG_VER_STRING, nullptr, nullptr, nullptr);
  if (!png) throw IoError("png_create_read_struct failed");
  png_infop info = png_create_info_struct(png);
  if (!info) {
    png_destroy_read_struct(&png, nullptr, nullptr);
    throw IoError("png_create_info_struct failed");
  }

  std::vector<png_byte> rows;
  Image out;
  if (setjmp(png_jmpbuf(png))) {
    png_destroy_read_struct(&png, &info, nullptr);
    throw IoError("failed to decode png: " + path.string());
  }
  png_init_io(png, file.get());
  png_set_sig_bytes(png, 8);
  png_read_info(png, info);

  // Normalize every PNG flavor to 8-bit RGB.
  const png_byte color = png_get_color_type(png, info);
  const png_byte depth = png_get_bit_depth(png, info);
  if (depth == 16) png_set_strip_16(png);
  if (color == PNG_COLOR_TYPE_PALETTE) png_set_palette_to_rgb(png);
  if (color == PNG_COLOR_TYPE_GRAY && depth < 8) png_set_expand_gray_1_2_4_to_8(png);
  if (png_get_valid(png, info, PNG_INFO_tRNS)) png_set_tRNS_to_alpha(png);
  if (color == PNG_COLOR_TYPE_GRAY || color == PNG_COLOR_TYPE_GRAY_ALPHA) png_set_gray_to_rgb(png);
  if (color & PNG_COLOR_MASK_ALPHA || png_get_valid(png, info, PNG_INFO_tRNS)) png_set_strip_alpha(png);
  png_read_update_info(png, info);

  const int width = static_cast<int>(png_get_image_width(png, info));
  const int height = static_cast<int>(png_get_image_height(png, info));
  const std::size_t stride = png_get_rowbytes(png, info);
  rows.resize(stride * height);
  std::vector<png_bytep> row_ptrs(height);
  for (int y = 0; y < height; ++y) row_ptrs[y] = rows.data() + static_cast<std::size_t>(y) * stride;
  png_read_image(png, row_ptrs.data());
  png_read_end(png, nullptr);
  png_destroy_read_struct(&png, &info, nullptr);

  out = Image(height, width);
  for (int y = 0; y < height; ++y) {
    for (int x = 0; x < width; ++x) {
      for (int c = 0; c < 3; ++c) out.at(c, y, x) = rows[y * stride + x * 3 + c] / 255.0;
    }
  }
  return out;
}

}  // namespace mimicry
