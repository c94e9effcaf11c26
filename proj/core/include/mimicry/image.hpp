#pragma once

#include <cstddef>
#include <filesystem>
#include <span>
#include <vector>

namespace mimicry {

/// Planar float image, channels x height x width, values in [0, 1].
/// All pixel-space algorithms operate on this type; 8-bit quantization only
/// happens when images are written to disk.
struct Image {
  static constexpr int kChannels = 3;

  int height = 0;
  int width = 0;
  std::vector<double> data;

  Image() = default;
  Image(int height, int width, double fill = 0.0);

  int channels() const noexcept { return kChannels; }
  std::size_t size() const noexcept { return data.size(); }
  bool empty() const noexcept { return data.empty(); }
  bool is_square() const noexcept { return height == width; }

  double& at(int c, int y, int x) { return data[index(c, y, x)]; }
  double at(int c, int y, int x) const { return data[index(c, y, x)]; }

  std::size_t index(int c, int y, int x) const noexcept {
    return (static_cast<std::size_t>(c) * height + y) * width + x;
  }

  bool same_shape(const Image& other) const noexcept {
    return height == other.height && width == other.width;
  }

  friend bool operator==(const Image&, const Image&) = default;
};

/// Throws ArgumentError unless every entry is finite and within [0, 1].
void validate(const Image& image);

void clamp01(Image& image);
Image clamped01(Image image);

double linf_distance(const Image& a, const Image& b);
double l2_distance(const Image& a, const Image& b);
double mean_squared_error(const Image& a, const Image& b);

/// Bilinear resize with half-pixel centers and edge clamping (no
/// antialiasing).
Image resize_bilinear(const Image& image, int height, int width);

/// Area average by an integer factor; both sides must be divisible.
Image downsample_box(const Image& image, int factor);

/// Crop the centered maximal square and rescale it bilinearly to side x side.
Image center_crop_resize(const Image& image, int side);

/// 8-bit level used when persisting a pixel value.
int quantize_level(double value) noexcept;

/// Round-trips through the 8-bit lattice.
Image quantize8(const Image& image);

/// Write an 8-bit RGB PNG. Any non-PNG extension is refused because lossy
/// codecs destroy adversarial perturbations.
void save_image_lossless(const Image& image, const std::filesystem::path& path);

Image load_image(const std::filesystem::path& path);

}  // namespace mimicry
