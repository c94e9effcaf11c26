#pragma once

#include <array>
#include <cstdint>
#include <string>
#include <vector>

#include "mimicry/dataset.hpp"
#include "mimicry/image.hpp"

namespace mimicry::toy {

inline constexpr std::array<const char*, 5> kStyles = {"stripes", "dots", "waves", "rings", "plain"};
inline constexpr std::array<const char*, 5> kShapes = {"circle", "square", "triangle", "diamond", "cross"};

struct CorpusItem {
  Image image;
  std::string caption;
  std::string style;
};

/// One procedurally drawn image: a two-colour periodic background in the
/// style's palette with a shape cut out in the inverted pattern phase.
Image render(const std::string& style, const std::string& shape, int side, std::uint64_t seed);

/// `per_style` images for each listed style, captions "a <style> <shape>".
std::vector<CorpusItem> make_corpus(const std::vector<std::string>& styles, int per_style, int side,
                                    std::uint64_t seed);

/// A toy "artist": images of one style, captioned by content only ("a circle"),
/// so the style has to be learned rather than read off the caption.
dataset::ArtistDataset make_artist(const std::string& artist_id, const std::string& style, int count, int side,
                                   std::uint64_t seed);

/// High-frequency checkerboard used as the encoder-attack target image.
Image checker_target(int side);

/// Per-image style statistic: channel means, the 3x3 channel covariance and
/// the RMS of the 3x3 high-pass residual (pixel-level roughness).
struct StyleStats {
  std::array<double, 3> mean{};
  std::array<double, 9> cov{};
  double roughness = 0.0;
};

/// Weight of the roughness difference in stats_distance.
inline constexpr double kRoughnessWeight = 4.0;

StyleStats style_stats(const Image& image);
StyleStats mean_stats(const std::vector<Image>& images);
double stats_distance(const StyleStats& a, const StyleStats& b);

/// Euclidean distance between the image's statistic and the corpus-average
/// statistic, roughness scaled by kRoughnessWeight.
double toy_style_distance(const Image& image, const std::vector<Image>& style_corpus);

}  // namespace mimicry::toy
