#pragma once

#include <filesystem>
#include <string>
#include <vector>

#include "mimicry/image.hpp"

namespace mimicry::dataset {

inline constexpr int kDefaultCropSide = 512;

/// One artist's image set paired with captions, in manifest order.
struct ArtistDataset {
  std::string artist_id;
  std::string style_tag;
  std::vector<Image> images;
  std::vector<std::string> captions;

  std::size_t size() const noexcept { return images.size(); }
};

/// Throws ManifestError if the dataset breaks its invariants (empty,
/// caption/image count mismatch, non-square or wrongly sized images).
void validate(const ArtistDataset& dataset, int side);

/// Load a JSON manifest {artist_id, style_tag, items: [{image, caption}]}.
/// Image paths are relative to the manifest's directory. Every image is
/// center-cropped and resized to `side`.
ArtistDataset load_dataset(const std::filesystem::path& manifest_path, int side = kDefaultCropSide);

/// Persist images as PNGs plus a manifest next to them; returns the manifest
/// path. File names are <prefix><index>.png in dataset order.
std::filesystem::path save_dataset(const ArtistDataset& dataset, const std::filesystem::path& dir,
                                   const std::string& prefix = "img_");

}  // namespace mimicry::dataset
