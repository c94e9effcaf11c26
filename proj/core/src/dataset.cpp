#include "mimicry/dataset.hpp"

#include <fstream>
#include <iomanip>
#include <sstream>

#include <nlohmann/json.hpp>

#include "mimicry/error.hpp"

namespace mimicry::dataset {

using nlohmann::json;

void validate(const ArtistDataset& dataset, int side) {
  if (dataset.images.empty()) throw ManifestError("dataset '" + dataset.artist_id + "' has no images");
  if (dataset.images.size() != dataset.captions.size()) {
    throw ManifestError("dataset '" + dataset.artist_id + "' has " + std::to_string(dataset.images.size()) +
                        " images but " + std::to_string(dataset.captions.size()) + " captions");
  }
  for (const Image& img : dataset.images) {
    if (!img.is_square() || img.height != side) {
      throw ManifestError("dataset image is not " + std::to_string(side) + "x" + std::to_string(side));
    }
  }
}

ArtistDataset load_dataset(const std::filesystem::path& manifest_path, int side) {
  std::ifstream in(manifest_path);
  if (!in) throw IoError("cannot open manifest: " + manifest_path.string());

  json doc;
  try {
    in >> doc;
  } catch (const json::exception& e) {
    throw ManifestError("manifest is not valid JSON: " + std::string(e.what()));
  }
  if (!doc.is_object() || !doc.contains("items") || !doc["items"].is_array()) {
    throw ManifestError("manifest must be an object with an 'items' array");
  }

  ArtistDataset ds;
  ds.artist_id = doc.value("artist_id", manifest_path.stem().string());
  ds.style_tag = doc.value("style_tag", "");

  const auto base = manifest_path.parent_path();
  std::size_t images = 0;
  for (const auto& item : doc["items"]) {
    if (!item.is_object() || !item.contains("image") || !item["image"].is_string()) {
      throw ManifestError("manifest item without an 'image' path");
    }
    ++images;
    ds.images.push_back(center_crop_resize(load_image(base / item["image"].get<std::string>()), side));
    if (item.contains("caption") && item["caption"].is_string()) {
      ds.captions.push_back(item["caption"].get<std::string>());
    }
  }
  if (ds.captions.size() != images) {
    throw ManifestError("manifest lists " + std::to_string(images) + " images but " +
                        std::to_string(ds.captions.size()) + " captions");
  }
  validate(ds, side);
  return ds;
}

std::filesystem::path save_dataset(const ArtistDataset& dataset, const std::filesystem::path& dir,
                                   const std::string& prefix) {
  std::filesystem::create_directories(dir);
  json doc;
  doc["artist_id"] = dataset.artist_id;
  doc["style_tag"] = dataset.style_tag;
  doc["items"] = json::array();
  for (std::size_t i = 0; i < dataset.images.size(); ++i) {
    std::ostringstream name;
    name << prefix << std::setw(3) << std::setfill('0') << i << ".png";
    save_image_lossless(dataset.images[i], dir / name.str());
    json item;
    item["image"] = name.str();
    item["caption"] = i < dataset.captions.size() ? dataset.captions[i] : "";
    doc["items"].push_back(item);
  }
  const auto manifest = dir / "manifest.json";
  std::ofstream out(manifest);
  if (!out) throw IoError("cannot write manifest: " + manifest.string());
  out << doc.dump(2) << '\n';
  return manifest;
}

}  // namespace mimicry::dataset
