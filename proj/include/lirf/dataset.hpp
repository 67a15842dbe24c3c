#pragma once

#include <filesystem>
#include <optional>
#include <string>
#include <vector>

#include "lirf/geometry.hpp"

namespace lirf {

struct DatasetView {
  std::string split;  // "train" or "test"
  int view = 0;
  double scale = 1.0;
  Camera camera;
  std::string image_file;
};

// On-disk layout: cameras.json plus {split}_{view:04}_{scale}.png images.
class Dataset {
 public:
  static Dataset load(const std::filesystem::path& root);

  const std::filesystem::path& root() const { return root_; }
  const std::vector<DatasetView>& views() const { return views_; }

  std::vector<const DatasetView*> select(const std::string& split, double scale) const;
  const DatasetView* find(const std::string& split, int view, double scale) const;
  std::vector<int> view_ids(const std::string& split) const;

  // Row-major [h,w,3] floats in [0,1].
  std::vector<float> load_image(const DatasetView& view) const;

 private:
  std::filesystem::path root_;
  std::vector<DatasetView> views_;
};

}  // namespace lirf
