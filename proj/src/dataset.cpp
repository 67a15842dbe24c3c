#include "lirf/dataset.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <set>

#include "json.hpp"
#include "lirf/png_io.hpp"

namespace lirf {

using nlohmann::json;

Dataset Dataset::load(const std::filesystem::path& root) {
  std::ifstream f(root / "cameras.json");
  if (!f) throw UserError("dataset: missing cameras.json in '" + root.string() + "'");
  json j;
  try {
    f >> j;
  } catch (const std::exception& e) {
    throw UserError(std::string("dataset: invalid cameras.json: ") + e.what());
  }
  if (!j.contains("views") || !j["views"].is_array())
    throw UserError("dataset: cameras.json lacks a views array");

  Dataset ds;
  ds.root_ = root;
  for (const json& v : j["views"]) {
    DatasetView view;
    view.split = v.at("split").get<std::string>();
    view.view = v.at("view").get<int>();
    view.scale = v.at("scale").get<double>();
    view.image_file = v.at("image").get<std::string>();
    Camera& cam = view.camera;
    cam.width = v.at("width").get<std::int64_t>();
    cam.height = v.at("height").get<std::int64_t>();
    cam.near = v.at("near").get<double>();
    cam.far = v.at("far").get<double>();
    const json& k = v.at("intrinsics");
    cam.fx = k[0][0].get<double>();
    cam.fy = k[1][1].get<double>();
    cam.cx = k[0][2].get<double>();
    cam.cy = k[1][2].get<double>();
    const json& c2w = v.at("camera_to_world");
    for (int r = 0; r < 3; ++r)
      for (int c = 0; c < 3; ++c) cam.rotation.m[r][c] = c2w[r][c].get<double>();
    cam.center = {c2w[0][3].get<double>(), c2w[1][3].get<double>(), c2w[2][3].get<double>()};
    cam.validate();
    ds.views_.push_back(std::move(view));
  }
  if (ds.views_.empty()) throw UserError("dataset: no views found");
  return ds;
}

std::vector<const DatasetView*> Dataset::select(const std::string& split, double scale) const {
  std::vector<const DatasetView*> out;
  for (const auto& v : views_)
    if (v.split == split && std::abs(v.scale - scale) < 1e-9) out.push_back(&v);
  return out;
}

const DatasetView* Dataset::find(const std::string& split, int view, double scale) const {
  for (const auto& v : views_)
    if (v.split == split && v.view == view && std::abs(v.scale - scale) < 1e-9) return &v;
  return nullptr;
}

std::vector<int> Dataset::view_ids(const std::string& split) const {
  std::set<int> ids;
  for (const auto& v : views_)
    if (v.split == split) ids.insert(v.view);
  return {ids.begin(), ids.end()};
}

std::vector<float> Dataset::load_image(const DatasetView& view) const {
  PngImage img = read_png(root_ / view.image_file);
  if (img.width != view.camera.width || img.height != view.camera.height)
    throw UserError("dataset: image '" + view.image_file + "' does not match its camera size");
  return png_to_floats(img);
}

}  // namespace lirf
