#include "etm/data/io.hpp"

#include <algorithm>
#include <cmath>
#include <cstring>
#include <fstream>
#include <stdexcept>

#include <fmt/format.h>
#include <png.h>

#include "json.hpp"

namespace etm::data {

namespace fs = std::filesystem;

namespace {

std::uint8_t quantize(float v) { return static_cast<std::uint8_t>(std::lround(std::clamp(v, 0.0f, 1.0f) * 255.0f)); }

void check_png(int ok, const png_image& image, const fs::path& path, const char* action) {
  if (!ok) throw std::runtime_error(fmt::format("cannot {} {}: {}", action, path.string(), image.message));
}

std::vector<fs::path> png_files(const fs::path& dir) {
  std::vector<fs::path> out;
  for (const auto& entry : fs::directory_iterator(dir)) {
    if (entry.is_regular_file() && entry.path().extension() == ".png") out.push_back(entry.path());
  }
  std::sort(out.begin(), out.end());
  return out;
}

}  // namespace

void write_png(const fs::path& path, const Image8& img) {
  if (img.channels != 1 && img.channels != 3) throw std::invalid_argument("write_png: channels must be 1 or 3");
  if (img.pixels.size() != static_cast<std::size_t>(img.height) * img.width * img.channels) {
    throw std::invalid_argument("write_png: pixel buffer size mismatch");
  }
  png_image image;
  std::memset(&image, 0, sizeof image);
  image.version = PNG_IMAGE_VERSION;
  image.width = static_cast<png_uint_32>(img.width);
  image.height = static_cast<png_uint_32>(img.height);
  image.format = img.channels == 3 ? PNG_FORMAT_RGB : PNG_FORMAT_GRAY;
  const int ok = png_image_write_to_file(&image, path.c_str(), 0, img.pixels.data(), 0, nullptr);
  check_png(ok, image, path, "write");
}

void write_indexed_png(const fs::path& path, int height, int width, const std::vector<std::uint8_t>& indices,
                       const std::vector<Rgb>& palette) {
  if (palette.empty() || palette.size() > 256) throw std::invalid_argument("write_indexed_png: bad palette size");
  if (indices.size() != static_cast<std::size_t>(height) * width) {
    throw std::invalid_argument("write_indexed_png: index buffer size mismatch");
  }
  std::vector<std::uint8_t> colormap;
  for (const auto& rgb : palette) {
    for (float v : rgb) colormap.push_back(quantize(v));
  }
  for (auto idx : indices) {
    if (idx >= palette.size()) throw std::invalid_argument("write_indexed_png: index outside the palette");
  }
  png_image image;
  std::memset(&image, 0, sizeof image);
  image.version = PNG_IMAGE_VERSION;
  image.width = static_cast<png_uint_32>(width);
  image.height = static_cast<png_uint_32>(height);
  image.format = PNG_FORMAT_RGB_COLORMAP;
  image.colormap_entries = static_cast<png_uint_32>(palette.size());
  const int ok = png_image_write_to_file(&image, path.c_str(), 0, indices.data(), 0, colormap.data());
  check_png(ok, image, path, "write");
}

Image8 read_png(const fs::path& path, bool want_rgb) {
  png_image image;
  std::memset(&image, 0, sizeof image);
  image.version = PNG_IMAGE_VERSION;
  check_png(png_image_begin_read_from_file(&image, path.c_str()), image, path, "read");
  image.format = want_rgb ? PNG_FORMAT_RGB : PNG_FORMAT_GRAY;
  Image8 out;
  out.height = static_cast<int>(image.height);
  out.width = static_cast<int>(image.width);
  out.channels = want_rgb ? 3 : 1;
  out.pixels.resize(PNG_IMAGE_SIZE(image));
  const int ok = png_image_finish_read(&image, nullptr, out.pixels.data(), 0, nullptr);
  if (!ok) png_image_free(&image);
  check_png(ok, image, path, "decode");
  return out;
}

void save_directory_dataset(const DomainDataset& ds, const fs::path& dir) {
  const fs::path images_dir = dir / "images";
  const fs::path labels_dir = dir / "labels";
  std::error_code ec;
  fs::create_directories(images_dir, ec);
  if (ec) throw std::runtime_error(fmt::format("cannot create {}: {}", images_dir.string(), ec.message()));
  if (ds.labels) {
    fs::create_directories(labels_dir, ec);
    if (ec) throw std::runtime_error(fmt::format("cannot create {}: {}", labels_dir.string(), ec.message()));
  }
  const int h = static_cast<int>(ds.height()), w = static_cast<int>(ds.width());
  const std::int64_t hw = static_cast<std::int64_t>(h) * w;
  for (std::int64_t i = 0; i < ds.size(); ++i) {
    const std::string stem = fmt::format("{:05d}", i);
    Image8 rgb{h, w, 3, std::vector<std::uint8_t>(static_cast<std::size_t>(3 * hw))};
    const float* src = ds.images.ptr() + i * 3 * hw;
    for (std::int64_t p = 0; p < hw; ++p) {
      for (int ch = 0; ch < 3; ++ch) rgb.pixels[static_cast<std::size_t>(p * 3 + ch)] = quantize(src[ch * hw + p]);
    }
    write_png(images_dir / (stem + ".png"), rgb);
    if (ds.labels) {
      Image8 grey{h, w, 1, std::vector<std::uint8_t>(static_cast<std::size_t>(hw))};
      for (std::int64_t p = 0; p < hw; ++p) {
        grey.pixels[static_cast<std::size_t>(p)] = static_cast<std::uint8_t>((*ds.labels)[i * hw + p]);
      }
      write_png(labels_dir / (stem + ".png"), grey);
    }
  }
  const nlohmann::json manifest = {{"name", ds.name},
                                   {"role", to_string(ds.role)},
                                   {"split", to_string(ds.split)},
                                   {"class_count", ds.num_classes},
                                   {"image_size", {h, w}},
                                   {"samples", ds.size()},
                                   {"labeled", ds.labels.has_value()}};
  std::ofstream out(dir / "domain.json");
  out << manifest.dump(2) << '\n';
  if (!out) throw std::runtime_error(fmt::format("cannot write {}", (dir / "domain.json").string()));
}

DomainDataset load_directory_dataset(const fs::path& dir) {
  const fs::path images_dir = dir / "images";
  if (!fs::is_directory(images_dir)) throw std::runtime_error(fmt::format("no images found in {}", dir.string()));
  const auto images = png_files(images_dir);
  if (images.empty()) throw std::runtime_error(fmt::format("no images found in {}", dir.string()));

  DomainDataset ds;
  ds.name = dir.filename().string();
  if (ds.name == "train" || ds.name == "val") ds.name = dir.parent_path().filename().string();
  std::optional<int> declared_classes;
  if (fs::exists(dir / "domain.json")) {
    std::ifstream in(dir / "domain.json");
    nlohmann::json manifest;
    try {
      manifest = nlohmann::json::parse(in);
    } catch (const nlohmann::json::exception& e) {
      throw std::runtime_error(fmt::format("cannot parse {}: {}", (dir / "domain.json").string(), e.what()));
    }
    ds.name = manifest.value("name", ds.name);
    ds.role = parse_role(manifest.value("role", std::string("target")));
    ds.split = parse_split(manifest.value("split", std::string("train")));
    if (manifest.contains("class_count")) declared_classes = manifest["class_count"].get<int>();
  }

  const Image8 first = read_png(images.front(), true);
  const std::int64_t n = static_cast<std::int64_t>(images.size()), h = first.height, w = first.width, hw = h * w;
  ds.images = Tensor({n, 3, h, w});

  const fs::path labels_dir = dir / "labels";
  const bool labeled = fs::is_directory(labels_dir);
  IntTensor labels;
  if (labeled) labels = IntTensor({n, h, w});
  int max_label = -1;

  for (std::int64_t i = 0; i < n; ++i) {
    const Image8 img = i == 0 ? first : read_png(images[static_cast<std::size_t>(i)], true);
    if (img.height != h || img.width != w) {
      throw std::runtime_error(fmt::format("{} is {}x{}, expected {}x{}", images[static_cast<std::size_t>(i)].string(),
                                           img.height, img.width, h, w));
    }
    float* dst = ds.images.ptr() + i * 3 * hw;
    for (std::int64_t p = 0; p < hw; ++p) {
      for (int ch = 0; ch < 3; ++ch) {
        dst[ch * hw + p] = static_cast<float>(img.pixels[static_cast<std::size_t>(p * 3 + ch)]) / 255.0f;
      }
    }
    if (!labeled) continue;
    const fs::path label_path = labels_dir / images[static_cast<std::size_t>(i)].filename();
    if (!fs::exists(label_path)) throw std::runtime_error(fmt::format("missing label file {}", label_path.string()));
    const Image8 lab = read_png(label_path, false);
    if (lab.height != h || lab.width != w) {
      throw std::runtime_error(
          fmt::format("label {} is {}x{} but its image is {}x{}", label_path.string(), lab.height, lab.width, h, w));
    }
    for (std::int64_t p = 0; p < hw; ++p) {
      const int v = lab.pixels[static_cast<std::size_t>(p)];
      labels[i * hw + p] = v;
      if (v != 255) max_label = std::max(max_label, v);
    }
  }
  if (labeled) ds.labels = std::move(labels);
  ds.num_classes = declared_classes.value_or(max_label + 1);
  return ds;
}

}  // namespace etm::data
