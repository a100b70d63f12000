#pragma once

#include <cstdint>
#include <filesystem>
#include <vector>

#include "etm/data/domain.hpp"

namespace etm::data {

/// 8-bit image in row-major interleaved layout.
struct Image8 {
  int height = 0;
  int width = 0;
  int channels = 0;  // 1 (grey) or 3 (RGB)
  std::vector<std::uint8_t> pixels;
};

/// Writes an 8-bit grey or RGB PNG. No timestamps are embedded, so identical
/// pixels give identical files. Throws std::runtime_error on I/O failure.
void write_png(const std::filesystem::path& path, const Image8& image);

/// Writes an 8-bit paletted PNG; `indices` are per-pixel palette entries.
void write_indexed_png(const std::filesystem::path& path, int height, int width,
                       const std::vector<std::uint8_t>& indices, const std::vector<Rgb>& palette);

/// Reads any PNG, converted to 8-bit RGB (channels=3) or grey (channels=1)
/// depending on `want_rgb`. Throws std::runtime_error naming the file.
Image8 read_png(const std::filesystem::path& path, bool want_rgb);

/// Writes images/NNNNN.png, labels/NNNNN.png (when labelled) and domain.json.
void save_directory_dataset(const DomainDataset& ds, const std::filesystem::path& dir);

/// Loads images/*.png with labels/*.png matched by file stem. Pixel values are
/// scaled to [0,1]; label value 255 means "ignore". A missing labels directory
/// gives an unlabelled dataset. domain.json, when present, supplies the name,
/// role, split and class count; otherwise the class count is inferred from
/// the labels (0 if unlabelled).
DomainDataset load_directory_dataset(const std::filesystem::path& dir);

}  // namespace etm::data
