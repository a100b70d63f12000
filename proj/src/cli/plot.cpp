#include <algorithm>
#include <cmath>

#include <fmt/format.h>

#include "etm/cli/commands.hpp"
#include "etm/cli/config.hpp"
#include "etm/data/io.hpp"

namespace etm::cli {

namespace {

constexpr int kWidth = 480;
constexpr int kHeight = 320;
constexpr int kMargin = 32;

struct Canvas {
  data::Image8 img{kHeight, kWidth, 3, std::vector<std::uint8_t>(static_cast<std::size_t>(kWidth * kHeight * 3), 255)};

  void dot(int x, int y, const data::Rgb& c) {
    if (x < 0 || y < 0 || x >= kWidth || y >= kHeight) return;
    auto* p = &img.pixels[static_cast<std::size_t>((y * kWidth + x) * 3)];
    for (int k = 0; k < 3; ++k) p[k] = static_cast<std::uint8_t>(std::lround(c[static_cast<std::size_t>(k)] * 255.0f));
  }

  void square(int x, int y, int half, const data::Rgb& c) {
    for (int dy = -half; dy <= half; ++dy) {
      for (int dx = -half; dx <= half; ++dx) dot(x + dx, y + dy, c);
    }
  }

  // Thick line by stamping small squares along the segment.
  void line(double x0, double y0, double x1, double y1, int half, const data::Rgb& c) {
    const int steps = static_cast<int>(std::ceil(std::max(std::abs(x1 - x0), std::abs(y1 - y0)))) + 1;
    for (int s = 0; s <= steps; ++s) {
      const double t = static_cast<double>(s) / steps;
      square(static_cast<int>(std::lround(x0 + t * (x1 - x0))), static_cast<int>(std::lround(y0 + t * (y1 - y0))), half,
             c);
    }
  }
};

}  // namespace

std::vector<std::filesystem::path> write_plots(const std::vector<metrics::RunHistory>& histories,
                                               const std::filesystem::path& dir) {
  std::error_code ec;
  std::filesystem::create_directories(dir, ec);
  if (ec) throw IoError(fmt::format("cannot create {}: {}", dir.string(), ec.message()));
  std::vector<std::filesystem::path> written;
  if (histories.empty()) return written;

  const data::Rgb black{0, 0, 0}, grid{0.85f, 0.85f, 0.85f};
  const auto& palette = semantic_palette();
  const int last = histories.front().final_checkpoint();
  const double plot_w = kWidth - 2 * kMargin, plot_h = kHeight - 2 * kMargin;
  auto px = [&](int checkpoint) {
    return last == 0 ? kMargin + plot_w / 2 : kMargin + plot_w * checkpoint / last;
  };
  auto py = [&](double miou) { return kHeight - kMargin - plot_h * std::clamp(miou, 0.0, 1.0); };

  for (int d = 0; d <= last; ++d) {
    Canvas c;
    for (int k = 0; k <= 4; ++k) c.line(kMargin, py(k / 4.0), kWidth - kMargin, py(k / 4.0), 0, grid);
    for (int j = 0; j <= last; ++j) c.line(px(j), kHeight - kMargin, px(j), kHeight - kMargin + 4, 0, black);
    c.line(kMargin, kMargin, kMargin, kHeight - kMargin, 0, black);
    c.line(kMargin, kHeight - kMargin, kWidth - kMargin, kHeight - kMargin, 0, black);

    for (std::size_t m = 0; m < histories.size(); ++m) {
      const auto& colour = palette[1 + m % (palette.size() - 1)];
      std::optional<std::pair<double, double>> prev;
      for (int j = d; j <= last; ++j) {
        if (!histories[m].has(j, d)) continue;
        const double x = px(j), y = py(histories[m].get(j, d));
        if (prev) c.line(prev->first, prev->second, x, y, 1, colour);
        c.square(static_cast<int>(std::lround(x)), static_cast<int>(std::lround(y)), 3, colour);
        prev = {x, y};
      }
    }
    const auto path = dir / fmt::format("miou_{}.png", histories.front().domains[static_cast<std::size_t>(d)]);
    try {
      data::write_png(path, c.img);
    } catch (const std::runtime_error& e) {
      throw IoError(e.what());
    }
    written.push_back(path);
  }
  return written;
}

}  // namespace etm::cli
