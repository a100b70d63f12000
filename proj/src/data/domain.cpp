#include "etm/data/domain.hpp"

#include <algorithm>
#include <atomic>
#include <cmath>
#include <cstdlib>
#include <exception>
#include <mutex>
#include <numbers>
#include <stdexcept>
#include <thread>

#include <fmt/format.h>

#include "etm/core/random.hpp"
#include "etm/data/json_util.hpp"

namespace etm::data {

namespace {

constexpr int kMaxShapes = 4;
constexpr int kMaxRejections = 100;
constexpr float kMinRadius = 0.12f;  // fractions of min(H, W)
constexpr float kMaxRadius = 0.22f;
constexpr float kColourJitter = 0.06f;

enum Stream : std::uint64_t { kGeometry = 1, kTexture = 2, kClutter = 3, kNoise = 4 };

struct PlacedShape {
  int label;
  float cx, cy, r, angle;
  Rgb colour;
};

float uniform(Rng& rng, float lo, float hi) { return std::uniform_real_distribution<float>(lo, hi)(rng); }

// Point (u, v) in the shape's rotated frame, relative to the centre.
bool inside_polygon(float u, float v, int sides, float r) {
  const float step = 2.0f * std::numbers::pi_v<float> / static_cast<float>(sides);
  float phi = std::atan2(v, u);
  if (phi < 0.0f) phi += 2.0f * std::numbers::pi_v<float>;
  const float k = std::floor(phi / step);
  const float normal = (k + 0.5f) * step;
  return u * std::cos(normal) + v * std::sin(normal) <= r * std::cos(step / 2.0f);
}

bool inside(const PlacedShape& s, float x, float y) {
  const float dx = x - s.cx, dy = y - s.cy;
  const float c = std::cos(s.angle), sn = std::sin(s.angle);
  const float u = c * dx + sn * dy;
  const float v = -sn * dx + c * dy;
  const float d2 = dx * dx + dy * dy;
  switch (s.label) {
    case 1: return d2 <= s.r * s.r;
    case 2: return inside_polygon(u, v, 4, s.r);
    case 3: return inside_polygon(u, v, 3, s.r);
    case 4: return d2 <= s.r * s.r && d2 >= 0.3f * s.r * s.r;
    case 5: {
      const float au = std::abs(u), av = std::abs(v);
      return (au <= 0.3f * s.r && av <= 0.9f * s.r) || (av <= 0.3f * s.r && au <= 0.9f * s.r);
    }
    default: return inside_polygon(u, v, s.label - 1, s.r);
  }
}

Rgb jittered(const Rgb& base, Rng& rng) {
  Rgb out;
  for (int ch = 0; ch < 3; ++ch) out[ch] = std::clamp(base[ch] + uniform(rng, -kColourJitter, kColourJitter), 0.0f, 1.0f);
  return out;
}

std::vector<PlacedShape> place_shapes(const DomainSpec& spec, Rng& rng) {
  const float side = static_cast<float>(std::min(spec.height, spec.width));
  const int count = std::uniform_int_distribution<int>(1, kMaxShapes)(rng);
  // Each shape sits inside its own quadrant when it fits there, so placements
  // rarely collide; otherwise it may land anywhere on the canvas.
  std::array<int, 4> cells{0, 1, 2, 3};
  std::shuffle(cells.begin(), cells.end(), rng);
  const float cell_w = 0.5f * static_cast<float>(spec.width), cell_h = 0.5f * static_cast<float>(spec.height);
  std::vector<PlacedShape> shapes;
  for (int n = 0; n < count; ++n) {
    const int label = std::uniform_int_distribution<int>(1, spec.num_classes - 1)(rng);
    const Rgb colour = jittered(spec.shift.palette[label], rng);
    const float x0 = cell_w * static_cast<float>(cells[n] % 2), y0 = cell_h * static_cast<float>(cells[n] / 2);
    int rejections = 0;
    while (true) {
      const float r = uniform(rng, kMinRadius * side, kMaxRadius * side);
      const float pad = r + 0.5f;
      const bool in_cell = 2.0f * pad < std::min(cell_w, cell_h);
      PlacedShape s{label,
                    in_cell ? uniform(rng, x0 + pad, x0 + cell_w - pad) : uniform(rng, 0.0f, 2.0f * cell_w),
                    in_cell ? uniform(rng, y0 + pad, y0 + cell_h - pad) : uniform(rng, 0.0f, 2.0f * cell_h),
                    r,
                    uniform(rng, 0.0f, 2.0f * std::numbers::pi_v<float>),
                    colour};
      bool ok = s.cx - s.r >= 0.0f && s.cy - s.r >= 0.0f && s.cx + s.r <= static_cast<float>(spec.width) &&
                s.cy + s.r <= static_cast<float>(spec.height);
      for (const auto& other : shapes) {
        ok = ok && std::hypot(s.cx - other.cx, s.cy - other.cy) > s.r + other.r + 1.0f;
      }
      if (ok) {
        shapes.push_back(s);
        break;
      }
      if (++rejections >= kMaxRejections) {
        throw std::runtime_error(fmt::format("could not place a shape on the {}x{} canvas after {} attempts",
                                             spec.height, spec.width, kMaxRejections));
      }
    }
  }
  return shapes;
}

void box_blur(float* plane, int h, int w, int radius, std::vector<float>& scratch) {
  scratch.assign(static_cast<std::size_t>(h * w), 0.0f);
  const float norm = 1.0f / static_cast<float>(2 * radius + 1);
  for (int y = 0; y < h; ++y) {
    for (int x = 0; x < w; ++x) {
      float acc = 0.0f;
      for (int k = -radius; k <= radius; ++k) acc += plane[y * w + std::clamp(x + k, 0, w - 1)];
      scratch[y * w + x] = acc * norm;
    }
  }
  for (int y = 0; y < h; ++y) {
    for (int x = 0; x < w; ++x) {
      float acc = 0.0f;
      for (int k = -radius; k <= radius; ++k) acc += scratch[std::clamp(y + k, 0, h - 1) * w + x];
      plane[y * w + x] = acc * norm;
    }
  }
}

void render_sample(const DomainSpec& spec, std::uint64_t seed, Split split, std::int64_t index, float* image,
                   std::int32_t* label) {
  const int h = spec.height, w = spec.width;
  const std::int64_t hw = static_cast<std::int64_t>(h) * w;
  const auto sample = static_cast<std::uint64_t>(index);
  const auto split_tag = static_cast<std::uint64_t>(split);
  Rng geometry = make_rng(seed, {split_tag, sample, kGeometry});
  Rng texture = make_rng(seed, {split_tag, sample, kTexture});
  Rng clutter = make_rng(seed, {split_tag, sample, kClutter});
  Rng noise = make_rng(seed, {split_tag, sample, kNoise});

  // Background: the class-0 colour modulated by a low-frequency pattern.
  const float fx = uniform(texture, 1.0f, 4.0f), fy = uniform(texture, 1.0f, 4.0f);
  const float px = uniform(texture, 0.0f, 6.3f), py = uniform(texture, 0.0f, 6.3f);
  const Rgb& bg = spec.shift.palette[0];
  for (int y = 0; y < h; ++y) {
    for (int x = 0; x < w; ++x) {
      const float t = 1.0f + 0.12f * std::sin(2.0f * std::numbers::pi_v<float> * fx * x / w + px) *
                                 std::sin(2.0f * std::numbers::pi_v<float> * fy * y / h + py);
      for (int ch = 0; ch < 3; ++ch) image[ch * hw + y * w + x] = bg[ch] * t;
    }
  }

  // Clutter: grey-tinted background blobs, labelled background.
  const double expected_blobs = spec.shift.clutter_density * static_cast<double>(hw) / 1024.0;
  const int blobs = expected_blobs > 0.0 ? std::poisson_distribution<int>(expected_blobs)(clutter) : 0;
  for (int b = 0; b < blobs; ++b) {
    const float cx = uniform(clutter, 0.0f, static_cast<float>(w)), cy = uniform(clutter, 0.0f, static_cast<float>(h));
    const float rx = uniform(clutter, 1.5f, 4.5f), ry = uniform(clutter, 1.5f, 4.5f);
    const float grey = uniform(clutter, 0.15f, 0.85f);
    for (int y = 0; y < h; ++y) {
      for (int x = 0; x < w; ++x) {
        const float u = (x + 0.5f - cx) / rx, v = (y + 0.5f - cy) / ry;
        if (u * u + v * v > 1.0f) continue;
        for (int ch = 0; ch < 3; ++ch) image[ch * hw + y * w + x] = 0.5f * bg[ch] + 0.5f * grey;
      }
    }
  }

  std::fill(label, label + hw, 0);
  for (const auto& s : place_shapes(spec, geometry)) {
    for (int y = 0; y < h; ++y) {
      for (int x = 0; x < w; ++x) {
        if (!inside(s, x + 0.5f, y + 0.5f)) continue;
        label[y * w + x] = s.label;
        for (int ch = 0; ch < 3; ++ch) image[ch * hw + y * w + x] = s.colour[ch];
      }
    }
  }

  // Shift operators, in pinned order (the palette was applied while rendering).
  const Shift& shift = spec.shift;
  for (std::int64_t i = 0; i < 3 * hw; ++i) image[i] = std::clamp(image[i] * shift.illumination_gain, 0.0f, 1.0f);
  if (shift.texture_noise_sigma > 0.0f) {
    std::normal_distribution<float> dist(0.0f, shift.texture_noise_sigma);
    for (std::int64_t i = 0; i < 3 * hw; ++i) image[i] = std::clamp(image[i] + dist(noise), 0.0f, 1.0f);
  }
  const int radius = static_cast<int>(std::lround(shift.blur_radius));
  if (radius > 0) {
    std::vector<float> scratch;
    for (int ch = 0; ch < 3; ++ch) box_blur(image + ch * hw, h, w, radius, scratch);
    for (std::int64_t i = 0; i < 3 * hw; ++i) image[i] = std::clamp(image[i], 0.0f, 1.0f);
  }
}

Rgb hsv_to_rgb(float hue, float s, float v) {
  hue = hue - std::floor(hue);
  const float h6 = hue * 6.0f;
  const int sector = static_cast<int>(h6) % 6;
  const float f = h6 - std::floor(h6);
  const float p = v * (1 - s), q = v * (1 - s * f), t = v * (1 - s * (1 - f));
  switch (sector) {
    case 0: return {v, t, p};
    case 1: return {q, v, p};
    case 2: return {p, v, t};
    case 3: return {p, q, v};
    case 4: return {t, p, v};
    default: return {v, p, q};
  }
}

std::vector<Rgb> hue_palette(int num_classes, Rgb background, float hue_offset, float saturation) {
  std::vector<Rgb> out{background};
  for (int c = 1; c < num_classes; ++c) {
    out.push_back(hsv_to_rgb(static_cast<float>(c - 1) / static_cast<float>(num_classes - 1) + hue_offset, saturation,
                             0.85f));
  }
  return out;
}

}  // namespace

std::string to_string(Role role) { return role == Role::Source ? "source" : "target"; }
std::string to_string(Split split) { return split == Split::Train ? "train" : "val"; }

Role parse_role(const std::string& name) {
  if (name == "source") return Role::Source;
  if (name == "target") return Role::Target;
  throw std::invalid_argument(fmt::format("unknown domain role '{}' (expected source or target)", name));
}

Split parse_split(const std::string& name) {
  if (name == "train") return Split::Train;
  if (name == "val") return Split::Val;
  throw std::invalid_argument(fmt::format("unknown split '{}' (expected train or val)", name));
}

std::string shape_name(int class_index) {
  switch (class_index) {
    case 0: return "background";
    case 1: return "circle";
    case 2: return "square";
    case 3: return "triangle";
    case 4: return "ring";
    case 5: return "cross";
    default: return fmt::format("polygon{}", class_index - 1);
  }
}

void validate(const DomainSpec& spec) {
  auto fail = [&](const std::string& what) {
    throw std::invalid_argument(fmt::format("domain '{}': {}", spec.name, what));
  };
  if (spec.name.empty()) throw std::invalid_argument("domain name must not be empty");
  if (spec.num_classes < 2) fail("class_count must be at least 2");
  if (spec.num_classes > 12) fail("class_count above 12 is not supported by the shape generator");
  if (spec.height < 8 || spec.width < 8) fail("image size must be at least 8x8");
  if (spec.train_samples < 1 || spec.val_samples < 1) fail("sample counts must be positive");
  const Shift& s = spec.shift;
  if (static_cast<int>(s.palette.size()) != spec.num_classes) {
    fail(fmt::format("palette has {} colours for {} classes", s.palette.size(), spec.num_classes));
  }
  for (const auto& rgb : s.palette) {
    for (float v : rgb) {
      if (!std::isfinite(v) || v < 0.0f || v > 1.0f) fail("palette values must lie in [0,1]");
    }
  }
  for (float v : {s.texture_noise_sigma, s.blur_radius, s.clutter_density}) {
    if (!std::isfinite(v) || v < 0.0f) fail("shift parameters must be finite and non-negative");
  }
  if (!std::isfinite(s.illumination_gain) || !(s.illumination_gain > 0.0f)) fail("illumination_gain must be positive");
}

std::vector<Rgb> default_palette(int num_classes) {
  return hue_palette(num_classes, {0.50f, 0.50f, 0.46f}, 0.0f, 0.75f);
}

std::vector<DomainSpec> etm_toy_preset() {
  constexpr int kClasses = 4;
  DomainSpec source;
  source.name = "source";
  source.role = Role::Source;
  source.shift.palette = default_palette(kClasses);
  source.shift.texture_noise_sigma = 0.03f;

  DomainSpec t1 = source;
  t1.name = "T1";
  t1.role = Role::Target;
  t1.shift.palette = hue_palette(kClasses, {0.58f, 0.50f, 0.38f}, 0.125f, 0.75f);
  t1.shift.texture_noise_sigma = 0.09f;

  DomainSpec t2 = source;
  t2.name = "T2";
  t2.role = Role::Target;
  t2.shift.palette = hue_palette(kClasses, {0.36f, 0.44f, 0.52f}, -0.125f, 0.55f);
  t2.shift.blur_radius = 1.0f;
  t2.shift.illumination_gain = 0.75f;
  return {source, t1, t2};
}

int data_threads() {
  int n = static_cast<int>(std::max(1u, std::thread::hardware_concurrency()));
  if (const char* env = std::getenv("ETM_NUM_THREADS")) {
    char* end = nullptr;
    const long v = std::strtol(env, &end, 10);
    if (end == env || *end != '\0' || v < 1) {
      throw std::invalid_argument(fmt::format("ETM_NUM_THREADS must be a positive integer, got '{}'", env));
    }
    n = static_cast<int>(v);
  }
  return n;
}

DomainDataset generate_domain(const DomainSpec& spec, std::uint64_t seed, Split split) {
  validate(spec);
  const std::int64_t n = spec.samples(split), h = spec.height, w = spec.width;
  DomainDataset ds;
  ds.name = spec.name;
  ds.role = spec.role;
  ds.split = split;
  ds.num_classes = spec.num_classes;
  ds.images = Tensor({n, 3, h, w});
  IntTensor labels({n, h, w});

  std::atomic<std::int64_t> next{0};
  std::exception_ptr failure;
  std::mutex failure_mutex;
  auto worker = [&] {
    for (std::int64_t i = next++; i < n; i = next++) {
      try {
        render_sample(spec, seed, split, i, ds.images.ptr() + i * 3 * h * w, labels.data().data() + i * h * w);
      } catch (...) {
        std::lock_guard lock(failure_mutex);
        if (!failure) failure = std::current_exception();
        next = n;
      }
    }
  };
  const int threads = static_cast<int>(std::min<std::int64_t>(data_threads(), n));
  {
    std::vector<std::jthread> pool;
    for (int t = 1; t < threads; ++t) pool.emplace_back(worker);
    worker();
  }
  if (failure) std::rethrow_exception(failure);
  if (spec.role == Role::Source || split == Split::Val) ds.labels = std::move(labels);
  return ds;
}

Tensor DomainDataset::image_batch(const std::vector<std::int64_t>& indices) const {
  const std::int64_t per = 3 * height() * width();
  Tensor out({static_cast<std::int64_t>(indices.size()), 3, height(), width()});
  for (std::size_t b = 0; b < indices.size(); ++b) {
    if (indices[b] < 0 || indices[b] >= size()) throw std::out_of_range("image_batch: sample index out of range");
    std::copy_n(images.ptr() + indices[b] * per, per, out.ptr() + static_cast<std::int64_t>(b) * per);
  }
  return out;
}

IntTensor DomainDataset::label_batch(const std::vector<std::int64_t>& indices) const {
  if (!labels) throw std::logic_error(fmt::format("dataset '{}' ({}) has no labels", name, to_string(split)));
  const std::int64_t per = height() * width();
  IntTensor out({static_cast<std::int64_t>(indices.size()), height(), width()});
  for (std::size_t b = 0; b < indices.size(); ++b) {
    if (indices[b] < 0 || indices[b] >= size()) throw std::out_of_range("label_batch: sample index out of range");
    std::copy_n(labels->data().data() + indices[b] * per, per, out.data().data() + static_cast<std::int64_t>(b) * per);
  }
  return out;
}

void to_json(nlohmann::json& j, const Shift& shift) {
  nlohmann::json palette = nlohmann::json::array();
  for (const auto& rgb : shift.palette) palette.push_back({rgb[0], rgb[1], rgb[2]});
  j = {{"palette", palette},
       {"texture_noise_sigma", shift.texture_noise_sigma},
       {"blur_radius", shift.blur_radius},
       {"illumination_gain", shift.illumination_gain},
       {"clutter_density", shift.clutter_density}};
}

void from_json(const nlohmann::json& j, Shift& shift) {
  require_known_keys(j, {"palette", "texture_noise_sigma", "blur_radius", "illumination_gain", "clutter_density"},
                     "shift");
  shift = Shift{};
  if (j.contains("palette")) {
    shift.palette.clear();
    for (const auto& rgb : j.at("palette")) {
      if (!rgb.is_array() || rgb.size() != 3) throw std::invalid_argument("shift.palette entries must be [r,g,b]");
      shift.palette.push_back({rgb[0].get<float>(), rgb[1].get<float>(), rgb[2].get<float>()});
    }
  }
  shift.texture_noise_sigma = j.value("texture_noise_sigma", shift.texture_noise_sigma);
  shift.blur_radius = j.value("blur_radius", shift.blur_radius);
  shift.illumination_gain = j.value("illumination_gain", shift.illumination_gain);
  shift.clutter_density = j.value("clutter_density", shift.clutter_density);
}

void to_json(nlohmann::json& j, const DomainSpec& spec) {
  j = {{"name", spec.name},
       {"role", to_string(spec.role)},
       {"shift", spec.shift},
       {"image_size", {spec.height, spec.width}},
       {"class_count", spec.num_classes},
       {"train_samples", spec.train_samples},
       {"val_samples", spec.val_samples}};
}

void from_json(const nlohmann::json& j, DomainSpec& spec) {
  require_known_keys(j, {"name", "role", "shift", "image_size", "class_count", "train_samples", "val_samples"},
                     "domain");
  spec = DomainSpec{};
  spec.name = j.at("name").get<std::string>();
  spec.role = parse_role(j.value("role", std::string("target")));
  spec.num_classes = j.value("class_count", spec.num_classes);
  if (j.contains("shift")) spec.shift = j.at("shift").get<Shift>();
  if (spec.shift.palette.empty()) spec.shift.palette = default_palette(spec.num_classes);
  if (j.contains("image_size")) {
    const auto& size = j.at("image_size");
    if (!size.is_array() || size.size() != 2) throw std::invalid_argument("image_size must be [H, W]");
    spec.height = size[0].get<int>();
    spec.width = size[1].get<int>();
  }
  spec.train_samples = j.value("train_samples", spec.train_samples);
  spec.val_samples = j.value("val_samples", spec.val_samples);
}

}  // namespace etm::data
