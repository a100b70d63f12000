#pragma once

#include <array>
#include <cstdint>
#include <optional>
#include <string>
#include <vector>

#include "etm/core/int_tensor.hpp"
#include "etm/core/tensor.hpp"
#include "json.hpp"

namespace etm::data {

using Rgb = std::array<float, 3>;

enum class Role { Source, Target };
enum class Split { Train, Val };

std::string to_string(Role role);
std::string to_string(Split split);
Role parse_role(const std::string& name);
Split parse_split(const std::string& name);

/// Appearance change applied to rendered images. Labels never depend on it.
struct Shift {
  std::vector<Rgb> palette;  // one colour per class; entry 0 is the background
  float texture_noise_sigma = 0.0f;
  float blur_radius = 0.0f;  // box blur, rounded to whole pixels
  float illumination_gain = 1.0f;
  float clutter_density = 1.0f;  // expected background blobs per 1024 pixels
};

struct DomainSpec {
  std::string name;
  Role role = Role::Target;
  Shift shift;
  int height = 64;
  int width = 64;
  int num_classes = 4;
  int train_samples = 400;
  int val_samples = 100;

  int samples(Split split) const { return split == Split::Train ? train_samples : val_samples; }
};

/// Throws std::invalid_argument describing the first problem found.
void validate(const DomainSpec& spec);

/// Distinct, well separated colours; entry 0 is a muted background.
std::vector<Rgb> default_palette(int num_classes);

struct DomainDataset {
  std::string name;
  Role role = Role::Target;
  Split split = Split::Train;
  int num_classes = 0;
  Tensor images;                   // [N,3,H,W] in [0,1]
  std::optional<IntTensor> labels;  // [N,H,W]

  std::int64_t size() const { return images.rank() == 4 ? images.dim(0) : 0; }
  std::int64_t height() const { return images.dim(2); }
  std::int64_t width() const { return images.dim(3); }

  /// Rows of `images` (and `labels`) at the given sample indices.
  Tensor image_batch(const std::vector<std::int64_t>& indices) const;
  IntTensor label_batch(const std::vector<std::int64_t>& indices) const;
};

/// Renders one split of a synthetic domain. Target training splits carry no
/// labels. Sample i depends only on (seed, split, i), so any thread count gives
/// the same dataset; ETM_NUM_THREADS caps the worker count.
DomainDataset generate_domain(const DomainSpec& spec, std::uint64_t seed, Split split = Split::Train);

/// The "etm-toy" benchmark: a source and two shifted targets, C=4, 64x64,
/// 400 train / 100 val images each.
std::vector<DomainSpec> etm_toy_preset();

std::string shape_name(int class_index);

/// Worker count for data generation and I/O: ETM_NUM_THREADS if set, else the
/// hardware concurrency.
int data_threads();

void to_json(nlohmann::json& j, const Shift& shift);
void from_json(const nlohmann::json& j, Shift& shift);
void to_json(nlohmann::json& j, const DomainSpec& spec);
void from_json(const nlohmann::json& j, DomainSpec& spec);

}  // namespace etm::data
