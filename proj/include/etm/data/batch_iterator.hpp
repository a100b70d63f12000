#pragma once

#include <cstdint>
#include <optional>
#include <vector>

#include "etm/core/random.hpp"
#include "etm/data/domain.hpp"

namespace etm::data {

struct Batch {
  std::vector<std::int64_t> indices;
  Tensor images;                    // [B,3,H,W]
  std::optional<IntTensor> labels;  // [B,H,W] when the iterator is labelled
};

/// Endless stream of batches. Each pass over the dataset uses a fresh uniform
/// shuffle; a batch that crosses a pass boundary continues into the next pass,
/// so over k full passes every sample is drawn exactly k times.
class BatchIterator {
 public:
  BatchIterator(const DomainDataset& ds, int batch_size, std::uint64_t seed, bool labeled);

  Batch next();
  std::vector<std::int64_t> next_indices();

 private:
  void reshuffle();

  const DomainDataset* ds_;
  int batch_size_;
  bool labeled_;
  Rng rng_;
  std::vector<std::int64_t> order_;
  std::size_t cursor_ = 0;
};

}  // namespace etm::data
