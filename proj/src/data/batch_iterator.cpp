#include "etm/data/batch_iterator.hpp"

#include <algorithm>
#include <numeric>
#include <stdexcept>

#include <fmt/format.h>

namespace etm::data {

BatchIterator::BatchIterator(const DomainDataset& ds, int batch_size, std::uint64_t seed, bool labeled)
    : ds_(&ds), batch_size_(batch_size), labeled_(labeled), rng_(make_rng(seed, {0xba7c})) {
  if (batch_size < 1 || batch_size > ds.size()) {
    throw std::invalid_argument(
        fmt::format("batch size {} must lie in [1, {}] for dataset '{}'", batch_size, ds.size(), ds.name));
  }
  if (labeled && !ds.labels) {
    throw std::invalid_argument(fmt::format("dataset '{}' ({}) has no labels", ds.name, to_string(ds.split)));
  }
  order_.resize(static_cast<std::size_t>(ds.size()));
  reshuffle();
}

void BatchIterator::reshuffle() {
  std::iota(order_.begin(), order_.end(), std::int64_t{0});
  std::shuffle(order_.begin(), order_.end(), rng_);
  cursor_ = 0;
}

std::vector<std::int64_t> BatchIterator::next_indices() {
  std::vector<std::int64_t> out;
  out.reserve(static_cast<std::size_t>(batch_size_));
  while (static_cast<int>(out.size()) < batch_size_) {
    if (cursor_ == order_.size()) reshuffle();
    out.push_back(order_[cursor_++]);
  }
  return out;
}

Batch BatchIterator::next() {
  Batch batch;
  batch.indices = next_indices();
  batch.images = ds_->image_batch(batch.indices);
  if (labeled_) batch.labels = ds_->label_batch(batch.indices);
  return batch;
}

}  // namespace etm::data
