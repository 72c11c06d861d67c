#include "sslecho/data.hpp"
#include "sslecho/error.hpp"

namespace sslecho {

IndexSampler::IndexSampler(std::vector<std::size_t> pool, Rng rng) : pool_(std::move(pool)), rng_(std::move(rng)) {
  reshuffle();
}

void IndexSampler::reshuffle() {
  order_ = pool_;
  rng_.shuffle(order_);
  cursor_ = 0;
}

std::vector<std::size_t> IndexSampler::next(std::size_t n) {
  if (pool_.empty()) throw SamplerError("cannot sample from an empty pool");
  std::vector<std::size_t> out;
  out.reserve(n);
  while (out.size() < n) {
    if (cursor_ == order_.size()) reshuffle();
    out.push_back(order_[cursor_++]);
  }
  return out;
}

MinibatchSampler::MinibatchSampler(const Dataset& dataset, const SplitSpec& split, Task task, Rng rng,
                                   bool include_unlabeled)
    : dataset_(dataset),
      task_(task),
      labeled_(partition_images(dataset, split, Partition::kTrain), rng.split("labeled")) {
  if (labeled_.pool_size() == 0) throw SamplerError("labeled training pool is empty");
  for (std::size_t i : partition_images(dataset, split, Partition::kTrain)) {
    if (!dataset.label(i, task)) {
      const ImageRecord& img = dataset.images()[i];
      throw ConfigError("training image " + img.study_id + "/" + img.image_id + " has no " + to_string(task) +
                        " label");
    }
    if (task == Task::kMultitask && !dataset.label(i, Task::kView)) {
      throw ConfigError("training image " + dataset.images()[i].image_id + " has no view label");
    }
  }
  if (include_unlabeled) {
    unlabeled_.emplace(partition_images(dataset, split, Partition::kUnlabeled), rng.split("unlabeled"));
  }
}

LabeledMinibatch MinibatchSampler::next_labeled(std::size_t n) {
  LabeledMinibatch batch;
  batch.indices = labeled_.next(n);
  batch.images = dataset_.batch(batch.indices);
  for (std::size_t i : batch.indices) {
    batch.labels.push_back(*dataset_.label(i, task_));
    if (task_ == Task::kMultitask) batch.view_labels.push_back(*dataset_.label(i, Task::kView));
  }
  return batch;
}

UnlabeledMinibatch MinibatchSampler::next_unlabeled(std::size_t n) {
  if (!unlabeled_ || unlabeled_->pool_size() == 0) throw SamplerError("unlabeled pool is empty");
  return {dataset_.batch(unlabeled_->next(n))};
}

}  // namespace sslecho
