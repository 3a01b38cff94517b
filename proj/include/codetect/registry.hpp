#pragma once

#include <string>
#include <unordered_map>
#include <vector>

#include "codetect/errors.hpp"
#include "codetect/tensor.hpp"

namespace codetect {

// Named trainable arrays with accumulated gradients. Entries keep their
// registration order; gradient accumulation and SGD updates always walk
// entries in that order, so training is bit-reproducible for a fixed seed.
// An entry may be referenced from several network branches; its gradient is
// then the sum of all branch contributions.
class Registry {
 public:
  struct Entry {
    std::string name;
    std::vector<int> shape;
    std::vector<double> value;
    std::vector<double> grad;
  };

  int add(const std::string& name, std::vector<int> shape, std::vector<double> init) {
    if (index_.count(name)) throw invalid_input("registry: duplicate entry '" + name + "'");
    if (static_cast<int>(init.size()) != shape_numel(shape))
      throw invalid_input("registry: init size mismatch for '" + name + "'");
    Entry e;
    e.name = name;
    e.shape = std::move(shape);
    e.grad.assign(init.size(), 0.0);
    e.value = std::move(init);
    entries_.push_back(std::move(e));
    const int id = static_cast<int>(entries_.size()) - 1;
    index_.emplace(name, id);
    return id;
  }

  int find(const std::string& name) const {
    auto it = index_.find(name);
    return it == index_.end() ? -1 : it->second;
  }

  bool has(const std::string& name) const { return find(name) >= 0; }

  Entry& entry(int id) { return entries_.at(static_cast<std::size_t>(id)); }
  const Entry& entry(int id) const { return entries_.at(static_cast<std::size_t>(id)); }

  Entry& entry(const std::string& name) {
    const int id = find(name);
    if (id < 0) throw invalid_input("registry: unknown entry '" + name + "'");
    return entries_[static_cast<std::size_t>(id)];
  }
  const Entry& entry(const std::string& name) const {
    const int id = find(name);
    if (id < 0) throw invalid_input("registry: unknown entry '" + name + "'");
    return entries_[static_cast<std::size_t>(id)];
  }

  int size() const { return static_cast<int>(entries_.size()); }

  void zero_grad() {
    for (auto& e : entries_)
      std::fill(e.grad.begin(), e.grad.end(), 0.0);
  }

  // w <- w - lr * g for every entry, then gradients are cleared.
  void sgd_step(double lr) {
    for (auto& e : entries_) {
      for (std::size_t i = 0; i < e.value.size(); ++i) e.value[i] -= lr * e.grad[i];
      std::fill(e.grad.begin(), e.grad.end(), 0.0);
    }
  }

  void clear() {
    entries_.clear();
    index_.clear();
  }

 private:
  std::vector<Entry> entries_;
  std::unordered_map<std::string, int> index_;
};

}  // namespace codetect
