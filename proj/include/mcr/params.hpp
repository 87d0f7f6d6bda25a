#pragma once

// Ordered, name-addressed parameter collections.
//
// Iteration order is insertion order everywhere (updates, serialization,
// checksums), which is part of the bitwise-reproducibility contract.

#include <cstddef>
#include <cstdint>
#include <string>
#include <unordered_map>
#include <utility>
#include <vector>

#include "mcr/tensor.hpp"
#include "mcr/util.hpp"

namespace mcr {

template <typename Real>
class ParamStore {
 public:
  Tensor<Real>& add(std::string name, Tensor<Real> t) {
    if (index_.count(name)) fail_invalid("params: duplicate name '", name, "'");
    index_.emplace(name, names_.size());
    names_.push_back(std::move(name));
    tensors_.push_back(std::move(t));
    return tensors_.back();
  }

  bool has(const std::string& name) const { return index_.count(name) != 0; }

  Tensor<Real>& at(const std::string& name) {
    auto it = index_.find(name);
    if (it == index_.end()) fail_invalid("params: unknown name '", name, "'");
    return tensors_[it->second];
  }
  const Tensor<Real>& at(const std::string& name) const {
    return const_cast<ParamStore*>(this)->at(name);
  }

  std::size_t size() const { return tensors_.size(); }
  const std::string& name(std::size_t i) const { return names_[i]; }
  Tensor<Real>& tensor(std::size_t i) { return tensors_[i]; }
  const Tensor<Real>& tensor(std::size_t i) const { return tensors_[i]; }
  const std::vector<std::string>& names() const { return names_; }

  std::size_t total_elements() const {
    std::size_t n = 0;
    for (const auto& t : tensors_) n += t.size();
    return n;
  }

  void zero_grad() {
    for (auto& t : tensors_) t.zero_grad();
  }

  // Deep copy of values; gradients are not copied.
  ParamStore clone(bool requires_grad) const {
    ParamStore out;
    for (std::size_t i = 0; i < size(); ++i) {
      Tensor<Real> t = requires_grad
                           ? Tensor<Real>::param(tensors_[i].shape(), tensors_[i].value())
                           : tensors_[i].detach();
      out.add(names_[i], std::move(t));
    }
    return out;
  }

  // Deep copy of the entries whose names satisfy `pred`.
  template <typename Pred>
  ParamStore clone_if(Pred pred, bool requires_grad) const {
    ParamStore out;
    for (std::size_t i = 0; i < size(); ++i) {
      if (!pred(names_[i])) continue;
      Tensor<Real> t = requires_grad
                           ? Tensor<Real>::param(tensors_[i].shape(), tensors_[i].value())
                           : tensors_[i].detach();
      out.add(names_[i], std::move(t));
    }
    return out;
  }

  // Order-sensitive fingerprint of names, shapes, and raw value bytes.
  std::uint64_t value_checksum() const {
    std::uint64_t h = 0xcbf29ce484222325ull;
    for (std::size_t i = 0; i < size(); ++i) {
      h = fnv1a64(names_[i].data(), names_[i].size(), h);
      for (std::size_t dim : tensors_[i].shape()) h = fnv1a64(&dim, sizeof(dim), h);
      const auto& v = tensors_[i].value();
      h = fnv1a64(v.data(), v.size() * sizeof(Real), h);
    }
    return h;
  }

 private:
  std::vector<std::string> names_;
  std::vector<Tensor<Real>> tensors_;
  std::unordered_map<std::string, std::size_t> index_;
};

}  // namespace mcr
