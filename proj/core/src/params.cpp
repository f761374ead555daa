#include "bugloc/params.hpp"

#include <cstring>

#include "bugloc/error.hpp"
#include "bugloc/hash.hpp"

namespace bugloc {

Tensor& ParamStore::add(const std::string& name, Tensor t) {
  const auto [it, inserted] = tensors_.emplace(name, std::move(t));
  if (!inserted) throw Error("ParamStore: duplicate tensor name: " + name);
  names_.push_back(name);
  return it->second;
}

Tensor& ParamStore::at(const std::string& name) {
  const auto it = tensors_.find(name);
  if (it == tensors_.end()) throw Error("ParamStore: no tensor named " + name);
  return it->second;
}

const Tensor& ParamStore::at(const std::string& name) const {
  const auto it = tensors_.find(name);
  if (it == tensors_.end()) throw Error("ParamStore: no tensor named " + name);
  return it->second;
}

std::uint64_t ParamStore::content_hash() const {
  std::uint64_t h = 0xcbf29ce484222325ULL;
  for (const auto& name : names_) {
    h = fnv1a64(name.data(), name.size(), h);
    const Tensor& t = tensors_.at(name);
    for (const std::int64_t d : t.shape()) h = fnv1a64(&d, sizeof(d), h);
    h = fnv1a64(t.data(), static_cast<std::size_t>(t.numel()) * sizeof(double),
                h);
  }
  return h;
}

}  // namespace bugloc
