#include "subformer/registry.hpp"

#include "subformer/errors.hpp"

namespace subformer {

void ParameterRegistry::add(const std::string& name, const Tensor& tensor) {
  if (slots_.contains(name)) throw ContractError("parameter slot '" + name + "' registered twice");
  auto it = by_storage_.find(tensor.id());
  if (it == by_storage_.end()) {
    const std::size_t index = entries_.size();
    entries_.push_back(Entry{name, tensor, {}});
    by_storage_.emplace(tensor.id(), index);
    slots_.emplace(name, index);
  } else {
    entries_[it->second].aliases.push_back(name);
    slots_.emplace(name, it->second);
  }
}

std::size_t ParameterRegistry::scalar_count() const {
  std::size_t total = 0;
  for (const Entry& e : entries_) total += e.tensor.numel();
  return total;
}

std::optional<Tensor> ParameterRegistry::find(const std::string& name) const {
  auto it = slots_.find(name);
  if (it == slots_.end()) return std::nullopt;
  return entries_[it->second].tensor;
}

const ParameterRegistry::Entry* ParameterRegistry::entry_for(const Tensor& tensor) const {
  auto it = by_storage_.find(tensor.id());
  return it == by_storage_.end() ? nullptr : &entries_[it->second];
}

void ParameterRegistry::zero_grad() {
  for (Entry& e : entries_) e.tensor.zero_grad();
}

}  // namespace subformer
