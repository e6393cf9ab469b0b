#pragma once

#include <cstddef>
#include <map>
#include <optional>
#include <string>
#include <unordered_map>
#include <vector>

#include "subformer/tensor.hpp"

namespace subformer {

// Named parameter slots. Registering a tensor that is already present under
// another name records an alias instead of a new parameter, so the distinct
// list is exactly the set of trainable tensors.
class ParameterRegistry {
 public:
  struct Entry {
    std::string name;  // canonical (first registered) name
    Tensor tensor;
    std::vector<std::string> aliases;
  };

  // Sharing groups of one layer stack, one id per layer.
  struct StackGroups {
    std::vector<int> attention;
    std::vector<int> ffn;
  };

  void add(const std::string& name, const Tensor& tensor);

  const std::vector<Entry>& distinct() const { return entries_; }
  std::size_t slot_count() const { return slots_.size(); }
  std::size_t scalar_count() const;

  // Resolves canonical names and aliases.
  std::optional<Tensor> find(const std::string& name) const;
  const Entry* entry_for(const Tensor& tensor) const;

  void set_groups(const std::string& stack, StackGroups groups) { groups_[stack] = std::move(groups); }
  const std::map<std::string, StackGroups>& groups() const { return groups_; }

  void zero_grad();

 private:
  std::vector<Entry> entries_;
  std::unordered_map<const void*, std::size_t> by_storage_;
  std::unordered_map<std::string, std::size_t> slots_;
  std::map<std::string, StackGroups> groups_;
};

}  // namespace subformer
