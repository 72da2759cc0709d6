#pragma once

#include <map>
#include <string>

#include "rlcore/errors.hpp"
#include "rlcore/tensor.hpp"

namespace rlcore {

// Named groups of batched observations. Groups route slices of the full
// observation to different consumers (actor, critic, curiosity, expert).
// The "policy" group is always present; all groups share the batch size.
struct ObservationSet {
  std::map<std::string, Tensor> groups;

  bool has(const std::string& name) const { return groups.count(name) != 0; }

  const Tensor& at(const std::string& name) const {
    auto it = groups.find(name);
    if (it == groups.end()) {
      throw RoutingError("observation group \"" + name + "\" is missing");
    }
    return it->second;
  }

  int64_t batch_size() const {
    return groups.empty() ? 0 : groups.begin()->second.dim(0);
  }
};

// Group name -> feature width.
using ObsSchema = std::map<std::string, int64_t>;

}  // namespace rlcore
