#pragma once

#include <string>
#include <utility>
#include <vector>

#include "toylm/tensor.hpp"

namespace toylm {

// Ordered collection of named tensors; order is preserved on disk.
struct NamedTensors {
  std::vector<std::pair<std::string, Tensor>> items;

  void add(std::string name, Tensor t) {
    items.emplace_back(std::move(name), std::move(t));
  }
  const Tensor* find(const std::string& name) const;
};

// Flat tensor archive: a human-readable manifest (name, dtype, shape, byte
// offset and length per tensor) followed by little-endian raw buffers.
// Round-trips bit-exactly; f32 tensors are stored as 4-byte floats.
//
//   toylm_ckpt_v1
//   tensor <name> <f64|f32> <ndim> <extent...> <offset> <bytes>
//   ...
//   data
//   <raw buffers>
void save_checkpoint(const std::string& path, const NamedTensors& tensors);
NamedTensors load_checkpoint(const std::string& path);

}  // namespace toylm
