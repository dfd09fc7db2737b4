// Copyright (c) 2026, The moelora Authors
// SPDX-License-Identifier: Apache-2.0
//

#pragma once

#include <filesystem>
#include <string>
#include <vector>

#include "json.hpp"
#include "moelora/tensor.hpp"

namespace moelora {

struct NamedTensor {
  std::string name;
  Tensor2D tensor;
};

/// On disk: `manifest.json` (metadata plus the ordered tensor list) and one
/// little-endian float64 blob per tensor, `tensor_NNNN.bin`, row-major.
struct Checkpoint {
  nlohmann::json metadata = nlohmann::json::object();
  std::vector<NamedTensor> tensors;

  /// IoError if no tensor carries `name`.
  const Tensor2D& tensor(const std::string& name) const;
};

void write_checkpoint(const std::filesystem::path& dir, const Checkpoint& checkpoint);
Checkpoint read_checkpoint(const std::filesystem::path& dir);

void write_tensor_blob(const std::filesystem::path& file, const Tensor2D& tensor);
Tensor2D read_tensor_blob(const std::filesystem::path& file, std::size_t rows, std::size_t cols);

}  // namespace moelora
