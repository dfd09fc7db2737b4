// Copyright (c) 2026, The moelora Authors
// SPDX-License-Identifier: Apache-2.0
//

#include "moelora/checkpoint.hpp"

#include <array>
#include <bit>
#include <cstdint>
#include <cstdio>
#include <fstream>
#include <iterator>

#include "moelora/error.hpp"

namespace moelora {

namespace {

constexpr const char* kFormat = "moelora-checkpoint";
constexpr int kVersion = 1;

std::string blob_name(std::size_t index) {
  char buf[32];
  std::snprintf(buf, sizeof(buf), "tensor_%04zu.bin", index);
  return buf;
}

}  // namespace

const Tensor2D& Checkpoint::tensor(const std::string& name) const {
  for (const auto& t : tensors) {
    if (t.name == name) return t.tensor;
  }
  throw IoError("checkpoint has no tensor named '" + name + "'");
}

void write_tensor_blob(const std::filesystem::path& file, const Tensor2D& tensor) {
  std::vector<unsigned char> bytes;
  bytes.reserve(tensor.size() * 8);
  for (double v : tensor.data()) {
    const auto bits = std::bit_cast<std::uint64_t>(v);
    for (int b = 0; b < 8; ++b) bytes.push_back(static_cast<unsigned char>(bits >> (8 * b)));
  }
  std::ofstream out(file, std::ios::binary | std::ios::trunc);
  if (!out) throw IoError("cannot open " + file.string() + " for writing");
  out.write(reinterpret_cast<const char*>(bytes.data()), static_cast<std::streamsize>(bytes.size()));
  if (!out) throw IoError("write failed for " + file.string());
}

Tensor2D read_tensor_blob(const std::filesystem::path& file, std::size_t rows, std::size_t cols) {
  std::ifstream in(file, std::ios::binary);
  if (!in) throw IoError("cannot open " + file.string());
  std::vector<unsigned char> bytes((std::istreambuf_iterator<char>(in)), std::istreambuf_iterator<char>());
  if (bytes.size() != rows * cols * 8) {
    throw IoError(file.string() + " holds " + std::to_string(bytes.size()) + " bytes, expected " +
                  std::to_string(rows * cols * 8));
  }
  std::vector<double> data(rows * cols);
  for (std::size_t i = 0; i < data.size(); ++i) {
    std::uint64_t bits = 0;
    for (int b = 0; b < 8; ++b) bits |= static_cast<std::uint64_t>(bytes[i * 8 + b]) << (8 * b);
    data[i] = std::bit_cast<double>(bits);
  }
  return Tensor2D(rows, cols, std::move(data));
}

void write_checkpoint(const std::filesystem::path& dir, const Checkpoint& checkpoint) {
  std::error_code ec;
  std::filesystem::create_directories(dir, ec);
  if (ec) throw IoError("cannot create " + dir.string() + ": " + ec.message());

  nlohmann::json manifest;
  manifest["format"] = kFormat;
  manifest["version"] = kVersion;
  manifest["metadata"] = checkpoint.metadata;
  nlohmann::json list = nlohmann::json::array();
  for (std::size_t i = 0; i < checkpoint.tensors.size(); ++i) {
    const auto& t = checkpoint.tensors[i];
    const std::string file = blob_name(i);
    write_tensor_blob(dir / file, t.tensor);
    list.push_back({{"name", t.name},
                    {"rows", t.tensor.rows()},
                    {"cols", t.tensor.cols()},
                    {"file", file}});
  }
  manifest["tensors"] = std::move(list);

  std::ofstream out(dir / "manifest.json", std::ios::trunc);
  if (!out) throw IoError("cannot open " + (dir / "manifest.json").string() + " for writing");
  out << manifest.dump(2) << '\n';
  if (!out) throw IoError("write failed for " + (dir / "manifest.json").string());
}

Checkpoint read_checkpoint(const std::filesystem::path& dir) {
  const auto path = dir / "manifest.json";
  std::ifstream in(path);
  if (!in) throw IoError("cannot open checkpoint manifest " + path.string());
  nlohmann::json manifest;
  try {
    in >> manifest;
  } catch (const nlohmann::json::exception& e) {
    throw IoError("malformed manifest " + path.string() + ": " + e.what());
  }
  if (manifest.value("format", "") != kFormat || manifest.value("version", 0) != kVersion) {
    throw IoError(path.string() + " is not a version " + std::to_string(kVersion) +
                  " moelora checkpoint");
  }
  Checkpoint cp;
  try {
    cp.metadata = manifest.at("metadata");
    for (const auto& entry : manifest.at("tensors")) {
      const auto rows = entry.at("rows").get<std::size_t>();
      const auto cols = entry.at("cols").get<std::size_t>();
      cp.tensors.push_back({entry.at("name").get<std::string>(),
                            read_tensor_blob(dir / entry.at("file").get<std::string>(), rows, cols)});
    }
  } catch (const nlohmann::json::exception& e) {
    throw IoError("malformed manifest " + path.string() + ": " + e.what());
  }
  return cp;
}

}  // namespace moelora
