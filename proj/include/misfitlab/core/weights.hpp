#pragma once

#include <filesystem>
#include <span>
#include <string>
#include <vector>

#include <json.hpp>

#include "misfitlab/core/graph.hpp"

namespace misfitlab::core {

// Weight container layout:
//   u64 little-endian header length N
//   N bytes of JSON: {"dtype":"f64","tensors":[{"name","shape":[r,c]}...],"metadata":{...}}
//   payloads, little-endian f64, row-major, in header order.

struct NamedTensor {
  std::string name;
  Matrix<double> value;
};

struct WeightFile {
  nlohmann::json metadata = nlohmann::json::object();
  std::vector<NamedTensor> tensors;

  const NamedTensor* find(const std::string& name) const;
};

void save_weights(const std::filesystem::path& path, std::span<const Parameter<double>* const> params,
                  const nlohmann::json& metadata = nlohmann::json::object());
void write_weight_file(const std::filesystem::path& path, const WeightFile& file);
WeightFile read_weight_file(const std::filesystem::path& path);

/// Copies tensors into parameters by name; every parameter must be present
/// with a matching shape.
void assign_weights(const WeightFile& file, std::span<Parameter<double>* const> params);

/// Hash over parameter names, shapes and values.
std::string weights_hash(std::span<const Parameter<double>* const> params);

}  // namespace misfitlab::core
