#include "misfitlab/core/weights.hpp"

#include <fstream>
#include <sstream>

#include "misfitlab/core/io.hpp"

namespace misfitlab::core {

const NamedTensor* WeightFile::find(const std::string& name) const {
  for (const auto& t : tensors)
    if (t.name == name) return &t;
  return nullptr;
}

void write_weight_file(const std::filesystem::path& path, const WeightFile& file) {
  nlohmann::json header;
  header["dtype"] = "f64";
  header["tensors"] = nlohmann::json::array();
  for (const auto& t : file.tensors)
    header["tensors"].push_back({{"name", t.name}, {"shape", {t.value.rows(), t.value.cols()}}});
  header["metadata"] = file.metadata;
  const std::string text = header.dump();

  if (path.has_parent_path()) std::filesystem::create_directories(path.parent_path());
  std::ofstream out(path, std::ios::binary);
  if (!out) throw DataError("cannot write " + path.string());
  write_le<std::uint64_t>(out, text.size());
  out.write(text.data(), static_cast<std::streamsize>(text.size()));
  for (const auto& t : file.tensors)
    for (Eigen::Index i = 0; i < t.value.size(); ++i) write_le<double>(out, t.value.data()[i]);
  if (!out) throw DataError("write failed for " + path.string());
}

void save_weights(const std::filesystem::path& path, std::span<const Parameter<double>* const> params,
                  const nlohmann::json& metadata) {
  WeightFile file;
  file.metadata = metadata;
  for (const auto* p : params) file.tensors.push_back({p->name, p->value});
  write_weight_file(path, file);
}

WeightFile read_weight_file(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw DataError("cannot open " + path.string());
  const std::string where = path.string();
  const auto n = read_le<std::uint64_t>(in, where);
  if (n > (1ULL << 32)) throw ParseError(where, "implausible header length");
  std::string text(n, '\0');
  if (!in.read(text.data(), static_cast<std::streamsize>(n))) throw ParseError(where, "truncated header");

  nlohmann::json header;
  try {
    header = nlohmann::json::parse(text);
  } catch (const nlohmann::json::exception& e) {
    throw ParseError(where + "#/", e.what());
  }
  if (header.value("dtype", "") != "f64") throw ParseError(where + "#/dtype", "expected \"f64\"");
  if (!header.contains("tensors") || !header["tensors"].is_array()) throw ParseError(where + "#/tensors", "missing array");

  WeightFile file;
  file.metadata = header.value("metadata", nlohmann::json::object());
  for (std::size_t i = 0; i < header["tensors"].size(); ++i) {
    const auto& e = header["tensors"][i];
    const std::string ptr = where + "#/tensors/" + std::to_string(i);
    if (!e.contains("name") || !e.contains("shape") || !e["shape"].is_array() || e["shape"].size() != 2)
      throw ParseError(ptr, "expected {name, shape:[rows, cols]}");
    const auto rows = e["shape"][0].get<Eigen::Index>();
    const auto cols = e["shape"][1].get<Eigen::Index>();
    if (rows <= 0 || cols <= 0) throw ParseError(ptr + "/shape", "extents must be positive");
    NamedTensor t{e["name"].get<std::string>(), Matrix<double>(rows, cols)};
    file.tensors.push_back(std::move(t));
  }
  for (auto& t : file.tensors)
    for (Eigen::Index i = 0; i < t.value.size(); ++i) t.value.data()[i] = read_le<double>(in, where);
  return file;
}

void assign_weights(const WeightFile& file, std::span<Parameter<double>* const> params) {
  for (auto* p : params) {
    const auto* t = file.find(p->name);
    if (t == nullptr) throw DataError("weight file lacks tensor '" + p->name + "'");
    if (t->value.rows() != p->value.rows() || t->value.cols() != p->value.cols())
      throw DimensionError("tensor '" + p->name + "' has shape " + shape_of(t->value) + ", expected " +
                           shape_of(p->value));
    p->value = t->value;
    p->zero_grad();
  }
}

std::string weights_hash(std::span<const Parameter<double>* const> params) {
  Fnv1a h;
  for (const auto* p : params) {
    h.update(p->name);
    h.update_value<std::int64_t>(p->value.rows());
    h.update_value<std::int64_t>(p->value.cols());
    for (Eigen::Index i = 0; i < p->value.size(); ++i) h.update_value(p->value.data()[i]);
  }
  return h.hex();
}

}  // namespace misfitlab::core
