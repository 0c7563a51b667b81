#pragma once

#include <cstdint>
#include <filesystem>
#include <fstream>
#include <map>
#include <stdexcept>
#include <string>
#include <vector>

#include <json.hpp>

namespace osf {

// Tensor directory: a manifest.json listing {name, dtype:"f32", shape, file}
// entries, each file holding raw little-endian float32 values in row-major
// order. Shared by teacher outputs and field checkpoints.

struct TensorEntry {
  std::string name;
  std::vector<int64_t> shape;
  std::string file;
};

inline int64_t shape_numel(const std::vector<int64_t>& shape) {
  int64_t n = 1;
  for (int64_t d : shape) n *= d;
  return n;
}

class TensorDirWriter {
 public:
  explicit TensorDirWriter(std::filesystem::path dir) : dir_(std::move(dir)) {
    std::filesystem::create_directories(dir_);
  }

  void add(const std::string& name, const std::vector<int64_t>& shape,
           const std::vector<double>& values) {
    if (shape_numel(shape) != static_cast<int64_t>(values.size()))
      throw std::invalid_argument("tensor '" + name + "': shape does not match value count");
    const std::string file = name + ".f32";
    std::ofstream out(dir_ / file, std::ios::binary);
    if (!out) throw std::runtime_error("cannot open " + (dir_ / file).string());
    std::vector<float> buf(values.begin(), values.end());
    out.write(reinterpret_cast<const char*>(buf.data()),
              static_cast<std::streamsize>(buf.size() * sizeof(float)));
    entries_.push_back({name, shape, file});
  }

  // Writes manifest.json; call once after all tensors are added.
  void finish() const {
    nlohmann::json j;
    j["entries"] = nlohmann::json::array();
    for (const auto& e : entries_) {
      j["entries"].push_back({{"name", e.name},
                              {"dtype", "f32"},
                              {"shape", e.shape},
                              {"file", e.file}});
    }
    std::ofstream out(dir_ / "manifest.json");
    out << j.dump(2) << "\n";
  }

 private:
  std::filesystem::path dir_;
  std::vector<TensorEntry> entries_;
};

class TensorDirReader {
 public:
  explicit TensorDirReader(std::filesystem::path dir) : dir_(std::move(dir)) {
    std::ifstream in(dir_ / "manifest.json");
    if (!in) throw std::runtime_error("missing manifest.json in " + dir_.string());
    nlohmann::json j;
    in >> j;
    for (const auto& e : j.at("entries")) {
      if (e.at("dtype").get<std::string>() != "f32")
        throw std::runtime_error("unsupported dtype in tensor manifest");
      TensorEntry te;
      te.name = e.at("name").get<std::string>();
      te.shape = e.at("shape").get<std::vector<int64_t>>();
      te.file = e.at("file").get<std::string>();
      entries_[te.name] = te;
    }
  }

  bool has(const std::string& name) const { return entries_.count(name) > 0; }

  std::vector<std::string> names() const {
    std::vector<std::string> out;
    for (const auto& [k, v] : entries_) out.push_back(k);
    return out;
  }

  const std::vector<int64_t>& shape(const std::string& name) const {
    return entry(name).shape;
  }

  std::vector<double> read(const std::string& name) const {
    const TensorEntry& e = entry(name);
    const int64_t n = shape_numel(e.shape);
    std::ifstream in(dir_ / e.file, std::ios::binary);
    if (!in) throw std::runtime_error("cannot open " + (dir_ / e.file).string());
    std::vector<float> buf(static_cast<size_t>(n));
    in.read(reinterpret_cast<char*>(buf.data()),
            static_cast<std::streamsize>(buf.size() * sizeof(float)));
    if (in.gcount() != static_cast<std::streamsize>(buf.size() * sizeof(float)))
      throw std::runtime_error("tensor file '" + e.file + "' truncated");
    return std::vector<double>(buf.begin(), buf.end());
  }

 private:
  const TensorEntry& entry(const std::string& name) const {
    auto it = entries_.find(name);
    if (it == entries_.end())
      throw std::runtime_error("tensor '" + name + "' not in manifest");
    return it->second;
  }

  std::filesystem::path dir_;
  std::map<std::string, TensorEntry> entries_;
};

}  // namespace osf
