#pragma once

// Named-tensor manifests.
//
//   {
//     "format": "mpvcrop-tensors",
//     "version": 1,
//     "meta": { ... free-form ... },
//     "tensors": [ {"name": "composer.conv0.weight", "shape": [8,1,3,3], "values": [...]}, ... ]
//   }
//
// Values are row-major and written with round-trip precision, so a reload
// reproduces every parameter bit for bit.

#include "mpvcrop/autodiff.hpp"
#include "mpvcrop/error.hpp"

#include <json.hpp>

#include <filesystem>
#include <fstream>
#include <map>
#include <string>
#include <vector>

namespace mpvcrop {

inline constexpr const char* kTensorFormat = "mpvcrop-tensors";
inline constexpr int kTensorFormatVersion = 1;

class checkpoint_error : public std::runtime_error {
public:
  using std::runtime_error::runtime_error;
};

template <class T>
nlohmann::json tensors_to_json(const std::vector<NamedTensor<T>>& tensors, const nlohmann::json& meta = nlohmann::json::object()) {
  nlohmann::json j;
  j["format"] = kTensorFormat;
  j["version"] = kTensorFormatVersion;
  j["meta"] = meta;
  auto& arr = j["tensors"] = nlohmann::json::array();
  for (const auto& nt : tensors) {
    nlohmann::json e;
    e["name"] = nt.name;
    e["shape"] = nt.tensor.shape();
    std::vector<double> vals(nt.tensor.value().begin(), nt.tensor.value().end());
    e["values"] = std::move(vals);
    arr.push_back(std::move(e));
  }
  return j;
}

/// Copies values from the manifest into the given tensors by name. Every
/// tensor must be present with a matching shape.
template <class T>
void tensors_from_json(const nlohmann::json& j, std::vector<NamedTensor<T>>& tensors) {
  if (!j.is_object() || j.value("format", "") != kTensorFormat)
    throw checkpoint_error("not a tensor manifest (format tag missing)");
  if (j.value("version", 0) != kTensorFormatVersion)
    throw checkpoint_error("unsupported tensor manifest version " + std::to_string(j.value("version", 0)));
  std::map<std::string, const nlohmann::json*> by_name;
  for (const auto& e : j.at("tensors")) by_name[e.at("name").get<std::string>()] = &e;
  for (auto& nt : tensors) {
    auto it = by_name.find(nt.name);
    if (it == by_name.end()) throw checkpoint_error("tensor '" + nt.name + "' missing from manifest");
    const auto& e = *it->second;
    if (e.at("shape").template get<Shape>() != nt.tensor.shape())
      throw checkpoint_error("tensor '" + nt.name + "' has shape " + shape_str(e.at("shape").template get<Shape>()) +
                             ", expected " + shape_str(nt.tensor.shape()));
    const auto vals = e.at("values").template get<std::vector<double>>();
    if (vals.size() != nt.tensor.numel()) throw checkpoint_error("tensor '" + nt.name + "' value count mismatch");
    std::copy(vals.begin(), vals.end(), nt.tensor.value().begin());
  }
}

inline void write_json_file(const std::filesystem::path& path, const nlohmann::json& j, int indent = -1) {
  if (path.has_parent_path()) std::filesystem::create_directories(path.parent_path());
  std::ofstream os(path);
  if (!os) throw checkpoint_error("cannot write " + path.string());
  os << j.dump(indent) << '\n';
}

inline nlohmann::json read_json_file(const std::filesystem::path& path) {
  std::ifstream is(path);
  if (!is) throw checkpoint_error("cannot read " + path.string());
  try {
    return nlohmann::json::parse(is);
  } catch (const nlohmann::json::parse_error& e) {
    throw checkpoint_error("malformed JSON in " + path.string() + ": " + e.what());
  }
}

} // namespace mpvcrop
