#include "mprompt/checkpoint.hpp"

#include <cstring>
#include <filesystem>
#include <fstream>

#include <json.hpp>

namespace mprompt {

namespace {
using ordered_json = nlohmann::ordered_json;
namespace fs = std::filesystem;
}  // namespace

void TensorStore::put(const std::string& name, Tensor t) {
  if (has(name)) throw Error("duplicate tensor name '" + name + "'");
  index[name] = items.size();
  items.emplace_back(name, std::move(t));
}

const Tensor& TensorStore::get(const std::string& name) const {
  auto it = index.find(name);
  if (it == index.end()) throw Error("tensor '" + name + "' not in store");
  return items[it->second].second;
}

void save_checkpoint(const TensorStore& store, const std::map<std::string, std::string>& config,
                     const std::string& dir) {
  std::error_code ec;
  fs::create_directories(dir, ec);
  if (ec) throw IoError("cannot create directory " + dir);

  for (const auto& [name, t] : store.items)
    if (!t.all_finite()) throw NumericError("tensor '" + name + "' is non-finite; refusing to save");

  // weights.bin: raw little-endian f32 payload, tensors contiguous in manifest
  // order.
  std::ofstream wf(fs::path(dir) / "weights.bin", std::ios::binary);
  if (!wf) throw IoError("cannot write weights.bin in " + dir);
  int64_t offset = 0;
  std::vector<int64_t> offsets, lengths;
  for (const auto& [name, t] : store.items) {
    int64_t bytes = t.size() * static_cast<int64_t>(sizeof(float));
    wf.write(reinterpret_cast<const char*>(t.data.data()), bytes);
    offsets.push_back(offset);
    lengths.push_back(bytes);
    offset += bytes;
  }
  wf.close();
  if (!wf) throw IoError("failed writing weights.bin in " + dir);

  // manifest.json: one compact JSON record per line, one line per tensor.
  std::ofstream mf(fs::path(dir) / "manifest.json", std::ios::binary);
  if (!mf) throw IoError("cannot write manifest.json in " + dir);
  for (size_t i = 0; i < store.items.size(); ++i) {
    const auto& [name, t] = store.items[i];
    ordered_json rec;
    rec["name"] = name;
    rec["dtype"] = "f32";
    rec["shape"] = t.shape;
    rec["offset"] = offsets[i];
    rec["length"] = lengths[i];
    mf << rec.dump() << '\n';
  }
  mf.close();
  if (!mf) throw IoError("failed writing manifest.json in " + dir);

  ordered_json cj;
  cj["format"] = kCheckpointFormat;
  cj["version"] = kCheckpointVersion;
  cj["config"] = ordered_json::object();
  for (const auto& [k, v] : config) cj["config"][k] = v;
  std::ofstream cf(fs::path(dir) / "config.json", std::ios::binary);
  if (!cf) throw IoError("cannot write config.json in " + dir);
  cf << cj.dump(2) << '\n';
  cf.close();
  if (!cf) throw IoError("failed writing config.json in " + dir);
}

LoadedCheckpoint load_checkpoint(const std::string& dir) {
  std::ifstream cf(fs::path(dir) / "config.json", std::ios::binary);
  if (!cf) throw IoError("config.json missing in " + dir);
  ordered_json cj;
  try {
    cf >> cj;
  } catch (const std::exception& e) {
    throw FormatError(std::string("config.json unparsable: ") + e.what());
  }
  if (cj.value("format", "") != std::string(kCheckpointFormat))
    throw FormatError("not a model checkpoint: " + dir);
  int version = cj.value("version", -1);
  if (version != kCheckpointVersion)
    throw FormatError("unsupported checkpoint version " + std::to_string(version));

  std::ifstream mf(fs::path(dir) / "manifest.json", std::ios::binary);
  if (!mf) throw IoError("manifest.json missing in " + dir);

  struct Rec {
    std::string name;
    std::vector<int> shape;
    int64_t offset = 0, length = 0;
  };
  std::vector<Rec> recs;
  std::string line;
  int line_no = 0;
  int64_t expected_offset = 0;
  std::unordered_map<std::string, int> seen;
  while (std::getline(mf, line)) {
    ++line_no;
    if (line.empty()) continue;
    ordered_json rec;
    try {
      rec = ordered_json::parse(line);
    } catch (const std::exception& e) {
      throw FormatError("manifest line " + std::to_string(line_no) + " unparsable: " + e.what());
    }
    Rec r;
    r.name = rec.at("name").get<std::string>();
    if (seen.count(r.name))
      throw FormatError("manifest repeats tensor '" + r.name + "'");
    seen[r.name] = line_no;
    std::string dtype = rec.at("dtype").get<std::string>();
    if (dtype != "f32") throw FormatError("unsupported dtype '" + dtype + "' for '" + r.name + "'");
    r.shape = rec.at("shape").get<std::vector<int>>();
    r.offset = rec.at("offset").get<int64_t>();
    r.length = rec.at("length").get<int64_t>();
    int64_t expect = Tensor::count(r.shape) * static_cast<int64_t>(sizeof(float));
    if (r.length != expect)
      throw FormatError("tensor '" + r.name + "' declares " + std::to_string(r.length) +
                        " bytes but its shape needs " + std::to_string(expect));
    if (r.offset != expected_offset)
      throw FormatError("tensor '" + r.name + "' offset " + std::to_string(r.offset) +
                        " is not contiguous (expected " + std::to_string(expected_offset) + ")");
    expected_offset += r.length;
    recs.push_back(std::move(r));
  }

  std::ifstream wf(fs::path(dir) / "weights.bin", std::ios::binary | std::ios::ate);
  if (!wf) throw IoError("blob missing: weights.bin absent in " + dir);
  int64_t blob_size = static_cast<int64_t>(wf.tellg());
  if (blob_size != expected_offset)
    throw FormatError("weights.bin holds " + std::to_string(blob_size) +
                      " bytes but the manifest declares " + std::to_string(expected_offset));
  wf.seekg(0);

  LoadedCheckpoint out;
  out.version = version;
  if (cj.contains("config"))
    for (auto it = cj["config"].begin(); it != cj["config"].end(); ++it)
      out.config[it.key()] = it.value().get<std::string>();
  for (const auto& r : recs) {
    Tensor t(r.shape);
    wf.read(reinterpret_cast<char*>(t.data.data()), r.length);
    if (wf.gcount() != r.length)
      throw FormatError("weights.bin truncated while reading '" + r.name + "'");
    if (!t.all_finite())
      throw FormatError("tensor '" + r.name + "' holds non-finite values");
    out.store.put(r.name, std::move(t));
  }
  return out;
}

}  // namespace mprompt
