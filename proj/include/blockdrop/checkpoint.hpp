#pragma once

// Manifest + blob persistence. A checkpoint (or dataset) directory holds a
// JSON manifest describing every tensor (name, shape, byte offset) and one
// raw little-endian blob of 64-bit floats, so any language can parse it and
// single tensors can be loaded by offset.

#include <bit>
#include <cstdint>
#include <filesystem>
#include <fstream>
#include <map>
#include <string>
#include <vector>

#include "json.hpp"

#include "blockdrop/detector.hpp"

namespace blockdrop {

using Json = nlohmann::ordered_json;

namespace detail {

inline void require_little_endian() {
  if constexpr (std::endian::native != std::endian::little)
    throw IoError("checkpoint blobs are little-endian; big-endian hosts are unsupported");
}

inline void write_text(const std::filesystem::path& path, const std::string& text) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw IoError("cannot write " + path.string());
  out << text;
  if (!out) throw IoError("failed writing " + path.string());
}

inline Json read_json(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw IoError("cannot read " + path.string());
  Json j;
  try {
    in >> j;
  } catch (const std::exception& e) {
    throw IoError("malformed JSON in " + path.string() + ": " + e.what());
  }
  return j;
}

class BlobWriter {
 public:
  explicit BlobWriter(const std::filesystem::path& path) : out_(path, std::ios::binary) {
    require_little_endian();
    if (!out_) throw IoError("cannot write " + path.string());
  }
  // Returns the byte offset the values were written at.
  std::uint64_t append(std::span<const double> values) {
    std::uint64_t offset = bytes_;
    out_.write(reinterpret_cast<const char*>(values.data()),
               static_cast<std::streamsize>(values.size() * sizeof(double)));
    if (!out_) throw IoError("failed writing blob");
    bytes_ += values.size() * sizeof(double);
    return offset;
  }
  std::uint64_t size() const { return bytes_; }

 private:
  std::ofstream out_;
  std::uint64_t bytes_ = 0;
};

class BlobReader {
 public:
  explicit BlobReader(const std::filesystem::path& path) : in_(path, std::ios::binary) {
    require_little_endian();
    if (!in_) throw IoError("cannot read " + path.string());
    in_.seekg(0, std::ios::end);
    bytes_ = static_cast<std::uint64_t>(in_.tellg());
  }
  std::vector<double> read(std::uint64_t offset, std::size_t count) {
    if (offset + count * sizeof(double) > bytes_)
      throw IoError("blob read out of range (corrupt manifest?)");
    std::vector<double> values(count);
    in_.seekg(static_cast<std::streamoff>(offset));
    in_.read(reinterpret_cast<char*>(values.data()),
             static_cast<std::streamsize>(count * sizeof(double)));
    if (!in_) throw IoError("failed reading blob");
    return values;
  }
  std::uint64_t size() const { return bytes_; }

 private:
  std::ifstream in_;
  std::uint64_t bytes_ = 0;
};

}  // namespace detail

// ---------------------------------------------------------------------------
// Model checkpoints

inline Json model_config_to_json(const ModelConfig& c) {
  Json j;
  j["depth"] = c.depth;
  j["width"] = c.width;
  j["heads"] = c.heads;
  j["head_depth"] = c.head_depth;
  j["pool_factor"] = c.pool_factor;
  j["ffn_multiple"] = c.ffn_multiple;
  j["activation"] = activation_name(c.activation);
  j["planted_identity_blocks"] = c.planted_identity_blocks;
  j["planted_scale"] = c.planted_scale;
  j["d_in"] = c.d_in;
  j["num_classes"] = c.num_classes;
  j["seq_len"] = c.seq_len;
  return j;
}

inline ModelConfig model_config_from_json(const Json& j) {
  ModelConfig c;
  c.depth = j.at("depth").get<int>();
  c.width = j.at("width").get<int>();
  c.heads = j.at("heads").get<int>();
  c.head_depth = j.at("head_depth").get<int>();
  c.pool_factor = j.at("pool_factor").get<int>();
  c.ffn_multiple = j.at("ffn_multiple").get<int>();
  c.activation = activation_from_name(j.at("activation").get<std::string>());
  c.planted_identity_blocks = j.at("planted_identity_blocks").get<std::vector<int>>();
  c.planted_scale = j.at("planted_scale").get<double>();
  c.d_in = j.at("d_in").get<int>();
  c.num_classes = j.at("num_classes").get<int>();
  c.seq_len = j.at("seq_len").get<int>();
  return c;
}

// Writes manifest.json + weights.bin. Checkpoints hold plain models; merge
// adapters before saving.
inline void save_model(const DetectorModel& model, const std::filesystem::path& dir) {
  for (const auto& b : model.backbone.blocks)
    if (b.has_adapters())
      throw ContractError("cannot checkpoint a model with unmerged adapters");
  std::filesystem::create_directories(dir);
  DetectorModel m = model;  // handle copy, shares storage
  detail::BlobWriter blob(dir / "weights.bin");
  Json tensors = Json::array();
  for_each_model_tensor(m, [&](const std::string& name, Tensor& t) {
    Json entry;
    entry["name"] = name;
    entry["shape"] = t.shape();
    entry["dtype"] = "float64";
    entry["offset"] = blob.append(t.values());
    entry["numel"] = t.numel();
    tensors.push_back(std::move(entry));
  });
  Json manifest;
  manifest["format"] = "blockdrop-checkpoint";
  manifest["version"] = 1;
  manifest["byte_order"] = "little";
  manifest["model"] = model_config_to_json(model.config);
  manifest["identity_tags"] = model.backbone.identity_tags;
  manifest["blob"] = "weights.bin";
  manifest["blob_bytes"] = blob.size();
  manifest["tensors"] = std::move(tensors);
  detail::write_text(dir / "manifest.json", manifest.dump(2) + "\n");
}

inline DetectorModel load_model(const std::filesystem::path& dir) {
  Json manifest = detail::read_json(dir / "manifest.json");
  if (manifest.value("format", "") != "blockdrop-checkpoint")
    throw IoError(dir.string() + " is not a model checkpoint");
  DetectorModel m;
  m.config = model_config_from_json(manifest.at("model"));
  m.backbone.identity_tags = manifest.at("identity_tags").get<std::vector<int>>();
  m.backbone.blocks.resize(m.backbone.identity_tags.size());
  for (auto& b : m.backbone.blocks) {
    b.head_count = m.config.heads;
    b.activation = m.config.activation;
  }
  m.head.blocks.resize(m.config.head_depth);
  for (auto& b : m.head.blocks) {
    b.head_count = m.config.heads;
    b.activation = m.config.activation;
  }

  struct Entry {
    Shape shape;
    std::uint64_t offset;
    std::size_t numel;
  };
  std::map<std::string, Entry> entries;
  for (const auto& t : manifest.at("tensors")) {
    Entry e;
    e.shape = t.at("shape").get<Shape>();
    e.offset = t.at("offset").get<std::uint64_t>();
    e.numel = t.at("numel").get<std::size_t>();
    if (shape_numel(e.shape) != e.numel) throw IoError("manifest shape/numel mismatch");
    entries[t.at("name").get<std::string>()] = std::move(e);
  }
  detail::BlobReader blob(dir / manifest.value("blob", "weights.bin"));
  std::size_t consumed = 0;
  for_each_model_tensor(m, [&](const std::string& name, Tensor& t) {
    auto it = entries.find(name);
    if (it == entries.end()) throw IoError("checkpoint is missing tensor '" + name + "'");
    t = Tensor::from_data(it->second.shape, blob.read(it->second.offset, it->second.numel), true);
    ++consumed;
  });
  if (consumed != entries.size())
    throw IoError("checkpoint holds tensors the model structure does not expect");
  m.backbone.validate();
  return m;
}

// ---------------------------------------------------------------------------
// Dataset persistence

inline Json task_config_to_json(const TaskConfig& c) {
  Json j;
  j["num_seq"] = c.num_seq;
  j["seq_len"] = c.seq_len;
  j["d_in"] = c.d_in;
  j["num_classes"] = c.num_classes;
  j["noise_sigma"] = c.noise_sigma;
  j["pattern_scale"] = c.pattern_scale;
  j["min_len"] = c.min_len;
  j["max_len"] = c.max_len;
  j["max_instances"] = c.max_instances;
  j["seed"] = c.seed;
  return j;
}

inline TaskConfig task_config_from_json(const Json& j) {
  TaskConfig c;
  c.num_seq = j.at("num_seq").get<int>();
  c.seq_len = j.at("seq_len").get<int>();
  c.d_in = j.at("d_in").get<int>();
  c.num_classes = j.at("num_classes").get<int>();
  c.noise_sigma = j.at("noise_sigma").get<double>();
  c.pattern_scale = j.at("pattern_scale").get<double>();
  c.min_len = j.at("min_len").get<int>();
  c.max_len = j.at("max_len").get<int>();
  c.max_instances = j.at("max_instances").get<int>();
  c.seed = j.at("seed").get<std::uint64_t>();
  return c;
}

inline void save_dataset(const Dataset& ds, const TaskConfig& task,
                         const std::filesystem::path& dir) {
  std::filesystem::create_directories(dir);
  detail::BlobWriter blob(dir / "features.bin");
  Json sequences = Json::array();
  auto dump_split = [&](const std::vector<SyntheticSequence>& split, const char* name) {
    for (const auto& seq : split) {
      Json s;
      s["split"] = name;
      s["seed"] = seq.seed;
      s["shape"] = seq.features.shape();
      s["offset"] = blob.append(seq.features.values());
      Json insts = Json::array();
      for (const auto& inst : seq.instances)
        insts.push_back({inst.start, inst.end, inst.class_id, inst.score});
      s["instances"] = std::move(insts);
      sequences.push_back(std::move(s));
    }
  };
  dump_split(ds.train, "train");
  dump_split(ds.val, "val");
  Json manifest;
  manifest["format"] = "blockdrop-dataset";
  manifest["version"] = 1;
  manifest["byte_order"] = "little";
  manifest["task"] = task_config_to_json(task);
  manifest["blob"] = "features.bin";
  manifest["blob_bytes"] = blob.size();
  manifest["sequences"] = std::move(sequences);
  detail::write_text(dir / "manifest.json", manifest.dump(2) + "\n");
}

inline std::pair<Dataset, TaskConfig> load_dataset(const std::filesystem::path& dir) {
  Json manifest = detail::read_json(dir / "manifest.json");
  if (manifest.value("format", "") != "blockdrop-dataset")
    throw IoError(dir.string() + " is not a dataset directory");
  TaskConfig task = task_config_from_json(manifest.at("task"));
  detail::BlobReader blob(dir / manifest.value("blob", "features.bin"));
  Dataset ds;
  for (const auto& s : manifest.at("sequences")) {
    SyntheticSequence seq;
    seq.seed = s.at("seed").get<std::uint64_t>();
    Shape shape = s.at("shape").get<Shape>();
    seq.features =
        Tensor::from_data(shape, blob.read(s.at("offset").get<std::uint64_t>(), shape_numel(shape)));
    for (const auto& inst : s.at("instances")) {
      ActionInstance a;
      a.start = inst.at(0).get<double>();
      a.end = inst.at(1).get<double>();
      a.class_id = inst.at(2).get<int>();
      a.score = inst.at(3).get<double>();
      seq.instances.push_back(a);
    }
    const std::string split = s.at("split").get<std::string>();
    if (split == "train")
      ds.train.push_back(std::move(seq));
    else if (split == "val")
      ds.val.push_back(std::move(seq));
    else
      throw IoError("unknown split '" + split + "' in dataset manifest");
  }
  return {std::move(ds), task};
}

}  // namespace blockdrop
