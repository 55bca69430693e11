#include "afa/checkpoint.hpp"

#include <cstring>
#include <fstream>

#include <json.hpp>

#include "binary_io.hpp"

namespace afa {
namespace {

using json = nlohmann::ordered_json;

constexpr char kMagic[8] = {'A', 'F', 'A', 'C', 'K', 'P', 'T', '1'};

json arch_json(const ArchConfig& arch) {
  json layers = json::array();
  for (const auto& l : arch.layers) {
    json j;
    j["type"] = l.kind == LayerKind::conv ? "conv" : "fc";
    j["width"] = l.width;
    if (l.kind == LayerKind::conv) {
      j["kernel"] = l.kernel;
      j["pool"] = l.pool;
    } else {
      j["dropout"] = l.dropout;
    }
    layers.push_back(j);
  }
  json out;
  out["input"] = {arch.input.channels, arch.input.height, arch.input.width};
  out["layers"] = layers;
  out["attention_capture"] = arch.attention_capture;
  out["semantic_capture"] = arch.semantic_capture;
  return out;
}

ArchConfig arch_parse(const json& j) {
  ArchConfig arch;
  const auto& in = j.at("input");
  arch.input = {in.at(0).get<int>(), in.at(1).get<int>(), in.at(2).get<int>()};
  for (const auto& l : j.at("layers")) {
    LayerSpec spec;
    const auto type = l.at("type").get<std::string>();
    if (type == "conv") {
      spec.kind = LayerKind::conv;
      spec.kernel = l.at("kernel").get<int>();
      spec.pool = l.at("pool").get<bool>();
    } else if (type == "fc") {
      spec.kind = LayerKind::fc;
      spec.dropout = l.at("dropout").get<double>();
    } else {
      throw ConfigError("unknown layer type " + type);
    }
    spec.width = l.at("width").get<int>();
    arch.layers.push_back(spec);
  }
  arch.attention_capture = j.at("attention_capture").get<int>();
  arch.semantic_capture = j.at("semantic_capture").get<int>();
  return arch;
}

}  // namespace

std::string arch_to_json(const ArchConfig& arch) { return arch_json(arch).dump(); }

ArchConfig arch_from_json(const std::string& text) { return arch_parse(json::parse(text)); }

void save_checkpoint(const std::filesystem::path& path, const Checkpoint& ckpt) {
  const ModelDecomposition& m = ckpt.model;
  json header;
  header["format"] = "afa-checkpoint";
  header["version"] = 1;
  header["arch"] = arch_json(m.arch());
  header["seed"] = m.seed();
  json heads = json::array();
  for (TaskId t = 0; t < m.head_count(); ++t) heads.push_back(m.head_classes(t));
  header["heads"] = heads;
  json tensors = json::array();
  const auto info = m.parameter_info();
  const auto params = m.parameters();
  for (std::size_t i = 0; i < params.size(); ++i) {
    tensors.push_back({{"name", info[i].name}, {"rows", params[i]->rows()}, {"cols", params[i]->cols()}});
  }
  header["tensors"] = tensors;
  if (ckpt.discriminator) {
    header["discriminator"] = {{"input", ckpt.discriminator->input_dim()}, {"hidden", ckpt.discriminator->hidden_units()}};
  } else {
    header["discriminator"] = nullptr;
  }
  header["metadata"] = json::parse(ckpt.metadata_json);

  std::ofstream os(path, std::ios::binary);
  if (!os) throw IoError("cannot open " + path.string() + " for writing");
  binio::Writer w(os);
  w.bytes(kMagic, sizeof kMagic);
  w.string(header.dump());
  for (const Matrix* p : params) w.doubles(p->data(), static_cast<std::size_t>(p->size()));
  if (ckpt.discriminator) {
    for (const Matrix* p : ckpt.discriminator->parameters()) w.doubles(p->data(), static_cast<std::size_t>(p->size()));
  }
  w.finish();
  if (!os) throw IoError("failed writing " + path.string());
}

Checkpoint load_checkpoint(const std::filesystem::path& path) {
  std::ifstream is(path, std::ios::binary);
  if (!is) throw IoError("cannot open checkpoint " + path.string());
  binio::Reader r(is);
  char magic[8];
  r.bytes(magic, sizeof magic);
  if (std::memcmp(magic, kMagic, sizeof magic) != 0) throw CorruptArchiveError("not an afa checkpoint");

  Checkpoint ckpt;
  try {
    const json header = json::parse(r.string());
    std::vector<int> heads = header.at("heads").get<std::vector<int>>();
    ckpt.model = ModelDecomposition::assemble(arch_parse(header.at("arch")), header.at("seed").get<std::uint64_t>(), heads);
    const auto& tensors = header.at("tensors");
    auto params = ckpt.model.parameters();
    if (tensors.size() != params.size()) throw CorruptArchiveError("tensor count does not match architecture");
    for (std::size_t i = 0; i < params.size(); ++i) {
      if (tensors[i].at("rows").get<Eigen::Index>() != params[i]->rows() ||
          tensors[i].at("cols").get<Eigen::Index>() != params[i]->cols())
        throw CorruptArchiveError("tensor shape mismatch for " + tensors[i].at("name").get<std::string>());
      r.doubles(params[i]->data(), static_cast<std::size_t>(params[i]->size()));
    }
    if (!header.at("discriminator").is_null()) {
      const auto& d = header.at("discriminator");
      ckpt.discriminator.emplace(d.at("input").get<int>(), d.at("hidden").get<int>(), 0);
      for (Matrix* p : ckpt.discriminator->parameters()) r.doubles(p->data(), static_cast<std::size_t>(p->size()));
    }
    ckpt.metadata_json = header.at("metadata").dump();
  } catch (const nlohmann::json::exception& e) {
    throw CorruptArchiveError(std::string("malformed checkpoint header: ") + e.what());
  } catch (const ConfigError& e) {
    throw CorruptArchiveError(std::string("invalid architecture in checkpoint: ") + e.what());
  } catch (const ValidationError& e) {
    throw CorruptArchiveError(std::string("invalid head registry in checkpoint: ") + e.what());
  }
  r.verify_checksum();
  return ckpt;
}

}  // namespace afa
