#include "protodet/checkpoint.hpp"

#include "protodet/imageio.hpp"

#include <json.hpp>

#include <bit>
#include <cstring>

namespace protodet {

namespace {

void put_f32(std::string& out, float v) {
  auto bits = std::bit_cast<std::uint32_t>(v);
  for (int b = 0; b < 4; ++b) out.push_back(static_cast<char>((bits >> (8 * b)) & 0xFF));
}

float get_f32(const std::string& in, std::size_t offset) {
  std::uint32_t bits = 0;
  for (int b = 0; b < 4; ++b) bits |= static_cast<std::uint32_t>(static_cast<unsigned char>(in[offset + b])) << (8 * b);
  return std::bit_cast<float>(bits);
}

nlohmann::json model_json(const ModelConfig& c) {
  return {{"image_size", c.image_size}, {"num_classes", c.num_classes}, {"dim", c.dim},
          {"stem", c.stem},             {"width", c.width},             {"tau1", c.tau1},
          {"tau2", c.tau2}};
}

ModelConfig model_from_json(const nlohmann::json& j) {
  ModelConfig c;
  c.image_size = j.at("image_size");
  c.num_classes = j.at("num_classes");
  c.dim = j.at("dim");
  c.stem = j.at("stem");
  c.width = j.at("width");
  c.tau1 = j.at("tau1");
  c.tau2 = j.at("tau2");
  return c;
}

}  // namespace

void save_checkpoint(const std::filesystem::path& json_path, const Checkpoint& ckpt) {
  auto blob_path = json_path;
  blob_path.replace_extension(".bin");
  std::string blob;
  nlohmann::json tensors = nlohmann::json::array();
  auto append = [&](const std::string& name, const Tensor& t) {
    tensors.push_back({{"name", name}, {"shape", t.shape()}, {"offset", blob.size()}, {"count", t.numel()}});
    for (std::size_t i = 0; i < t.numel(); ++i) put_f32(blob, t[i]);
  };
  for (std::size_t i = 0; i < ckpt.params.size(); ++i) append(ckpt.params.name(i), ckpt.params.tensor(i));
  for (std::size_t i = 0; i < ckpt.state.momentum.size(); ++i) {
    append("momentum/" + ckpt.params.name(i), ckpt.state.momentum[i]);
  }
  nlohmann::json m;
  m["format"] = "protodet-checkpoint";
  m["version"] = 1;
  m["model"] = model_json(ckpt.params.config());
  m["classes"] = ckpt.class_names;
  m["epoch"] = ckpt.state.epoch;
  m["step"] = ckpt.state.step;
  m["blob"] = blob_path.filename().string();
  m["tensors"] = tensors;
  write_file(blob_path, blob);
  write_file(json_path, m.dump(2) + "\n");
}

Checkpoint load_checkpoint(const std::filesystem::path& json_path) {
  nlohmann::json m;
  try {
    m = nlohmann::json::parse(read_file(json_path));
  } catch (const std::exception& e) {
    throw CheckpointError(json_path.string() + ": " + e.what());
  }
  try {
    if (m.at("format") != "protodet-checkpoint") throw CheckpointError("not a checkpoint manifest");
    Checkpoint ckpt;
    ckpt.params = ModelParams(model_from_json(m.at("model")));
    ckpt.class_names = m.at("classes").get<std::vector<std::string>>();
    ckpt.state.epoch = m.at("epoch");
    ckpt.state.step = m.at("step");
    const std::string blob = read_file(json_path.parent_path() / m.at("blob").get<std::string>());

    std::map<std::string, Tensor> loaded;
    for (const auto& t : m.at("tensors")) {
      const auto name = t.at("name").get<std::string>();
      const auto shape = t.at("shape").get<Shape>();
      const auto offset = t.at("offset").get<std::size_t>();
      const auto count = t.at("count").get<std::size_t>();
      if (count != shape_numel(shape)) throw CheckpointError(name + ": count does not match shape");
      if (offset + 4 * count > blob.size()) {
        throw CheckpointError(name + ": blob truncated at byte offset " + std::to_string(blob.size()));
      }
      Tensor v(shape);
      for (std::size_t i = 0; i < count; ++i) v[i] = get_f32(blob, offset + 4 * i);
      loaded.emplace(name, std::move(v));
    }
    auto take = [&](const std::string& name, const Shape& want) {
      auto it = loaded.find(name);
      if (it == loaded.end()) throw CheckpointError("missing tensor " + name);
      if (it->second.shape() != want) {
        throw CheckpointError(name + ": shape " + shape_str(it->second.shape()) + ", model expects " + shape_str(want));
      }
      return it->second;
    };
    for (std::size_t i = 0; i < ckpt.params.size(); ++i) {
      ckpt.params.tensor(i) = take(ckpt.params.name(i), ckpt.params.tensor(i).shape());
    }
    if (loaded.contains("momentum/" + ckpt.params.name(0))) {
      for (std::size_t i = 0; i < ckpt.params.size(); ++i) {
        ckpt.state.momentum.push_back(take("momentum/" + ckpt.params.name(i), ckpt.params.tensor(i).shape()));
      }
    }
    return ckpt;
  } catch (const CheckpointError& e) {
    throw CheckpointError(json_path.string() + ": " + e.what());
  } catch (const nlohmann::json::exception& e) {
    throw CheckpointError(json_path.string() + ": " + e.what());
  }
}

}  // namespace protodet
