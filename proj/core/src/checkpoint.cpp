#include <cstring>
#include <fstream>

#include "json.hpp"
#include "spikmamba/model.hpp"

namespace spikmamba {

using nlohmann::json;

namespace {

json config_to_json_obj(const ModelConfig& cfg) {
  json j;
  j["d_model"] = cfg.d_model;
  j["n_blocks"] = cfg.n_blocks;
  j["window"] = cfg.window;
  j["d_inner"] = cfg.d_inner;
  j["d_state"] = cfg.d_state;
  j["conv_k"] = cfg.conv_k;
  j["ffn_hidden"] = cfg.ffn_hidden;
  j["n_classes"] = cfg.n_classes;
  j["t_frames"] = cfg.t_frames;
  j["input_h"] = cfg.input_h;
  j["input_w"] = cfg.input_w;
  j["ablation"] = ablation_name(cfg.ablation);
  j["lif"] = {{"tau", cfg.lif.tau},
              {"v_th", cfg.lif.v_th},
              {"v_reset", cfg.lif.v_reset},
              {"surrogate_width", cfg.lif.surrogate_width}};
  return j;
}

ModelConfig config_from_json_obj(const json& j) {
  ModelConfig cfg;
  cfg.d_model = j.at("d_model").get<int>();
  cfg.n_blocks = j.at("n_blocks").get<int>();
  cfg.window = j.at("window").get<int>();
  cfg.d_inner = j.at("d_inner").get<int>();
  cfg.d_state = j.at("d_state").get<int>();
  cfg.conv_k = j.at("conv_k").get<int>();
  cfg.ffn_hidden = j.at("ffn_hidden").get<int>();
  cfg.n_classes = j.at("n_classes").get<int>();
  cfg.t_frames = j.at("t_frames").get<int>();
  cfg.input_h = j.at("input_h").get<int>();
  cfg.input_w = j.at("input_w").get<int>();
  cfg.ablation = ablation_from_name(j.at("ablation").get<std::string>());
  const json& lif = j.at("lif");
  cfg.lif.tau = lif.at("tau").get<double>();
  cfg.lif.v_th = lif.at("v_th").get<double>();
  cfg.lif.v_reset = lif.at("v_reset").get<double>();
  cfg.lif.surrogate_width = lif.at("surrogate_width").get<double>();
  return cfg;
}

void write_u64_le(std::ostream& out, std::uint64_t v) {
  unsigned char buf[8];
  for (int i = 0; i < 8; ++i) buf[i] = static_cast<unsigned char>(v >> (8 * i));
  out.write(reinterpret_cast<const char*>(buf), 8);
}

std::uint64_t read_u64_le(std::istream& in, const std::string& path) {
  unsigned char buf[8];
  if (!in.read(reinterpret_cast<char*>(buf), 8)) throw IoError("short read in " + path);
  std::uint64_t v = 0;
  for (int i = 0; i < 8; ++i) v |= static_cast<std::uint64_t>(buf[i]) << (8 * i);
  return v;
}

void write_tensor_raw(std::ostream& out, const Tensor& t) {
  // buffers are already little-endian on every supported target
  std::int64_t n = t.numel();
  if (t.dtype() == DType::F32) {
    out.write(reinterpret_cast<const char*>(t.data<float>()),
              static_cast<std::streamsize>(n) * 4);
  } else {
    out.write(reinterpret_cast<const char*>(t.data<double>()),
              static_cast<std::streamsize>(n) * 8);
  }
}

void read_tensor_raw(std::istream& in, Tensor& t, const std::string& path) {
  std::int64_t n = t.numel();
  bool ok;
  if (t.dtype() == DType::F32) {
    ok = static_cast<bool>(
        in.read(reinterpret_cast<char*>(t.data<float>()), static_cast<std::streamsize>(n) * 4));
  } else {
    ok = static_cast<bool>(
        in.read(reinterpret_cast<char*>(t.data<double>()), static_cast<std::streamsize>(n) * 8));
  }
  if (!ok) throw IoError("truncated tensor data in " + path);
}

}  // namespace

std::string model_config_to_json(const ModelConfig& cfg) { return config_to_json_obj(cfg).dump(); }

ModelConfig model_config_from_json(const std::string& json_text) {
  try {
    return config_from_json_obj(json::parse(json_text));
  } catch (const json::exception& e) {
    throw ParseError(std::string("model config json: ") + e.what());
  }
}

void save_checkpoint(const SpikMambaModel& model, const std::string& path) {
  auto& mutable_model = const_cast<SpikMambaModel&>(model);
  auto params = mutable_model.parameters();
  auto buffers = mutable_model.buffers();

  json manifest;
  manifest["format"] = kCheckpointFormat;
  manifest["dtype"] = dtype_name(model.dtype());
  manifest["config"] = config_to_json_obj(model.config());
  json tensors = json::array();
  auto describe = [&](const Parameter& p, bool trainable) {
    json t;
    t["name"] = p.name;
    t["shape"] = p.tensor.shape();
    t["trainable"] = trainable;
    tensors.push_back(t);
  };
  for (const auto& p : params) describe(p, true);
  for (const auto& b : buffers) describe(b, false);
  manifest["tensors"] = tensors;

  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw IoError("cannot write checkpoint " + path);
  std::string text = manifest.dump();  // keys sorted -> byte-stable
  write_u64_le(out, text.size());
  out.write(text.data(), static_cast<std::streamsize>(text.size()));
  for (const auto& p : params) write_tensor_raw(out, p.tensor);
  for (const auto& b : buffers) write_tensor_raw(out, b.tensor);
  if (!out) throw IoError("write failed for checkpoint " + path);
}

SpikMambaModel load_checkpoint(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw IoError("cannot open checkpoint " + path);
  std::uint64_t len = read_u64_le(in, path);
  if (len > (1u << 26)) throw ValidationError("checkpoint manifest implausibly large in " + path);
  std::string text(len, '\0');
  if (!in.read(text.data(), static_cast<std::streamsize>(len))) {
    throw IoError("truncated manifest in " + path);
  }
  json manifest;
  try {
    manifest = json::parse(text);
  } catch (const json::exception& e) {
    throw ParseError(path + ": manifest: " + e.what());
  }
  if (manifest.value("format", "") != kCheckpointFormat) {
    throw ValidationError(path + ": unsupported checkpoint format '" +
                          manifest.value("format", "<missing>") + "'");
  }
  DType dt;
  ModelConfig cfg;
  try {
    dt = dtype_from_name(manifest.at("dtype").get<std::string>());
    cfg = config_from_json_obj(manifest.at("config"));
  } catch (const json::exception& e) {
    throw ValidationError(path + ": malformed manifest: " + e.what());
  }

  SpikMambaModel model(cfg, dt, /*seed=*/0);
  auto params = model.parameters();
  auto buffers = model.buffers();
  std::vector<Parameter> all;
  all.insert(all.end(), params.begin(), params.end());
  all.insert(all.end(), buffers.begin(), buffers.end());

  if (!manifest.contains("tensors")) {
    throw ValidationError(path + ": malformed manifest: no tensor list");
  }
  const json& tensors = manifest.at("tensors");
  if (tensors.size() != all.size()) {
    throw ValidationError(path + ": manifest lists " + std::to_string(tensors.size()) +
                          " tensors, model has " + std::to_string(all.size()));
  }
  for (std::size_t i = 0; i < all.size(); ++i) {
    const json& entry = tensors.at(i);
    std::string name;
    Shape shape;
    try {
      name = entry.at("name").get<std::string>();
      shape = entry.at("shape").get<Shape>();
    } catch (const json::exception& e) {
      throw ValidationError(path + ": malformed tensor entry " + std::to_string(i) + ": " +
                            e.what());
    }
    if (name != all[i].name || shape != all[i].tensor.shape()) {
      throw ValidationError(path + ": manifest entry " + std::to_string(i) + " is " + name + " " +
                            shape_str(shape) + ", model expects " + all[i].name + " " +
                            shape_str(all[i].tensor.shape()));
    }
    read_tensor_raw(in, all[i].tensor, path);
  }
  char extra;
  if (in.read(&extra, 1)) throw ValidationError(path + ": trailing bytes after tensor data");
  return model;
}

}  // namespace spikmamba
