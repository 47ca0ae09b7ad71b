#include "advcon/model_io.hpp"

#include "advcon/io.hpp"

#include <fstream>

namespace advcon {

void write_model(const Model& model, std::ostream& out) {
  Json header;
  header["input_shape"] = model.input_shape();
  Json layers = Json::array();
  for (const auto& l : model.layers()) {
    layers.push_back({{"name", l.spec.name},
                      {"kind", to_string(l.spec.kind)},
                      {"units", l.spec.units},
                      {"kernel", l.spec.kernel},
                      {"stride", l.spec.stride},
                      {"pad", l.spec.pad}});
  }
  header["layers"] = layers;
  const std::string text = header.dump();

  out.write(kModelMagic, sizeof(kModelMagic));
  out.put(static_cast<char>(kModelFormatVersion));
  write_u32(out, static_cast<std::uint32_t>(text.size()));
  out.write(text.data(), static_cast<std::streamsize>(text.size()));
  for (const auto& l : model.layers()) {
    if (!l.has_params()) continue;
    for (double v : l.weight.values()) write_f64(out, v);
    for (double v : l.bias.values()) write_f64(out, v);
  }
}

Model read_model(std::istream& in) {
  char magic[sizeof(kModelMagic)];
  in.read(magic, sizeof(magic));
  if (in.gcount() != sizeof(magic) || !std::equal(magic, magic + sizeof(magic), kModelMagic)) {
    throw IoError("model file: bad magic");
  }
  const int version = in.get();
  if (version != kModelFormatVersion) {
    throw IoError("model file: version " + std::to_string(version) + " is not supported (expected " +
                  std::to_string(kModelFormatVersion) + ")");
  }
  const std::uint32_t len = read_u32(in);
  std::string text(len, '\0');
  in.read(text.data(), len);
  if (in.gcount() != static_cast<std::streamsize>(len)) throw IoError("model file: truncated header");

  Json header;
  try {
    header = Json::parse(text);
  } catch (const nlohmann::json::exception& e) {
    throw IoError(std::string("model file: bad header: ") + e.what());
  }
  const Shape input = header.at("input_shape").get<Shape>();
  std::vector<LayerSpec> specs;
  for (const auto& j : header.at("layers")) {
    specs.push_back(LayerSpec{parse_layer_kind(j.at("kind").get<std::string>()), j.at("name").get<std::string>(),
                              j.at("units").get<Index>(), j.at("kernel").get<Index>(), j.at("stride").get<Index>(),
                              j.at("pad").get<Index>()});
  }
  // builds shapes and parameter buffers; the payload then overwrites them
  Model model(input, std::move(specs), 0);
  for (auto& l : model.layers()) {
    if (!l.has_params()) continue;
    for (Index i = 0; i < l.weight.size(); ++i) l.weight[i] = read_f64(in);
    for (Index i = 0; i < l.bias.size(); ++i) l.bias[i] = read_f64(in);
  }
  if (in.peek() != std::char_traits<char>::eof()) throw IoError("model file: trailing bytes");
  return model;
}

void save_model(const Model& model, const std::filesystem::path& path) {
  if (path.has_parent_path()) std::filesystem::create_directories(path.parent_path());
  std::ofstream out(path, std::ios::binary);
  if (!out) throw IoError("cannot create " + path.string());
  write_model(model, out);
  if (!out) throw IoError("failed writing " + path.string());
}

Model load_model(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw IoError("cannot open model file " + path.string());
  return read_model(in);
}

}  // namespace advcon
