#include "fie/checkpoint.hpp"

#include <algorithm>
#include <bit>
#include <cstring>
#include <fstream>

#include "fie/error.hpp"

namespace fie {

namespace {

namespace fs = std::filesystem;
using nlohmann::json;

template <typename T>
constexpr Precision precision_of() {
  return sizeof(T) == 4 ? Precision::kFloat32 : Precision::kFloat64;
}

template <typename T>
void write_values(std::ofstream& out, const Array<T>& a) {
  if constexpr (std::endian::native == std::endian::little) {
    out.write(reinterpret_cast<const char*>(a.data()),
              static_cast<std::streamsize>(a.size() * sizeof(T)));
  } else {
    for (std::size_t i = 0; i < a.size(); ++i) {
      char b[sizeof(T)];
      std::memcpy(b, &a.data()[i], sizeof(T));
      std::reverse(b, b + sizeof(T));
      out.write(b, sizeof(T));
    }
  }
}

template <typename T>
void read_values(const std::string& blob, std::size_t offset, Array<T>& a) {
  const std::size_t bytes = a.size() * sizeof(T);
  if (offset + bytes > blob.size()) throw IoError("params.bin is truncated");
  std::memcpy(a.data(), blob.data() + offset, bytes);
  if constexpr (std::endian::native != std::endian::little) {
    for (std::size_t i = 0; i < a.size(); ++i) {
      auto* b = reinterpret_cast<char*>(&a.data()[i]);
      std::reverse(b, b + sizeof(T));
    }
  }
}

json entry(const Shape& shape, Precision p, std::size_t offset, std::size_t length) {
  return {{"shape", shape}, {"dtype", precision_name(p)}, {"offset", offset}, {"length", length}};
}

json read_json(const fs::path& path) {
  std::ifstream in(path);
  if (!in) throw IoError("cannot read " + path.string());
  try {
    return json::parse(in);
  } catch (const json::exception& e) {
    throw IoError(path.string() + ": " + e.what());
  }
}

template <typename T>
void load_entry(const json& meta, const std::string& name, const std::string& blob, Array<T>& a) {
  if (!meta.contains(name)) throw IoError("checkpoint lacks '" + name + "'");
  const auto& e = meta.at(name);
  if (e.at("shape").get<Shape>() != a.shape()) {
    throw DimensionError("checkpoint shape " + shape_string(e.at("shape").get<Shape>()) +
                         " for '" + name + "' does not match " + shape_string(a.shape()));
  }
  if (e.at("length").get<std::size_t>() != a.size() * sizeof(T))
    throw IoError("checkpoint length mismatch for '" + name + "'");
  read_values(blob, e.at("offset").get<std::size_t>(), a);
}

}  // namespace

template <typename T>
void save_checkpoint(const fs::path& dir, const ParameterStore<T>& store, const Adam<T>* adam,
                     const Vocabulary& vocab, const json& config, std::int64_t step) {
  std::error_code ec;
  fs::create_directories(dir, ec);
  if (ec) throw IoError("cannot create " + dir.string() + ": " + ec.message());
  const Precision prec = precision_of<T>();

  std::ofstream bin(dir / "params.bin", std::ios::binary | std::ios::trunc);
  if (!bin) throw IoError("cannot write " + (dir / "params.bin").string());
  json params = json::object(), first = json::object(), second = json::object();
  std::size_t offset = 0;
  auto put = [&](json& where, const std::string& name, const Array<T>& a) {
    const std::size_t len = a.size() * sizeof(T);
    where[name] = entry(a.shape(), prec, offset, len);
    write_values(bin, a);
    offset += len;
  };
  for (std::size_t i = 0; i < store.size(); ++i) put(params, store[i].name, store[i].value);
  if (adam) {
    for (std::size_t i = 0; i < store.size(); ++i) {
      put(first, store[i].name, adam->first_moments()[i]);
      put(second, store[i].name, adam->second_moments()[i]);
    }
  }
  bin.flush();
  if (!bin) throw IoError("write to " + (dir / "params.bin").string() + " failed (disk full?)");

  json manifest;
  manifest["dtype"] = precision_name(prec);
  manifest["parameters"] = params;
  manifest["step"] = step;
  manifest["config"] = config;
  if (adam) {
    manifest["optimizer"] = {{"name", "adam"},
                             {"steps", adam->steps()},
                             {"first_moment", first},
                             {"second_moment", second}};
  }
  std::ofstream mf(dir / "manifest.json", std::ios::trunc);
  mf << manifest.dump(2) << "\n";
  mf.flush();
  if (!mf) throw IoError("write to manifest.json failed (disk full?)");

  std::ofstream vf(dir / "vocab.json", std::ios::trunc);
  vf << json{{"words", vocab.words()}, {"num_global", vocab.num_global()}}.dump() << "\n";
  vf.flush();
  if (!vf) throw IoError("write to vocab.json failed (disk full?)");
}

template <typename T>
void load_checkpoint(const fs::path& dir, ParameterStore<T>& store, Adam<T>* adam) {
  const json manifest = read_json(dir / "manifest.json");
  const Precision prec = parse_precision(manifest.at("dtype").get<std::string>());
  if (prec != precision_of<T>()) {
    throw ConfigError("checkpoint precision " + precision_name(prec) + " does not match " +
                      precision_name(precision_of<T>()));
  }
  std::ifstream bin(dir / "params.bin", std::ios::binary);
  if (!bin) throw IoError("cannot read " + (dir / "params.bin").string());
  const std::string blob((std::istreambuf_iterator<char>(bin)), std::istreambuf_iterator<char>());

  const auto& params = manifest.at("parameters");
  if (params.size() != store.size()) {
    throw ContractError("checkpoint holds " + std::to_string(params.size()) +
                        " parameters, model has " + std::to_string(store.size()));
  }
  for (std::size_t i = 0; i < store.size(); ++i)
    load_entry(params, store[i].name, blob, store[i].value);
  if (adam) {
    if (!manifest.contains("optimizer")) throw IoError("checkpoint has no optimizer state");
    const auto& opt = manifest.at("optimizer");
    for (std::size_t i = 0; i < store.size(); ++i) {
      load_entry(opt.at("first_moment"), store[i].name, blob, adam->first_moments()[i]);
      load_entry(opt.at("second_moment"), store[i].name, blob, adam->second_moments()[i]);
    }
    adam->set_steps(opt.at("steps").get<std::int64_t>());
  }
  store.zero_grad();
}

CheckpointMeta read_checkpoint_meta(const fs::path& dir) {
  const json manifest = read_json(dir / "manifest.json");
  CheckpointMeta m;
  m.config = manifest.value("config", json::object());
  m.step = manifest.value("step", std::int64_t{0});
  m.precision = parse_precision(manifest.at("dtype").get<std::string>());
  return m;
}

Vocabulary load_vocabulary(const fs::path& dir) {
  const json v = read_json(dir / "vocab.json");
  return Vocabulary(v.at("words").get<std::vector<std::string>>(),
                    v.at("num_global").get<std::size_t>());
}

template void save_checkpoint<float>(const fs::path&, const ParameterStore<float>&,
                                     const Adam<float>*, const Vocabulary&, const json&,
                                     std::int64_t);
template void save_checkpoint<double>(const fs::path&, const ParameterStore<double>&,
                                      const Adam<double>*, const Vocabulary&, const json&,
                                      std::int64_t);
template void load_checkpoint<float>(const fs::path&, ParameterStore<float>&, Adam<float>*);
template void load_checkpoint<double>(const fs::path&, ParameterStore<double>&, Adam<double>*);

}  // namespace fie
