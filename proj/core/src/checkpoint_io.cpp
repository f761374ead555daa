#include "checkpoint_io.hpp"

#include <cstdint>
#include <cstring>
#include <fstream>
#include <vector>

#include "bugloc/error.hpp"

namespace bugloc::ckpt {

namespace {

using nlohmann::json;

void write_f64le(std::ostream& out, const double* values, std::int64_t n) {
  std::vector<unsigned char> buf(static_cast<std::size_t>(n) * 8);
  for (std::int64_t i = 0; i < n; ++i) {
    std::uint64_t bits;
    std::memcpy(&bits, values + i, 8);
    for (int b = 0; b < 8; ++b)
      buf[static_cast<std::size_t>(i * 8 + b)] =
          static_cast<unsigned char>(bits >> (8 * b));
  }
  out.write(reinterpret_cast<const char*>(buf.data()),
            static_cast<std::streamsize>(buf.size()));
}

void read_f64le(std::istream& in, double* values, std::int64_t n,
                const std::string& path) {
  std::vector<unsigned char> buf(static_cast<std::size_t>(n) * 8);
  in.read(reinterpret_cast<char*>(buf.data()),
          static_cast<std::streamsize>(buf.size()));
  if (in.gcount() != static_cast<std::streamsize>(buf.size()))
    throw ValidationError("checkpoint is truncated: " + path);
  for (std::int64_t i = 0; i < n; ++i) {
    std::uint64_t bits = 0;
    for (int b = 0; b < 8; ++b)
      bits |= static_cast<std::uint64_t>(buf[static_cast<std::size_t>(i * 8 + b)])
              << (8 * b);
    std::memcpy(values + i, &bits, 8);
  }
}

}  // namespace

void save(const std::string& path, const std::string& kind,
          const json& config, const ParamStore& params) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw Error("cannot write checkpoint: " + path);

  json dir = json::array();
  for (const auto& name : params.names())
    dir.push_back(json{{"name", name},
                       {"shape", params.at(name).shape()},
                       {"dtype", "f64"}});
  const json header{{"format", "bugloc-ckpt"},
                    {"version", 1},
                    {"kind", kind},
                    {"config", config},
                    {"tensors", dir}};
  out << header.dump() << '\n' << '\0';
  for (const auto& name : params.names()) {
    const Tensor& t = params.at(name);
    write_f64le(out, t.data(), t.numel());
  }
  if (!out) throw Error("failed writing checkpoint: " + path);
}

Loaded load(const std::string& path, const std::string& expected_kind) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw Error("cannot read checkpoint: " + path);
  std::string header_text;
  if (!std::getline(in, header_text))
    throw ValidationError("checkpoint has no header: " + path);
  char nul = ' ';
  if (!in.get(nul) || nul != '\0')
    throw ValidationError("checkpoint header is not NUL-terminated: " + path);

  json header;
  try {
    header = json::parse(header_text);
  } catch (const json::exception& e) {
    throw ValidationError("checkpoint header is not valid JSON: " + path +
                          ": " + e.what());
  }
  Loaded loaded;
  try {
    if (header.at("format") != "bugloc-ckpt" || header.at("version") != 1)
      throw ValidationError("unsupported checkpoint format: " + path);
    loaded.kind = header.at("kind").get<std::string>();
    loaded.config = header.at("config");
    for (const json& entry : header.at("tensors")) {
      const std::string name = entry.at("name").get<std::string>();
      if (entry.at("dtype") != "f64")
        throw ValidationError("unsupported tensor dtype in " + path);
      Tensor t(entry.at("shape").get<std::vector<std::int64_t>>());
      read_f64le(in, t.data(), t.numel(), path);
      loaded.params.add(name, std::move(t));
    }
  } catch (const json::exception& e) {
    throw ValidationError("checkpoint header is malformed: " + path + ": " +
                          e.what());
  }
  if (!expected_kind.empty() && loaded.kind != expected_kind)
    throw ValidationError("checkpoint kind is '" + loaded.kind +
                          "', expected '" + expected_kind + "': " + path);
  return loaded;
}

}  // namespace bugloc::ckpt
