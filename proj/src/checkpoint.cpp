#include "ecgrobust/checkpoint.hpp"

#include <bit>
#include <cstring>
#include <fstream>
#include <sstream>
#include <vector>

#include <json.hpp>

#include "ecgrobust/errors.hpp"
#include "ecgrobust/rng.hpp"

static_assert(std::endian::native == std::endian::little,
              "checkpoint container assumes a little-endian host");

namespace ecgrobust {

namespace {

constexpr char kMagic[8] = {'E', 'C', 'G', 'N', 'C', 'K', 'P', '1'};

nlohmann::json config_to_json(const EcgNetConfig& c) {
  return {{"in_channels", c.in_channels},
          {"input_length", c.input_length},
          {"num_classes", c.num_classes},
          {"stem_channels", c.stem_channels},
          {"num_blocks", c.num_blocks},
          {"total_downsample", c.total_downsample},
          {"kernel_size", c.kernel_size},
          {"gn_groups", c.gn_groups}};
}

EcgNetConfig config_from_json(const nlohmann::json& j) {
  EcgNetConfig c;
  c.in_channels = j.at("in_channels").get<std::int64_t>();
  c.input_length = j.at("input_length").get<std::int64_t>();
  c.num_classes = j.at("num_classes").get<std::int64_t>();
  c.stem_channels = j.at("stem_channels").get<std::int64_t>();
  c.num_blocks = j.at("num_blocks").get<std::int64_t>();
  c.total_downsample = j.at("total_downsample").get<std::int64_t>();
  c.kernel_size = j.at("kernel_size").get<std::int64_t>();
  c.gn_groups = j.at("gn_groups").get<std::int64_t>();
  return c;
}

void write_u64(std::ostream& os, std::uint64_t v) {
  os.write(reinterpret_cast<const char*>(&v), sizeof(v));
}

std::uint64_t read_u64(std::istream& is) {
  std::uint64_t v = 0;
  is.read(reinterpret_cast<char*>(&v), sizeof(v));
  return v;
}

}  // namespace

void save_checkpoint(const EcgNet& net, const std::filesystem::path& path,
                     const std::map<std::string, std::string>& meta) {
  nlohmann::json header;
  header["format_version"] = 1;
  header["config"] = config_to_json(net.config());
  nlohmann::json tensors = nlohmann::json::array();
  for (const NamedParam& p : net.parameters()) {
    tensors.push_back({{"name", p.name}, {"shape", p.node->value().shape()}});
  }
  header["tensors"] = tensors;
  header["meta"] = meta;
  const std::string hs = header.dump();

  std::ofstream os(path, std::ios::binary | std::ios::trunc);
  if (!os) throw DataError("checkpoint: cannot open for writing: " + path.string());
  os.write(kMagic, sizeof(kMagic));
  write_u64(os, hs.size());
  os.write(hs.data(), static_cast<std::streamsize>(hs.size()));
  for (const NamedParam& p : net.parameters()) {
    const auto data = p.node->value().data();
    os.write(reinterpret_cast<const char*>(data.data()),
             static_cast<std::streamsize>(data.size() * sizeof(double)));
  }
  if (!os) throw DataError("checkpoint: write failed: " + path.string());
}

LoadedCheckpoint load_checkpoint(const std::filesystem::path& path) {
  std::ifstream is(path, std::ios::binary);
  if (!is) throw DataError("checkpoint: cannot open: " + path.string());
  char magic[8];
  is.read(magic, sizeof(magic));
  if (!is || std::memcmp(magic, kMagic, sizeof(kMagic)) != 0) {
    throw DataError("checkpoint: bad magic in " + path.string());
  }
  const std::uint64_t hlen = read_u64(is);
  std::string hs(hlen, '\0');
  is.read(hs.data(), static_cast<std::streamsize>(hlen));
  if (!is) throw DataError("checkpoint: truncated header in " + path.string());

  nlohmann::json header;
  try {
    header = nlohmann::json::parse(hs);
  } catch (const nlohmann::json::exception& e) {
    throw DataError("checkpoint: malformed header in " + path.string() + ": " + e.what());
  }

  EcgNetConfig cfg = config_from_json(header.at("config"));
  EcgNet net(cfg, 0);
  const auto& tensors = header.at("tensors");
  if (tensors.size() != net.parameter_count()) {
    throw DataError("checkpoint: tensor count does not match architecture");
  }
  for (std::size_t i = 0; i < net.parameter_count(); ++i) {
    const auto& entry = tensors.at(i);
    const std::string name = entry.at("name").get<std::string>();
    if (name != net.parameters()[i].name) {
      throw DataError("checkpoint: unexpected tensor '" + name + "'");
    }
    Shape shape = entry.at("shape").get<Shape>();
    Tensor t(shape);
    is.read(reinterpret_cast<char*>(t.ptr()),
            static_cast<std::streamsize>(t.numel() * sizeof(double)));
    if (!is) throw DataError("checkpoint: truncated payload in " + path.string());
    net.assign_parameter(i, std::move(t));
  }

  std::map<std::string, std::string> meta;
  if (header.contains("meta")) {
    for (auto& [key, val] : header.at("meta").items()) meta[key] = val.get<std::string>();
  }
  return {std::move(net), std::move(meta)};
}

std::string model_checksum(const EcgNet& net) {
  std::uint64_t h = 0xcbf29ce484222325ULL;
  for (const NamedParam& p : net.parameters()) {
    const auto data = p.node->value().data();
    h = fnv1a64(data.data(), data.size() * sizeof(double), h);
  }
  std::ostringstream os;
  os << std::hex;
  os.width(16);
  os.fill('0');
  os << h;
  return os.str();
}

}  // namespace ecgrobust
