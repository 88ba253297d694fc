#pragma once

#include <filesystem>
#include <map>
#include <string>

#include "ecgrobust/model.hpp"

namespace ecgrobust {

// Binary container: magic, JSON header (config, tensor index, metadata),
// then the raw little-endian float64 payload. Round-trips bit-exactly.
void save_checkpoint(const EcgNet& net, const std::filesystem::path& path,
                     const std::map<std::string, std::string>& meta = {});

struct LoadedCheckpoint {
  EcgNet net;
  std::map<std::string, std::string> meta;
};

LoadedCheckpoint load_checkpoint(const std::filesystem::path& path);

// FNV-1a over the parameter payload; identifies a set of weights in reports.
std::string model_checksum(const EcgNet& net);

}  // namespace ecgrobust
