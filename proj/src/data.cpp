#include "ecgrobust/data.hpp"

#include <algorithm>
#include <bit>
#include <charconv>
#include <cmath>
#include <fstream>
#include <map>
#include <numbers>
#include <sstream>
#include <utility>

#include <json.hpp>

#include "ecgrobust/errors.hpp"

static_assert(std::endian::native == std::endian::little,
              "pack container assumes a little-endian host");

namespace ecgrobust {

namespace {

constexpr std::int64_t kRawLeads = 12;
constexpr std::int64_t kKeptLeads = 8;
// leads III, aVR, aVL, aVF are linear combinations of I and II
constexpr std::int64_t kKeptIndex[kKeptLeads] = {0, 1, 6, 7, 8, 9, 10, 11};

std::vector<std::string> split_csv_line(const std::string& line) {
  std::vector<std::string> out;
  std::string cur;
  for (char ch : line) {
    if (ch == ',') {
      out.push_back(cur);
      cur.clear();
    } else if (ch != '\r') {
      cur.push_back(ch);
    }
  }
  out.push_back(cur);
  return out;
}

std::string trim(const std::string& s) {
  std::size_t b = s.find_first_not_of(" \t");
  if (b == std::string::npos) return "";
  std::size_t e = s.find_last_not_of(" \t");
  return s.substr(b, e - b + 1);
}

bool parse_double(const std::string& s, double& out) {
  const std::string t = trim(s);
  if (t.empty()) return false;
  const char* first = t.data();
  const char* last = t.data() + t.size();
  auto res = std::from_chars(first, last, out);
  return res.ec == std::errc{} && res.ptr == last;
}

Tensor read_signal_csv(const std::filesystem::path& path, const std::string& id) {
  std::ifstream is(path);
  if (!is) throw DataError("record " + id + ": missing signal file " + path.string());
  std::vector<std::vector<double>> rows;
  std::string line;
  std::size_t lineno = 0;
  while (std::getline(is, line)) {
    ++lineno;
    if (trim(line).empty()) continue;
    const auto cells = split_csv_line(line);
    if (static_cast<std::int64_t>(cells.size()) != kRawLeads) {
      throw DataError("record " + id + ": " + path.string() + " line " +
                      std::to_string(lineno) + " has " + std::to_string(cells.size()) +
                      " columns, expected 12");
    }
    std::vector<double> row(kRawLeads);
    for (std::int64_t j = 0; j < kRawLeads; ++j) {
      if (!parse_double(cells[static_cast<std::size_t>(j)], row[static_cast<std::size_t>(j)])) {
        throw DataError("record " + id + ": non-numeric cell at " + path.string() + " line " +
                        std::to_string(lineno) + " column " + std::to_string(j + 1));
      }
    }
    rows.push_back(std::move(row));
  }
  if (rows.empty()) throw DataError("record " + id + ": empty signal file " + path.string());
  const std::int64_t len = static_cast<std::int64_t>(rows.size());
  Tensor leads({kRawLeads, len});
  for (std::int64_t t = 0; t < len; ++t)
    for (std::int64_t j = 0; j < kRawLeads; ++j)
      leads.ptr()[j * len + t] = rows[static_cast<std::size_t>(t)][static_cast<std::size_t>(j)];
  return leads;
}

}  // namespace

std::vector<EcgRecord> load_dataset(const std::filesystem::path& signal_dir,
                                    const std::filesystem::path& reference_csv) {
  std::ifstream is(reference_csv);
  if (!is) throw DataError("missing reference file " + reference_csv.string());
  std::string line;
  if (!std::getline(is, line)) throw DataError("empty reference file " + reference_csv.string());
  {
    const auto header = split_csv_line(line);
    if (header.empty() || trim(header[0]) != "Recording") {
      throw DataError("reference file " + reference_csv.string() +
                      ": first column must be 'Recording'");
    }
  }

  std::vector<EcgRecord> records;
  std::size_t lineno = 1;
  while (std::getline(is, line)) {
    ++lineno;
    if (trim(line).empty()) continue;
    const auto cells = split_csv_line(line);
    if (cells.size() < 2 || cells.size() > 4) {
      throw DataError("reference line " + std::to_string(lineno) + ": expected 2-4 columns");
    }
    EcgRecord rec;
    rec.id = trim(cells[0]);
    if (rec.id.empty()) throw DataError("reference line " + std::to_string(lineno) + ": empty id");
    for (std::size_t j = 1; j < cells.size(); ++j) {
      const std::string cell = trim(cells[j]);
      if (cell.empty()) continue;
      double v = 0.0;
      if (!parse_double(cell, v) || v != std::floor(v) || v < 1 || v > 9) {
        throw DataError("reference line " + std::to_string(lineno) + ": bad label '" + cell +
                        "' for record " + rec.id);
      }
      rec.labels.push_back(static_cast<int>(v) - 1);  // file labels are 1..9
    }
    if (rec.labels.empty()) {
      throw DataError("reference line " + std::to_string(lineno) + ": record " + rec.id +
                      " has no label");
    }
    rec.leads = read_signal_csv(signal_dir / (rec.id + ".csv"), rec.id);
    records.push_back(std::move(rec));
  }
  std::sort(records.begin(), records.end(),
            [](const EcgRecord& a, const EcgRecord& b) { return a.id < b.id; });
  return records;
}

Tensor prepare_leads(const Tensor& leads12, std::int64_t target_len) {
  if (leads12.rank() != 2 || leads12.dim(0) != kRawLeads) {
    throw ParameterError("prepare_leads: expected [12,L] input, got " +
                         shape_string(leads12.shape()));
  }
  const std::int64_t len = leads12.dim(1);
  const std::int64_t keep = std::min(len, target_len);
  Tensor core({kKeptLeads, keep});
  for (std::int64_t j = 0; j < kKeptLeads; ++j) {
    const double* src = leads12.ptr() + kKeptIndex[j] * len;
    double scale = 0.0;
    for (std::int64_t t = 0; t < keep; ++t) scale = std::max(scale, std::fabs(src[t]));
    if (scale == 0.0) scale = 1.0;
    double* dst = core.ptr() + j * keep;
    for (std::int64_t t = 0; t < keep; ++t) dst[t] = src[t] / scale;
  }
  return core;
}

Placed place(const Tensor& core, std::int64_t target_len, std::int64_t offset) {
  if (core.rank() != 2 || core.dim(0) != kKeptLeads) {
    throw ParameterError("place: expected [8,L] core, got " + shape_string(core.shape()));
  }
  const std::int64_t len = core.dim(1);
  if (len > target_len) throw ParameterError("place: core longer than target window");
  if (offset < 0 || offset > target_len - len) {
    throw ParameterError("place: offset " + std::to_string(offset) + " out of range");
  }
  Placed out;
  out.signal = Tensor({kKeptLeads, target_len});
  out.mask = Tensor({target_len});
  for (std::int64_t j = 0; j < kKeptLeads; ++j) {
    const double* src = core.ptr() + j * len;
    double* dst = out.signal.ptr() + j * target_len + offset;
    std::copy(src, src + len, dst);
  }
  for (std::int64_t t = 0; t < len; ++t) out.mask.ptr()[offset + t] = 1.0;
  return out;
}

Placed preprocess(const EcgRecord& record, std::int64_t target_len, Rng& rng) {
  if (record.labels.size() != 1) {
    throw ParameterError("preprocess: record " + record.id +
                         " has multiple labels; filter first");
  }
  Tensor core = prepare_leads(record.leads, target_len);
  const std::int64_t offset = rng.uniform_int(0, target_len - core.dim(1));
  return place(core, target_len, offset);
}

DatasetSplit split_and_balance(std::vector<PreparedRecord> records, std::uint64_t seed,
                               int n_classes) {
  if (n_classes < 2) throw ParameterError("split: need at least two classes");
  std::sort(records.begin(), records.end(),
            [](const PreparedRecord& a, const PreparedRecord& b) { return a.id < b.id; });

  std::vector<std::vector<std::size_t>> by_class(static_cast<std::size_t>(n_classes));
  for (std::size_t i = 0; i < records.size(); ++i) {
    const int y = records[i].label;
    if (y < 0 || y >= n_classes) {
      throw DataError("split: record " + records[i].id + " has out-of-range label " +
                      std::to_string(y));
    }
    by_class[static_cast<std::size_t>(y)].push_back(i);
  }

  DatasetSplit out;
  out.split_seed = seed;
  std::vector<std::vector<std::size_t>> train_by_class(static_cast<std::size_t>(n_classes));
  for (int c = 0; c < n_classes; ++c) {
    auto& idx = by_class[static_cast<std::size_t>(c)];
    if (static_cast<int>(idx.size()) < kValPerClass + kTestPerClass) {
      throw DataError("split: class " + std::to_string(c) + " has only " +
                      std::to_string(idx.size()) + " records, needs at least " +
                      std::to_string(kValPerClass + kTestPerClass));
    }
    Rng rng(derive_seed(seed, "split", static_cast<std::uint64_t>(c)));
    rng.shuffle(idx);
    std::size_t p = 0;
    for (int i = 0; i < kValPerClass; ++i) out.val.push_back(records[idx[p++]]);
    for (int i = 0; i < kTestPerClass; ++i) out.test.push_back(records[idx[p++]]);
    for (; p < idx.size(); ++p) train_by_class[static_cast<std::size_t>(c)].push_back(idx[p]);
  }

  std::size_t largest = 0;
  for (const auto& v : train_by_class) largest = std::max(largest, v.size());
  for (int c = 0; c < n_classes; ++c) {
    const auto& pool = train_by_class[static_cast<std::size_t>(c)];
    for (std::size_t i : pool) out.train.push_back(records[i]);
    Rng rng(derive_seed(seed, "upsample", static_cast<std::uint64_t>(c)));
    for (std::size_t i = pool.size(); i < largest; ++i) {
      const std::size_t pick = static_cast<std::size_t>(
          rng.uniform_int(0, static_cast<std::int64_t>(pool.size()) - 1));
      out.train.push_back(records[pool[pick]]);
    }
  }
  return out;
}

std::int64_t synth_bump_width(std::int64_t length, int n_classes) {
  const std::int64_t crowded = (4 * length / 5) / std::max(1, n_classes - 1);
  return std::max<std::int64_t>(16, std::min(length / 4, crowded));
}

std::vector<PreparedRecord> synth_dataset(int n_per_class, std::int64_t length, int n_classes,
                                          std::uint64_t seed) {
  if (length < 64) throw ParameterError("synth: length must be >= 64");
  if (n_per_class < 1 || n_classes < 2) throw ParameterError("synth: bad counts");

  // bump peaks sit a little above the noise floor so max-abs scaling lands
  // every class in a comparable range; the long coherent extent keeps bump
  // counts separable by a wide margin after downsampling
  static constexpr double kAmp[kKeptLeads] = {0.30, -0.24, 0.18, -0.28, 0.21, -0.15, 0.26, -0.20};
  const std::int64_t width = synth_bump_width(length, n_classes);

  std::vector<PreparedRecord> out;
  out.reserve(static_cast<std::size_t>(n_per_class) * static_cast<std::size_t>(n_classes));
  for (int c = 0; c < n_classes; ++c) {
    for (int i = 0; i < n_per_class; ++i) {
      Rng rng(derive_seed(seed, "synth", static_cast<std::uint64_t>(c),
                          static_cast<std::uint64_t>(i)));
      // valid length stays within [0.9*length, length]: bump count then maps
      // to a per-class density band with no overlap between classes
      const std::int64_t lo = (9 * length + 9) / 10;
      const std::int64_t valid = rng.uniform_int(lo, length);
      Tensor core({kKeptLeads, valid});
      for (double& v : core.data()) v = rng.uniform(-0.1, 0.1);

      if (c > 0) {
        const std::int64_t slot = valid / c;
        if (slot < width) throw ParameterError("synth: length too small for class count");
        for (int b = 0; b < c; ++b) {
          const std::int64_t base = b * slot;
          const std::int64_t pos = rng.uniform_int(base, base + slot - width);
          for (std::int64_t t = 0; t < width; ++t) {
            const double window =
                0.5 - 0.5 * std::cos(2.0 * std::numbers::pi * static_cast<double>(t) /
                                     static_cast<double>(width - 1));
            for (std::int64_t ch = 0; ch < kKeptLeads; ++ch) {
              core.ptr()[ch * valid + pos + t] += kAmp[ch] * window;
            }
          }
        }
      }

      for (std::int64_t ch = 0; ch < kKeptLeads; ++ch) {
        double scale = 0.0;
        for (std::int64_t t = 0; t < valid; ++t)
          scale = std::max(scale, std::fabs(core.ptr()[ch * valid + t]));
        if (scale == 0.0) scale = 1.0;
        for (std::int64_t t = 0; t < valid; ++t) core.ptr()[ch * valid + t] /= scale;
      }

      char id[32];
      std::snprintf(id, sizeof(id), "synth-%d-%05d", c, i);
      out.push_back({id, c, std::move(core)});
    }
  }
  return out;
}

namespace {
constexpr char kPackMagic[8] = {'E', 'C', 'G', 'P', 'A', 'C', 'K', '1'};
}

void save_pack(const std::filesystem::path& path, const std::vector<PreparedRecord>& records) {
  nlohmann::json header;
  header["format_version"] = 1;
  nlohmann::json recs = nlohmann::json::array();
  for (const PreparedRecord& r : records) {
    recs.push_back({{"id", r.id},
                    {"label", r.label},
                    {"channels", r.core.dim(0)},
                    {"length", r.core.dim(1)}});
  }
  header["records"] = recs;
  const std::string hs = header.dump();

  std::ofstream os(path, std::ios::binary | std::ios::trunc);
  if (!os) throw DataError("pack: cannot open for writing: " + path.string());
  os.write(kPackMagic, sizeof(kPackMagic));
  const std::uint64_t hlen = hs.size();
  os.write(reinterpret_cast<const char*>(&hlen), sizeof(hlen));
  os.write(hs.data(), static_cast<std::streamsize>(hs.size()));
  for (const PreparedRecord& r : records) {
    os.write(reinterpret_cast<const char*>(r.core.ptr()),
             static_cast<std::streamsize>(r.core.numel() * sizeof(double)));
  }
  if (!os) throw DataError("pack: write failed: " + path.string());
}

std::vector<PreparedRecord> load_pack(const std::filesystem::path& path) {
  std::ifstream is(path, std::ios::binary);
  if (!is) throw DataError("pack: cannot open: " + path.string());
  char magic[8];
  is.read(magic, sizeof(magic));
  if (!is || std::memcmp(magic, kPackMagic, sizeof(kPackMagic)) != 0) {
    throw DataError("pack: bad magic in " + path.string());
  }
  std::uint64_t hlen = 0;
  is.read(reinterpret_cast<char*>(&hlen), sizeof(hlen));
  std::string hs(hlen, '\0');
  is.read(hs.data(), static_cast<std::streamsize>(hlen));
  if (!is) throw DataError("pack: truncated header in " + path.string());

  nlohmann::json header;
  try {
    header = nlohmann::json::parse(hs);
  } catch (const nlohmann::json::exception& e) {
    throw DataError("pack: malformed header in " + path.string() + ": " + e.what());
  }

  std::vector<PreparedRecord> out;
  for (const auto& entry : header.at("records")) {
    PreparedRecord r;
    r.id = entry.at("id").get<std::string>();
    r.label = entry.at("label").get<int>();
    const std::int64_t ch = entry.at("channels").get<std::int64_t>();
    const std::int64_t len = entry.at("length").get<std::int64_t>();
    Tensor t({ch, len});
    is.read(reinterpret_cast<char*>(t.ptr()),
            static_cast<std::streamsize>(t.numel() * sizeof(double)));
    if (!is) throw DataError("pack: truncated payload in " + path.string());
    r.core = std::move(t);
    out.push_back(std::move(r));
  }
  return out;
}

MaskedBatch make_batch(const std::vector<const PreparedRecord*>& records,
                       std::int64_t target_len, const std::vector<std::int64_t>& offsets) {
  if (records.empty()) throw ParameterError("make_batch: empty batch");
  if (offsets.size() != records.size()) {
    throw ParameterError("make_batch: offsets do not match records");
  }
  const std::int64_t n = static_cast<std::int64_t>(records.size());
  MaskedBatch batch;
  batch.signals = Tensor({n, kKeptLeads, target_len});
  batch.mask = Tensor({n, target_len});
  batch.labels.resize(static_cast<std::size_t>(n));
  for (std::int64_t i = 0; i < n; ++i) {
    const PreparedRecord& rec = *records[static_cast<std::size_t>(i)];
    Placed p = place(rec.core, target_len, offsets[static_cast<std::size_t>(i)]);
    std::copy(p.signal.data().begin(), p.signal.data().end(),
              batch.signals.ptr() + i * kKeptLeads * target_len);
    std::copy(p.mask.data().begin(), p.mask.data().end(), batch.mask.ptr() + i * target_len);
    batch.labels[static_cast<std::size_t>(i)] = rec.label;
  }
  return batch;
}

std::int64_t fixed_offset(const PreparedRecord& rec, std::int64_t target_len,
                          std::uint64_t seed) {
  Rng rng(derive_seed(seed, "offset-fixed", fnv1a64(rec.id)));
  return rng.uniform_int(0, target_len - rec.core.dim(1));
}

}  // namespace ecgrobust
