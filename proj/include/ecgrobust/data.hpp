#pragma once

#include <cstdint>
#include <filesystem>
#include <string>
#include <vector>

#include "ecgrobust/model.hpp"
#include "ecgrobust/rng.hpp"
#include "ecgrobust/tensor.hpp"

namespace ecgrobust {

// A raw 12-lead recording plus its 1..3 class labels (0-based).
struct EcgRecord {
  std::string id;
  Tensor leads;  // [12, L]
  std::vector<int> labels;
};

// Directory of <id>.csv signal files (12 numeric columns, one row per
// sample) indexed by a REFERENCE.csv with columns
// Recording,First_label,Second_label,Third_label (labels 1..9, empty = absent).
std::vector<EcgRecord> load_dataset(const std::filesystem::path& signal_dir,
                                    const std::filesystem::path& reference_csv);

// A record after lead selection, per-lead max-abs scaling and truncation;
// still variable-length. Placement into the fixed window happens per use.
struct PreparedRecord {
  std::string id;
  int label = 0;
  Tensor core;  // [8, valid_len], valid_len <= target_len
};

struct Placed {
  Tensor signal;  // [8, target_len]
  Tensor mask;    // [target_len]
};

// keep leads {I, II, V1..V6}, scale each by its max abs value (zero leads
// divide by 1), truncate to target_len
Tensor prepare_leads(const Tensor& leads12, std::int64_t target_len);

Placed place(const Tensor& core, std::int64_t target_len, std::int64_t offset);

// full preprocessing of one record: prepare + uniformly random placement
Placed preprocess(const EcgRecord& record, std::int64_t target_len, Rng& rng);

struct DatasetSplit {
  std::vector<PreparedRecord> train;  // upsampled to balance
  std::vector<PreparedRecord> val;    // val_per_class per class
  std::vector<PreparedRecord> test;   // test_per_class per class
  std::uint64_t split_seed = 0;
};

constexpr int kValPerClass = 5;
constexpr int kTestPerClass = 50;

// Seeded per-class draw of the validation and test sets, remainder upsampled
// with replacement until every class matches the largest one. Multi-label
// inputs are rejected upstream; records are processed in id order.
DatasetSplit split_and_balance(std::vector<PreparedRecord> records, std::uint64_t seed,
                               int n_classes);

// Synthetic desk-scale generator: class-c signals carry c template bumps on
// top of uniform baseline noise; valid lengths vary; channels are max-abs
// scaled like real data.
std::vector<PreparedRecord> synth_dataset(int n_per_class, std::int64_t length, int n_classes,
                                          std::uint64_t seed);

// width of the generator's bump template; wide enough that bump counts stay
// separable after heavy downsampling, small enough that the most crowded
// class still fits its bumps
std::int64_t synth_bump_width(std::int64_t length, int n_classes);

// packed container for prepared records (header + payload, little-endian)
void save_pack(const std::filesystem::path& path, const std::vector<PreparedRecord>& records);
std::vector<PreparedRecord> load_pack(const std::filesystem::path& path);

// Assemble a batch by placing each record at the given offset
// (offsets.size() == records.size(); offset -1 = derive deterministically
// from the record id via seed).
MaskedBatch make_batch(const std::vector<const PreparedRecord*>& records,
                       std::int64_t target_len, const std::vector<std::int64_t>& offsets);

// deterministic placement offset for evaluation splits
std::int64_t fixed_offset(const PreparedRecord& rec, std::int64_t target_len,
                          std::uint64_t seed);

}  // namespace ecgrobust
