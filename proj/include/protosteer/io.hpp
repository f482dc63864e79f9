#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "protosteer/stylegen.hpp"
#include "protosteer/tensor.hpp"

namespace ps::io {

using json = nlohmann::ordered_json;

// ---------------------------------------------------------------------------
// Checkpoint container: one JSON header line (format version, config echo,
// tensor directory) followed by the tensors' raw float32 data, little-endian,
// in directory order. Used for LM weights, SAE banks and prototype banks.
// ---------------------------------------------------------------------------

struct NamedTensor {
  std::string name;
  numkit::Tensor tensor;
};

struct Checkpoint {
  json header;  // caller-owned config echo; "format_version" and "tensors" are managed on save
  std::vector<NamedTensor> tensors;

  void put(std::string name, numkit::Tensor t);
  bool has(const std::string& name) const;
  const numkit::Tensor& get(const std::string& name) const;  // missing name -> error naming it
};

void save_checkpoint(const std::string& path, const Checkpoint& ckpt);
Checkpoint load_checkpoint(const std::string& path);

// ---------------------------------------------------------------------------
// Activation dump: one JSON header line (layer, site, heads, width, example
// count) followed by per-example records: int32 label, int32 position count,
// then positions*heads*width float32 values, little-endian.
// ---------------------------------------------------------------------------

struct DumpHeader {
  int layer = 0;
  std::string site;  // "query" or "residual"
  int num_heads = 0;
  int width = 0;  // per-head width for query site, full width for residual
  int64_t examples = 0;
};

struct DumpRecord {
  int label = 0;
  int positions = 0;
  std::vector<float> data;  // positions * num_heads * width, position-major
};

void save_dump(const std::string& path, const DumpHeader& header, const std::vector<DumpRecord>& records);
struct Dump {
  DumpHeader header;
  std::vector<DumpRecord> records;
};
Dump load_dump(const std::string& path);

// ---------------------------------------------------------------------------
// Corpus and style specs
// ---------------------------------------------------------------------------

// One JSON object per line: {"prompt": [...], "response": [...], "label": n}
void save_examples(const std::string& path, const std::vector<stylegen::StyledExample>& examples);
std::vector<stylegen::StyledExample> load_examples(const std::string& path);

void save_specs(const std::string& path, const std::vector<stylegen::StyleSpec>& specs);
std::vector<stylegen::StyleSpec> load_specs(const std::string& path);

// ---------------------------------------------------------------------------
// Small file helpers
// ---------------------------------------------------------------------------

void write_text(const std::string& path, const std::string& content);
std::string read_text(const std::string& path);
void save_json(const std::string& path, const json& j);
json load_json(const std::string& path);

// Comma-separated table with a header row; cells are written verbatim.
void write_csv(const std::string& path, const std::vector<std::string>& header,
               const std::vector<std::vector<std::string>>& rows);

// Fixed decimal formatting so reports are byte-stable across runs.
std::string fmt(double v, int digits = 6);

}  // namespace ps::io
