#include "protosteer/io.hpp"

#include <bit>
#include <cstdio>
#include <fstream>
#include <stdexcept>

static_assert(std::endian::native == std::endian::little,
              "file formats are little-endian; big-endian hosts are not supported");

namespace ps::io {

namespace {

constexpr int kCheckpointVersion = 1;
constexpr int kDumpVersion = 1;

std::ofstream open_out(const std::string& path, bool binary) {
  std::ofstream f(path, binary ? (std::ios::out | std::ios::binary) : std::ios::out);
  if (!f) throw std::runtime_error("cannot open for writing: " + path);
  return f;
}

std::ifstream open_in(const std::string& path, bool binary) {
  std::ifstream f(path, binary ? (std::ios::in | std::ios::binary) : std::ios::in);
  if (!f) throw std::runtime_error("cannot open: " + path);
  return f;
}

void write_raw(std::ofstream& f, const void* p, size_t n) {
  f.write(static_cast<const char*>(p), static_cast<std::streamsize>(n));
  if (!f) throw std::runtime_error("write failed");
}

void read_raw(std::ifstream& f, void* p, size_t n, const std::string& path) {
  f.read(static_cast<char*>(p), static_cast<std::streamsize>(n));
  if (f.gcount() != static_cast<std::streamsize>(n)) {
    throw std::runtime_error("truncated file: " + path);
  }
}

json read_header_line(std::ifstream& f, const std::string& path) {
  std::string line;
  if (!std::getline(f, line)) throw std::runtime_error("missing header line: " + path);
  return json::parse(line);
}

}  // namespace

void Checkpoint::put(std::string name, numkit::Tensor t) {
  tensors.push_back({std::move(name), std::move(t)});
}

bool Checkpoint::has(const std::string& name) const {
  for (const auto& nt : tensors) {
    if (nt.name == name) return true;
  }
  return false;
}

const numkit::Tensor& Checkpoint::get(const std::string& name) const {
  for (const auto& nt : tensors) {
    if (nt.name == name) return nt.tensor;
  }
  throw std::out_of_range("checkpoint has no tensor named '" + name + "'");
}

void save_checkpoint(const std::string& path, const Checkpoint& ckpt) {
  json header = ckpt.header;
  header["format_version"] = kCheckpointVersion;
  json dir = json::array();
  for (const auto& nt : ckpt.tensors) {
    dir.push_back(json{{"name", nt.name}, {"shape", nt.tensor.shape()}});
  }
  header["tensors"] = dir;
  auto f = open_out(path, true);
  const std::string h = header.dump();
  write_raw(f, h.data(), h.size());
  write_raw(f, "\n", 1);
  for (const auto& nt : ckpt.tensors) {
    write_raw(f, nt.tensor.data(), sizeof(float) * static_cast<size_t>(nt.tensor.numel()));
  }
}

Checkpoint load_checkpoint(const std::string& path) {
  auto f = open_in(path, true);
  Checkpoint ckpt;
  ckpt.header = read_header_line(f, path);
  if (ckpt.header.value("format_version", -1) != kCheckpointVersion) {
    throw std::runtime_error("unsupported checkpoint version in " + path);
  }
  for (const auto& entry : ckpt.header.at("tensors")) {
    const std::string name = entry.at("name").get<std::string>();
    const auto shape = entry.at("shape").get<std::vector<int64_t>>();
    numkit::Tensor t(shape);
    read_raw(f, t.data(), sizeof(float) * static_cast<size_t>(t.numel()), path);
    ckpt.tensors.push_back({name, std::move(t)});
  }
  ckpt.header.erase("tensors");
  return ckpt;
}

void save_dump(const std::string& path, const DumpHeader& header, const std::vector<DumpRecord>& records) {
  json h{{"format_version", kDumpVersion}, {"layer", header.layer},     {"site", header.site},
         {"num_heads", header.num_heads},  {"width", header.width},     {"examples", records.size()}};
  auto f = open_out(path, true);
  const std::string hs = h.dump();
  write_raw(f, hs.data(), hs.size());
  write_raw(f, "\n", 1);
  for (const auto& r : records) {
    const size_t want = static_cast<size_t>(r.positions) * static_cast<size_t>(header.num_heads) *
                        static_cast<size_t>(header.width);
    if (r.data.size() != want) {
      throw std::invalid_argument("dump record: " + std::to_string(r.data.size()) + " floats, expected " +
                                  std::to_string(want));
    }
    const int32_t label = r.label;
    const int32_t positions = r.positions;
    write_raw(f, &label, sizeof(label));
    write_raw(f, &positions, sizeof(positions));
    write_raw(f, r.data.data(), sizeof(float) * r.data.size());
  }
}

Dump load_dump(const std::string& path) {
  auto f = open_in(path, true);
  const json h = read_header_line(f, path);
  if (h.value("format_version", -1) != kDumpVersion) {
    throw std::runtime_error("unsupported dump version in " + path);
  }
  Dump d;
  d.header.layer = h.at("layer").get<int>();
  d.header.site = h.at("site").get<std::string>();
  d.header.num_heads = h.at("num_heads").get<int>();
  d.header.width = h.at("width").get<int>();
  d.header.examples = h.at("examples").get<int64_t>();
  d.records.reserve(static_cast<size_t>(d.header.examples));
  for (int64_t i = 0; i < d.header.examples; ++i) {
    DumpRecord r;
    int32_t label = 0, positions = 0;
    read_raw(f, &label, sizeof(label), path);
    read_raw(f, &positions, sizeof(positions), path);
    r.label = label;
    r.positions = positions;
    r.data.resize(static_cast<size_t>(positions) * static_cast<size_t>(d.header.num_heads) *
                  static_cast<size_t>(d.header.width));
    read_raw(f, r.data.data(), sizeof(float) * r.data.size(), path);
    d.records.push_back(std::move(r));
  }
  return d;
}

void save_examples(const std::string& path, const std::vector<stylegen::StyledExample>& examples) {
  auto f = open_out(path, false);
  for (const auto& ex : examples) {
    json j{{"prompt", ex.prompt}, {"response", ex.response}, {"label", ex.label}};
    f << j.dump() << "\n";
  }
  if (!f) throw std::runtime_error("write failed: " + path);
}

std::vector<stylegen::StyledExample> load_examples(const std::string& path) {
  auto f = open_in(path, false);
  std::vector<stylegen::StyledExample> out;
  std::string line;
  while (std::getline(f, line)) {
    if (line.empty()) continue;
    const json j = json::parse(line);
    stylegen::StyledExample ex;
    ex.prompt = j.at("prompt").get<std::vector<int>>();
    ex.response = j.at("response").get<std::vector<int>>();
    ex.label = j.at("label").get<int>();
    out.push_back(std::move(ex));
  }
  return out;
}

void save_specs(const std::string& path, const std::vector<stylegen::StyleSpec>& specs) {
  json arr = json::array();
  for (const auto& s : specs) {
    arr.push_back(json{{"class_id", s.class_id}, {"name", s.name}, {"probs", s.probs}});
  }
  save_json(path, arr);
}

std::vector<stylegen::StyleSpec> load_specs(const std::string& path) {
  const json arr = load_json(path);
  std::vector<stylegen::StyleSpec> out;
  for (const auto& j : arr) {
    stylegen::StyleSpec s;
    s.class_id = j.at("class_id").get<int>();
    s.name = j.at("name").get<std::string>();
    s.probs = j.at("probs").get<std::vector<double>>();
    out.push_back(std::move(s));
  }
  return out;
}

void write_text(const std::string& path, const std::string& content) {
  auto f = open_out(path, true);
  write_raw(f, content.data(), content.size());
}

std::string read_text(const std::string& path) {
  auto f = open_in(path, true);
  std::string s((std::istreambuf_iterator<char>(f)), std::istreambuf_iterator<char>());
  return s;
}

void save_json(const std::string& path, const json& j) { write_text(path, j.dump(2) + "\n"); }

json load_json(const std::string& path) { return json::parse(read_text(path)); }

void write_csv(const std::string& path, const std::vector<std::string>& header,
               const std::vector<std::vector<std::string>>& rows) {
  std::string out;
  for (size_t i = 0; i < header.size(); ++i) {
    if (i) out += ",";
    out += header[i];
  }
  out += "\n";
  for (const auto& row : rows) {
    if (row.size() != header.size()) {
      throw std::invalid_argument("csv row has " + std::to_string(row.size()) + " cells, header has " +
                                  std::to_string(header.size()));
    }
    for (size_t i = 0; i < row.size(); ++i) {
      if (i) out += ",";
      out += row[i];
    }
    out += "\n";
  }
  write_text(path, out);
}

std::string fmt(double v, int digits) {
  char buf[64];
  std::snprintf(buf, sizeof(buf), "%.*f", digits, v);
  return std::string(buf);
}

}  // namespace ps::io
