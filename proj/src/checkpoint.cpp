#include "toylm/checkpoint.hpp"

#include <bit>
#include <cstring>
#include <fstream>
#include <sstream>

static_assert(std::endian::native == std::endian::little,
              "checkpoint format assumes a little-endian host");

namespace toylm {

namespace {

constexpr const char* kMagic = "toylm_ckpt_v1";

struct ManifestEntry {
  std::string name;
  DType dtype;
  Shape shape;
  size_t offset;
  size_t bytes;
};

size_t elem_bytes(DType dt) { return dt == DType::f32 ? 4 : 8; }

}  // namespace

const Tensor* NamedTensors::find(const std::string& name) const {
  for (const auto& [n, t] : items)
    if (n == name) return &t;
  return nullptr;
}

void save_checkpoint(const std::string& path, const NamedTensors& tensors) {
  std::ostringstream manifest;
  manifest << kMagic << "\n";
  size_t offset = 0;
  for (const auto& [name, t] : tensors.items) {
    if (name.find_first_of(" \t\n") != std::string::npos)
      throw ContractError("checkpoint: tensor name contains whitespace: " +
                          name);
    const size_t bytes = t.size() * elem_bytes(t.dtype());
    manifest << "tensor " << name << ' '
             << (t.dtype() == DType::f32 ? "f32" : "f64") << ' ' << t.ndim();
    for (const size_t e : t.shape()) manifest << ' ' << e;
    manifest << ' ' << offset << ' ' << bytes << "\n";
    offset += bytes;
  }
  manifest << "data\n";

  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw ContractError("checkpoint: cannot open for write: " + path);
  const std::string header = manifest.str();
  out.write(header.data(), static_cast<std::streamsize>(header.size()));
  for (const auto& [name, t] : tensors.items) {
    const auto vals = t.values();
    if (t.dtype() == DType::f32) {
      std::vector<float> buf(vals.size());
      for (size_t i = 0; i < vals.size(); ++i)
        buf[i] = static_cast<float>(vals[i]);
      out.write(reinterpret_cast<const char*>(buf.data()),
                static_cast<std::streamsize>(buf.size() * 4));
    } else {
      out.write(reinterpret_cast<const char*>(vals.data()),
                static_cast<std::streamsize>(vals.size() * 8));
    }
  }
  if (!out) throw ContractError("checkpoint: write failed: " + path);
}

NamedTensors load_checkpoint(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw ContractError("checkpoint: cannot open: " + path);
  std::string line;
  if (!std::getline(in, line) || line != kMagic)
    throw ContractError("checkpoint: bad magic in " + path);

  std::vector<ManifestEntry> entries;
  while (std::getline(in, line)) {
    if (line == "data") break;
    std::istringstream ls(line);
    std::string kw;
    ls >> kw;
    if (kw != "tensor")
      throw ContractError("checkpoint: unexpected manifest line: " + line);
    ManifestEntry e;
    std::string dt;
    size_t ndim = 0;
    ls >> e.name >> dt >> ndim;
    if (dt != "f32" && dt != "f64")
      throw ContractError("checkpoint: unknown dtype " + dt);
    e.dtype = dt == "f32" ? DType::f32 : DType::f64;
    e.shape.resize(ndim);
    for (size_t i = 0; i < ndim; ++i) ls >> e.shape[i];
    ls >> e.offset >> e.bytes;
    if (!ls)
      throw ContractError("checkpoint: malformed manifest line: " + line);
    entries.push_back(std::move(e));
  }
  if (line != "data")
    throw ContractError("checkpoint: missing data section in " + path);

  const std::streampos data_start = in.tellg();
  NamedTensors out;
  for (const auto& e : entries) {
    size_t numel = 1;
    for (const size_t d : e.shape) numel *= d;
    if (numel * elem_bytes(e.dtype) != e.bytes)
      throw ContractError("checkpoint: byte count mismatch for " + e.name);
    in.seekg(data_start + static_cast<std::streamoff>(e.offset));
    std::vector<double> vals(numel);
    if (e.dtype == DType::f32) {
      std::vector<float> buf(numel);
      in.read(reinterpret_cast<char*>(buf.data()),
              static_cast<std::streamsize>(e.bytes));
      for (size_t i = 0; i < numel; ++i) vals[i] = buf[i];
    } else {
      in.read(reinterpret_cast<char*>(vals.data()),
              static_cast<std::streamsize>(e.bytes));
    }
    if (!in) throw ContractError("checkpoint: truncated data for " + e.name);
    out.add(e.name, Tensor::from_data(std::move(vals), e.shape, e.dtype));
  }
  return out;
}

}  // namespace toylm
