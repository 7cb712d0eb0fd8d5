#include "etg/io.h"

#include <cstdio>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <sstream>

#include "etg/common.h"

namespace etg::io {

namespace {

constexpr uint16_t kFormatVersion = 1;

// Little-endian encoders. The build targets LE hosts; memcpy of integral
// types is the layout contract either way because we serialize through
// these helpers only.
template <typename T>
void put(std::string& out, T v) {
  uint8_t buf[sizeof(T)];
  for (size_t i = 0; i < sizeof(T); ++i)
    buf[i] = uint8_t((uint64_t(v) >> (8 * i)) & 0xff);
  out.append(reinterpret_cast<const char*>(buf), sizeof(T));
}

void put_f32(std::string& out, float v) {
  uint32_t bits;
  std::memcpy(&bits, &v, 4);
  put<uint32_t>(out, bits);
}

void put_f64(std::string& out, double v) {
  uint64_t bits;
  std::memcpy(&bits, &v, 8);
  put<uint64_t>(out, bits);
}

struct Reader {
  const uint8_t* data;
  size_t size;
  size_t pos = 0;
  std::string path;

  void need(size_t n, const char* what) {
    if (pos + n > size) {
      std::ostringstream os;
      os << path << ": truncated file, needed " << n << " bytes for " << what
         << " at byte offset " << pos << " (file has " << size << ")";
      throw ValidationError(os.str());
    }
  }
  template <typename T>
  T get(const char* what) {
    need(sizeof(T), what);
    uint64_t v = 0;
    for (size_t i = 0; i < sizeof(T); ++i)
      v |= uint64_t(data[pos + i]) << (8 * i);
    pos += sizeof(T);
    return T(v);
  }
  float get_f32(const char* what) {
    uint32_t bits = get<uint32_t>(what);
    float f;
    std::memcpy(&f, &bits, 4);
    return f;
  }
  double get_f64(const char* what) {
    uint64_t bits = get<uint64_t>(what);
    double d;
    std::memcpy(&d, &bits, 8);
    return d;
  }
};

std::string read_file(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw ValidationError(path + ": cannot open file");
  std::ostringstream os;
  os << in.rdbuf();
  return os.str();
}

void encode_tensor_body(std::string& out, const Tensor& t, Dtype dtype) {
  put<uint32_t>(out, uint32_t(t.ndim()));
  for (size_t d : t.dims()) put<uint64_t>(out, uint64_t(d));
  if (dtype == Dtype::f32)
    for (size_t i = 0; i < t.size(); ++i) put_f32(out, float(t[i]));
  else
    for (size_t i = 0; i < t.size(); ++i) put_f64(out, t[i]);
}

Tensor decode_tensor_body(Reader& r, Dtype dtype) {
  const uint32_t ndim = r.get<uint32_t>("tensor ndim");
  if (ndim == 0 || ndim > 8)
    throw ValidationError(r.path + ": bad tensor rank " +
                          std::to_string(ndim));
  std::vector<size_t> dims(ndim);
  size_t numel = 1;
  for (uint32_t i = 0; i < ndim; ++i) {
    dims[i] = size_t(r.get<uint64_t>("tensor dim"));
    if (dims[i] == 0 || numel > (size_t(1) << 40) / dims[i])
      throw ValidationError(r.path + ": unreasonable tensor dims");
    numel *= dims[i];
  }
  std::vector<double> data(numel);
  if (dtype == Dtype::f32)
    for (size_t i = 0; i < numel; ++i) data[i] = double(r.get_f32("payload"));
  else
    for (size_t i = 0; i < numel; ++i) data[i] = r.get_f64("payload");
  return Tensor(std::move(dims), std::move(data));
}

}  // namespace

void atomic_write(const std::string& path, const void* data, size_t size) {
  namespace fs = std::filesystem;
  fs::path target(path);
  if (target.has_parent_path()) fs::create_directories(target.parent_path());
  const std::string tmp = path + ".tmp";
  {
    std::ofstream out(tmp, std::ios::binary | std::ios::trunc);
    if (!out) throw ValidationError(tmp + ": cannot open for writing");
    out.write(reinterpret_cast<const char*>(data), std::streamsize(size));
    if (!out) throw ValidationError(tmp + ": short write");
  }
  std::error_code ec;
  fs::rename(tmp, target, ec);
  if (ec) throw ValidationError(path + ": rename failed: " + ec.message());
}

void atomic_write_text(const std::string& path, const std::string& text) {
  atomic_write(path, text.data(), text.size());
}

void write_tensor(const std::string& path, const Tensor& t, Dtype dtype) {
  std::string out;
  out.append("ETGT", 4);
  put<uint16_t>(out, kFormatVersion);
  put<uint16_t>(out, uint16_t(dtype));
  encode_tensor_body(out, t, dtype);
  atomic_write(path, out.data(), out.size());
}

Tensor read_tensor(const std::string& path) {
  const std::string blob = read_file(path);
  Reader r{reinterpret_cast<const uint8_t*>(blob.data()), blob.size(), 0,
           path};
  r.need(4, "magic");
  if (std::memcmp(r.data, "ETGT", 4) != 0)
    throw ValidationError(path + ": bad magic, not an ETGT tensor file");
  r.pos = 4;
  const uint16_t version = r.get<uint16_t>("version");
  if (version != kFormatVersion)
    throw ValidationError(path + ": unsupported version " +
                          std::to_string(version));
  const uint16_t dtype = r.get<uint16_t>("dtype");
  if (dtype > 1)
    throw ValidationError(path + ": unknown dtype code " +
                          std::to_string(dtype));
  Tensor t = decode_tensor_body(r, Dtype(dtype));
  if (r.pos != r.size)
    throw ValidationError(path + ": " + std::to_string(r.size - r.pos) +
                          " trailing bytes after payload");
  return t;
}

Section Section::of_tensor(std::string name, Tensor t, bool f64) {
  Section s;
  s.name = std::move(name);
  s.kind = f64 ? 1 : 0;
  s.tensor = std::move(t);
  return s;
}

Section Section::of_bytes(std::string name, std::vector<uint8_t> b) {
  Section s;
  s.name = std::move(name);
  s.kind = 2;
  s.bytes = std::move(b);
  return s;
}

Section Section::of_string(std::string name, const std::string& str) {
  std::vector<uint8_t> b(str.begin(), str.end());
  return of_bytes(std::move(name), std::move(b));
}

Section Section::of_u64(std::string name, uint64_t v) {
  std::vector<uint8_t> b(8);
  for (int i = 0; i < 8; ++i) b[i] = uint8_t((v >> (8 * i)) & 0xff);
  return of_bytes(std::move(name), std::move(b));
}

const Tensor& Section::as_tensor() const {
  if (kind > 1)
    throw ValidationError("section '" + name + "' is not a tensor");
  return tensor;
}

std::string Section::as_string() const {
  if (kind != 2)
    throw ValidationError("section '" + name + "' is not a byte section");
  return std::string(bytes.begin(), bytes.end());
}

uint64_t Section::as_u64() const {
  if (kind != 2 || bytes.size() != 8)
    throw ValidationError("section '" + name + "' is not a u64");
  uint64_t v = 0;
  for (int i = 0; i < 8; ++i) v |= uint64_t(bytes[i]) << (8 * i);
  return v;
}

void write_sections(const std::string& path, const char magic[4],
                    uint16_t version, const std::vector<Section>& sections) {
  std::string out;
  out.append(magic, 4);
  put<uint16_t>(out, version);
  put<uint32_t>(out, uint32_t(sections.size()));
  for (const Section& s : sections) {
    if (s.name.size() > 0xffff)
      throw ValidationError("section name too long: " + s.name);
    put<uint16_t>(out, uint16_t(s.name.size()));
    out.append(s.name);
    put<uint16_t>(out, s.kind);
    if (s.kind <= 1) {
      encode_tensor_body(out, s.tensor, Dtype(s.kind));
    } else {
      put<uint64_t>(out, uint64_t(s.bytes.size()));
      out.append(reinterpret_cast<const char*>(s.bytes.data()),
                 s.bytes.size());
    }
  }
  atomic_write(path, out.data(), out.size());
}

std::vector<Section> read_sections(const std::string& path,
                                   const char magic[4], uint16_t* version) {
  const std::string blob = read_file(path);
  Reader r{reinterpret_cast<const uint8_t*>(blob.data()), blob.size(), 0,
           path};
  r.need(4, "magic");
  if (std::memcmp(r.data, magic, 4) != 0)
    throw ValidationError(path + ": bad magic, expected " +
                          std::string(magic, 4));
  r.pos = 4;
  const uint16_t ver = r.get<uint16_t>("version");
  if (ver != kFormatVersion)
    throw ValidationError(path + ": unsupported version " +
                          std::to_string(ver));
  if (version) *version = ver;
  const uint32_t count = r.get<uint32_t>("section count");
  std::vector<Section> sections;
  sections.reserve(count);
  for (uint32_t i = 0; i < count; ++i) {
    Section s;
    const uint16_t nlen = r.get<uint16_t>("section name length");
    r.need(nlen, "section name");
    s.name.assign(reinterpret_cast<const char*>(r.data + r.pos), nlen);
    r.pos += nlen;
    s.kind = r.get<uint16_t>("section kind");
    if (s.kind <= 1) {
      s.tensor = decode_tensor_body(r, Dtype(s.kind));
    } else if (s.kind == 2) {
      const uint64_t blen = r.get<uint64_t>("byte section length");
      r.need(size_t(blen), "byte section payload");
      s.bytes.assign(r.data + r.pos, r.data + r.pos + blen);
      r.pos += size_t(blen);
    } else {
      throw ValidationError(path + ": unknown section kind " +
                            std::to_string(s.kind) + " at byte offset " +
                            std::to_string(r.pos - 2));
    }
    sections.push_back(std::move(s));
  }
  if (r.pos != r.size)
    throw ValidationError(path + ": " + std::to_string(r.size - r.pos) +
                          " trailing bytes after last section");
  return sections;
}

const Section& find_section(const std::vector<Section>& sections,
                            const std::string& name) {
  for (const Section& s : sections)
    if (s.name == name) return s;
  throw ValidationError("missing section '" + name + "'");
}

const Section* maybe_section(const std::vector<Section>& sections,
                             const std::string& name) {
  for (const Section& s : sections)
    if (s.name == name) return &s;
  return nullptr;
}

}  // namespace etg::io
