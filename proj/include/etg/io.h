#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include "etg/tensor.h"

namespace etg::io {

// On-disk dtype of tensor payloads. Compute is always f64; f32 is the
// default for feature/image files, f64 for checkpoints.
enum class Dtype : uint16_t { f32 = 0, f64 = 1 };

// Single-tensor container, magic "ETGT":
//   magic[4] | version u16 | dtype u16 | ndim u32 | dims u64[ndim] | payload
// all little-endian, payload row-major. Round-trips are bitwise.
void write_tensor(const std::string& path, const Tensor& t,
                  Dtype dtype = Dtype::f32);
Tensor read_tensor(const std::string& path);

// Named-section container used for head assets ("ETGA"), Gaussian clouds
// ("ETGG") and checkpoints ("ETGC"). Layout after the 4-byte magic:
//   version u16 | count u32 | sections...
// section: name_len u16 | name | kind u16 | body
//   kind 0/1: tensor body (ndim u32 | dims u64[] | payload f32/f64)
//   kind 2:   raw bytes   (len u64 | payload)
struct Section {
  std::string name;
  uint16_t kind = 0;
  Tensor tensor;
  std::vector<uint8_t> bytes;

  static Section of_tensor(std::string name, Tensor t, bool f64 = true);
  static Section of_bytes(std::string name, std::vector<uint8_t> b);
  static Section of_string(std::string name, const std::string& s);
  static Section of_u64(std::string name, uint64_t v);

  const Tensor& as_tensor() const;
  std::string as_string() const;
  uint64_t as_u64() const;
};

void write_sections(const std::string& path, const char magic[4],
                    uint16_t version, const std::vector<Section>& sections);
std::vector<Section> read_sections(const std::string& path,
                                   const char magic[4],
                                   uint16_t* version = nullptr);
const Section& find_section(const std::vector<Section>& sections,
                            const std::string& name);
const Section* maybe_section(const std::vector<Section>& sections,
                             const std::string& name);

// Write-temp-then-rename; never leaves a partial file behind.
void atomic_write(const std::string& path, const void* data, size_t size);
void atomic_write_text(const std::string& path, const std::string& text);

// 8-bit RGB preview. Values are clamped to [0,1] before quantization.
void write_png(const std::string& path, size_t width, size_t height,
               const std::vector<uint8_t>& rgb);
void write_png_from_tensor(const std::string& path, const Tensor& hwc);

}  // namespace etg::io
