#include <zlib.h>

#include <algorithm>
#include <cstring>

#include "etg/common.h"
#include "etg/io.h"

namespace etg::io {

namespace {

void put_be32(std::string& out, uint32_t v) {
  out.push_back(char((v >> 24) & 0xff));
  out.push_back(char((v >> 16) & 0xff));
  out.push_back(char((v >> 8) & 0xff));
  out.push_back(char(v & 0xff));
}

void put_chunk(std::string& out, const char type[4], const std::string& data) {
  put_be32(out, uint32_t(data.size()));
  const size_t start = out.size();
  out.append(type, 4);
  out.append(data);
  const uint32_t crc =
      uint32_t(crc32(0, reinterpret_cast<const Bytef*>(out.data() + start),
                     uInt(out.size() - start)));
  put_be32(out, crc);
}

}  // namespace

void write_png(const std::string& path, size_t width, size_t height,
               const std::vector<uint8_t>& rgb) {
  if (rgb.size() != width * height * 3)
    throw ValidationError(path + ": png payload size mismatch");

  std::string raw;
  raw.reserve(height * (1 + width * 3));
  for (size_t y = 0; y < height; ++y) {
    raw.push_back('\0');  // filter type none
    raw.append(reinterpret_cast<const char*>(rgb.data() + y * width * 3),
               width * 3);
  }

  uLongf bound = compressBound(uLong(raw.size()));
  std::vector<Bytef> compressed(bound);
  if (compress2(compressed.data(), &bound,
                reinterpret_cast<const Bytef*>(raw.data()), uLong(raw.size()),
                6) != Z_OK)
    throw NumericError(path + ": zlib compression failed");

  std::string out("\x89PNG\r\n\x1a\n", 8);
  std::string ihdr;
  put_be32(ihdr, uint32_t(width));
  put_be32(ihdr, uint32_t(height));
  ihdr.push_back(8);   // bit depth
  ihdr.push_back(2);   // RGB
  ihdr.push_back(0);   // compression
  ihdr.push_back(0);   // filter
  ihdr.push_back(0);   // no interlace
  put_chunk(out, "IHDR", ihdr);
  put_chunk(out, "IDAT",
            std::string(reinterpret_cast<char*>(compressed.data()), bound));
  put_chunk(out, "IEND", "");
  atomic_write(path, out.data(), out.size());
}

void write_png_from_tensor(const std::string& path, const Tensor& hwc) {
  if (hwc.ndim() != 3 || hwc.dim(2) != 3)
    throw ValidationError(path + ": expected HxWx3 tensor for png preview");
  const size_t h = hwc.dim(0), w = hwc.dim(1);
  std::vector<uint8_t> rgb(h * w * 3);
  for (size_t i = 0; i < rgb.size(); ++i) {
    const double v = std::clamp(hwc[i], 0.0, 1.0);
    rgb[i] = uint8_t(v * 255.0 + 0.5);
  }
  write_png(path, w, h, rgb);
}

}  // namespace etg::io
