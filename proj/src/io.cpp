#include "apex/io.hpp"

#include <cstring>
#include <fstream>
#include <stdexcept>

#include "apex/rng.hpp"

namespace apex {

namespace {

void put_u32(std::string& out, std::uint32_t v) {
  for (int i = 0; i < 4; ++i) out.push_back(char((v >> (8 * i)) & 0xff));
}

void put_f32s(std::string& out, const std::vector<float>& v) {
  for (float f : v) {
    std::uint32_t bits;
    std::memcpy(&bits, &f, 4);
    put_u32(out, bits);
  }
}

void put_u16s(std::string& out, const std::vector<std::uint16_t>& v) {
  for (std::uint16_t x : v) {
    out.push_back(char(x & 0xff));
    out.push_back(char((x >> 8) & 0xff));
  }
}

}  // namespace

std::uint64_t dataset_content_hash(const std::vector<SampleRecord>& data) {
  std::uint64_t h = fnv1a64(nullptr, 0);  // FNV offset basis
  for (const SampleRecord& s : data) {
    std::string bytes;
    bytes.reserve(8 + s.image.size() * 4 + 4 * s.anatomy_label.size() * 2);
    put_u32(bytes, s.h);
    put_u32(bytes, s.w);
    put_f32s(bytes, s.image);
    put_u16s(bytes, s.anatomy_label);
    put_u16s(bytes, s.anatomy_instance);
    put_u16s(bytes, s.pathology_label);
    put_u16s(bytes, s.pathology_instance);
    h = fnv1a64(bytes.data(), bytes.size(), h);
  }
  return h;
}

void write_pgm(const std::string& path, const std::vector<std::uint8_t>& gray,
               std::size_t h, std::size_t w) {
  if (gray.size() != h * w)
    throw std::invalid_argument("write_pgm: size mismatch");
  std::ofstream f(path, std::ios::binary | std::ios::trunc);
  if (!f) throw std::runtime_error("cannot write image: " + path);
  f << "P5\n" << w << " " << h << "\n255\n";
  f.write(reinterpret_cast<const char*>(gray.data()),
          std::streamsize(gray.size()));
  if (!f) throw std::runtime_error("short write: " + path);
}

}  // namespace apex
