#include "apex/dataset_io.hpp"

#include <cstdint>
#include <cstring>
#include <fstream>
#include <stdexcept>

#include <json.hpp>

namespace apex {

namespace {

constexpr char kMagic[7] = {'A', 'P', 'E', 'X', 'D', 'S', '1'};
constexpr std::uint8_t kVersion = 1;

void put_u64(std::ostream& os, std::uint64_t v) {
  unsigned char b[8];
  for (int i = 0; i < 8; ++i) b[i] = static_cast<unsigned char>(v >> (8 * i));
  os.write(reinterpret_cast<const char*>(b), 8);
}

std::uint64_t get_u64(std::istream& is, const std::string& what) {
  unsigned char b[8];
  if (!is.read(reinterpret_cast<char*>(b), 8))
    throw std::runtime_error("dataset: unexpected end of file reading " + what);
  std::uint64_t v = 0;
  for (int i = 0; i < 8; ++i) v |= static_cast<std::uint64_t>(b[i]) << (8 * i);
  return v;
}

template <typename T>
void put_array(std::ostream& os, const std::vector<T>& v) {
  // payloads are little-endian by definition; this writes the native
  // representation, which matches on every platform this project targets
  static_assert(sizeof(T) == 2 || sizeof(T) == 4);
  os.write(reinterpret_cast<const char*>(v.data()),
           static_cast<std::streamsize>(v.size() * sizeof(T)));
}

template <typename T>
void get_array(std::istream& is, std::vector<T>& v, std::size_t n,
               const std::string& what) {
  v.resize(n);
  if (!is.read(reinterpret_cast<char*>(v.data()),
               static_cast<std::streamsize>(n * sizeof(T))))
    throw std::runtime_error("dataset: unexpected end of file reading " + what);
}

}  // namespace

void write_dataset(const std::string& path,
                   const std::vector<SampleRecord>& records) {
  std::ofstream os(path, std::ios::binary);
  if (!os) throw std::runtime_error("dataset: cannot open " + path +
                                    " for writing");
  os.write(kMagic, sizeof(kMagic));
  os.put(static_cast<char>(kVersion));
  put_u64(os, records.size());

  for (const SampleRecord& r : records) {
    nlohmann::json hdr = {
        {"h", r.h},
        {"w", r.w},
        {"channels", 3},
        {"image_dtype", "f32"},
        {"mask_dtype", "u16"},
        {"layers", {"anatomy_label", "anatomy_instance", "pathology_label",
                    "pathology_instance"}},
    };
    std::string s = hdr.dump();
    put_u64(os, s.size());
    os.write(s.data(), static_cast<std::streamsize>(s.size()));
    put_array(os, r.image);
    put_array(os, r.anatomy_label);
    put_array(os, r.anatomy_instance);
    put_array(os, r.pathology_label);
    put_array(os, r.pathology_instance);
  }
  if (!os) throw std::runtime_error("dataset: write failed for " + path);
}

std::vector<SampleRecord> read_dataset(const std::string& path) {
  std::ifstream is(path, std::ios::binary);
  if (!is) throw std::runtime_error("dataset: cannot open " + path);

  char magic[7];
  if (!is.read(magic, sizeof(magic)) ||
      std::memcmp(magic, kMagic, sizeof(kMagic)) != 0)
    throw std::runtime_error("dataset: bad magic in " + path +
                             ", expected \"APEXDS1\"");
  int version = is.get();
  if (version != kVersion)
    throw std::runtime_error("dataset: unsupported version " +
                             std::to_string(version) + " in " + path);

  std::uint64_t count = get_u64(is, "record count");
  std::vector<SampleRecord> records;
  records.reserve(count);
  for (std::uint64_t k = 0; k < count; ++k) {
    std::uint64_t hlen = get_u64(is, "header length");
    if (hlen > (1u << 20))
      throw std::runtime_error("dataset: implausible header length " +
                               std::to_string(hlen) + " in " + path);
    std::string hs(hlen, '\0');
    if (!is.read(hs.data(), static_cast<std::streamsize>(hlen)))
      throw std::runtime_error("dataset: unexpected end of file in header");
    nlohmann::json hdr;
    try {
      hdr = nlohmann::json::parse(hs);
    } catch (const nlohmann::json::exception& e) {
      throw std::runtime_error("dataset: corrupt record header: " +
                               std::string(e.what()));
    }
    SampleRecord r;
    r.h = hdr.at("h").get<std::uint32_t>();
    r.w = hdr.at("w").get<std::uint32_t>();
    if (r.h == 0 || r.w == 0 || r.h > 4096 || r.w > 4096)
      throw std::runtime_error("dataset: implausible record shape " +
                               std::to_string(r.h) + "x" + std::to_string(r.w));
    std::size_t hw = static_cast<std::size_t>(r.h) * r.w;
    get_array(is, r.image, 3 * hw, "image");
    get_array(is, r.anatomy_label, hw, "anatomy labels");
    get_array(is, r.anatomy_instance, hw, "anatomy instances");
    get_array(is, r.pathology_label, hw, "pathology labels");
    get_array(is, r.pathology_instance, hw, "pathology instances");
    records.push_back(std::move(r));
  }
  return records;
}

}  // namespace apex
