#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include "apex/synthetic.hpp"

namespace apex {

// Content hash of a dataset: every sample's raw fields in order (h and w as
// u32 LE, image as f32 LE bytes, then the four u16 LE grids). Independent of
// how (or whether) the dataset is stored on disk.
std::uint64_t dataset_content_hash(const std::vector<SampleRecord>& data);

// Binary 8-bit PGM (P5, maxval 255).
void write_pgm(const std::string& path, const std::vector<std::uint8_t>& gray,
               std::size_t h, std::size_t w);

}  // namespace apex
