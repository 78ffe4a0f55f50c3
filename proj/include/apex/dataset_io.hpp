#pragma once

#include <string>
#include <vector>

#include "apex/synthetic.hpp"

namespace apex {

// APEXDS1 container: magic "APEXDS1" (7 bytes) + 1 version byte + u64 LE
// record count, then per record a u64 LE header length, a UTF-8 JSON header
// (shapes/dtypes), and raw little-endian payloads (image f32, four u16 mask
// grids). Round-trips bit-exactly.
void write_dataset(const std::string& path,
                   const std::vector<SampleRecord>& records);

std::vector<SampleRecord> read_dataset(const std::string& path);

}  // namespace apex
