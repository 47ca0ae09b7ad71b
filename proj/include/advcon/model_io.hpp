#pragma once

#include "advcon/model.hpp"

#include <cstdint>
#include <filesystem>
#include <iosfwd>

namespace advcon {

inline constexpr char kModelMagic[8] = {'A', 'D', 'V', 'C', 'N', 'E', 'T', '\0'};
inline constexpr std::uint8_t kModelFormatVersion = 1;

/// Binary model file:
///   8-byte magic "ADVCNET\0", 1-byte format version,
///   u32 LE header length, UTF-8 JSON header (input shape + layer descriptors),
///   then weight and bias of every parameterised layer as little-endian f64.
void save_model(const Model& model, const std::filesystem::path& path);
Model load_model(const std::filesystem::path& path);

void write_model(const Model& model, std::ostream& out);
Model read_model(std::istream& in);

}  // namespace advcon
