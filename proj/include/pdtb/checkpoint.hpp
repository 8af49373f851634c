#pragma once

#include <filesystem>

#include "pdtb/autodiff.hpp"

namespace pdtb {

// Flat binary file of named arrays: magic, payload checksum, then per array
// (name, shape, raw little-endian 64-bit values).
void save_checkpoint(const ParamStore& store, const std::filesystem::path& path);

// Fills an existing store; every stored array must match a parameter by name
// and shape and vice versa. Throws on corruption (checksum), unknown names,
// or shape mismatches.
void load_checkpoint(ParamStore& store, const std::filesystem::path& path);

}  // namespace pdtb
