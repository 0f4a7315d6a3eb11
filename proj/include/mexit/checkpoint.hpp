#pragma once

#include <cstdint>
#include <string>

#include "mexit/model.hpp"

namespace mexit {

/// Checkpoint layout (little-endian):
///   "PEPH" | u16 version | u32 topology length | topology text |
///   f32 parameters of blocks, classifier, exits in declaration order
///   (weight then bias per layer).
inline constexpr std::uint16_t kCheckpointVersion = 1;

void save_checkpoint(const Model& model, const std::string& path);

/// Throws LoadError on bad magic, unknown version, malformed topology or
/// truncated/oversized payload. Never returns a partial model.
Model load_checkpoint(const std::string& path);

std::string topology_text(const Model& model);
Model parse_topology(const std::string& text);

}  // namespace mexit
