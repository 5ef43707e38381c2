#pragma once

#include <string>

#include "uwseg/nn.hpp"
#include "uwseg/optim.hpp"

namespace uwseg {

/// Writes `path` (little-endian float32 payload) and `path + ".manifest"`
/// (one "name shape offset" line per tensor). Parameters and buffers are
/// stored by name; with an optimizer its step count and moments follow under
/// "optim.m." / "optim.v." prefixes.
void save_checkpoint(const std::string& path, const nn::ParameterStore& store, const AdamW* optim = nullptr);

/// Restores every model tensor whose name starts with `prefix` (all when
/// empty). Optimizer state is restored only for full loads with `optim` set.
/// Throws CheckpointError naming the first offending tensor on a missing
/// entry, shape mismatch, unexpected entry, or corrupt manifest.
void load_checkpoint(const std::string& path, nn::ParameterStore& store, AdamW* optim = nullptr,
                     const std::string& prefix = "");

}  // namespace uwseg
