#pragma once

#include <filesystem>
#include <optional>
#include <string>

#include "afa/attention.hpp"
#include "afa/model.hpp"

namespace afa {

/// Everything needed to restore a trained model: the architecture, every
/// parameter tensor, the head registry and the run seed. A discriminator may
/// ride along to resume training inside a task.
struct Checkpoint {
  ModelDecomposition model;
  std::optional<Discriminator> discriminator;
  std::string metadata_json = "{}";  // free-form provenance (method, data descriptor, ...)
};

void save_checkpoint(const std::filesystem::path& path, const Checkpoint& checkpoint);
/// Throws IoError when unreadable and CorruptArchiveError when malformed.
Checkpoint load_checkpoint(const std::filesystem::path& path);

/// Canonical JSON text of an architecture (used by checkpoints and config digests).
std::string arch_to_json(const ArchConfig& arch);
ArchConfig arch_from_json(const std::string& text);

}  // namespace afa
