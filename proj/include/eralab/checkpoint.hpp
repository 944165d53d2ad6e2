#pragma once

#include <cstddef>
#include <cstdint>
#include <filesystem>
#include <map>
#include <string>
#include <string_view>
#include <vector>

#include "json.hpp"

#include "eralab/diffusion.hpp"

namespace eralab {

inline constexpr std::string_view kCheckpointVersion = "eralab-ckpt-v1";

struct LineageEntry {
    std::string id;
    std::string stage;

    friend bool operator==(const LineageEntry&, const LineageEntry&) = default;
};

/// Where a checkpoint came from. `lineage` lists ancestors from the original
/// training run down to the direct parent.
struct Provenance {
    std::string id;
    std::string parent; // empty for a freshly trained model
    std::string stage;  // train, erase-esd, erase-projection, probe-gg, probe-ip
    std::uint64_t seed = 0;
    std::string config_hash;
    std::string generator;
    std::vector<LineageEntry> lineage;

    friend bool operator==(const Provenance&, const Provenance&) = default;
};

/// A model plus its provenance. `sampling_tokens` maps a concept to the token
/// that should be sampled to evaluate it (a personalization rare token).
struct Checkpoint {
    ConditionalDenoiser model;
    Provenance provenance;
    std::map<std::size_t, std::size_t> sampling_tokens;

    std::size_t token_for(std::size_t concept_index) const;
};

/// 64-bit FNV-1a, rendered as 16 hex digits.
std::string fnv1a_hex(std::string_view text);

/// Hash of the canonical (sorted-key) dump of a JSON value.
std::string config_hash(const nlohmann::json& config);

/// Provenance for a root checkpoint.
Provenance root_provenance(std::string stage, std::uint64_t seed, const nlohmann::json& config);

/// Provenance for a checkpoint derived from `parent`.
Provenance child_provenance(const Provenance& parent, std::string stage, std::uint64_t seed,
                            const nlohmann::json& config);

nlohmann::json checkpoint_to_json(const Checkpoint& checkpoint);

/// Throws FormatError on a version mismatch or malformed content, naming the
/// offending field.
Checkpoint checkpoint_from_json(const nlohmann::json& doc);

void save_checkpoint(const std::filesystem::path& path, const Checkpoint& checkpoint);
Checkpoint load_checkpoint(const std::filesystem::path& path);

/// Writes `doc` with sorted keys and a trailing newline, creating parent directories.
void write_json(const std::filesystem::path& path, const nlohmann::json& doc);
nlohmann::json read_json(const std::filesystem::path& path);
void write_text(const std::filesystem::path& path, std::string_view text);

} // namespace eralab
