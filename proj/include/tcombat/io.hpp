#pragma once

#include <cstdint>
#include <map>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "tcombat/btrr.hpp"
#include "tcombat/dataset.hpp"
#include "tcombat/harmonize.hpp"
#include "tcombat/simulator.hpp"
#include "tcombat/tensor.hpp"

namespace tcombat::io {

inline constexpr const char* kVersion = "0.1.0";

// ---------------------------------------------------------------------------
// Tensor files
//
// "THT1", u32 version, 3 x u32 dims, u8 dtype (1 = f64), u8 mask flag, then
// all grid values as little-endian f64 and, with the flag set, the mask as
// LSB-first packed bits.

std::vector<std::uint8_t> encode_tensor(const Tensor3& tensor);
Tensor3 decode_tensor(const std::vector<std::uint8_t>& bytes);
void write_tensor(const std::string& path, const Tensor3& tensor);
Tensor3 read_tensor(const std::string& path);

/// Hex FNV-1a digest of a byte buffer or a file.
std::string hash_hex(const std::vector<std::uint8_t>& bytes);
std::string file_hash(const std::string& path);

// ---------------------------------------------------------------------------
// Dataset directories
//
// dataset.json names the mask, the covariate CSV and one tensor file per
// image, each with its content hash. The CSV header is
// subject_id,visit,scanner,visit_months,<covariates...>; visit_months is optional.

void write_dataset(const std::string& dir, const StudyDataset& data);
/// Verifies every listed hash (HashMismatchError) and the shared mask (DimsError).
StudyDataset read_dataset(const std::string& dir);

void write_truth(const std::string& dir, const GroundTruth& truth);
GroundTruth read_truth(const std::string& dir);

void write_store(const std::string& path, const PosteriorStore& store);
PosteriorStore read_store(const std::string& path);

/// Writes the harmonized dataset under dir/dataset and parameter maps under dir/params.
void write_harmonization(const std::string& dir, const HarmonizationOutput& out, const StudyDataset& data);

// ---------------------------------------------------------------------------
// Configs

nlohmann::json load_json(const std::string& path);

/// Unknown keys, wrong types and failed validation raise ConfigError.
SamplerConfig sampler_config_from_json(const nlohmann::json& j);
nlohmann::json to_json(const SamplerConfig& config);
SimConfig sim_config_from_json(const nlohmann::json& j);
nlohmann::json to_json(const SimConfig& config);
nlohmann::json to_json(const CombatOptions& options);
CombatOptions combat_options_from_json(const nlohmann::json& j);

// ---------------------------------------------------------------------------
// Run manifests

struct RunManifest {
    std::string command;
    nlohmann::json config = nlohmann::json::object();
    std::map<std::string, std::string> inputs;   // path -> hash
    std::map<std::string, std::string> outputs;  // path -> hash
    std::uint64_t seed = 0;
    std::string version = kVersion;
    std::map<std::string, double> timings;  // seconds

    void add_input(const std::string& path) { inputs[path] = file_hash(path); }
    void add_output(const std::string& path) { outputs[path] = file_hash(path); }
    /// Adds every regular file below `dir` as an output.
    void add_output_tree(const std::string& dir);

    nlohmann::json json() const;
    static RunManifest from_json(const nlohmann::json& j);
};

void write_manifest(const std::string& path, const RunManifest& manifest);
RunManifest read_manifest(const std::string& path);
/// Re-hashes every listed file; throws HashMismatchError naming the first mismatch.
void verify_manifest(const RunManifest& manifest);

/// Atomic text write.
void write_text(const std::string& path, const std::string& text);

}  // namespace tcombat::io
