#pragma once
// Versioned binary checkpoint container.
//
// Layout (all integers little-endian, doubles IEEE-754 little-endian):
//   bytes 0..3   magic "PGCK"
//   bytes 4..7   u32 format version (currently 1)
//   bytes 8..11  u32 manifest length in bytes
//   manifest     UTF-8 JSON: run config, parameter names/shapes/trainable
//                flags, optimizer metadata, optional trainer state metadata
//   payload      raw doubles in manifest order: parameter data, then Adam
//                first/second moments (when present), then per-env state
//                blobs (when present)
// Save -> load round-trips are bit-exact.

#include <cstdint>
#include <string>
#include <vector>

#include <json.hpp>

#include "physgraph/array.hpp"
#include "physgraph/params.hpp"

namespace physgraph {

struct EnvSnapshot {
    std::int64_t episode = 0;
    double episode_return = 0.0;
    std::vector<double> blob;
};

struct TrainerSnapshot {
    std::int64_t update = 0;
    std::uint64_t master_seed = 0;
    double best_sr = -1.0;
    std::int64_t best_update = -1;
    std::vector<EnvSnapshot> envs;
};

struct Checkpoint {
    std::string arch;
    nlohmann::json config;  // fully resolved run config
    std::vector<std::string> param_names;
    std::vector<nn::Shape> param_shapes;
    std::vector<bool> param_trainable;
    std::vector<nn::Array> param_values;

    bool has_adam = false;
    std::int64_t adam_t = 0;
    std::vector<nn::Array> adam_m, adam_v;

    bool has_trainer = false;
    TrainerSnapshot trainer;

    static Checkpoint from_store(const nn::ParamStore& store, std::string arch,
                                 nlohmann::json config);
    // Copies values into an existing store; names and shapes must match.
    void restore_store(nn::ParamStore& store) const;
};

void save_checkpoint(const std::string& path, const Checkpoint& ckpt);
Checkpoint load_checkpoint(const std::string& path);

}  // namespace physgraph
