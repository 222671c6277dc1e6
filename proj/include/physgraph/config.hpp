#pragma once
// Run configuration: a strict JSON schema (unknown keys rejected, field-level
// error messages) covering the graph spec, environment, encoder, bias
// generator, baseline and PPO settings, plus dotted-path command-line
// overrides. The fully resolved config is serialized into every output
// directory so a run can be reproduced from its artifacts alone.

#include <cstdint>
#include <string>
#include <vector>

#include <json.hpp>

#include "physgraph/biasgen.hpp"
#include "physgraph/encoder.hpp"
#include "physgraph/ppo.hpp"
#include "physgraph/toyenv.hpp"

namespace physgraph {

struct BiasSettings {
    int d_max = 8;
    int d0 = 2;
    std::vector<int> serial_heads;   // empty -> default allocation
    std::vector<int> synergy_heads;
    BiasInit init;
};

struct RunConfig {
    std::string arch = "physgraph";  // physgraph | physgraph-nobias | mlp-baseline
    std::string out_dir = "runs/out";
    std::vector<std::uint64_t> seeds = {0};
    GraphSpec graph = GraphSpec::bimanual(3, 3);
    EnvConfig env;
    EncoderConfig encoder;  // action_dim filled from the environment
    BiasSettings bias;
    BaselineConfig baseline;
    PpoConfig ppo;

    // Encoder config with action dim and head allocation resolved.
    EncoderConfig resolved_encoder(int action_dim) const;
    HeadAllocation resolved_allocation() const;

    nlohmann::json to_json() const;
    static RunConfig from_json(const nlohmann::json& j);
    static RunConfig load(const std::string& path,
                          const std::vector<std::string>& overrides = {});

    void validate() const;
};

// Parses "a.b.c=value" and applies it to a JSON document (value parsed as
// JSON when possible, else treated as a string).
void apply_override(nlohmann::json& doc, const std::string& spec);

GraphSpec graph_spec_from_json(const nlohmann::json& j);
nlohmann::json graph_spec_to_json(const GraphSpec& spec);
GraphSpec load_graph_spec(const std::string& path);

std::unique_ptr<PolicyNetwork> make_policy(const RunConfig& cfg, const KinematicGraph& graph,
                                           const TokenMap& token_map, int action_dim,
                                           std::uint64_t seed);

}  // namespace physgraph
