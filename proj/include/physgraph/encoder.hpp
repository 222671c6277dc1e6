#pragma once
// Policy networks.
//
// PhysGraphNet: per-link tokenizers + learnable policy token + L-layer
// pre-norm transformer whose attention logits carry the composite physical
// bias, with Gaussian-policy and value heads read from the encoded [POL]
// token. BaselineNet: a flat MLP over the concatenated token features with
// the identical act/evaluate interface, so the trainer is architecture
// agnostic.

#include <cstdint>
#include <memory>
#include <string>
#include <vector>

#include "physgraph/biasgen.hpp"
#include "physgraph/kingraph.hpp"
#include "physgraph/nncore.hpp"

namespace physgraph {

// Fixed per-token feature widths (documented layout in toyenv's observation
// builder).
inline constexpr int kLinkFeat = 17;    // pos 3, quat 4, lin vel 3, ang vel 3, ref delta 3, contact 1
inline constexpr int kHandFeat = 16;    // wrist pose 7, wrist vel 6, mean fingertip ref delta 3
inline constexpr int kToolFeat = 20;    // pose 7, vel 6, ref pose delta 7
inline constexpr int kObjectFeat = 20;

enum class TokenKind : std::uint8_t { Policy, HandGlobal, Link, Tool, Object };

struct TokenDesc {
    TokenKind kind = TokenKind::Policy;
    int node = -1;        // node id; -1 only for the policy token
    int width = 0;        // input feature width; 0 for the policy token
    int signature = -1;   // tokenizer group; tokens sharing (role, link_level) share one
    std::string name;
};

struct TokenMap {
    std::vector<TokenDesc> tokens;        // index 0 is always [POL]
    std::vector<int> token_to_node;       // same length; -1 for [POL]
    std::vector<std::string> signatures;  // signature id -> label ("hand", "link0", ...)
    std::vector<int> signature_width;

    int count() const { return static_cast<int>(tokens.size()); }

    // Layout: [POL], right hand-global, right links (graph order), left
    // hand-global, left links, tool, object. Hand-global tokens map to the
    // hand's palm-root node.
    static TokenMap build(const KinematicGraph& graph);
};

// One environment observation in structured (per-token) form, plus what the
// bias generator needs to rebuild the dynamic bias components.
struct StructuredObs {
    std::vector<std::vector<double>> features;  // aligned with TokenMap; [0] empty
    std::vector<Vec3> positions;                // node positions, world frame
    ContactSet contacts;
};

struct EncoderConfig {
    int d = 128;
    int heads = 8;
    int layers = 3;
    int d_ff = 256;
    int head_hidden = 0;  // 0 -> d
    int d_max = 8;
    int d0 = 2;
    int action_dim = 0;  // set from the environment
    HeadAllocation alloc;  // empty -> defaults(heads)
    double ln_eps = 1e-5;
    double log_std_init = -0.5;
    double log_std_min = -5.0;
    double log_std_max = 2.0;
    BiasInit bias_init;

    void validate() const;
};

struct ActResult {
    nn::Array mu;         // [B,A]
    nn::Array actions;    // [B,A]
    std::vector<double> log_probs;
    std::vector<double> values;
};

struct EvalVars {
    nn::Var log_probs;  // [B]
    nn::Var entropy;    // [1] (diagonal Gaussian entropy is state independent)
    nn::Var values;     // [B]
};

class PolicyNetwork {
public:
    virtual ~PolicyNetwork() = default;

    // Forward without gradients. `noise` is [B,A] standard normals consumed
    // when deterministic == false.
    virtual ActResult act(const std::vector<const StructuredObs*>& obs, bool deterministic,
                          const nn::Array* noise) const = 0;

    // Differentiable re-evaluation of stored actions; gradients flow to every
    // trainable parameter including the bias generator fields.
    virtual EvalVars evaluate(nn::Tape& tape, const std::vector<const StructuredObs*>& obs,
                              const nn::Array& actions) const = 0;

    virtual nn::ParamStore& params() = 0;
    virtual const nn::ParamStore& params() const = 0;
    virtual int action_dim() const = 0;
    virtual std::string arch_name() const = 0;

    // (group label, scalar count) pairs plus a "total" row.
    std::vector<std::pair<std::string, std::int64_t>> param_breakdown() const;
};

class PhysGraphNet final : public PolicyNetwork {
public:
    PhysGraphNet(const KinematicGraph& graph, EncoderConfig cfg, bool use_bias,
                 std::uint64_t seed);

    // Custom token ordering (same physical tokens, any order after [POL]).
    PhysGraphNet(const KinematicGraph& graph, EncoderConfig cfg, bool use_bias,
                 std::uint64_t seed, TokenMap token_map);

    ActResult act(const std::vector<const StructuredObs*>& obs, bool deterministic,
                  const nn::Array* noise) const override;
    EvalVars evaluate(nn::Tape& tape, const std::vector<const StructuredObs*>& obs,
                      const nn::Array& actions) const override;

    nn::ParamStore& params() override { return store_; }
    const nn::ParamStore& params() const override { return store_; }
    int action_dim() const override { return cfg_.action_dim; }
    std::string arch_name() const override { return use_bias_ ? "physgraph" : "physgraph-nobias"; }

    const TokenMap& token_map() const { return token_map_; }
    const EncoderConfig& config() const { return cfg_; }
    const BiasGenerator& bias_generator() const { return biasgen_; }
    bool bias_enabled() const { return use_bias_; }

    // Embedded token sequence [B,T,d] (Eqs. 3-5 path), exposed for tests.
    nn::Var tokenize(nn::Tape& tape, const std::vector<const StructuredObs*>& obs) const;

    // Full encoder stack on pre-built tokens with an explicit bias (invalid
    // Var -> unbiased attention path).
    nn::Var encode(nn::Tape& tape, nn::Var tokens, nn::Var token_bias) const;

    // mu/value heads on the encoded [POL] row.
    std::pair<nn::Var, nn::Var> heads_forward(nn::Tape& tape, nn::Var encoded_pol) const;

    nn::Var clamped_log_std(nn::Tape& tape) const;

    // Composite token-space bias for a batch (empty Var when bias disabled).
    nn::Var token_bias(nn::Tape& tape, const std::vector<const StructuredObs*>& obs) const;

private:
    std::pair<nn::Var, nn::Var> forward_mu_value(nn::Tape& tape,
                                                 const std::vector<const StructuredObs*>& obs) const;

    KinematicGraph graph_;
    EncoderConfig cfg_;
    bool use_bias_;
    TokenMap token_map_;
    BiasGenerator biasgen_;
    nn::ParamStore store_;
};

struct BaselineConfig {
    std::vector<double> hidden_scales = {2.0, 1.0};  // hidden widths as multiples of the
                                                     // flattened input interface width
    int action_dim = 0;
    double log_std_init = -0.5;
    double log_std_min = -5.0;
    double log_std_max = 2.0;
};

class BaselineNet final : public PolicyNetwork {
public:
    BaselineNet(const TokenMap& token_map, BaselineConfig cfg, std::uint64_t seed);

    ActResult act(const std::vector<const StructuredObs*>& obs, bool deterministic,
                  const nn::Array* noise) const override;
    EvalVars evaluate(nn::Tape& tape, const std::vector<const StructuredObs*>& obs,
                      const nn::Array& actions) const override;

    nn::ParamStore& params() override { return store_; }
    const nn::ParamStore& params() const override { return store_; }
    int action_dim() const override { return cfg_.action_dim; }
    std::string arch_name() const override { return "mlp-baseline"; }

    int flat_width() const { return flat_width_; }
    const std::vector<int>& hidden_widths() const { return hidden_; }

private:
    std::pair<nn::Var, nn::Var> forward_mu_value(nn::Tape& tape,
                                                 const std::vector<const StructuredObs*>& obs) const;
    nn::Var clamped_log_std(nn::Tape& tape) const;

    TokenMap token_map_;
    BaselineConfig cfg_;
    int flat_width_ = 0;
    std::vector<int> hidden_;
    nn::ParamStore store_;
};

// Exact scalar parameter count of a store (optionally of one name prefix).
std::int64_t param_count(const nn::ParamStore& store, const std::string& prefix = "");

}  // namespace physgraph
