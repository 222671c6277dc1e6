#pragma once
// Physically-grounded attention bias generator.
//
// Four node-space components -- spatial (hop-distance embedding), edge (type
// embedding over self/bone/contact/disconnected), geometric (gated RBF over
// Cartesian distance) and anatomical (serial/synergy soft bonuses) -- are
// combined per head into a composite and lifted to token space. Everything is
// differentiable with respect to the BiasParams fields.

#include <memory>
#include <string>
#include <vector>

#include "physgraph/kingraph.hpp"
#include "physgraph/nncore.hpp"

namespace physgraph {

struct HeadAllocation {
    std::vector<int> serial;
    std::vector<int> synergy;
    std::vector<int> global;

    // Serial heads take the first quarter, synergy the second, the rest are
    // global. H=8 gives {0,1} / {2,3} / {4..7}.
    static HeadAllocation defaults(int heads);
    void validate(int heads) const;
};

// Parameter names under which the bias generator registers its fields.
// sigma is stored through its softplus preimage to stay strictly positive.
struct BiasParamNames {
    std::string spatial_table = "bias/spatial_table";  // [H, D_max+1]
    std::string edge_table = "bias/edge_table";        // [H, 4]
    std::string w_geo = "bias/w_geo";                  // [H]
    std::string sigma_raw = "bias/sigma_raw";          // [1], sigma = softplus
    std::string lambda_sp = "bias/lambda_sp";          // [1]
    std::string lambda_edge = "bias/lambda_edge";      // [1]
    std::string lambda_geo = "bias/lambda_geo";        // [1]
    std::string lambda_anat = "bias/lambda_anat";      // [H] (per-head, per Eq. 7)
    std::string alpha_ser = "bias/alpha_ser";          // [1]
    std::string alpha_syn = "bias/alpha_syn";          // [1]
};

struct BiasInit {
    double table_std = 0.02;
    double w_geo = 0.1;
    double sigma = 0.1;  // meters
    double alpha = 0.5;
    double lambda = 1.0;
};

class BiasGenerator {
public:
    BiasGenerator(const KinematicGraph& graph, int heads, int d_max, int d0,
                  HeadAllocation alloc);

    // Registers all BiasParams into the store (seeded init).
    void register_params(nn::ParamStore& store, std::uint64_t seed,
                         const BiasInit& init = {}) const;

    int heads() const { return heads_; }
    int d_max() const { return d_max_; }
    int d0() const { return d0_; }
    int nodes() const { return n_; }
    const HeadAllocation& allocation() const { return alloc_; }

    // Node-space components, shape [H,N,N] (batch size 1 collapses).
    nn::Var spatial_bias(nn::Tape& t) const;
    nn::Var edge_bias(nn::Tape& t, const ContactSet& contacts) const;
    nn::Var geometric_bias(nn::Tape& t, const std::vector<Vec3>& positions) const;
    nn::Var anatomical_bias(nn::Tape& t) const;

    // Composite in node space [H,N,N] per Eq. 7.
    nn::Var composite_bias(nn::Tape& t, const ContactSet& contacts,
                           const std::vector<Vec3>& positions) const;

    // Batched composite already lifted to token space: [B,H,T,T].
    nn::Var composite_token_bias_batch(
        nn::Tape& t, const std::vector<const ContactSet*>& contacts,
        const std::vector<const std::vector<Vec3>*>& positions,
        const std::vector<int>& token_to_node) const;

    // Token-space lift of any node-space bias.
    nn::Var lift_to_tokens(nn::Tape& t, nn::Var node_bias,
                           const std::vector<int>& token_to_node) const;

    // Current sigma value (softplus of the raw parameter).
    static double sigma_value(const nn::ParamStore& store);
    static double softplus_inverse(double y);

    const BiasParamNames& names() const { return names_; }

private:
    nn::Var dynamic_bias_batch(nn::Tape& t, const std::vector<const ContactSet*>& contacts,
                               const std::vector<const std::vector<Vec3>*>& positions) const;
    nn::Var static_bias(nn::Tape& t) const;

    int heads_;
    int d_max_;
    int d0_;
    int n_;
    HeadAllocation alloc_;
    BiasParamNames names_;

    // Graph-static buffers, computed once per graph.
    std::shared_ptr<std::vector<int>> clipped_hops_;          // n*n lookup indices
    std::shared_ptr<nn::EdgeStaticCells> edge_cells_;         // self + bone cells
    std::shared_ptr<nn::Array> serial_mask_;                  // [N,N]
    std::shared_ptr<nn::Array> synergy_mask_;                 // [N,N]
    std::shared_ptr<nn::Array> geo_gate_;                     // [N,N], 1 where hop > d0
};

}  // namespace physgraph
