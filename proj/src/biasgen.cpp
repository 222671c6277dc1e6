#include "physgraph/biasgen.hpp"

#include <algorithm>
#include <cmath>
#include <stdexcept>

#include "physgraph/rng.hpp"

namespace physgraph {

using nn::Array;
using nn::Tape;
using nn::Var;

HeadAllocation HeadAllocation::defaults(int heads) {
    if (heads < 4 || heads % 4 != 0)
        throw std::invalid_argument("HeadAllocation::defaults: heads must be a multiple of 4");
    HeadAllocation a;
    int q = heads / 4;
    for (int h = 0; h < q; ++h) a.serial.push_back(h);
    for (int h = q; h < 2 * q; ++h) a.synergy.push_back(h);
    for (int h = 2 * q; h < heads; ++h) a.global.push_back(h);
    return a;
}

void HeadAllocation::validate(int heads) const {
    std::vector<int> seen(static_cast<std::size_t>(heads), 0);
    auto mark = [&](const std::vector<int>& group, const char* name) {
        for (int h : group) {
            if (h < 0 || h >= heads)
                throw std::invalid_argument(std::string("head allocation: ") + name +
                                            " head out of range");
            if (seen[static_cast<std::size_t>(h)]++)
                throw std::invalid_argument("head allocation: head assigned twice");
        }
    };
    mark(serial, "serial");
    mark(synergy, "synergy");
    mark(global, "global");
    for (int h = 0; h < heads; ++h)
        if (!seen[static_cast<std::size_t>(h)])
            throw std::invalid_argument("head allocation: head " + std::to_string(h) +
                                        " unassigned");
}

BiasGenerator::BiasGenerator(const KinematicGraph& graph, int heads, int d_max, int d0,
                             HeadAllocation alloc)
    : heads_(heads), d_max_(d_max), d0_(d0), n_(graph.size()), alloc_(std::move(alloc)) {
    if (d_max_ < 1) throw std::invalid_argument("BiasGenerator: d_max must be >= 1");
    if (d0_ < 0) throw std::invalid_argument("BiasGenerator: d0 must be >= 0");
    alloc_.validate(heads_);

    const int n = n_;
    clipped_hops_ = std::make_shared<std::vector<int>>(static_cast<std::size_t>(n) * n);
    geo_gate_ = std::make_shared<Array>(nn::Shape{n, n});
    for (int u = 0; u < n; ++u)
        for (int v = 0; v < n; ++v) {
            (*clipped_hops_)[static_cast<std::size_t>(u) * n + v] = hop_clipped(graph, u, v, d_max_);
            // Unreachable pairs count as "beyond d0": the gate stays open.
            geo_gate_->data[static_cast<std::size_t>(u) * n + v] =
                graph.hop(u, v) > d0_ ? 1.0 : 0.0;
        }

    edge_cells_ = std::make_shared<nn::EdgeStaticCells>();
    edge_cells_->n = n;
    for (int u = 0; u < n; ++u) edge_cells_->diag_cells.push_back(u * n + u);
    edge_cells_->bones = graph.bone_edges();

    RelationMasks masks = relation_masks(graph);
    serial_mask_ = std::make_shared<Array>(nn::Shape{n, n});
    synergy_mask_ = std::make_shared<Array>(nn::Shape{n, n});
    for (std::size_t i = 0; i < masks.serial.size(); ++i) {
        serial_mask_->data[i] = masks.serial[i] ? 1.0 : 0.0;
        synergy_mask_->data[i] = masks.synergy[i] ? 1.0 : 0.0;
    }
}

double BiasGenerator::softplus_inverse(double y) {
    if (y <= 0.0) throw std::invalid_argument("softplus_inverse: argument must be > 0");
    return y > 30.0 ? y : std::log(std::expm1(y));
}

double BiasGenerator::sigma_value(const nn::ParamStore& store) {
    double raw = store.at("bias/sigma_raw").value[0];
    return raw > 30.0 ? raw : std::log1p(std::exp(raw));
}

void BiasGenerator::register_params(nn::ParamStore& store, std::uint64_t seed,
                                    const BiasInit& init) const {
    Rng rng = Rng::keyed(seed, 0xb1a5ULL);
    auto gauss_table = [&](nn::Shape shape) {
        Array a(shape);
        for (double& v : a.data) v = init.table_std * rng.normal();
        return a;
    };
    store.add(names_.spatial_table, gauss_table({heads_, d_max_ + 1}));
    store.add(names_.edge_table, gauss_table({heads_, 4}));
    store.add(names_.w_geo, Array({heads_}, init.w_geo));
    store.add(names_.sigma_raw, Array::scalar(softplus_inverse(init.sigma)));
    store.add(names_.lambda_sp, Array::scalar(init.lambda));
    store.add(names_.lambda_edge, Array::scalar(init.lambda));
    store.add(names_.lambda_geo, Array::scalar(init.lambda));
    store.add(names_.lambda_anat, Array({heads_}, init.lambda));
    store.add(names_.alpha_ser, Array::scalar(init.alpha));
    store.add(names_.alpha_syn, Array::scalar(init.alpha));
}

Var BiasGenerator::spatial_bias(Tape& t) const {
    return nn::table_lookup_bias(t, t.param(names_.spatial_table), clipped_hops_, n_);
}

Var BiasGenerator::edge_bias(Tape& t, const ContactSet& contacts) const {
    auto batch = std::make_shared<std::vector<std::vector<std::pair<int, int>>>>(1, contacts.pairs);
    Var b = nn::edge_bias_batch(t, t.param(names_.edge_table), edge_cells_, batch);
    return nn::reshape(t, b, {heads_, n_, n_});
}

Var BiasGenerator::geometric_bias(Tape& t, const std::vector<Vec3>& positions) const {
    if (static_cast<int>(positions.size()) != n_)
        throw std::invalid_argument("geometric_bias: positions size mismatch");
    auto sqd = std::make_shared<Array>(nn::Shape{1, n_, n_});
    for (int u = 0; u < n_; ++u)
        for (int v = 0; v < n_; ++v)
            sqd->data[static_cast<std::size_t>(u) * n_ + v] =
                (positions[static_cast<std::size_t>(u)] - positions[static_cast<std::size_t>(v)])
                    .norm2();
    Var sigma = nn::softplus(t, t.param(names_.sigma_raw));
    Var b = nn::geo_bias_batch(t, t.param(names_.w_geo), sigma, sqd, geo_gate_);
    return nn::reshape(t, b, {heads_, n_, n_});
}

Var BiasGenerator::anatomical_bias(Tape& t) const {
    return nn::anat_bias(t, t.param(names_.alpha_ser), t.param(names_.alpha_syn), serial_mask_,
                         synergy_mask_, alloc_.serial, alloc_.synergy, heads_);
}

Var BiasGenerator::static_bias(Tape& t) const {
    Var sp = nn::scale_scalar(t, spatial_bias(t), t.param(names_.lambda_sp));
    Var an = nn::scale_per_head(t, anatomical_bias(t), t.param(names_.lambda_anat));
    return nn::add(t, sp, an);
}

Var BiasGenerator::composite_bias(Tape& t, const ContactSet& contacts,
                                  const std::vector<Vec3>& positions) const {
    Var stat = static_bias(t);
    Var ed = nn::scale_scalar(t, edge_bias(t, contacts), t.param(names_.lambda_edge));
    Var geo = nn::scale_scalar(t, geometric_bias(t, positions), t.param(names_.lambda_geo));
    return nn::add_n(t, {stat, ed, geo});
}

Var BiasGenerator::dynamic_bias_batch(Tape& t, const std::vector<const ContactSet*>& contacts,
                                      const std::vector<const std::vector<Vec3>*>& positions) const {
    const std::size_t B = contacts.size();
    if (B == 0 || positions.size() != B)
        throw std::invalid_argument("dynamic_bias_batch: contacts/positions batch mismatch");

    auto contact_pairs = std::make_shared<std::vector<std::vector<std::pair<int, int>>>>();
    contact_pairs->reserve(B);
    for (const ContactSet* c : contacts) contact_pairs->push_back(c->pairs);
    Var edge = nn::edge_bias_batch(t, t.param(names_.edge_table), edge_cells_, contact_pairs);

    auto sqd = std::make_shared<Array>(nn::Shape{static_cast<std::int64_t>(B), n_, n_});
    for (std::size_t b = 0; b < B; ++b) {
        const auto& pos = *positions[b];
        if (static_cast<int>(pos.size()) != n_)
            throw std::invalid_argument("dynamic_bias_batch: positions size mismatch");
        double* dst = sqd->data.data() + b * static_cast<std::size_t>(n_) * n_;
        for (int u = 0; u < n_; ++u)
            for (int v = 0; v < n_; ++v)
                dst[static_cast<std::size_t>(u) * n_ + v] =
                    (pos[static_cast<std::size_t>(u)] - pos[static_cast<std::size_t>(v)]).norm2();
    }
    Var sigma = nn::softplus(t, t.param(names_.sigma_raw));
    Var geo = nn::geo_bias_batch(t, t.param(names_.w_geo), sigma, sqd, geo_gate_);

    Var ed = nn::scale_scalar(t, edge, t.param(names_.lambda_edge));
    Var ge = nn::scale_scalar(t, geo, t.param(names_.lambda_geo));
    return nn::add(t, ed, ge);
}

Var BiasGenerator::composite_token_bias_batch(
    Tape& t, const std::vector<const ContactSet*>& contacts,
    const std::vector<const std::vector<Vec3>*>& positions,
    const std::vector<int>& token_to_node) const {
    Var dyn = dynamic_bias_batch(t, contacts, positions);
    Var node_bias = nn::broadcast_add_leading(t, dyn, static_bias(t));
    auto map = std::make_shared<const std::vector<int>>(token_to_node);
    return nn::lift_to_token_space(t, node_bias, map);
}

Var BiasGenerator::lift_to_tokens(Tape& t, Var node_bias,
                                  const std::vector<int>& token_to_node) const {
    for (int m : token_to_node)
        if (m < -1 || m >= n_)
            throw std::invalid_argument("lift_to_tokens: unmapped token (node id " +
                                        std::to_string(m) + ")");
    auto map = std::make_shared<const std::vector<int>>(token_to_node);
    return nn::lift_to_token_space(t, node_bias, map);
}

}  // namespace physgraph
