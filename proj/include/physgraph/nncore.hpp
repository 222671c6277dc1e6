#pragma once
// Reverse-mode differentiable numeric core.
//
// A Tape owns value/gradient nodes created by the op functions below. Ops only
// consume existing nodes, so reverse creation order is a valid topological
// order for backward(). Parameters enter as leaves bound to a ParamStore;
// after backward() their gradients are accumulated back into the store.
//
// Everything is double precision and single-threaded per tape; tapes on
// different threads never share state.

#include <functional>
#include <deque>
#include <memory>
#include <string>
#include <vector>

#include "physgraph/array.hpp"
#include "physgraph/params.hpp"

namespace physgraph::nn {

class Tape;

struct Var {
    int idx = -1;
    bool valid() const { return idx >= 0; }
};

struct TapeNode {
    Array val;
    Array grad;  // allocated on first touch during backward
    bool needs_grad = false;
    bool grad_live = false;
    int param_id = -1;
    std::function<void(Tape&)> back;
};

class Tape {
public:
    explicit Tape(ParamStore* store = nullptr, bool recording = true)
        : store_(store), recording_(recording) {}

    Var constant(Array a);
    Var param(const std::string& name);
    Var param(int id);

    const Array& val(Var v) const { return nodes_[static_cast<std::size_t>(v.idx)].val; }
    const Shape& shape(Var v) const { return val(v).shape; }

    // Gradient of a node; zero-allocates on first access.
    Array& grad(Var v);
    bool grad_live(Var v) const { return nodes_[static_cast<std::size_t>(v.idx)].grad_live; }

    // Reverse sweep from a scalar root.
    void backward(Var root);

    // Adds scale * d(root)/d(param) into the store for every touched parameter.
    void accumulate_param_grads(double scale = 1.0);

    bool recording() const { return recording_; }
    ParamStore* store() const { return store_; }
    std::size_t node_count() const { return nodes_.size(); }

    // Op plumbing.
    Var make(Array val, const std::vector<Var>& parents, std::function<void(Tape&)> back);
    TapeNode& node(Var v) { return nodes_[static_cast<std::size_t>(v.idx)]; }

private:
    std::deque<TapeNode> nodes_;
    std::vector<std::pair<int, int>> param_leaves_;  // (param_id, node idx)
    ParamStore* store_;
    bool recording_;
};

// ---- elementwise / shape ops ----
Var add(Tape& t, Var a, Var b);
Var sub(Tape& t, Var a, Var b);
Var add_n(Tape& t, const std::vector<Var>& xs);
Var hadamard(Tape& t, Var a, Var b);
Var hadamard_const(Tape& t, Var a, Array c);
Var scale_const(Tape& t, Var a, double c);
Var add_const(Tape& t, Var a, double c);
Var sub_const(Tape& t, Var a, Array c);  // a - c
Var scale_scalar(Tape& t, Var x, Var s);            // s is shape [1]
Var scale_per_head(Tape& t, Var x, Var w);          // x [H,...], w [H]
Var broadcast_add_leading(Tape& t, Var x, Var s);   // x [B,rest...], s [rest...]
Var broadcast_rows(Tape& t, Var v, std::int64_t rows);  // [d] -> [rows,d]
Var reshape(Tape& t, Var x, Shape s);
Var square(Tape& t, Var x);
Var exp_op(Tape& t, Var x);
Var softplus(Tape& t, Var x);
Var gelu(Tape& t, Var x);
Var clamp(Tape& t, Var x, double lo, double hi);
Var minimum(Tape& t, Var a, Var b);
Var sum_all(Tape& t, Var x);
Var mean_all(Tape& t, Var x);

// ---- neural net ops ----
// y = x W + b with x viewed as [rows, in]; b may be invalid for no-bias.
Var linear(Tape& t, Var x, Var W, Var b);
Var layer_norm(Tape& t, Var x, Var gain, Var shift, double eps);
Var softmax_rows(Tape& t, Var x);

// Multi-head scaled dot-product self-attention with optional additive logits
// bias. q/k/v are [B,T,D]; bias is [H,T,T] (shared across batch) or
// [B,H,T,T]; output [B,T,D]. `where` labels NaN diagnostics.
Var attention_core(Tape& t, Var q, Var k, Var v, int heads, Var bias, const std::string& where);

// Token assembly: T slices of [B,d] -> [B,T,d]; inverse single-token slice.
Var stack_tokens(Tape& t, const std::vector<Var>& tokens);
Var slice_token(Tape& t, Var x, std::int64_t token);

// ---- bias generator ops ----
// out[h][c] = table[h][idx[c]] for a constant index field of n*n cells.
Var table_lookup_bias(Tape& t, Var table, std::shared_ptr<const std::vector<int>> idx, int n);

// Static (self + bone) cells plus per-sample sparse contact overrides,
// expanded against edge_table [H,4] into [B,H,N,N] without classifying pairs.
struct EdgeStaticCells {
    int n = 0;
    std::vector<int> diag_cells;             // u*n+u
    std::vector<std::pair<int, int>> bones;  // both orders materialized at use
};
Var edge_bias_batch(Tape& t, Var table, std::shared_ptr<const EdgeStaticCells> cells,
                    std::shared_ptr<const std::vector<std::vector<std::pair<int, int>>>> contacts);

// out[b][h][c] = gate[c] * w[h] * exp(-sqdist[b][c] / (2 sigma^2)).
Var geo_bias_batch(Tape& t, Var w, Var sigma, std::shared_ptr<const Array> sqdist,
                   std::shared_ptr<const Array> gate);

// Serial/synergy soft bonuses per head group; global heads get zeros.
Var anat_bias(Tape& t, Var alpha_ser, Var alpha_syn, std::shared_ptr<const Array> serial,
              std::shared_ptr<const Array> synergy, const std::vector<int>& serial_heads,
              const std::vector<int>& synergy_heads, int heads);

// Node-space -> token-space lift; map[i] = node id or -1 for the policy token.
Var lift_to_token_space(Tape& t, Var node_bias, std::shared_ptr<const std::vector<int>> token_to_node);

// ---- policy heads ----
// Diagonal-Gaussian log density of `actions` under (mu, exp(log_std)) -> [B].
Var gaussian_logprob(Tape& t, Var mu, Var log_std, std::shared_ptr<const Array> actions);
// Entropy of the diagonal Gaussian (action independent) -> [1].
Var gaussian_entropy(Tape& t, Var log_std);

// ---- optimizer ----
struct AdamConfig {
    double lr = 3e-4;
    double beta1 = 0.9;
    double beta2 = 0.999;
    double eps = 1e-8;
};

class Adam {
public:
    Adam(ParamStore& store, AdamConfig cfg);

    // One bias-corrected update from the gradients currently in the store.
    // Frozen (non-trainable) parameters are skipped.
    void step();

    std::int64_t t() const { return t_; }
    void set_t(std::int64_t t) { t_ = t; }
    AdamConfig& config() { return cfg_; }
    std::vector<Array>& m() { return m_; }
    std::vector<Array>& v() { return v_; }

private:
    ParamStore& store_;
    AdamConfig cfg_;
    std::int64_t t_ = 0;
    std::vector<Array> m_, v_;
};

// Clips gradients in the store to a global L2 norm; returns the pre-clip norm.
double clip_grad_norm(ParamStore& store, double max_norm);

// ---- finite-difference gradient checker ----
struct GradCheckEntry {
    std::string name;
    double max_rel_err = 0.0;
    double max_abs_err = 0.0;
};
struct GradCheckReport {
    std::vector<GradCheckEntry> entries;
    bool pass = false;
    double worst_rel_err = 0.0;
    std::string worst_param;
};

// f builds a scalar Var on the given tape from current store values.
using ScalarFn = std::function<Var(Tape&)>;

GradCheckReport grad_check(const ScalarFn& f, ParamStore& store, double step, double tol);

}  // namespace physgraph::nn
