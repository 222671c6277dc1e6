#include "physgraph/encoder.hpp"

#include <algorithm>
#include <cmath>
#include <stdexcept>

#include "physgraph/rng.hpp"

namespace physgraph {

using nn::Array;
using nn::Tape;
using nn::Var;

namespace {

constexpr double kLn2Pi = 1.8378770664093454835606594728112;

void init_linear(nn::ParamStore& store, Rng& rng, const std::string& prefix, int in, int out) {
    double bound = 1.0 / std::sqrt(static_cast<double>(in));
    Array w({in, out});
    for (double& v : w.data) v = rng.uniform(-bound, bound);
    Array b({out});
    for (double& v : b.data) v = rng.uniform(-bound, bound);
    store.add(prefix + "/W", std::move(w));
    store.add(prefix + "/b", std::move(b));
}

void init_layer_norm(nn::ParamStore& store, const std::string& prefix, int d) {
    store.add(prefix + "/gain", Array({d}, 1.0));
    store.add(prefix + "/shift", Array({d}, 0.0));
}

Var apply_linear(Tape& t, const std::string& prefix, Var x) {
    return nn::linear(t, x, t.param(prefix + "/W"), t.param(prefix + "/b"));
}

Var apply_layer_norm(Tape& t, const std::string& prefix, Var x, double eps) {
    return nn::layer_norm(t, x, t.param(prefix + "/gain"), t.param(prefix + "/shift"), eps);
}

// Gathers one token's features across the batch into a [B,w] constant.
Array gather_token_features(const std::vector<const StructuredObs*>& obs, int token, int width,
                            const std::string& name) {
    const std::int64_t B = static_cast<std::int64_t>(obs.size());
    Array x({B, width});
    for (std::int64_t b = 0; b < B; ++b) {
        const auto& f = obs[static_cast<std::size_t>(b)]->features;
        if (token >= static_cast<int>(f.size()) ||
            static_cast<int>(f[static_cast<std::size_t>(token)].size()) != width)
            throw std::invalid_argument(
                "tokenize: feature width mismatch for token " + name + " (expected " +
                std::to_string(width) + ", got " +
                std::to_string(token < static_cast<int>(f.size())
                                   ? f[static_cast<std::size_t>(token)].size()
                                   : 0) +
                ")");
        std::copy_n(f[static_cast<std::size_t>(token)].data(), width,
                    x.data.data() + b * width);
    }
    return x;
}

// Plain-math diagonal Gaussian log density; mirrors nn::gaussian_logprob.
double logprob_value(const double* action, const double* mu, const double* log_std, int A) {
    double acc = 0.0, ls_sum = 0.0;
    for (int a = 0; a < A; ++a) {
        double z = (action[a] - mu[a]) * std::exp(-log_std[a]);
        acc += z * z;
        ls_sum += log_std[a];
    }
    return -0.5 * acc - ls_sum - 0.5 * A * kLn2Pi;
}

}  // namespace

void EncoderConfig::validate() const {
    if (d < 1 || heads < 1 || layers < 1 || d_ff < 1)
        throw std::invalid_argument("encoder config: d, heads, layers, d_ff must be >= 1");
    if (d % heads != 0)
        throw std::invalid_argument("encoder config: d must be divisible by heads");
    if (action_dim < 1) throw std::invalid_argument("encoder config: action_dim must be set");
    if (d_max < 1) throw std::invalid_argument("encoder config: d_max must be >= 1");
    if (d0 < 0) throw std::invalid_argument("encoder config: d0 must be >= 0");
}

TokenMap TokenMap::build(const KinematicGraph& graph) {
    TokenMap m;
    auto signature_of = [&](const std::string& label, int width) {
        for (std::size_t i = 0; i < m.signatures.size(); ++i)
            if (m.signatures[i] == label) return static_cast<int>(i);
        m.signatures.push_back(label);
        m.signature_width.push_back(width);
        return static_cast<int>(m.signatures.size()) - 1;
    };
    auto push = [&](TokenKind kind, int node, int width, const std::string& sig,
                    const std::string& name) {
        TokenDesc d;
        d.kind = kind;
        d.node = node;
        d.width = width;
        d.signature = width > 0 ? signature_of(sig, width) : -1;
        d.name = name;
        m.tokens.push_back(std::move(d));
        m.token_to_node.push_back(node);
    };

    push(TokenKind::Policy, -1, 0, "", "POL");
    for (Hand side : {Hand::Right, Hand::Left}) {
        auto palm = graph.palm_of(side);
        if (!palm) continue;
        std::string prefix = side == Hand::Right ? "R" : "L";
        push(TokenKind::HandGlobal, *palm, kHandFeat, "hand", prefix + ".hand");
        for (const auto& node : graph.nodes())
            if (node.role == NodeRole::FingerLink && node.hand == side)
                push(TokenKind::Link, node.id, kLinkFeat, "link" + std::to_string(node.level),
                     node.name);
    }
    if (auto tool = graph.tool_node()) push(TokenKind::Tool, *tool, kToolFeat, "tool", "tool");
    if (auto obj = graph.object_node())
        push(TokenKind::Object, *obj, kObjectFeat, "object", "object");
    return m;
}

PhysGraphNet::PhysGraphNet(const KinematicGraph& graph, EncoderConfig cfg, bool use_bias,
                           std::uint64_t seed)
    : PhysGraphNet(graph, std::move(cfg), use_bias, seed, TokenMap::build(graph)) {}

PhysGraphNet::PhysGraphNet(const KinematicGraph& graph, EncoderConfig cfg, bool use_bias,
                           std::uint64_t seed, TokenMap token_map)
    : graph_(graph),
      cfg_(std::move(cfg)),
      use_bias_(use_bias),
      token_map_(std::move(token_map)),
      biasgen_(graph_, cfg_.heads, cfg_.d_max, cfg_.d0,
               cfg_.alloc.serial.empty() && cfg_.alloc.synergy.empty() && cfg_.alloc.global.empty()
                   ? HeadAllocation::defaults(cfg_.heads)
                   : cfg_.alloc) {
    cfg_.validate();
    Rng rng = Rng::keyed(seed, 0xfeedULL);

    Array pol({cfg_.d});
    for (double& v : pol.data) v = rng.uniform(-0.02, 0.02);
    store_.add("tok/pol", std::move(pol));
    for (std::size_t s = 0; s < token_map_.signatures.size(); ++s)
        init_linear(store_, rng, "tok/" + token_map_.signatures[s], token_map_.signature_width[s],
                    cfg_.d);
    init_layer_norm(store_, "tok/ln", cfg_.d);

    for (int l = 0; l < cfg_.layers; ++l) {
        std::string p = "enc/l" + std::to_string(l);
        init_layer_norm(store_, p + "/ln1", cfg_.d);
        init_linear(store_, rng, p + "/attn/q", cfg_.d, cfg_.d);
        init_linear(store_, rng, p + "/attn/k", cfg_.d, cfg_.d);
        init_linear(store_, rng, p + "/attn/v", cfg_.d, cfg_.d);
        init_linear(store_, rng, p + "/attn/o", cfg_.d, cfg_.d);
        init_layer_norm(store_, p + "/ln2", cfg_.d);
        init_linear(store_, rng, p + "/ff/1", cfg_.d, cfg_.d_ff);
        init_linear(store_, rng, p + "/ff/2", cfg_.d_ff, cfg_.d);
    }
    init_layer_norm(store_, "enc/final_ln", cfg_.d);

    int hh = cfg_.head_hidden > 0 ? cfg_.head_hidden : cfg_.d;
    init_linear(store_, rng, "heads/pi/1", cfg_.d, hh);
    init_linear(store_, rng, "heads/pi/2", hh, cfg_.action_dim);
    init_linear(store_, rng, "heads/v/1", cfg_.d, hh);
    init_linear(store_, rng, "heads/v/2", hh, 1);
    store_.add("heads/log_std", Array({cfg_.action_dim}, cfg_.log_std_init));

    biasgen_.register_params(store_, seed, cfg_.bias_init);
    if (!use_bias_) {
        // "No Bias" ablation: lambdas pinned at zero and the whole bias block
        // excluded from the optimizer, giving a true bias-free transformer.
        for (auto& p : store_.all()) {
            if (p.name.rfind("bias/", 0) == 0) {
                p.trainable = false;
                if (p.name.rfind("bias/lambda", 0) == 0)
                    std::fill(p.value.data.begin(), p.value.data.end(), 0.0);
            }
        }
    }
}

Var PhysGraphNet::tokenize(Tape& tape, const std::vector<const StructuredObs*>& obs) const {
    const std::int64_t B = static_cast<std::int64_t>(obs.size());
    std::vector<Var> rows;
    rows.reserve(token_map_.tokens.size());
    rows.push_back(nn::broadcast_rows(tape, tape.param("tok/pol"), B));
    for (int i = 1; i < token_map_.count(); ++i) {
        const TokenDesc& td = token_map_.tokens[static_cast<std::size_t>(i)];
        Var x = tape.constant(gather_token_features(obs, i, td.width, td.name));
        std::string p = "tok/" + token_map_.signatures[static_cast<std::size_t>(td.signature)];
        Var emb = apply_linear(tape, p, x);
        rows.push_back(apply_layer_norm(tape, "tok/ln", emb, cfg_.ln_eps));
    }
    return nn::stack_tokens(tape, rows);
}

Var PhysGraphNet::token_bias(Tape& tape, const std::vector<const StructuredObs*>& obs) const {
    if (!use_bias_) return {};
    std::vector<const ContactSet*> contacts;
    std::vector<const std::vector<Vec3>*> positions;
    contacts.reserve(obs.size());
    positions.reserve(obs.size());
    for (const StructuredObs* o : obs) {
        contacts.push_back(&o->contacts);
        positions.push_back(&o->positions);
    }
    return biasgen_.composite_token_bias_batch(tape, contacts, positions,
                                               token_map_.token_to_node);
}

Var PhysGraphNet::encode(Tape& tape, Var tokens, Var bias) const {
    Var x = tokens;
    for (int l = 0; l < cfg_.layers; ++l) {
        std::string p = "enc/l" + std::to_string(l);
        Var h = apply_layer_norm(tape, p + "/ln1", x, cfg_.ln_eps);
        Var q = apply_linear(tape, p + "/attn/q", h);
        Var k = apply_linear(tape, p + "/attn/k", h);
        Var v = apply_linear(tape, p + "/attn/v", h);
        // The same head-specific bias is added at every layer (it carries no
        // layer index).
        Var att = nn::attention_core(tape, q, k, v, cfg_.heads, bias, p);
        x = nn::add(tape, x, apply_linear(tape, p + "/attn/o", att));
        Var h2 = apply_layer_norm(tape, p + "/ln2", x, cfg_.ln_eps);
        Var ff = apply_linear(tape, p + "/ff/2",
                              nn::gelu(tape, apply_linear(tape, p + "/ff/1", h2)));
        x = nn::add(tape, x, ff);
    }
    return apply_layer_norm(tape, "enc/final_ln", x, cfg_.ln_eps);
}

std::pair<Var, Var> PhysGraphNet::heads_forward(Tape& tape, Var encoded_pol) const {
    Var mu = apply_linear(tape, "heads/pi/2",
                          nn::gelu(tape, apply_linear(tape, "heads/pi/1", encoded_pol)));
    Var value = apply_linear(tape, "heads/v/2",
                             nn::gelu(tape, apply_linear(tape, "heads/v/1", encoded_pol)));
    return {mu, value};
}

Var PhysGraphNet::clamped_log_std(Tape& tape) const {
    return nn::clamp(tape, tape.param("heads/log_std"), cfg_.log_std_min, cfg_.log_std_max);
}

std::pair<Var, Var> PhysGraphNet::forward_mu_value(
    Tape& tape, const std::vector<const StructuredObs*>& obs) const {
    Var tokens = tokenize(tape, obs);
    Var bias = token_bias(tape, obs);
    Var encoded = encode(tape, tokens, bias);
    return heads_forward(tape, nn::slice_token(tape, encoded, 0));
}

namespace {

ActResult act_common(const nn::ParamStore& store, int A, double ls_min, double ls_max,
                     const std::pair<Var, Var>& mu_value, const Tape& tape, bool deterministic,
                     const nn::Array* noise) {
    const Array& mu = tape.val(mu_value.first);
    const Array& value = tape.val(mu_value.second);
    const std::int64_t B = mu.shape[0];

    std::vector<double> log_std(static_cast<std::size_t>(A));
    const Array& raw = store.at("heads/log_std").value;
    for (int a = 0; a < A; ++a)
        log_std[static_cast<std::size_t>(a)] = std::min(std::max(raw[static_cast<std::size_t>(a)], ls_min), ls_max);

    ActResult out;
    out.mu = mu;
    out.actions = mu;
    out.log_probs.resize(static_cast<std::size_t>(B));
    out.values.resize(static_cast<std::size_t>(B));
    if (!deterministic) {
        if (noise == nullptr || noise->shape != mu.shape)
            throw std::invalid_argument("act: noise must be provided as [B,A] when sampling");
        for (std::int64_t b = 0; b < B; ++b)
            for (int a = 0; a < A; ++a)
                out.actions.data[static_cast<std::size_t>(b * A + a)] +=
                    std::exp(log_std[static_cast<std::size_t>(a)]) *
                    noise->data[static_cast<std::size_t>(b * A + a)];
    }
    for (std::int64_t b = 0; b < B; ++b) {
        out.log_probs[static_cast<std::size_t>(b)] =
            logprob_value(out.actions.data.data() + b * A, mu.data.data() + b * A, log_std.data(), A);
        out.values[static_cast<std::size_t>(b)] = value.data[static_cast<std::size_t>(b)];
    }
    return out;
}

}  // namespace

ActResult PhysGraphNet::act(const std::vector<const StructuredObs*>& obs, bool deterministic,
                            const nn::Array* noise) const {
    Tape tape(const_cast<nn::ParamStore*>(&store_), false);
    auto mv = forward_mu_value(tape, obs);
    return act_common(store_, cfg_.action_dim, cfg_.log_std_min, cfg_.log_std_max, mv, tape,
                      deterministic, noise);
}

EvalVars PhysGraphNet::evaluate(Tape& tape, const std::vector<const StructuredObs*>& obs,
                                const nn::Array& actions) const {
    auto mv = forward_mu_value(tape, obs);
    Var log_std = clamped_log_std(tape);
    auto acts = std::make_shared<const Array>(actions);
    EvalVars ev;
    ev.log_probs = nn::gaussian_logprob(tape, mv.first, log_std, acts);
    ev.entropy = nn::gaussian_entropy(tape, log_std);
    ev.values = nn::reshape(tape, mv.second, {static_cast<std::int64_t>(obs.size())});
    return ev;
}

// ---- baseline ----

BaselineNet::BaselineNet(const TokenMap& token_map, BaselineConfig cfg, std::uint64_t seed)
    : token_map_(token_map), cfg_(std::move(cfg)) {
    if (cfg_.action_dim < 1) throw std::invalid_argument("baseline config: action_dim must be set");
    if (cfg_.hidden_scales.empty())
        throw std::invalid_argument("baseline config: need at least one hidden layer");
    for (int i = 1; i < token_map_.count(); ++i)
        flat_width_ += token_map_.tokens[static_cast<std::size_t>(i)].width;

    Rng rng = Rng::keyed(seed, 0xba5eULL);
    int in = flat_width_;
    for (std::size_t i = 0; i < cfg_.hidden_scales.size(); ++i) {
        int width = std::max(8, static_cast<int>(cfg_.hidden_scales[i] * flat_width_));
        hidden_.push_back(width);
        init_linear(store_, rng, "trunk/" + std::to_string(i), in, width);
        in = width;
    }
    init_linear(store_, rng, "heads/pi", in, cfg_.action_dim);
    init_linear(store_, rng, "heads/v", in, 1);
    store_.add("heads/log_std", Array({cfg_.action_dim}, cfg_.log_std_init));
}

std::pair<Var, Var> BaselineNet::forward_mu_value(
    Tape& tape, const std::vector<const StructuredObs*>& obs) const {
    const std::int64_t B = static_cast<std::int64_t>(obs.size());
    Array flat({B, flat_width_});
    for (std::int64_t b = 0; b < B; ++b) {
        double* dst = flat.data.data() + b * flat_width_;
        const auto& f = obs[static_cast<std::size_t>(b)]->features;
        std::size_t off = 0;
        for (int i = 1; i < token_map_.count(); ++i) {
            const TokenDesc& td = token_map_.tokens[static_cast<std::size_t>(i)];
            if (i >= static_cast<int>(f.size()) ||
                static_cast<int>(f[static_cast<std::size_t>(i)].size()) != td.width)
                throw std::invalid_argument("baseline: feature width mismatch for token " + td.name);
            std::copy_n(f[static_cast<std::size_t>(i)].data(), td.width, dst + off);
            off += static_cast<std::size_t>(td.width);
        }
    }
    Var x = tape.constant(std::move(flat));
    for (std::size_t i = 0; i < hidden_.size(); ++i)
        x = nn::gelu(tape, apply_linear(tape, "trunk/" + std::to_string(i), x));
    Var mu = apply_linear(tape, "heads/pi", x);
    Var value = apply_linear(tape, "heads/v", x);
    return {mu, value};
}

Var BaselineNet::clamped_log_std(Tape& tape) const {
    return nn::clamp(tape, tape.param("heads/log_std"), cfg_.log_std_min, cfg_.log_std_max);
}

ActResult BaselineNet::act(const std::vector<const StructuredObs*>& obs, bool deterministic,
                           const nn::Array* noise) const {
    Tape tape(const_cast<nn::ParamStore*>(&store_), false);
    auto mv = forward_mu_value(tape, obs);
    return act_common(store_, cfg_.action_dim, cfg_.log_std_min, cfg_.log_std_max, mv, tape,
                      deterministic, noise);
}

EvalVars BaselineNet::evaluate(Tape& tape, const std::vector<const StructuredObs*>& obs,
                               const nn::Array& actions) const {
    auto mv = forward_mu_value(tape, obs);
    Var log_std = clamped_log_std(tape);
    auto acts = std::make_shared<const Array>(actions);
    EvalVars ev;
    ev.log_probs = nn::gaussian_logprob(tape, mv.first, log_std, acts);
    ev.entropy = nn::gaussian_entropy(tape, log_std);
    ev.values = nn::reshape(tape, mv.second, {static_cast<std::int64_t>(obs.size())});
    return ev;
}

// ---- counting ----

std::int64_t param_count(const nn::ParamStore& store, const std::string& prefix) {
    std::int64_t n = 0;
    for (const auto& p : store.all())
        if (prefix.empty() || p.name.rfind(prefix, 0) == 0) n += p.value.numel();
    return n;
}

std::vector<std::pair<std::string, std::int64_t>> PolicyNetwork::param_breakdown() const {
    const nn::ParamStore& store = params();
    std::vector<std::pair<std::string, std::int64_t>> rows;
    auto group_of = [](const std::string& name) {
        auto slash = name.find('/');
        return slash == std::string::npos ? name : name.substr(0, slash);
    };
    for (const auto& p : store.all()) {
        std::string g = group_of(p.name);
        auto it = std::find_if(rows.begin(), rows.end(),
                               [&](const auto& r) { return r.first == g; });
        if (it == rows.end())
            rows.emplace_back(g, p.value.numel());
        else
            it->second += p.value.numel();
    }
    rows.emplace_back("total", param_count(store));
    return rows;
}

}  // namespace physgraph
