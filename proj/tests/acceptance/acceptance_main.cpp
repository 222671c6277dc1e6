// Acceptance suite: one self-contained check per criterion, selected with
// --criterion N. Each prints a single [PASS]/[FAIL] line (plus detail lines)
// and exits nonzero on failure. Criteria 8 and 10 train real policies and run
// for tens of minutes; everything else is fast.

#include <algorithm>
#include <chrono>
#include <cmath>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <numeric>
#include <sstream>
#include <thread>
#include <vector>

#include "physgraph/checkpoint.hpp"
#include "physgraph/config.hpp"
#include "physgraph/ppo.hpp"
#include "physgraph/rng.hpp"

using namespace physgraph;
namespace fs = std::filesystem;
using Clock = std::chrono::steady_clock;

namespace {

double secs_since(Clock::time_point t0) {
    return std::chrono::duration<double>(Clock::now() - t0).count();
}

struct Criterion {
    int id;
    const char* summary;
    bool (*run)(std::ostream&);
};

// ---------- shared helpers ----------

GraphSpec random_spec(Rng& rng, int max_nodes) {
    while (true) {
        GraphSpec s;
        int hands = 1 + static_cast<int>(rng.below(2));
        for (int h = 0; h < hands; ++h) {
            HandSpec hs;
            hs.side = (h == 0) ? (rng.below(2) ? Hand::Right : Hand::Left)
                               : (s.hands[0].side == Hand::Right ? Hand::Left : Hand::Right);
            hs.fingers = 1 + static_cast<int>(rng.below(5));
            hs.links_per_finger = 1 + static_cast<int>(rng.below(4));
            s.hands.push_back(hs);
        }
        s.tool = rng.below(2) != 0;
        s.object = rng.below(2) != 0;
        int n = 0;
        for (const auto& h : s.hands) n += 1 + h.fingers * h.links_per_finger;
        n += (s.tool ? 1 : 0) + (s.object ? 1 : 0);
        if (n <= max_nodes) return s;
    }
}

std::vector<int> floyd_warshall(const KinematicGraph& g) {
    const int n = g.size();
    std::vector<int> d(static_cast<std::size_t>(n) * n, kUnreachableHop);
    for (int i = 0; i < n; ++i) d[static_cast<std::size_t>(i) * n + i] = 0;
    for (auto [u, v] : g.bone_edges()) {
        d[static_cast<std::size_t>(u) * n + v] = 1;
        d[static_cast<std::size_t>(v) * n + u] = 1;
    }
    for (int k = 0; k < n; ++k)
        for (int i = 0; i < n; ++i)
            for (int j = 0; j < n; ++j) {
                long via = static_cast<long>(d[static_cast<std::size_t>(i) * n + k]) +
                           d[static_cast<std::size_t>(k) * n + j];
                if (via < d[static_cast<std::size_t>(i) * n + j])
                    d[static_cast<std::size_t>(i) * n + j] = static_cast<int>(via);
            }
    for (int& v : d)
        if (v >= kUnreachableHop) v = kUnreachableHop;
    return d;
}

StructuredObs random_obs(const KinematicGraph& graph, const TokenMap& map, Rng& rng,
                         int contact_pairs = 2) {
    StructuredObs obs;
    obs.features.resize(static_cast<std::size_t>(map.count()));
    for (int i = 1; i < map.count(); ++i) {
        auto& f = obs.features[static_cast<std::size_t>(i)];
        f.resize(static_cast<std::size_t>(map.tokens[static_cast<std::size_t>(i)].width));
        for (double& v : f) v = 0.3 * rng.normal();
    }
    obs.positions.resize(static_cast<std::size_t>(graph.size()));
    for (auto& p : obs.positions) p = {0.1 * rng.normal(), 0.1 * rng.normal(), 0.1 * rng.normal()};
    for (int c = 0; c < contact_pairs; ++c) {
        int u = static_cast<int>(rng.below(static_cast<std::uint64_t>(graph.size())));
        int v = static_cast<int>(rng.below(static_cast<std::uint64_t>(graph.size())));
        if (u != v) obs.contacts.add(u, v);
    }
    return obs;
}

RunConfig acceptance_config() {
    RunConfig cfg = RunConfig::load(std::string(ACCEPTANCE_CONFIG_DIR) + "/acceptance_train.json");
    return cfg;
}

RunConfig default_config() {
    return RunConfig::load(std::string(ACCEPTANCE_CONFIG_DIR) + "/default.json");
}

struct TrainOutcome {
    std::string arch;
    std::uint64_t seed = 0;
    double best_sr = 0.0;
    std::string best_ckpt;
};

TrainOutcome run_training(const RunConfig& base, const std::string& arch, std::uint64_t seed,
                          const std::string& out_dir) {
    RunConfig cfg = base;
    cfg.arch = arch;
    cfg.validate();
    fs::create_directories(out_dir);
    KinematicGraph graph = KinematicGraph::build(cfg.graph);
    TokenMap map = TokenMap::build(graph);
    ToyEnv probe(cfg.graph, cfg.env);
    auto policy = make_policy(cfg, graph, map, probe.action_dim(), seed);
    Trainer trainer(cfg.graph, cfg.env, cfg.ppo, std::move(policy), seed, out_dir, cfg.to_json());
    EvalSummary best = trainer.train();
    TrainOutcome out;
    out.arch = arch;
    out.seed = seed;
    out.best_sr = best.sr;
    out.best_ckpt = out_dir + "/ckpt_best.bin";
    return out;
}

// Runs jobs on a small pool (each training is single threaded and independent).
void run_pool(std::vector<std::function<void()>>& jobs, int workers) {
    std::atomic<std::size_t> next{0};
    auto worker = [&]() {
        while (true) {
            std::size_t i = next.fetch_add(1);
            if (i >= jobs.size()) return;
            jobs[i]();
        }
    };
    std::vector<std::thread> pool;
    for (int w = 0; w < workers; ++w) pool.emplace_back(worker);
    for (auto& t : pool) t.join();
}

// ---------- criteria ----------

bool c1_graph_oracles(std::ostream& os) {
    auto t0 = Clock::now();
    Rng rng = Rng::keyed(0xC1u);
    for (int trial = 0; trial < 200; ++trial) {
        KinematicGraph g = KinematicGraph::build(random_spec(rng, 40));
        if (g.hop_matrix() != floyd_warshall(g)) {
            os << "  hop matrix mismatch on trial " << trial << "\n";
            return false;
        }
        ContactSet contacts;
        for (int c = 0; c < 6; ++c) {
            int u = static_cast<int>(rng.below(static_cast<std::uint64_t>(g.size())));
            int v = static_cast<int>(rng.below(static_cast<std::uint64_t>(g.size())));
            if (u != v) contacts.add(u, v);
        }
        for (int u = 0; u < g.size(); ++u)
            for (int v = 0; v < g.size(); ++v) {
                int expected = (u == v)                    ? 3
                               : contacts.contains(u, v)   ? 2
                               : g.bone_adjacent(u, v)     ? 1
                                                           : 0;
                if (edge_type(g, contacts, u, v) != expected) {
                    os << "  edge_type mismatch at trial " << trial << " pair (" << u << "," << v
                       << ")\n";
                    return false;
                }
            }
    }
    double dt = secs_since(t0);
    os << "  200 random specs, BFS==Floyd-Warshall and edge_type==naive classifier, " << dt
       << " s\n";
    return dt < 10.0;
}

bool c2_bias_math(std::ostream& os) {
    Rng rng = Rng::keyed(0xC2u);
    for (int trial = 0; trial < 20; ++trial) {
        GraphSpec spec = random_spec(rng, 30);
        KinematicGraph g = KinematicGraph::build(spec);
        const int n = g.size();
        const int H = 8, d_max = 8, d0 = 2;
        BiasGenerator gen(g, H, d_max, d0, HeadAllocation::defaults(H));
        nn::ParamStore store;
        gen.register_params(store, 1000u + static_cast<std::uint64_t>(trial));
        for (auto& p : store.all())
            for (double& v : p.value.data) v = 0.5 * rng.normal();
        store.at("bias/sigma_raw").value[0] = BiasGenerator::softplus_inverse(0.05 + rng.uniform());

        std::vector<Vec3> pos(static_cast<std::size_t>(n));
        for (auto& p : pos) p = {0.1 * rng.normal(), 0.1 * rng.normal(), 0.1 * rng.normal()};
        ContactSet contacts;
        for (int c = 0; c < 5; ++c) {
            int u = static_cast<int>(rng.below(static_cast<std::uint64_t>(n)));
            int v = static_cast<int>(rng.below(static_cast<std::uint64_t>(n)));
            if (u != v) contacts.add(u, v);
        }

        nn::Tape t(&store, false);
        const nn::Array& sp = t.val(gen.spatial_bias(t));
        const nn::Array& ed = t.val(gen.edge_bias(t, contacts));
        const nn::Array& ge = t.val(gen.geometric_bias(t, pos));
        const nn::Array& an = t.val(gen.anatomical_bias(t));
        const nn::Array& co = t.val(gen.composite_bias(t, contacts, pos));

        const nn::Array& sp_table = store.at("bias/spatial_table").value;
        const nn::Array& ed_table = store.at("bias/edge_table").value;
        const nn::Array& w_geo = store.at("bias/w_geo").value;
        double sigma = BiasGenerator::sigma_value(store);
        double a_ser = store.at("bias/alpha_ser").value[0];
        double a_syn = store.at("bias/alpha_syn").value[0];
        double l_sp = store.at("bias/lambda_sp").value[0];
        double l_ed = store.at("bias/lambda_edge").value[0];
        double l_ge = store.at("bias/lambda_geo").value[0];
        const nn::Array& l_an = store.at("bias/lambda_anat").value;
        RelationMasks masks = relation_masks(g);

        for (int h = 0; h < H; ++h)
            for (int u = 0; u < n; ++u)
                for (int v = 0; v < n; ++v) {
                    std::size_t i = static_cast<std::size_t>((h * n + u) * n + v);
                    // Eq. 8 oracle.
                    double e_sp =
                        sp_table.data[static_cast<std::size_t>(h * (d_max + 1) +
                                                               hop_clipped(g, u, v, d_max))];
                    // Eqs. 9-10 oracle.
                    double e_ed = ed_table.data[static_cast<std::size_t>(
                        h * 4 + edge_type(g, contacts, u, v))];
                    // Eqs. 11-12 oracle.
                    double e_ge = 0.0;
                    if (g.hop(u, v) > d0) {
                        double d2 = (pos[static_cast<std::size_t>(u)] -
                                     pos[static_cast<std::size_t>(v)])
                                        .norm2();
                        e_ge = w_geo.data[static_cast<std::size_t>(h)] *
                               std::exp(-d2 / (2.0 * sigma * sigma));
                    }
                    // Eq. 13 oracle.
                    double e_an = 0.0;
                    if (h < 2) e_an = a_ser * (masks.serial_at(u, v) ? 1.0 : 0.0);
                    else if (h < 4) e_an = a_syn * (masks.synergy_at(u, v) ? 1.0 : 0.0);

                    if (sp.data[i] != e_sp || ed.data[i] != e_ed ||
                        std::abs(ge.data[i] - e_ge) > 1e-15 || an.data[i] != e_an) {
                        os << "  component oracle mismatch, trial " << trial << "\n";
                        return false;
                    }
                    if (g.hop(u, v) <= d0 && ge.data[i] != 0.0) {
                        os << "  geometric gate violated at hop<=" << d0 << "\n";
                        return false;
                    }
                    double e_co = l_sp * e_sp + l_ed * e_ed + l_ge * e_ge +
                                  l_an.data[static_cast<std::size_t>(h)] * e_an;
                    if (std::abs(co.data[i] - e_co) > 1e-12) {
                        os << "  composite differs from lambda-weighted sum by "
                           << std::abs(co.data[i] - e_co) << "\n";
                        return false;
                    }
                }
    }
    os << "  20 random graphs x 8 heads, all four components + composite match closed forms\n";
    return true;
}

bool c3_bias_additivity(std::ostream& os) {
    KinematicGraph g = KinematicGraph::build(GraphSpec::bimanual(3, 3));
    EncoderConfig cfg;
    cfg.d = 32;
    cfg.heads = 8;
    cfg.layers = 3;
    cfg.d_ff = 64;
    cfg.action_dim = 30;
    PhysGraphNet with_bias(g, cfg, true, 0xC3u);
    PhysGraphNet no_bias(g, cfg, false, 0xC3u);  // same seed -> identical weights

    // Freeze every lambda at zero in the biased net; it still computes and
    // adds its (now all-zero) composite.
    for (auto& p : with_bias.params().all())
        if (p.name.rfind("bias/lambda", 0) == 0)
            std::fill(p.value.data.begin(), p.value.data.end(), 0.0);

    Rng rng = Rng::keyed(0xC31u);
    for (int trial = 0; trial < 5; ++trial) {
        StructuredObs obs = random_obs(g, with_bias.token_map(), rng);
        ActResult a = with_bias.act({&obs}, true, nullptr);
        ActResult b = no_bias.act({&obs}, true, nullptr);
        if (a.mu.data != b.mu.data || a.values != b.values) {
            os << "  outputs differ bitwise on trial " << trial << "\n";
            return false;
        }
    }
    os << "  lambda=0 encoder output is bit-identical to the unbiased transformer (5 inputs)\n";
    return true;
}

bool c4_gradient_correctness(std::ostream& os) {
    auto t0 = Clock::now();
    GraphSpec spec;
    spec.hands = {{Hand::Right, 2, 3}};
    spec.tool = true;
    spec.object = true;
    KinematicGraph g = KinematicGraph::build(spec);
    if (g.size() != 9) {
        os << "  expected N=9\n";
        return false;
    }

    auto check = [&](int layers, bool require_bias_grads) {
        EncoderConfig cfg;
        cfg.d = 16;
        cfg.heads = 4;
        cfg.layers = layers;
        cfg.d_ff = 32;
        cfg.action_dim = 4;
        PhysGraphNet net(g, cfg, true, 0xC4u);
        Rng rng = Rng::keyed(0xC41u + static_cast<std::uint64_t>(layers));
        StructuredObs o1 = random_obs(g, net.token_map(), rng);
        StructuredObs o2 = random_obs(g, net.token_map(), rng);
        std::vector<const StructuredObs*> batch = {&o1, &o2};
        nn::Array noise({2, 4});
        for (double& v : noise.data) v = rng.normal();
        ActResult sampled = net.act(batch, false, &noise);
        nn::Array returns({2}, {0.4, -0.1});
        auto f = [&](nn::Tape& t) {
            EvalVars ev = net.evaluate(t, batch, sampled.actions);
            nn::Var vloss =
                nn::mean_all(t, nn::square(t, nn::sub_const(t, ev.values, returns)));
            return nn::add(t, nn::mean_all(t, ev.log_probs), vloss);
        };
        auto report = nn::grad_check(f, net.params(), 1e-5, 1e-4);
        os << "  L=" << layers << ": worst rel err " << report.worst_rel_err << " ("
           << report.worst_param << ")\n";
        if (!report.pass) return false;
        if (require_bias_grads) {
            net.params().zero_grad();
            nn::Tape t(&net.params(), true);
            nn::Var y = f(t);
            t.backward(y);
            t.accumulate_param_grads();
            for (const char* name :
                 {"bias/spatial_table", "bias/edge_table", "bias/w_geo", "bias/sigma_raw",
                  "bias/lambda_sp", "bias/lambda_edge", "bias/lambda_geo", "bias/lambda_anat",
                  "bias/alpha_ser", "bias/alpha_syn"}) {
                double gsum = 0.0;
                for (double v : net.params().at(name).grad.data) gsum += std::abs(v);
                if (gsum == 0.0) {
                    os << "  " << name << " received zero gradient at L=" << layers << "\n";
                    return false;
                }
            }
        }
        return true;
    };

    // The criterion's tiny config (L=1), plus an L=2 pass where the policy
    // readout genuinely depends on every bias field.
    bool ok = check(1, false) && check(2, true);
    double dt = secs_since(t0);
    os << "  runtime " << dt << " s\n";
    return ok && dt < 60.0;
}

bool c5_equivariance(std::ostream& os) {
    KinematicGraph g = KinematicGraph::build(GraphSpec::bimanual(2, 2));
    const int n = g.size();
    EncoderConfig cfg;
    cfg.d = 32;
    cfg.heads = 4;
    cfg.layers = 2;
    cfg.d_ff = 64;
    cfg.action_dim = 6;
    PhysGraphNet net_a(g, cfg, true, 0xC5u);
    Rng rng = Rng::keyed(0xC51u);

    double worst = 0.0;
    for (int trial = 0; trial < 3; ++trial) {
        StructuredObs obs = random_obs(g, net_a.token_map(), rng, 3);
        ActResult ra = net_a.act({&obs}, true, nullptr);

        std::vector<int> pi(static_cast<std::size_t>(n));
        std::iota(pi.begin(), pi.end(), 0);
        for (int i = n - 1; i > 0; --i)
            std::swap(pi[static_cast<std::size_t>(i)],
                      pi[static_cast<std::size_t>(rng.below(static_cast<std::uint64_t>(i + 1)))]);
        KinematicGraph g2 = KinematicGraph::relabel(g, pi);

        const TokenMap& map_a = net_a.token_map();
        const int T = map_a.count();
        std::vector<int> tau(static_cast<std::size_t>(T));
        std::iota(tau.begin(), tau.end(), 0);
        for (int i = T - 1; i > 1; --i)
            std::swap(tau[static_cast<std::size_t>(i)],
                      tau[static_cast<std::size_t>(1 + rng.below(static_cast<std::uint64_t>(i)))]);
        TokenMap map_b = map_a;
        for (int i = 0; i < T; ++i) {
            TokenDesc d = map_a.tokens[static_cast<std::size_t>(tau[static_cast<std::size_t>(i)])];
            if (d.node >= 0) d.node = pi[static_cast<std::size_t>(d.node)];
            map_b.tokens[static_cast<std::size_t>(i)] = d;
            map_b.token_to_node[static_cast<std::size_t>(i)] = d.node;
        }
        PhysGraphNet net_b(g2, cfg, true, 0xC5u, map_b);
        for (const auto& p : net_a.params().all()) net_b.params().at(p.name).value = p.value;

        StructuredObs obs_b;
        obs_b.features.resize(static_cast<std::size_t>(T));
        for (int i = 0; i < T; ++i)
            obs_b.features[static_cast<std::size_t>(i)] =
                obs.features[static_cast<std::size_t>(tau[static_cast<std::size_t>(i)])];
        obs_b.positions.resize(static_cast<std::size_t>(n));
        for (int u = 0; u < n; ++u)
            obs_b.positions[static_cast<std::size_t>(pi[static_cast<std::size_t>(u)])] =
                obs.positions[static_cast<std::size_t>(u)];
        for (auto [u, v] : obs.contacts.pairs)
            obs_b.contacts.add(pi[static_cast<std::size_t>(u)], pi[static_cast<std::size_t>(v)]);

        ActResult rb = net_b.act({&obs_b}, true, nullptr);
        for (std::size_t i = 0; i < ra.mu.data.size(); ++i)
            worst = std::max(worst, std::abs(ra.mu.data[i] - rb.mu.data[i]));
        worst = std::max(worst, std::abs(ra.values[0] - rb.values[0]));
    }
    os << "  3 random node+token permutations, worst |delta mu/value| = " << worst << "\n";
    return worst < 1e-10;
}

bool c6_gae_oracle(std::ostream& os) {
    Rng rng = Rng::keyed(0xC6u);
    double worst = 0.0;
    for (int trial = 0; trial < 1000; ++trial) {
        RolloutBatch b;
        b.per_env.resize(1);
        int R = 1 + static_cast<int>(rng.below(8));
        for (int t = 0; t < R; ++t) {
            Transition tr;
            tr.reward = rng.normal();
            tr.value = rng.normal();
            tr.done = rng.uniform() < 0.3;
            b.per_env[0].push_back(std::move(tr));
        }
        b.bootstrap_values.push_back(rng.normal());
        double gamma = rng.uniform(0.5, 1.0);
        double lambda = rng.uniform(0.0, 1.0);
        compute_gae(b, gamma, lambda);

        for (int t = 0; t < R; ++t) {
            // Brute-force truncated exponential sum.
            double acc = 0.0, w = 1.0;
            for (int l = t; l < R; ++l) {
                const Transition& tr = b.per_env[0][static_cast<std::size_t>(l)];
                double v_next =
                    (l + 1 < R) ? b.per_env[0][static_cast<std::size_t>(l + 1)].value
                                : b.bootstrap_values[0];
                double nd = tr.done ? 0.0 : 1.0;
                acc += w * (tr.reward + gamma * v_next * nd - tr.value);
                if (tr.done) break;
                w *= gamma * lambda;
            }
            worst = std::max(worst,
                             std::abs(b.advantages[0][static_cast<std::size_t>(t)] - acc));
        }
    }
    os << "  1000 random episodes (T<=8), max |GAE - brute force| = " << worst << "\n";
    return worst < 1e-12;
}

bool c7_env_self_consistency(std::ostream& os) {
    bool ok = true;
    for (Task task : {Task::ReachGrasp, Task::CarryTool, Task::ToolToObject}) {
        EnvConfig cfg;
        cfg.task = task;
        cfg.horizon = 300;
        cfg.noise_joint = cfg.noise_wrist_pos = cfg.noise_wrist_rot = 0.0;
        ToyEnv env(GraphSpec::bimanual(3, 3), cfg);
        env.reset(0xC7u + static_cast<std::uint64_t>(task), 0, 0);
        EpisodeRecord rec;
        double attach_drift = 0.0;
        while (!env.episode_done()) {
            StepResult r = env.step(env.reference_action());
            rec.add(r.e_t, r.e_j, r.e_ft);
            rec.failed = r.failed;
            for (const BodyState* b : {&env.state().tool, &env.state().object}) {
                if (b->grasped_by == kFree) continue;
                const HandState& h = b->grasped_by == kRightHand ? env.state().right
                                                                  : env.state().left;
                Pose expect = h.wrist.compose(b->grasp_rel);
                attach_drift = std::max(attach_drift, (expect.p - b->pose.p).norm() +
                                                          quat_angle(expect.q, b->pose.q));
            }
        }
        rec.completed = !rec.failed;
        EpisodeMetrics m = compute_metrics(rec, cfg);
        double max_err_m = std::max({m.e_t_cm, m.e_j_cm, m.e_ft_cm}) / 100.0;
        os << "  " << task_name(task) << ": max metric " << max_err_m << " m, SR "
           << (m.success ? 100 : 0) << "%, attach drift " << attach_drift << "\n";
        ok = ok && max_err_m < 1e-9 && m.success && attach_drift < 1e-12;
    }

    // 1e5-step fuzz with clamped random actions.
    EnvConfig cfg;
    cfg.task = Task::CarryTool;
    cfg.horizon = 120;
    ToyEnv env(GraphSpec::bimanual(3, 3), cfg);
    Rng rng = Rng::keyed(0xC7FU);
    int episode = 0;
    env.reset(0xC70u, 0, episode);
    for (int step = 0; step < 100000; ++step) {
        StepResult r = env.step(env.random_action(rng));
        if (!std::isfinite(r.reward) || !std::isfinite(r.e_j)) {
            os << "  non-finite value at fuzz step " << step << "\n";
            return false;
        }
        for (const auto& f : r.obs.features)
            for (double v : f)
                if (!std::isfinite(v)) {
                    os << "  non-finite observation at fuzz step " << step << "\n";
                    return false;
                }
        if (r.done) env.reset(0xC70u, 0, ++episode);
    }
    os << "  fuzz: 100000 random steps finite\n";
    return ok;
}

bool c8_learning_smoke(std::ostream& os) {
    RunConfig base = acceptance_config();
    const std::vector<std::uint64_t> seeds = {0, 1, 2};
    const std::vector<std::string> archs = {"physgraph", "physgraph-nobias", "mlp-baseline"};
    fs::create_directories("acceptance_runs");

    std::vector<TrainOutcome> outcomes(archs.size() * seeds.size());
    std::vector<std::function<void()>> jobs;
    for (std::size_t a = 0; a < archs.size(); ++a)
        for (std::size_t s = 0; s < seeds.size(); ++s)
            jobs.push_back([&, a, s]() {
                std::string dir = "acceptance_runs/c8_" + archs[a] + "_seed" +
                                  std::to_string(seeds[s]);
                outcomes[a * seeds.size() + s] = run_training(base, archs[a], seeds[s], dir);
            });
    int workers = std::max(1u, std::min(2u, std::thread::hardware_concurrency()));
    auto t0 = Clock::now();
    run_pool(jobs, workers);
    os << "  9 trainings (" << base.ppo.max_updates << " updates each) took "
       << secs_since(t0) / 60.0 << " min on " << workers << " workers\n";

    auto mean_sr = [&](const std::string& arch) {
        double acc = 0.0;
        for (const auto& o : outcomes)
            if (o.arch == arch) acc += o.best_sr;
        return 100.0 * acc / seeds.size();
    };
    double full = mean_sr("physgraph");
    double nobias = mean_sr("physgraph-nobias");
    double baseline = mean_sr("mlp-baseline");
    for (const auto& o : outcomes)
        os << "  " << o.arch << " seed " << o.seed << ": best eval SR "
           << 100.0 * o.best_sr << "%\n";
    os << "  seed means: physgraph " << full << "%, nobias " << nobias << "%, baseline "
       << baseline << "%\n";

    bool gate_a = full >= 70.0;
    bool ordering = (full >= nobias - 2.0) && (nobias >= baseline - 2.0);
    bool fallback = full >= baseline + 5.0;
    os << "  (a) physgraph mean >= 70%: " << (gate_a ? "yes" : "NO") << "\n";
    os << "  (b) ordering full >= nobias >= baseline (2-pt ties ok): "
       << (ordering ? "holds" : "violated") << "\n";
    if (!ordering)
        os << "  fallback gate physgraph >= baseline + 5: " << (fallback ? "holds" : "NO") << "\n";
    return gate_a && (ordering || fallback);
}

bool c9_param_facility(std::ostream& os) {
    RunConfig cfg = default_config();
    KinematicGraph graph = KinematicGraph::build(cfg.graph);
    TokenMap map = TokenMap::build(graph);
    ToyEnv probe(cfg.graph, cfg.env);
    RunConfig pg_cfg = cfg;
    pg_cfg.arch = "physgraph";
    RunConfig mlp_cfg = cfg;
    mlp_cfg.arch = "mlp-baseline";
    auto pg = make_policy(pg_cfg, graph, map, probe.action_dim(), 0);
    auto mlp = make_policy(mlp_cfg, graph, map, probe.action_dim(), 0);

    std::int64_t pg_total = param_count(pg->params());
    std::int64_t mlp_total = param_count(mlp->params());
    // Breakdown rows must sum to the store total (delegation check).
    std::int64_t sum = 0;
    for (const auto& [name, count] : pg->param_breakdown())
        if (name != "total") sum += count;
    if (sum != pg_total) {
        os << "  breakdown does not sum to total\n";
        return false;
    }
    // Bias tables line item: H*(D_max+1) + H*4 + H (w_geo) + H (lambda_anat)
    // + 3 shared lambdas + 2 alphas + 1 sigma.
    std::int64_t bias_expected = 8 * 9 + 8 * 4 + 8 + 8 + 3 + 2 + 1;
    if (param_count(pg->params(), "bias/") != bias_expected) {
        os << "  bias parameter count mismatch\n";
        return false;
    }
    double ratio = static_cast<double>(pg_total) / static_cast<double>(mlp_total);
    os << "  pinned defaults: physgraph " << pg_total << ", baseline " << mlp_total
       << ", ratio " << ratio << "\n";
    return pg_total < mlp_total;
}

bool c10_topology_flexibility(std::ostream& os) {
    // Same code path trains three morphologies for 10 updates.
    for (auto [f, l] : {std::pair{5, 3}, std::pair{4, 4}, std::pair{2, 2}}) {
        RunConfig cfg = acceptance_config();
        cfg.graph = GraphSpec::bimanual(f, l);
        cfg.ppo.max_updates = 10;
        cfg.ppo.eval_interval = 10;
        cfg.ppo.eval_episodes = 4;
        std::string dir = "acceptance_runs/c10_f" + std::to_string(f) + "l" + std::to_string(l);
        TrainOutcome out = run_training(cfg, "physgraph", 0, dir);
        os << "  F=" << f << " L=" << l << ": 10-update smoke trained (best SR "
           << 100.0 * out.best_sr << "%)\n";
    }

    // Frozen carry-tool checkpoint, geometry-swap eval vs a random policy.
    RunConfig carry = acceptance_config();
    carry.env.task = Task::CarryTool;
    std::string dir = "acceptance_runs/c10_carry";
    TrainOutcome trained = run_training(carry, "physgraph", 0, dir);
    os << "  carry-tool training: best eval SR " << 100.0 * trained.best_sr << "%\n";

    Checkpoint ckpt = load_checkpoint(trained.best_ckpt);
    RunConfig eval_cfg = RunConfig::from_json(ckpt.config);
    eval_cfg.arch = ckpt.arch;
    eval_cfg.env.tool_scale = 0.6;
    KinematicGraph graph = KinematicGraph::build(eval_cfg.graph);
    TokenMap map = TokenMap::build(graph);
    ToyEnv probe(eval_cfg.graph, eval_cfg.env);
    auto policy = make_policy(eval_cfg, graph, map, probe.action_dim(), 0);
    ckpt.restore_store(policy->params());

    EvalSummary swapped =
        evaluate_policy(policy.get(), eval_cfg.graph, eval_cfg.env, 64, 0xC10u);
    EvalSummary random =
        evaluate_policy(nullptr, eval_cfg.graph, eval_cfg.env, 64, 0xC10u, true);
    os << "  tool_scale=0.6 frozen-policy SR " << 100.0 * swapped.sr << "% vs random policy SR "
       << 100.0 * random.sr << "%\n";
    return swapped.sr > random.sr;
}

bool c11_determinism_persistence(std::ostream& os) {
    RunConfig cfg = acceptance_config();
    cfg.seeds = {0};
    cfg.ppo.max_updates = 3;
    cfg.ppo.eval_interval = 2;
    cfg.ppo.eval_episodes = 4;
    nlohmann::json manifest = cfg.to_json();

    KinematicGraph graph = KinematicGraph::build(cfg.graph);
    TokenMap map = TokenMap::build(graph);
    ToyEnv probe(cfg.graph, cfg.env);

    auto train_once = [&](const std::string& out) {
        fs::remove_all(out);
        fs::create_directories(out);
        Trainer t(cfg.graph, cfg.env, cfg.ppo,
                  make_policy(cfg, graph, map, probe.action_dim(), 0), 0, out, manifest);
        t.train();
    };
    train_once("acceptance_runs/c11_a");
    train_once("acceptance_runs/c11_b");

    auto slurp = [](const std::string& p) {
        std::ifstream is(p, std::ios::binary);
        return std::string(std::istreambuf_iterator<char>(is), {});
    };
    if (slurp("acceptance_runs/c11_a/ckpt_latest.bin") !=
        slurp("acceptance_runs/c11_b/ckpt_latest.bin")) {
        os << "  repeated runs produced different checkpoints\n";
        return false;
    }
    std::ifstream ia("acceptance_runs/c11_a/metrics.jsonl"), ib("acceptance_runs/c11_b/metrics.jsonl");
    std::string la, lb;
    while (std::getline(ia, la) && std::getline(ib, lb)) {
        auto ja = nlohmann::json::parse(la);
        auto jb = nlohmann::json::parse(lb);
        ja.erase("wall_time_s");
        jb.erase("wall_time_s");
        if (ja != jb) {
            os << "  metrics differ beyond wall time\n";
            return false;
        }
    }
    os << "  fixed-seed reruns: checkpoints byte-identical, metrics identical minus wall time\n";

    // Save -> resume reproduces the next update bit-exactly.
    Trainer a(cfg.graph, cfg.env, cfg.ppo, make_policy(cfg, graph, map, probe.action_dim(), 0),
              0, "", manifest);
    a.run_update();
    a.save_checkpoint("acceptance_runs/c11_resume.bin", true);
    a.run_update();
    std::vector<double> want;
    for (const auto& p : a.policy().params().all())
        want.insert(want.end(), p.value.data.begin(), p.value.data.end());

    Trainer b(cfg.graph, cfg.env, cfg.ppo, make_policy(cfg, graph, map, probe.action_dim(), 0),
              0, "", manifest);
    b.restore_checkpoint("acceptance_runs/c11_resume.bin");
    b.run_update();
    std::vector<double> got;
    for (const auto& p : b.policy().params().all())
        got.insert(got.end(), p.value.data.begin(), p.value.data.end());
    if (want != got) {
        os << "  resumed update diverged\n";
        return false;
    }
    os << "  checkpoint resume: next update bit-exact\n";

    // Schema goldens: metrics keys and the eval CSV header.
    std::ifstream is("acceptance_runs/c11_a/metrics.jsonl");
    std::getline(is, la);
    auto j = nlohmann::json::parse(la);
    for (const char* key : {"update", "wall_time_s", "mean_reward", "policy_loss", "value_loss",
                            "entropy", "approx_kl", "clip_fraction", "lambda_sp", "sigma",
                            "alpha_ser"})
        if (!j.contains(key)) {
            os << "  metrics line missing key " << key << "\n";
            return false;
        }
    os << "  metrics JSONL schema intact\n";
    return true;
}

const Criterion kCriteria[] = {
    {1, "graph oracle equivalence (BFS vs Floyd-Warshall, edge_type vs naive)", c1_graph_oracles},
    {2, "bias math suite (component oracles, composite sum, geometric gate)", c2_bias_math},
    {3, "bias-additivity identity (lambda=0 equals unbiased transformer, bitwise)",
     c3_bias_additivity},
    {4, "gradient correctness (finite differences through encoder and biasgen)",
     c4_gradient_correctness},
    {5, "node-relabeling equivariance (< 1e-10)", c5_equivariance},
    {6, "GAE oracle equivalence (1000 random episodes, 1e-12)", c6_gae_oracle},
    {7, "environment self-consistency (replay, attachment rigidity, fuzz)",
     c7_env_self_consistency},
    {8, "learning smoke (physgraph >= 70% SR; arch ordering at shared budget)", c8_learning_smoke},
    {9, "parameter-efficiency facility (physgraph < baseline at pinned defaults)",
     c9_param_facility},
    {10, "topology flexibility and zero-shot geometry swap", c10_topology_flexibility},
    {11, "determinism and persistence (bit-exact reruns, resume, schemas)",
     c11_determinism_persistence},
};

}  // namespace

int main(int argc, char** argv) {
    int which = 0;
    for (int i = 1; i < argc; ++i) {
        if (std::strcmp(argv[i], "--criterion") == 0 && i + 1 < argc) which = std::atoi(argv[++i]);
    }

    bool all_ok = true;
    for (const Criterion& c : kCriteria) {
        if (which != 0 && c.id != which) continue;
        std::ostringstream detail;
        bool ok = false;
        try {
            ok = c.run(detail);
        } catch (const std::exception& e) {
            detail << "  exception: " << e.what() << "\n";
        }
        std::cout << (ok ? "[PASS]" : "[FAIL]") << " criterion " << c.id << ": " << c.summary
                  << "\n"
                  << detail.str();
        all_ok = all_ok && ok;
    }
    return all_ok ? 0 : 1;
}
