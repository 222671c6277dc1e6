// physgraph: train / eval / inspect-bias / count-params command line.

#include <CLI11.hpp>

#include <filesystem>
#include <fstream>
#include <iomanip>
#include <iostream>
#include <map>
#include <sstream>

#include "physgraph/checkpoint.hpp"
#include "physgraph/config.hpp"
#include "physgraph/ppo.hpp"

namespace fs = std::filesystem;
using namespace physgraph;

namespace {

struct EvalRow {
    std::string arch, task;
    std::string seed;
    int episodes = 0;
    EvalSummary summary;
};

void print_eval_table(std::ostream& os, const std::vector<EvalRow>& rows) {
    os << std::left << std::setw(18) << "arch" << std::setw(16) << "task" << std::setw(8) << "seed"
       << std::setw(10) << "episodes" << std::right << std::setw(8) << "SR%" << std::setw(10)
       << "E_t_cm" << std::setw(10) << "E_j_cm" << std::setw(10) << "E_ft_cm" << "\n";
    for (const auto& r : rows) {
        os << std::left << std::setw(18) << r.arch << std::setw(16) << r.task << std::setw(8)
           << r.seed << std::setw(10) << r.episodes << std::right << std::fixed
           << std::setprecision(2) << std::setw(8) << 100.0 * r.summary.sr << std::setw(10)
           << r.summary.e_t_cm << std::setw(10) << r.summary.e_j_cm << std::setw(10)
           << r.summary.e_ft_cm << "\n";
    }
    os.unsetf(std::ios::fixed);
}

void write_eval_csv(const std::string& path, const std::vector<EvalRow>& rows) {
    std::ofstream os(path);
    if (!os) throw std::runtime_error("cannot open CSV for writing: " + path);
    os << "arch,task,seed,episodes,SR,E_t_cm,E_j_cm,E_ft_cm\n";
    for (const auto& r : rows) {
        os << r.arch << ',' << r.task << ',' << r.seed << ',' << r.episodes << ','
           << std::setprecision(10) << 100.0 * r.summary.sr << ',' << r.summary.e_t_cm << ','
           << r.summary.e_j_cm << ',' << r.summary.e_ft_cm << "\n";
    }
}

// "tool_scale=0.6,object_scale=1.2,object_shape=sphere"
void apply_geometry_swap(EnvConfig& env, const std::string& spec) {
    std::stringstream ss(spec);
    std::string item;
    while (std::getline(ss, item, ',')) {
        if (item.empty()) continue;
        auto eq = item.find('=');
        if (eq == std::string::npos)
            throw std::invalid_argument("geometry-swap entry '" + item + "' must be key=value");
        std::string key = item.substr(0, eq);
        std::string value = item.substr(eq + 1);
        if (key == "tool_scale")
            env.tool_scale = std::stod(value);
        else if (key == "object_scale")
            env.object_scale = std::stod(value);
        else if (key == "object_shape") {
            if (value != "sphere")
                throw std::invalid_argument("geometry-swap: only spherical objects are supported");
        } else {
            throw std::invalid_argument("geometry-swap: unknown key '" + key + "'");
        }
    }
}

std::vector<std::uint64_t> parse_seed_list(const std::string& s) {
    std::vector<std::uint64_t> seeds;
    std::stringstream ss(s);
    std::string item;
    while (std::getline(ss, item, ','))
        if (!item.empty()) seeds.push_back(std::stoull(item));
    if (seeds.empty()) throw std::invalid_argument("empty seed list");
    return seeds;
}

RunConfig config_from_checkpoint(const Checkpoint& ckpt) {
    RunConfig cfg = RunConfig::from_json(ckpt.config);
    cfg.arch = ckpt.arch;
    return cfg;
}

std::unique_ptr<PolicyNetwork> policy_from_checkpoint(const Checkpoint& ckpt,
                                                      const RunConfig& cfg) {
    KinematicGraph graph = KinematicGraph::build(cfg.graph);
    TokenMap map = TokenMap::build(graph);
    ToyEnv probe(cfg.graph, cfg.env);
    auto policy = make_policy(cfg, graph, map, probe.action_dim(), 0);
    ckpt.restore_store(policy->params());
    return policy;
}

int cmd_train(const std::string& config_path, const std::vector<std::string>& overrides,
              const std::string& arch_flag, const std::string& out_flag,
              const std::string& resume_path) {
    RunConfig cfg = RunConfig::load(config_path, overrides);
    if (!arch_flag.empty()) {
        cfg.arch = arch_flag;
        cfg.validate();
    }
    if (!out_flag.empty()) cfg.out_dir = out_flag;
    if (!resume_path.empty() && cfg.seeds.size() != 1)
        throw std::invalid_argument("--resume needs a single-seed config (use --override seeds=[N])");

    fs::create_directories(cfg.out_dir);
    {
        std::ofstream os(cfg.out_dir + "/config.json");
        os << cfg.to_json().dump(2) << "\n";
    }

    KinematicGraph graph = KinematicGraph::build(cfg.graph);
    TokenMap map = TokenMap::build(graph);
    ToyEnv probe(cfg.graph, cfg.env);

    for (std::uint64_t seed : cfg.seeds) {
        std::string run_dir = cfg.out_dir + "/seed" + std::to_string(seed);
        fs::create_directories(run_dir);
        auto policy = make_policy(cfg, graph, map, probe.action_dim(), seed);
        Trainer trainer(cfg.graph, cfg.env, cfg.ppo, std::move(policy), seed, run_dir,
                        cfg.to_json());
        if (!resume_path.empty()) trainer.restore_checkpoint(resume_path);
        EvalSummary best = trainer.train();
        std::cout << "seed " << seed << ": best eval SR " << std::fixed << std::setprecision(2)
                  << 100.0 * best.sr << "% (E_t " << best.e_t_cm << " cm, E_j " << best.e_j_cm
                  << " cm, E_ft " << best.e_ft_cm << " cm)\n";
        std::cout.unsetf(std::ios::fixed);
    }
    return 0;
}

int cmd_eval(const std::string& checkpoint_path, const std::string& config_path,
             const std::vector<std::string>& overrides, int episodes, const std::string& seeds_str,
             const std::string& swap, const std::string& csv_path, bool random_policy,
             const std::string& task_flag) {
    if (episodes < 1) throw std::invalid_argument("--episodes must be >= 1");
    RunConfig cfg;
    std::unique_ptr<PolicyNetwork> policy;
    if (!checkpoint_path.empty()) {
        Checkpoint ckpt = load_checkpoint(checkpoint_path);
        cfg = config_from_checkpoint(ckpt);
        for (const auto& o : overrides) {
            nlohmann::json j = cfg.to_json();
            apply_override(j, o);
            cfg = RunConfig::from_json(j);
            cfg.arch = ckpt.arch;
        }
        policy = policy_from_checkpoint(ckpt, cfg);
    } else if (random_policy && !config_path.empty()) {
        cfg = RunConfig::load(config_path, overrides);
    } else {
        throw std::invalid_argument("eval needs --checkpoint, or --random-policy with --config");
    }
    if (!task_flag.empty()) cfg.env.task = task_from_string(task_flag);
    if (!swap.empty()) apply_geometry_swap(cfg.env, swap);

    std::vector<std::uint64_t> seeds = parse_seed_list(seeds_str);
    std::string arch = random_policy ? "random" : cfg.arch;
    std::vector<EvalRow> rows;
    EvalSummary agg;
    for (std::uint64_t seed : seeds) {
        EvalSummary s = evaluate_policy(policy.get(), cfg.graph, cfg.env, episodes, seed,
                                        random_policy);
        rows.push_back({arch, task_name(cfg.env.task), std::to_string(seed), episodes, s});
        agg.sr += s.sr;
        agg.e_t_cm += s.e_t_cm;
        agg.e_j_cm += s.e_j_cm;
        agg.e_ft_cm += s.e_ft_cm;
        agg.mean_return += s.mean_return;
    }
    double n = static_cast<double>(seeds.size());
    agg.sr /= n;
    agg.e_t_cm /= n;
    agg.e_j_cm /= n;
    agg.e_ft_cm /= n;
    agg.mean_return /= n;
    agg.episodes = episodes * static_cast<int>(seeds.size());
    rows.push_back({arch, task_name(cfg.env.task), "mean", agg.episodes, agg});

    print_eval_table(std::cout, rows);
    if (!csv_path.empty()) write_eval_csv(csv_path, rows);
    return 0;
}

int cmd_inspect_bias(const std::string& checkpoint_path, const std::string& config_path,
                     const std::vector<std::string>& overrides, const std::string& graph_path,
                     const std::string& positions_path, const std::string& contacts_path,
                     const std::string& out_dir, std::uint64_t seed) {
    RunConfig cfg;
    std::unique_ptr<PolicyNetwork> policy;
    if (!checkpoint_path.empty()) {
        Checkpoint ckpt = load_checkpoint(checkpoint_path);
        cfg = config_from_checkpoint(ckpt);
        if (cfg.arch == "mlp-baseline")
            throw std::invalid_argument("inspect-bias: the MLP baseline has no bias generator");
        policy = policy_from_checkpoint(ckpt, cfg);
    } else if (!config_path.empty()) {
        cfg = RunConfig::load(config_path, overrides);
        if (cfg.arch == "mlp-baseline") cfg.arch = "physgraph";
    } else {
        throw std::invalid_argument("inspect-bias needs --checkpoint or --config");
    }
    if (!graph_path.empty()) cfg.graph = load_graph_spec(graph_path);

    KinematicGraph graph = KinematicGraph::build(cfg.graph);
    TokenMap map = TokenMap::build(graph);
    ToyEnv env(cfg.graph, cfg.env);
    if (!policy) {
        auto fresh = make_policy(cfg, graph, map, env.action_dim(), seed);
        policy = std::move(fresh);
    }
    auto* net = dynamic_cast<PhysGraphNet*>(policy.get());
    if (net == nullptr) throw std::runtime_error("inspect-bias: policy has no bias generator");

    // Positions: file override or the reference rest pose (reset without noise).
    EnvConfig quiet = cfg.env;
    quiet.noise_joint = quiet.noise_wrist_pos = quiet.noise_wrist_rot = 0.0;
    ToyEnv rest_env(cfg.graph, quiet);
    rest_env.reset(seed, 0, 0);
    std::vector<Vec3> positions = rest_env.node_positions();
    if (!positions_path.empty()) {
        std::ifstream is(positions_path);
        if (!is) throw std::runtime_error("cannot open positions file: " + positions_path);
        nlohmann::json j;
        is >> j;
        for (auto it = j.begin(); it != j.end(); ++it) {
            int node = graph.find_node(it.key());
            if (node < 0)
                throw std::invalid_argument("positions file: unknown node name '" + it.key() + "'");
            auto v = it.value().get<std::vector<double>>();
            if (v.size() != 3)
                throw std::invalid_argument("positions file: '" + it.key() + "' needs [x,y,z]");
            positions[static_cast<std::size_t>(node)] = {v[0], v[1], v[2]};
        }
    }
    ContactSet contacts;
    if (!contacts_path.empty()) {
        std::ifstream is(contacts_path);
        if (!is) throw std::runtime_error("cannot open contacts file: " + contacts_path);
        nlohmann::json j;
        is >> j;
        for (const auto& pair : j) {
            auto names = pair.get<std::vector<std::string>>();
            if (names.size() != 2)
                throw std::invalid_argument("contacts file: entries must be [name, name]");
            int u = graph.find_node(names[0]);
            int v = graph.find_node(names[1]);
            if (u < 0) throw std::invalid_argument("contacts file: unknown node name '" + names[0] + "'");
            if (v < 0) throw std::invalid_argument("contacts file: unknown node name '" + names[1] + "'");
            contacts.add(u, v);
        }
    }

    fs::create_directories(out_dir);
    const BiasGenerator& gen = net->bias_generator();
    nn::Tape tape(&net->params(), false);
    std::map<std::string, nn::Var> components;
    components["spatial"] = gen.spatial_bias(tape);
    components["edge"] = gen.edge_bias(tape, contacts);
    components["geometric"] = gen.geometric_bias(tape, positions);
    components["anatomical"] = gen.anatomical_bias(tape);
    components["composite"] = gen.composite_bias(tape, contacts, positions);

    const int T = map.count();
    for (const auto& [name, var] : components) {
        nn::Var lifted = gen.lift_to_tokens(tape, var, map.token_to_node);
        const nn::Array& a = tape.val(lifted);
        for (int h = 0; h < gen.heads(); ++h) {
            std::ofstream os(out_dir + "/" + name + "_h" + std::to_string(h) + ".csv");
            os << "token";
            for (int j = 0; j < T; ++j) os << ',' << map.tokens[static_cast<std::size_t>(j)].name;
            os << "\n" << std::setprecision(17);
            for (int i = 0; i < T; ++i) {
                os << map.tokens[static_cast<std::size_t>(i)].name;
                for (int j = 0; j < T; ++j)
                    os << ',' << a.data[static_cast<std::size_t>((h * T + i) * T + j)];
                os << "\n";
            }
        }
    }

    const nn::ParamStore& store = net->params();
    std::ofstream os(out_dir + "/summary.txt");
    os << std::setprecision(17);
    os << "lambda_sp " << store.at("bias/lambda_sp").value[0] << "\n";
    os << "lambda_edge " << store.at("bias/lambda_edge").value[0] << "\n";
    os << "lambda_geo " << store.at("bias/lambda_geo").value[0] << "\n";
    os << "lambda_anat";
    for (double v : store.at("bias/lambda_anat").value.data) os << ' ' << v;
    os << "\nsigma " << BiasGenerator::sigma_value(store) << "\n";
    os << "alpha_ser " << store.at("bias/alpha_ser").value[0] << "\n";
    os << "alpha_syn " << store.at("bias/alpha_syn").value[0] << "\n";
    os << "w_geo";
    for (double v : store.at("bias/w_geo").value.data) os << ' ' << v;
    os << "\n";
    std::cout << "wrote " << components.size() * static_cast<std::size_t>(gen.heads())
              << " per-head CSVs and summary.txt to " << out_dir << "\n";
    return 0;
}

int cmd_count_params(const std::string& config_path, const std::vector<std::string>& overrides,
                     bool compare) {
    RunConfig cfg = RunConfig::load(config_path, overrides);
    KinematicGraph graph = KinematicGraph::build(cfg.graph);
    TokenMap map = TokenMap::build(graph);
    ToyEnv probe(cfg.graph, cfg.env);

    auto print_breakdown = [&](PolicyNetwork& net) {
        std::cout << net.arch_name() << ":\n";
        for (const auto& [group, count] : net.param_breakdown())
            std::cout << "  " << std::left << std::setw(12) << group << std::right << std::setw(10)
                      << count << "\n";
    };

    if (!compare) {
        auto policy = make_policy(cfg, graph, map, probe.action_dim(), cfg.seeds[0]);
        print_breakdown(*policy);
        return 0;
    }

    RunConfig pg_cfg = cfg;
    pg_cfg.arch = "physgraph";
    RunConfig mlp_cfg = cfg;
    mlp_cfg.arch = "mlp-baseline";
    auto pg = make_policy(pg_cfg, graph, map, probe.action_dim(), cfg.seeds[0]);
    auto mlp = make_policy(mlp_cfg, graph, map, probe.action_dim(), cfg.seeds[0]);
    print_breakdown(*pg);
    print_breakdown(*mlp);
    double ratio = static_cast<double>(param_count(pg->params())) /
                   static_cast<double>(param_count(mlp->params()));
    std::cout << "ratio physgraph/baseline = " << std::fixed << std::setprecision(3) << ratio
              << "\n";
    return 0;
}

}  // namespace

int main(int argc, char** argv) {
    CLI::App app{"PhysGraph: kinematic-graph transformer policy, toy bimanual stack"};
    app.require_subcommand(1);

    std::string config_path, checkpoint_path, out_dir, arch, resume, swap, csv_path, seeds = "0";
    std::string graph_path, positions_path, contacts_path, task;
    std::vector<std::string> overrides;
    int episodes = 64;
    bool compare = false, random_policy = false;
    std::uint64_t seed = 0;

    auto* train = app.add_subcommand("train", "train a policy (PPO)");
    train->add_option("--config", config_path, "run config JSON")->required();
    train->add_option("--override", overrides, "dotted-path override, e.g. ppo.lr=1e-4");
    train->add_option("--arch", arch, "physgraph | physgraph-nobias | mlp-baseline");
    train->add_option("--out", out_dir, "output directory (overrides config)");
    train->add_option("--resume", resume, "checkpoint to resume from");

    auto* eval = app.add_subcommand("eval", "evaluate a checkpoint (deterministic policy)");
    eval->add_option("--checkpoint", checkpoint_path, "checkpoint file");
    eval->add_option("--config", config_path, "run config (for --random-policy)");
    eval->add_option("--override", overrides, "config override");
    eval->add_option("--episodes", episodes, "episodes per seed");
    eval->add_option("--seeds", seeds, "comma-separated eval seeds");
    eval->add_option("--geometry-swap", swap, "e.g. tool_scale=0.6,object_shape=sphere");
    eval->add_option("--csv", csv_path, "write results CSV here");
    eval->add_option("--task", task, "task override");
    eval->add_flag("--random-policy", random_policy, "uniform random actions instead of a policy");

    auto* inspect = app.add_subcommand("inspect-bias", "dump bias component matrices as CSV");
    inspect->add_option("--checkpoint", checkpoint_path, "checkpoint file");
    inspect->add_option("--config", config_path, "run config (fresh parameters)");
    inspect->add_option("--override", overrides, "config override");
    inspect->add_option("--graph", graph_path, "graph spec file override");
    inspect->add_option("--positions", positions_path, "JSON {node_name: [x,y,z]}");
    inspect->add_option("--contacts", contacts_path, "JSON [[name,name],...]");
    inspect->add_option("--out", out_dir, "output directory")->required();
    inspect->add_option("--seed", seed, "init seed for fresh parameters");

    auto* count = app.add_subcommand("count-params", "exact parameter counts");
    count->add_option("--config", config_path, "run config JSON")->required();
    count->add_option("--override", overrides, "config override");
    count->add_flag("--compare", compare, "print physgraph vs baseline and the ratio");

    CLI11_PARSE(app, argc, argv);

    try {
        if (train->parsed()) return cmd_train(config_path, overrides, arch, out_dir, resume);
        if (eval->parsed())
            return cmd_eval(checkpoint_path, config_path, overrides, episodes, seeds, swap,
                            csv_path, random_policy, task);
        if (inspect->parsed())
            return cmd_inspect_bias(checkpoint_path, config_path, overrides, graph_path,
                                    positions_path, contacts_path, out_dir, seed);
        if (count->parsed()) return cmd_count_params(config_path, overrides, compare);
    } catch (const std::exception& e) {
        std::cerr << "error: " << e.what() << "\n";
        return 1;
    }
    return 0;
}
