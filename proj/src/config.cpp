#include "physgraph/config.hpp"

#include <fstream>
#include <set>
#include <stdexcept>

namespace physgraph {

using nlohmann::json;

namespace {

[[noreturn]] void fail(const std::string& path, const std::string& msg) {
    throw std::invalid_argument("config: " + (path.empty() ? msg : path + ": " + msg));
}

void reject_unknown(const json& j, const std::string& path, const std::set<std::string>& allowed) {
    if (!j.is_object()) fail(path, "expected an object");
    for (auto it = j.begin(); it != j.end(); ++it)
        if (!allowed.count(it.key()))
            fail(path.empty() ? it.key() : path + "." + it.key(), "unknown key");
}

template <typename T>
void get_to(const json& j, const std::string& path, const char* key, T& out) {
    if (!j.contains(key)) return;
    try {
        j.at(key).get_to(out);
    } catch (const json::exception&) {
        fail(path + "." + key, "invalid value type");
    }
}

}  // namespace

GraphSpec graph_spec_from_json(const json& j) {
    reject_unknown(j, "graph", {"hands", "tool", "object", "node_radius"});
    GraphSpec spec;
    spec.hands.clear();
    if (j.contains("hands")) {
        if (!j.at("hands").is_array()) fail("graph.hands", "expected an array");
        int idx = 0;
        for (const auto& hj : j.at("hands")) {
            std::string path = "graph.hands[" + std::to_string(idx++) + "]";
            reject_unknown(hj, path, {"side", "fingers", "links_per_finger"});
            HandSpec h;
            std::string side;
            get_to(hj, path, "side", side);
            if (side == "right")
                h.side = Hand::Right;
            else if (side == "left")
                h.side = Hand::Left;
            else
                fail(path + ".side", "expected \"left\" or \"right\"");
            get_to(hj, path, "fingers", h.fingers);
            get_to(hj, path, "links_per_finger", h.links_per_finger);
            spec.hands.push_back(h);
        }
    }
    get_to(j, "graph", "tool", spec.tool);
    get_to(j, "graph", "object", spec.object);
    get_to(j, "graph", "node_radius", spec.node_radius);
    return spec;
}

json graph_spec_to_json(const GraphSpec& spec) {
    json hands = json::array();
    for (const auto& h : spec.hands)
        hands.push_back({{"side", h.side == Hand::Right ? "right" : "left"},
                         {"fingers", h.fingers},
                         {"links_per_finger", h.links_per_finger}});
    return {{"hands", hands},
            {"tool", spec.tool},
            {"object", spec.object},
            {"node_radius", spec.node_radius}};
}

GraphSpec load_graph_spec(const std::string& path) {
    std::ifstream is(path);
    if (!is) throw std::runtime_error("cannot open graph spec: " + path);
    json j;
    try {
        is >> j;
    } catch (const json::exception& e) {
        throw std::runtime_error("graph spec parse error in " + path + ": " + e.what());
    }
    return graph_spec_from_json(j);
}

namespace {

EnvConfig env_from_json(const json& j) {
    reject_unknown(j, "env",
                   {"task", "horizon", "dt", "geometry", "limits", "grasp", "noise", "thresholds",
                    "reward", "obs_scales"});
    EnvConfig c;
    std::string task = task_name(c.task);
    get_to(j, "env", "task", task);
    c.task = task_from_string(task);
    get_to(j, "env", "horizon", c.horizon);
    get_to(j, "env", "dt", c.dt);
    if (j.contains("geometry")) {
        const json& g = j.at("geometry");
        reject_unknown(g, "env.geometry",
                       {"link_len", "palm_len", "finger_spread", "link_radius", "palm_radius",
                        "tool_radius", "object_radius", "tool_scale", "object_scale"});
        get_to(g, "env.geometry", "link_len", c.link_len);
        get_to(g, "env.geometry", "palm_len", c.palm_len);
        get_to(g, "env.geometry", "finger_spread", c.finger_spread);
        get_to(g, "env.geometry", "link_radius", c.link_radius);
        get_to(g, "env.geometry", "palm_radius", c.palm_radius);
        get_to(g, "env.geometry", "tool_radius", c.tool_radius);
        get_to(g, "env.geometry", "object_radius", c.object_radius);
        get_to(g, "env.geometry", "tool_scale", c.tool_scale);
        get_to(g, "env.geometry", "object_scale", c.object_scale);
    }
    if (j.contains("limits")) {
        const json& g = j.at("limits");
        reject_unknown(g, "env.limits",
                       {"joint_min", "joint_max", "joint_delta", "wrist_pos_delta",
                        "wrist_rot_delta"});
        get_to(g, "env.limits", "joint_min", c.joint_min);
        get_to(g, "env.limits", "joint_max", c.joint_max);
        get_to(g, "env.limits", "joint_delta", c.joint_delta);
        get_to(g, "env.limits", "wrist_pos_delta", c.wrist_pos_delta);
        get_to(g, "env.limits", "wrist_rot_delta", c.wrist_rot_delta);
    }
    if (j.contains("grasp")) {
        const json& g = j.at("grasp");
        reject_unknown(g, "env.grasp", {"contacts", "wrist_dist", "release_steps"});
        get_to(g, "env.grasp", "contacts", c.grasp_contacts);
        get_to(g, "env.grasp", "wrist_dist", c.grasp_wrist_dist);
        get_to(g, "env.grasp", "release_steps", c.release_steps);
    }
    if (j.contains("noise")) {
        const json& g = j.at("noise");
        reject_unknown(g, "env.noise", {"joint", "wrist_pos", "wrist_rot"});
        get_to(g, "env.noise", "joint", c.noise_joint);
        get_to(g, "env.noise", "wrist_pos", c.noise_wrist_pos);
        get_to(g, "env.noise", "wrist_rot", c.noise_wrist_rot);
    }
    if (j.contains("thresholds")) {
        const json& g = j.at("thresholds");
        reject_unknown(g, "env.thresholds",
                       {"e_t", "e_j", "e_ft", "sr_window", "failure_scale"});
        get_to(g, "env.thresholds", "e_t", c.theta_t);
        get_to(g, "env.thresholds", "e_j", c.theta_j);
        get_to(g, "env.thresholds", "e_ft", c.theta_ft);
        get_to(g, "env.thresholds", "sr_window", c.sr_window);
        get_to(g, "env.thresholds", "failure_scale", c.failure_scale);
    }
    if (j.contains("reward")) {
        const json& g = j.at("reward");
        reject_unknown(g, "env.reward",
                       {"w_task", "w_joint", "w_ft", "w_contact", "c_task", "c_joint", "c_ft"});
        get_to(g, "env.reward", "w_task", c.w_task);
        get_to(g, "env.reward", "w_joint", c.w_joint);
        get_to(g, "env.reward", "w_ft", c.w_ft);
        get_to(g, "env.reward", "w_contact", c.w_contact);
        get_to(g, "env.reward", "c_task", c.c_task);
        get_to(g, "env.reward", "c_joint", c.c_joint);
        get_to(g, "env.reward", "c_ft", c.c_ft);
    }
    if (j.contains("obs_scales")) {
        const json& g = j.at("obs_scales");
        reject_unknown(g, "env.obs_scales", {"pos", "vel", "delta"});
        get_to(g, "env.obs_scales", "pos", c.obs_pos_scale);
        get_to(g, "env.obs_scales", "vel", c.obs_vel_scale);
        get_to(g, "env.obs_scales", "delta", c.obs_delta_scale);
    }
    return c;
}

json env_to_json(const EnvConfig& c) {
    return {{"task", task_name(c.task)},
            {"horizon", c.horizon},
            {"dt", c.dt},
            {"geometry",
             {{"link_len", c.link_len},
              {"palm_len", c.palm_len},
              {"finger_spread", c.finger_spread},
              {"link_radius", c.link_radius},
              {"palm_radius", c.palm_radius},
              {"tool_radius", c.tool_radius},
              {"object_radius", c.object_radius},
              {"tool_scale", c.tool_scale},
              {"object_scale", c.object_scale}}},
            {"limits",
             {{"joint_min", c.joint_min},
              {"joint_max", c.joint_max},
              {"joint_delta", c.joint_delta},
              {"wrist_pos_delta", c.wrist_pos_delta},
              {"wrist_rot_delta", c.wrist_rot_delta}}},
            {"grasp",
             {{"contacts", c.grasp_contacts},
              {"wrist_dist", c.grasp_wrist_dist},
              {"release_steps", c.release_steps}}},
            {"noise",
             {{"joint", c.noise_joint},
              {"wrist_pos", c.noise_wrist_pos},
              {"wrist_rot", c.noise_wrist_rot}}},
            {"thresholds",
             {{"e_t", c.theta_t},
              {"e_j", c.theta_j},
              {"e_ft", c.theta_ft},
              {"sr_window", c.sr_window},
              {"failure_scale", c.failure_scale}}},
            {"reward",
             {{"w_task", c.w_task},
              {"w_joint", c.w_joint},
              {"w_ft", c.w_ft},
              {"w_contact", c.w_contact},
              {"c_task", c.c_task},
              {"c_joint", c.c_joint},
              {"c_ft", c.c_ft}}},
            {"obs_scales",
             {{"pos", c.obs_pos_scale}, {"vel", c.obs_vel_scale}, {"delta", c.obs_delta_scale}}}};
}

}  // namespace

EncoderConfig RunConfig::resolved_encoder(int action_dim) const {
    EncoderConfig e = encoder;
    e.action_dim = action_dim;
    e.d_max = bias.d_max;
    e.d0 = bias.d0;
    e.alloc = resolved_allocation();
    e.bias_init = bias.init;
    return e;
}

HeadAllocation RunConfig::resolved_allocation() const {
    if (bias.serial_heads.empty() && bias.synergy_heads.empty())
        return HeadAllocation::defaults(encoder.heads);
    HeadAllocation a;
    a.serial = bias.serial_heads;
    a.synergy = bias.synergy_heads;
    std::set<int> taken(a.serial.begin(), a.serial.end());
    taken.insert(a.synergy.begin(), a.synergy.end());
    for (int h = 0; h < encoder.heads; ++h)
        if (!taken.count(h)) a.global.push_back(h);
    a.validate(encoder.heads);
    return a;
}

json RunConfig::to_json() const {
    json j;
    j["arch"] = arch;
    j["out_dir"] = out_dir;
    j["seeds"] = seeds;
    j["graph"] = graph_spec_to_json(graph);
    j["env"] = env_to_json(env);
    j["encoder"] = {{"d", encoder.d},
                    {"heads", encoder.heads},
                    {"layers", encoder.layers},
                    {"d_ff", encoder.d_ff},
                    {"head_hidden", encoder.head_hidden},
                    {"log_std_init", encoder.log_std_init}};
    j["bias"] = {{"d_max", bias.d_max},
                 {"d0", bias.d0},
                 {"serial_heads", bias.serial_heads},
                 {"synergy_heads", bias.synergy_heads},
                 {"sigma_init", bias.init.sigma},
                 {"w_geo_init", bias.init.w_geo},
                 {"alpha_init", bias.init.alpha},
                 {"lambda_init", bias.init.lambda},
                 {"table_init_std", bias.init.table_std}};
    j["baseline"] = {{"hidden_scales", baseline.hidden_scales}};
    j["ppo"] = {{"envs", ppo.envs},
                {"rollout_steps", ppo.rollout_steps},
                {"gamma", ppo.gamma},
                {"gae_lambda", ppo.gae_lambda},
                {"clip", ppo.clip},
                {"epochs", ppo.epochs},
                {"minibatch", ppo.minibatch},
                {"accum_chunk", ppo.accum_chunk},
                {"lr", ppo.lr},
                {"value_coef", ppo.value_coef},
                {"entropy_coef", ppo.entropy_coef},
                {"max_grad_norm", ppo.max_grad_norm},
                {"max_updates", ppo.max_updates},
                {"eval_interval", ppo.eval_interval},
                {"eval_episodes", ppo.eval_episodes},
                {"normalize_advantages", ppo.normalize_advantages},
                {"checkpoint_interval", ppo.checkpoint_interval},
                {"rollout_threads", ppo.rollout_threads}};
    return j;
}

RunConfig RunConfig::from_json(const json& j) {
    reject_unknown(j, "",
                   {"arch", "out_dir", "seeds", "graph", "graph_file", "env", "encoder", "bias",
                    "baseline", "ppo"});
    RunConfig c;
    get_to(j, "", "arch", c.arch);
    get_to(j, "", "out_dir", c.out_dir);
    get_to(j, "", "seeds", c.seeds);
    if (j.contains("graph") && j.contains("graph_file"))
        fail("graph", "specify either graph or graph_file, not both");
    if (j.contains("graph_file"))
        c.graph = load_graph_spec(j.at("graph_file").get<std::string>());
    else if (j.contains("graph"))
        c.graph = graph_spec_from_json(j.at("graph"));
    if (j.contains("env")) c.env = env_from_json(j.at("env"));
    if (j.contains("encoder")) {
        const json& g = j.at("encoder");
        reject_unknown(g, "encoder", {"d", "heads", "layers", "d_ff", "head_hidden", "log_std_init"});
        get_to(g, "encoder", "d", c.encoder.d);
        get_to(g, "encoder", "heads", c.encoder.heads);
        get_to(g, "encoder", "layers", c.encoder.layers);
        get_to(g, "encoder", "d_ff", c.encoder.d_ff);
        get_to(g, "encoder", "head_hidden", c.encoder.head_hidden);
        get_to(g, "encoder", "log_std_init", c.encoder.log_std_init);
    }
    if (j.contains("bias")) {
        const json& g = j.at("bias");
        reject_unknown(g, "bias",
                       {"d_max", "d0", "serial_heads", "synergy_heads", "sigma_init", "w_geo_init",
                        "alpha_init", "lambda_init", "table_init_std"});
        get_to(g, "bias", "d_max", c.bias.d_max);
        get_to(g, "bias", "d0", c.bias.d0);
        get_to(g, "bias", "serial_heads", c.bias.serial_heads);
        get_to(g, "bias", "synergy_heads", c.bias.synergy_heads);
        get_to(g, "bias", "sigma_init", c.bias.init.sigma);
        get_to(g, "bias", "w_geo_init", c.bias.init.w_geo);
        get_to(g, "bias", "alpha_init", c.bias.init.alpha);
        get_to(g, "bias", "lambda_init", c.bias.init.lambda);
        get_to(g, "bias", "table_init_std", c.bias.init.table_std);
    }
    if (j.contains("baseline")) {
        const json& g = j.at("baseline");
        reject_unknown(g, "baseline", {"hidden_scales"});
        get_to(g, "baseline", "hidden_scales", c.baseline.hidden_scales);
    }
    if (j.contains("ppo")) {
        const json& g = j.at("ppo");
        reject_unknown(g, "ppo",
                       {"envs", "rollout_steps", "gamma", "gae_lambda", "clip", "epochs",
                        "minibatch", "accum_chunk", "lr", "value_coef", "entropy_coef",
                        "max_grad_norm", "max_updates", "eval_interval", "eval_episodes",
                        "normalize_advantages", "checkpoint_interval", "rollout_threads"});
        get_to(g, "ppo", "envs", c.ppo.envs);
        get_to(g, "ppo", "rollout_steps", c.ppo.rollout_steps);
        get_to(g, "ppo", "gamma", c.ppo.gamma);
        get_to(g, "ppo", "gae_lambda", c.ppo.gae_lambda);
        get_to(g, "ppo", "clip", c.ppo.clip);
        get_to(g, "ppo", "epochs", c.ppo.epochs);
        get_to(g, "ppo", "minibatch", c.ppo.minibatch);
        get_to(g, "ppo", "accum_chunk", c.ppo.accum_chunk);
        get_to(g, "ppo", "lr", c.ppo.lr);
        get_to(g, "ppo", "value_coef", c.ppo.value_coef);
        get_to(g, "ppo", "entropy_coef", c.ppo.entropy_coef);
        get_to(g, "ppo", "max_grad_norm", c.ppo.max_grad_norm);
        get_to(g, "ppo", "max_updates", c.ppo.max_updates);
        get_to(g, "ppo", "eval_interval", c.ppo.eval_interval);
        get_to(g, "ppo", "eval_episodes", c.ppo.eval_episodes);
        get_to(g, "ppo", "normalize_advantages", c.ppo.normalize_advantages);
        get_to(g, "ppo", "checkpoint_interval", c.ppo.checkpoint_interval);
        get_to(g, "ppo", "rollout_threads", c.ppo.rollout_threads);
    }
    c.validate();
    return c;
}

void RunConfig::validate() const {
    if (arch != "physgraph" && arch != "physgraph-nobias" && arch != "mlp-baseline")
        fail("arch", "expected physgraph, physgraph-nobias or mlp-baseline, got '" + arch + "'");
    if (seeds.empty()) fail("seeds", "need at least one seed");
    env.validate();
    ppo.validate();
    if (encoder.d < 1 || encoder.d % encoder.heads != 0)
        fail("encoder.d", "must be a positive multiple of encoder.heads");
    resolved_allocation();  // throws on bad head sets
    for (double s : baseline.hidden_scales)
        if (s <= 0) fail("baseline.hidden_scales", "entries must be > 0");
}

RunConfig RunConfig::load(const std::string& path, const std::vector<std::string>& overrides) {
    std::ifstream is(path);
    if (!is) throw std::runtime_error("cannot open config: " + path);
    json j;
    try {
        is >> j;
    } catch (const json::exception& e) {
        throw std::runtime_error("config parse error in " + path + ": " + e.what());
    }
    for (const std::string& o : overrides) apply_override(j, o);
    return from_json(j);
}

void apply_override(json& doc, const std::string& spec) {
    auto eq = spec.find('=');
    if (eq == std::string::npos)
        throw std::invalid_argument("override '" + spec + "' must look like path.to.key=value");
    std::string path = spec.substr(0, eq);
    std::string value = spec.substr(eq + 1);

    json* node = &doc;
    std::size_t start = 0;
    while (true) {
        std::size_t dot = path.find('.', start);
        std::string key = path.substr(start, dot == std::string::npos ? dot : dot - start);
        if (key.empty()) throw std::invalid_argument("override '" + spec + "': empty path segment");
        if (dot == std::string::npos) {
            json parsed = json::parse(value, nullptr, false);
            (*node)[key] = parsed.is_discarded() ? json(value) : parsed;
            break;
        }
        node = &(*node)[key];
        start = dot + 1;
    }
}

std::unique_ptr<PolicyNetwork> make_policy(const RunConfig& cfg, const KinematicGraph& graph,
                                           const TokenMap& token_map, int action_dim,
                                           std::uint64_t seed) {
    if (cfg.arch == "mlp-baseline") {
        BaselineConfig b = cfg.baseline;
        b.action_dim = action_dim;
        b.log_std_init = cfg.encoder.log_std_init;
        return std::make_unique<BaselineNet>(token_map, b, seed);
    }
    EncoderConfig e = cfg.resolved_encoder(action_dim);
    return std::make_unique<PhysGraphNet>(graph, e, cfg.arch == "physgraph", seed);
}

}  // namespace physgraph
