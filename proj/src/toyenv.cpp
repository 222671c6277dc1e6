#include "physgraph/toyenv.hpp"

#include <algorithm>
#include <cmath>
#include <stdexcept>

#include "physgraph/rng.hpp"

namespace physgraph {

namespace {

constexpr double kPi = 3.14159265358979323846;

double ease(double s) { return 0.5 * (1.0 - std::cos(kPi * std::min(std::max(s, 0.0), 1.0))); }

double clip(double v, double lo, double hi) { return std::min(std::max(v, lo), hi); }

Vec3 clip3(const Vec3& v, double limit) {
    return {clip(v.x, -limit, limit), clip(v.y, -limit, limit), clip(v.z, -limit, limit)};
}

}  // namespace

Task task_from_string(const std::string& s) {
    if (s == "reach-grasp") return Task::ReachGrasp;
    if (s == "carry-tool") return Task::CarryTool;
    if (s == "tool-to-object") return Task::ToolToObject;
    throw std::invalid_argument("unknown task: " + s +
                                " (expected reach-grasp, carry-tool or tool-to-object)");
}

const char* task_name(Task t) {
    switch (t) {
        case Task::ReachGrasp: return "reach-grasp";
        case Task::CarryTool: return "carry-tool";
        default: return "tool-to-object";
    }
}

void EnvConfig::validate() const {
    if (horizon < 10) throw std::invalid_argument("env.horizon must be >= 10");
    if (dt <= 0) throw std::invalid_argument("env.dt must be > 0");
    if (link_len <= 0 || palm_len <= 0 || link_radius <= 0 || tool_radius <= 0 ||
        object_radius <= 0)
        throw std::invalid_argument("env geometry lengths must be > 0");
    if (tool_scale <= 0 || object_scale <= 0)
        throw std::invalid_argument("env geometry swap factors must be > 0");
    if (joint_delta <= 0 || wrist_pos_delta <= 0 || wrist_rot_delta <= 0)
        throw std::invalid_argument("env motion deltas must be > 0");
    if (grasp_contacts < 1) throw std::invalid_argument("env.grasp_contacts must be >= 1");
    if (sr_window < 1) throw std::invalid_argument("env.sr_window must be >= 1");
    if (failure_scale <= 1.0) throw std::invalid_argument("env.failure_scale must be > 1");
    if (theta_t <= 0 || theta_j <= 0 || theta_ft <= 0)
        throw std::invalid_argument("env success thresholds must be > 0");
}

HandFK hand_fk(const EnvConfig& cfg, int fingers, int links, const Pose& wrist,
               const std::vector<double>& joints) {
    HandFK fk;
    fk.link_ends.reserve(static_cast<std::size_t>(fingers * links));
    fk.link_origins.reserve(static_cast<std::size_t>(fingers * links));
    fk.link_quats.reserve(static_cast<std::size_t>(fingers * links));
    fk.tips.reserve(static_cast<std::size_t>(fingers));
    for (int f = 0; f < fingers; ++f) {
        // Finger base on the palm edge; fingers point +y, curl toward -z.
        Vec3 base{cfg.finger_spread * (f - 0.5 * (fingers - 1)), cfg.palm_len, 0.0};
        Vec3 p = base;
        double cum = 0.0;
        for (int l = 0; l < links; ++l) {
            cum += joints[static_cast<std::size_t>(f * links + l)];
            Vec3 dir{0.0, std::cos(cum), -std::sin(cum)};
            Vec3 end = p + dir * cfg.link_len;
            fk.link_origins.push_back(wrist.apply(p));
            fk.link_ends.push_back(wrist.apply(end));
            fk.link_quats.push_back((wrist.q * Quat::from_axis_angle({1, 0, 0}, cum)).normalized());
            p = end;
        }
        fk.tips.push_back(wrist.apply(p));
    }
    return fk;
}

namespace {

struct HandLayoutSpec {
    int fingers = 0;
    int links = 0;
};

HandLayoutSpec layout_of(const GraphSpec& spec, Hand side) {
    for (const auto& h : spec.hands)
        if (h.side == side) return {h.fingers, h.links_per_finger};
    return {};
}

// Curl angle at which fingers are considered wrapped; the pregrasp pose puts
// the body center on the middle fingertip's curl arc at this angle, so every
// finger's arc crosses its touch distance on the way in.
constexpr double kGraspCurl = 0.65;

// Fingertip offset from the finger base after a uniform curl of phi per joint.
Vec3 tip_offset(const EnvConfig& cfg, int links, double phi) {
    double y = 0.0, z = 0.0, cum = 0.0;
    for (int l = 0; l < links; ++l) {
        cum += phi;
        y += std::cos(cum);
        z -= std::sin(cum);
    }
    return {0.0, y * cfg.link_len, z * cfg.link_len};
}

Pose pregrasp_pose(const EnvConfig& cfg, int links, const Vec3& center) {
    Vec3 tip = tip_offset(cfg, links, kGraspCurl);
    return {center - Vec3{0.0, cfg.palm_len + tip.y, tip.z}, Quat::identity()};
}

// Uniform-curl angle at which finger f's tip touches the sphere (distance =
// radii sum - penetration). Returns a negative value when the finger cannot
// reach the body.
double solve_touch_curl(const EnvConfig& cfg, int fingers, int links, const Pose& wrist, int f,
                        const Vec3& center, double body_radius) {
    const double target = std::max(body_radius + cfg.link_radius - 0.003, 1e-4);
    auto dist = [&](double phi) {
        std::vector<double> joints(static_cast<std::size_t>(fingers * links), 0.0);
        for (int l = 0; l < links; ++l) joints[static_cast<std::size_t>(f * links + l)] = phi;
        HandFK fk = hand_fk(cfg, fingers, links, wrist, joints);
        return (fk.tips[static_cast<std::size_t>(f)] - center).norm() - target;
    };
    // Grid scan for a sign change, then bisect.
    const int kGrid = 48;
    double lo = 0.0, hi = -1.0;
    double prev = dist(0.0);
    if (prev <= 0.0) return 0.0;  // already touching fully open
    for (int i = 1; i <= kGrid; ++i) {
        double phi = cfg.joint_max * i / kGrid;
        double d = dist(phi);
        if (d <= 0.0) {
            lo = cfg.joint_max * (i - 1) / kGrid;
            hi = phi;
            break;
        }
        prev = d;
    }
    if (hi < 0.0) return -1.0;
    for (int it = 0; it < 60; ++it) {
        double mid = 0.5 * (lo + hi);
        if (dist(mid) > 0.0)
            lo = mid;
        else
            hi = mid;
    }
    return hi;
}

}  // namespace

ReferenceTrajectory generate_reference(const GraphSpec& morphology, const EnvConfig& cfg,
                                       std::uint64_t seed) {
    cfg.validate();
    HandLayoutSpec right = layout_of(morphology, Hand::Right);
    HandLayoutSpec left = layout_of(morphology, Hand::Left);
    if (right.fingers == 0 || left.fingers == 0 || !morphology.tool || !morphology.object)
        throw std::invalid_argument(
            "generate_reference: tasks need two hands, a tool and an object");

    Rng rng = Rng::keyed(seed, 0x5eedULL);
    const int T = cfg.horizon;
    const double r_tool = cfg.scaled_tool_radius();
    const double r_obj = cfg.scaled_object_radius();

    // Seeded placements in front of the hands.
    Vec3 tool_c{0.05 + rng.uniform(-0.015, 0.015), 0.05 + rng.uniform(-0.01, 0.01), 0.025};
    Vec3 obj_c{-0.05 + rng.uniform(-0.015, 0.015), 0.05 + rng.uniform(-0.01, 0.01), 0.03};

    Pose home_r{{0.10, -0.08, 0.10}, Quat::identity()};
    Pose home_l{{-0.10, -0.08, 0.10}, Quat::identity()};
    Pose pre_r = pregrasp_pose(cfg, right.links, tool_c);
    Pose pre_l = pregrasp_pose(cfg, left.links, obj_c);

    const double theta_open = 0.1;

    // Touch curls per finger; require at least k reachable fingers per body.
    auto solve_hand = [&](const HandLayoutSpec& lay, const Pose& pre, const Vec3& center,
                          double radius, const char* what) {
        std::vector<double> curls(static_cast<std::size_t>(lay.fingers));
        int reachable = 0;
        double mean = 0.0;
        for (int f = 0; f < lay.fingers; ++f) {
            double c = solve_touch_curl(cfg, lay.fingers, lay.links, pre, f, center, radius);
            curls[static_cast<std::size_t>(f)] = c;
            if (c >= 0.0) {
                ++reachable;
                mean += c;
            }
        }
        if (reachable < cfg.grasp_contacts)
            throw std::runtime_error(std::string("generate_reference: ") + what +
                                     " out of reach (only " + std::to_string(reachable) +
                                     " fingertips can touch it)");
        mean /= reachable;
        for (double& c : curls)
            if (c < 0.0) c = mean;  // unreachable fingers mimic the others
        return curls;
    };
    std::vector<double> curls_r = solve_hand(right, pre_r, tool_c, r_tool, "tool");
    std::vector<double> curls_l = solve_hand(left, pre_l, obj_c, r_obj, "object");

    // Carry displacement (carry-tool) or derived target (tool-to-object).
    Vec3 carry{rng.uniform(-0.05, 0.05), rng.uniform(-0.03, 0.03), rng.uniform(0.01, 0.05)};
    if (cfg.task == Task::ToolToObject) {
        Vec3 tool_target = obj_c + Vec3{0.0, 0.0, r_obj + r_tool + 0.005};
        carry = tool_target - tool_c;
    }
    if (cfg.task == Task::ReachGrasp) carry = {0, 0, 0};

    // Phase durations follow the motion rate limits: a cosine-eased move of
    // amplitude A over n steps peaks at A*pi/(2n) per step.
    auto steps_for = [](double amplitude, double delta) {
        return static_cast<int>(std::ceil(kPi * amplitude / (2.0 * delta))) + 2;
    };
    double reach_amp = 0.0;
    for (auto [home, pre] : {std::pair{home_r, pre_r}, std::pair{home_l, pre_l}}) {
        Vec3 d = pre.p - home.p;
        reach_amp = std::max({reach_amp, std::abs(d.x), std::abs(d.y), std::abs(d.z)});
    }
    double curl_amp = 0.0;
    for (double c : curls_r) curl_amp = std::max(curl_amp, std::abs(c - theta_open));
    for (double c : curls_l) curl_amp = std::max(curl_amp, std::abs(c - theta_open));
    double carry_amp = std::max({std::abs(carry.x), std::abs(carry.y), std::abs(carry.z)});

    const int tA = std::max(steps_for(reach_amp, cfg.wrist_pos_delta), T / 10);
    const int tB = tA + std::max(steps_for(curl_amp, cfg.joint_delta), T / 20);
    const int carry_steps = steps_for(carry_amp, cfg.wrist_pos_delta);
    if (tB + carry_steps > T)
        throw std::runtime_error(
            "generate_reference: horizon too short for the configured rate limits (need >= " +
            std::to_string(tB + carry_steps) + " steps)");

    ReferenceTrajectory ref;
    ref.horizon = T;
    auto joints_at = [&](const HandLayoutSpec& lay, const std::vector<double>& curls, int t) {
        std::vector<double> joints(static_cast<std::size_t>(lay.fingers * lay.links), theta_open);
        if (t >= tA) {
            double s = ease(static_cast<double>(t - tA) / (tB - tA));
            for (int f = 0; f < lay.fingers; ++f)
                for (int l = 0; l < lay.links; ++l)
                    joints[static_cast<std::size_t>(f * lay.links + l)] =
                        theta_open + (curls[static_cast<std::size_t>(f)] - theta_open) * s;
        }
        return joints;
    };

    Pose tool0{tool_c, Quat::identity()};
    Pose obj0{obj_c, Quat::identity()};
    Pose rel_tool = pre_r.inverse().compose(tool0);

    for (int t = 0; t <= T; ++t) {
        // Right wrist: home -> pregrasp -> (optional carry).
        Pose rw = pre_r;
        if (t < tA) {
            double s = ease(static_cast<double>(t) / tA);
            rw.p = home_r.p + (pre_r.p - home_r.p) * s;
        } else if (t >= tB && cfg.task != Task::ReachGrasp) {
            double s = ease(static_cast<double>(t - tB) / (T - tB));
            rw.p = pre_r.p + carry * s;
        }
        Pose lw = pre_l;
        if (t < tA) {
            double s = ease(static_cast<double>(t) / tA);
            lw.p = home_l.p + (pre_l.p - home_l.p) * s;
        }

        ref.right_wrist.push_back(rw);
        ref.left_wrist.push_back(lw);
        ref.right_joints.push_back(joints_at(right, curls_r, t));
        ref.left_joints.push_back(joints_at(left, curls_l, t));

        bool grasped = t >= tB;
        ref.tool.push_back(grasped && cfg.task != Task::ReachGrasp ? rw.compose(rel_tool) : tool0);
        ref.object.push_back(obj0);
        ref.tool_grasped_by.push_back(grasped ? kRightHand : kFree);
        ref.object_grasped_by.push_back(grasped ? kLeftHand : kFree);

        ref.right_tips.push_back(
            hand_fk(cfg, right.fingers, right.links, rw, ref.right_joints.back()).tips);
        ref.left_tips.push_back(
            hand_fk(cfg, left.fingers, left.links, lw, ref.left_joints.back()).tips);
    }

    // Rate-limit feasibility: the reference must be trackable step by step.
    for (int t = 0; t < T; ++t) {
        auto check_wrist = [&](const Pose& a, const Pose& b) {
            Vec3 dp = b.p - a.p;
            if (std::abs(dp.x) > cfg.wrist_pos_delta + 1e-12 ||
                std::abs(dp.y) > cfg.wrist_pos_delta + 1e-12 ||
                std::abs(dp.z) > cfg.wrist_pos_delta + 1e-12)
                throw std::runtime_error("generate_reference: wrist rate limit exceeded");
        };
        check_wrist(ref.right_wrist[static_cast<std::size_t>(t)],
                    ref.right_wrist[static_cast<std::size_t>(t + 1)]);
        check_wrist(ref.left_wrist[static_cast<std::size_t>(t)],
                    ref.left_wrist[static_cast<std::size_t>(t + 1)]);
        for (std::size_t j = 0; j < ref.right_joints[static_cast<std::size_t>(t)].size(); ++j)
            if (std::abs(ref.right_joints[static_cast<std::size_t>(t + 1)][j] -
                         ref.right_joints[static_cast<std::size_t>(t)][j]) >
                cfg.joint_delta + 1e-12)
                throw std::runtime_error("generate_reference: joint rate limit exceeded");
    }
    return ref;
}

// ---- metrics ----

EpisodeMetrics compute_metrics(const EpisodeRecord& rec, const EnvConfig& cfg) {
    EpisodeMetrics m;
    const std::size_t n = rec.e_t.size();
    if (n == 0) return m;
    double st = 0, sj = 0, sf = 0;
    for (std::size_t i = 0; i < n; ++i) {
        st += rec.e_t[i];
        sj += rec.e_j[i];
        sf += rec.e_ft[i];
    }
    m.e_t_cm = 100.0 * st / n;
    m.e_j_cm = 100.0 * sj / n;
    m.e_ft_cm = 100.0 * sf / n;

    // Windowed success: every sliding window mean stays strictly under its
    // threshold; short episodes use a single truncated window.
    auto windows_ok = [&](const std::vector<double>& e, double theta) {
        std::size_t w = std::min<std::size_t>(static_cast<std::size_t>(cfg.sr_window), e.size());
        double acc = 0;
        for (std::size_t i = 0; i < w; ++i) acc += e[i];
        if (acc / w >= theta) return false;
        for (std::size_t i = w; i < e.size(); ++i) {
            acc += e[i] - e[i - w];
            if (acc / w >= theta) return false;
        }
        return true;
    };
    m.success = rec.completed && !rec.failed && windows_ok(rec.e_t, cfg.theta_t) &&
                windows_ok(rec.e_j, cfg.theta_j) && windows_ok(rec.e_ft, cfg.theta_ft);
    return m;
}

// ---- environment ----

ToyEnv::ToyEnv(GraphSpec morphology, EnvConfig cfg)
    : morphology_(std::move(morphology)),
      cfg_(std::move(cfg)),
      graph_(KinematicGraph::build(morphology_)),
      token_map_(TokenMap::build(graph_)) {
    cfg_.validate();
    HandLayoutSpec r = layout_of(morphology_, Hand::Right);
    HandLayoutSpec l = layout_of(morphology_, Hand::Left);
    if (r.fingers == 0 || l.fingers == 0 || !morphology_.tool || !morphology_.object)
        throw std::invalid_argument("ToyEnv: morphology needs two hands, a tool and an object");
    right_layout_ = {Hand::Right, r.fingers, r.links};
    left_layout_ = {Hand::Left, l.fingers, l.links};

    radii_.resize(static_cast<std::size_t>(graph_.size()));
    for (const auto& node : graph_.nodes()) {
        double radius = cfg_.link_radius;
        if (node.role == NodeRole::PalmRoot) radius = cfg_.palm_radius;
        if (node.role == NodeRole::Tool) radius = cfg_.scaled_tool_radius();
        if (node.role == NodeRole::Object) radius = cfg_.scaled_object_radius();
        radii_[static_cast<std::size_t>(node.id)] = radius;
    }
}

int ToyEnv::action_dim() const {
    return 2 * 6 + right_layout_.fingers * right_layout_.links +
           left_layout_.fingers * left_layout_.links;
}

void ToyEnv::refresh_kinematics() {
    prev_positions_ = positions_;
    prev_link_quats_right_.clear();
    prev_link_quats_left_.clear();
    for (const auto& q : right_fk_.link_quats) prev_link_quats_right_.push_back(q);
    for (const auto& q : left_fk_.link_quats) prev_link_quats_left_.push_back(q);

    right_fk_ = hand_fk(cfg_, right_layout_.fingers, right_layout_.links, state_.right.wrist,
                        state_.right.joints);
    left_fk_ = hand_fk(cfg_, left_layout_.fingers, left_layout_.links, state_.left.wrist,
                       state_.left.joints);

    positions_.assign(static_cast<std::size_t>(graph_.size()), Vec3{});
    for (const auto& node : graph_.nodes()) {
        std::size_t id = static_cast<std::size_t>(node.id);
        switch (node.role) {
            case NodeRole::PalmRoot:
                positions_[id] =
                    node.hand == Hand::Right ? state_.right.wrist.p : state_.left.wrist.p;
                break;
            case NodeRole::FingerLink: {
                const HandFK& fk = node.hand == Hand::Right ? right_fk_ : left_fk_;
                int links = node.hand == Hand::Right ? right_layout_.links : left_layout_.links;
                positions_[id] = fk.link_ends[static_cast<std::size_t>(node.finger * links + node.level)];
                break;
            }
            case NodeRole::Tool:
                positions_[id] = state_.tool.pose.p;
                break;
            case NodeRole::Object:
                positions_[id] = state_.object.pose.p;
                break;
        }
    }
    contacts_ = detect_contacts(graph_, positions_, radii_, state_.t);
}

StructuredObs ToyEnv::reset(std::uint64_t master_seed, int env_index, int episode) {
    episode_ = episode;
    std::uint64_t seed = mix_key(master_seed, static_cast<std::uint64_t>(env_index),
                                 static_cast<std::uint64_t>(episode));
    ref_ = generate_reference(morphology_, cfg_, seed);

    state_ = EnvState{};
    state_.right.wrist = ref_.right_wrist[0];
    state_.left.wrist = ref_.left_wrist[0];
    state_.right.joints = ref_.right_joints[0];
    state_.left.joints = ref_.left_joints[0];
    state_.right.joint_vel.assign(state_.right.joints.size(), 0.0);
    state_.left.joint_vel.assign(state_.left.joints.size(), 0.0);
    state_.tool.pose = ref_.tool[0];
    state_.object.pose = ref_.object[0];
    state_.t = 0;

    Rng noise = Rng::keyed(seed, 0x0115eULL);
    auto perturb = [&](HandState& h) {
        h.wrist.p += Vec3{noise.uniform(-1, 1), noise.uniform(-1, 1), noise.uniform(-1, 1)} *
                     cfg_.noise_wrist_pos;
        Vec3 axis{noise.uniform(-1, 1), noise.uniform(-1, 1), noise.uniform(-1, 1)};
        h.wrist.q = (Quat::from_rotvec(axis * cfg_.noise_wrist_rot) * h.wrist.q).normalized();
        for (double& j : h.joints)
            j = clip(j + noise.uniform(-1, 1) * cfg_.noise_joint, cfg_.joint_min, cfg_.joint_max);
    };
    perturb(state_.right);
    perturb(state_.left);

    done_ = false;
    positions_.clear();
    right_fk_ = HandFK{};
    left_fk_ = HandFK{};
    refresh_kinematics();
    prev_positions_ = positions_;  // zero velocities at reset
    prev_link_quats_right_ = right_fk_.link_quats;
    prev_link_quats_left_ = left_fk_.link_quats;
    return build_obs();
}

StepResult ToyEnv::step(const std::vector<double>& action) {
    if (done_) throw std::logic_error("ToyEnv::step called on a finished episode");
    if (static_cast<int>(action.size()) != action_dim())
        throw std::invalid_argument("ToyEnv::step: action dim mismatch (expected " +
                                    std::to_string(action_dim()) + ", got " +
                                    std::to_string(action.size()) + ")");
    for (double a : action)
        if (!std::isfinite(a)) throw std::invalid_argument("ToyEnv::step: non-finite action");

    // Action layout: [R wrist pos(3), R wrist rot(3), R joints, L wrist pos(3),
    // L wrist rot(3), L joints], all in [-1,1] units of the per-step limits.
    std::size_t off = 0;
    auto apply_hand = [&](HandState& h, int joint_count) {
        Vec3 dp{action[off], action[off + 1], action[off + 2]};
        Vec3 dr{action[off + 3], action[off + 4], action[off + 5]};
        off += 6;
        dp = clip3(dp, 1.0) * cfg_.wrist_pos_delta;
        dr = clip3(dr, 1.0) * cfg_.wrist_rot_delta;
        Pose old = h.wrist;
        h.wrist.p += dp;
        h.wrist.q = (Quat::from_rotvec(dr) * h.wrist.q).normalized();
        h.wrist_lin_vel = (h.wrist.p - old.p) / cfg_.dt;
        h.wrist_ang_vel = quat_delta(h.wrist.q, old.q).to_rotvec() / cfg_.dt;
        for (int j = 0; j < joint_count; ++j) {
            double prev = h.joints[static_cast<std::size_t>(j)];
            double next = clip(prev + clip(action[off + static_cast<std::size_t>(j)], -1.0, 1.0) *
                                          cfg_.joint_delta,
                               cfg_.joint_min, cfg_.joint_max);
            h.joints[static_cast<std::size_t>(j)] = next;
            h.joint_vel[static_cast<std::size_t>(j)] = (next - prev) / cfg_.dt;
        }
        off += static_cast<std::size_t>(joint_count);
    };
    apply_hand(state_.right, right_layout_.fingers * right_layout_.links);
    apply_hand(state_.left, left_layout_.fingers * left_layout_.links);

    // Attached bodies ride rigidly on their wrist; free bodies stay put.
    auto move_body = [&](BodyState& b) {
        Pose old = b.pose;
        if (b.grasped_by != kFree) b.pose = hand(b.grasped_by).wrist.compose(b.grasp_rel);
        b.lin_vel = (b.pose.p - old.p) / cfg_.dt;
        b.ang_vel = quat_delta(b.pose.q, old.q).to_rotvec() / cfg_.dt;
    };
    move_body(state_.tool);
    move_body(state_.object);

    refresh_kinematics();

    // Grasp / release transitions.
    auto fingertip_contacts = [&](int hand_idx, NodeRole body_role) {
        Hand side = hand_idx == kRightHand ? Hand::Right : Hand::Left;
        int links = hand_idx == kRightHand ? right_layout_.links : left_layout_.links;
        int body = body_role == NodeRole::Tool ? *graph_.tool_node() : *graph_.object_node();
        int count = 0;
        for (const auto& node : graph_.nodes())
            if (node.role == NodeRole::FingerLink && node.hand == side &&
                node.level == links - 1 && contacts_.contains(node.id, body))
                ++count;
        return count;
    };
    auto update_grasp = [&](BodyState& b, NodeRole role) {
        if (b.grasped_by == kFree) {
            for (int h : {kRightHand, kLeftHand}) {
                if (fingertip_contacts(h, role) >= cfg_.grasp_contacts &&
                    (hand(h).wrist.p - b.pose.p).norm() < cfg_.grasp_wrist_dist) {
                    b.grasped_by = h;
                    b.grasp_rel = hand(h).wrist.inverse().compose(b.pose);
                    b.release_count = 0;
                    break;
                }
            }
        } else {
            if (fingertip_contacts(b.grasped_by, role) < cfg_.grasp_contacts) {
                if (++b.release_count >= cfg_.release_steps) {
                    b.grasped_by = kFree;
                    b.release_count = 0;
                }
            } else {
                b.release_count = 0;
            }
        }
    };
    update_grasp(state_.tool, NodeRole::Tool);
    update_grasp(state_.object, NodeRole::Object);

    state_.t += 1;

    StepResult res;
    tracking_errors(res.e_t, res.e_j, res.e_ft);
    res.contact_count = static_cast<int>(contacts_.pairs.size());

    // Reward: exponentially shaped tracking plus a contact-consistency bonus.
    double r = cfg_.w_task * std::exp(-cfg_.c_task * res.e_t) +
               cfg_.w_joint * std::exp(-cfg_.c_joint * res.e_j) +
               cfg_.w_ft * std::exp(-cfg_.c_ft * res.e_ft);
    bool contact_ok = true;
    int t = state_.t;
    if (ref_.tool_grasped_by[static_cast<std::size_t>(t)] != kFree &&
        fingertip_contacts(ref_.tool_grasped_by[static_cast<std::size_t>(t)], NodeRole::Tool) <
            cfg_.grasp_contacts)
        contact_ok = false;
    if (ref_.object_grasped_by[static_cast<std::size_t>(t)] != kFree &&
        fingertip_contacts(ref_.object_grasped_by[static_cast<std::size_t>(t)], NodeRole::Object) <
            cfg_.grasp_contacts)
        contact_ok = false;
    r += cfg_.w_contact * (contact_ok ? 1.0 : 0.0);
    res.reward = r;

    res.failed = res.e_t > cfg_.failure_scale * cfg_.theta_t ||
                 res.e_j > cfg_.failure_scale * cfg_.theta_j ||
                 res.e_ft > cfg_.failure_scale * cfg_.theta_ft;
    res.done = res.failed || state_.t >= cfg_.horizon;
    done_ = res.done;
    res.obs = build_obs();
    return res;
}

void ToyEnv::tracking_errors(double& et, double& ej, double& eft) const {
    const int t = std::min(state_.t, ref_.horizon);
    et = 0.5 * ((state_.tool.pose.p - ref_.tool[static_cast<std::size_t>(t)].p).norm() +
                (state_.object.pose.p - ref_.object[static_cast<std::size_t>(t)].p).norm());

    HandFK ref_r = hand_fk(cfg_, right_layout_.fingers, right_layout_.links,
                           ref_.right_wrist[static_cast<std::size_t>(t)],
                           ref_.right_joints[static_cast<std::size_t>(t)]);
    HandFK ref_l = hand_fk(cfg_, left_layout_.fingers, left_layout_.links,
                           ref_.left_wrist[static_cast<std::size_t>(t)],
                           ref_.left_joints[static_cast<std::size_t>(t)]);
    double j_acc = 0.0;
    std::size_t j_n = right_fk_.link_origins.size() + left_fk_.link_origins.size();
    for (std::size_t i = 0; i < right_fk_.link_origins.size(); ++i)
        j_acc += (right_fk_.link_origins[i] - ref_r.link_origins[i]).norm();
    for (std::size_t i = 0; i < left_fk_.link_origins.size(); ++i)
        j_acc += (left_fk_.link_origins[i] - ref_l.link_origins[i]).norm();
    ej = j_acc / static_cast<double>(j_n);

    double f_acc = 0.0;
    std::size_t f_n = right_fk_.tips.size() + left_fk_.tips.size();
    for (std::size_t i = 0; i < right_fk_.tips.size(); ++i)
        f_acc += (right_fk_.tips[i] - ref_r.tips[i]).norm();
    for (std::size_t i = 0; i < left_fk_.tips.size(); ++i)
        f_acc += (left_fk_.tips[i] - ref_l.tips[i]).norm();
    eft = f_acc / static_cast<double>(f_n);
}

StructuredObs ToyEnv::build_obs() const {
    StructuredObs obs;
    obs.positions = positions_;
    obs.contacts = contacts_;
    obs.features.resize(static_cast<std::size_t>(token_map_.count()));

    const int tn = std::min(state_.t + 1, ref_.horizon);  // tracking target
    HandFK ref_r = hand_fk(cfg_, right_layout_.fingers, right_layout_.links,
                           ref_.right_wrist[static_cast<std::size_t>(tn)],
                           ref_.right_joints[static_cast<std::size_t>(tn)]);
    HandFK ref_l = hand_fk(cfg_, left_layout_.fingers, left_layout_.links,
                           ref_.left_wrist[static_cast<std::size_t>(tn)],
                           ref_.left_joints[static_cast<std::size_t>(tn)]);

    auto push_vec = [&](std::vector<double>& f, const Vec3& v, double scale) {
        f.push_back(v.x * scale);
        f.push_back(v.y * scale);
        f.push_back(v.z * scale);
    };
    auto push_quat = [&](std::vector<double>& f, const Quat& q) {
        f.push_back(q.w);
        f.push_back(q.x);
        f.push_back(q.y);
        f.push_back(q.z);
    };

    for (int i = 1; i < token_map_.count(); ++i) {
        const TokenDesc& td = token_map_.tokens[static_cast<std::size_t>(i)];
        const BodyNode& node = graph_.node(td.node);
        auto& f = obs.features[static_cast<std::size_t>(i)];
        f.reserve(static_cast<std::size_t>(td.width));
        switch (td.kind) {
            case TokenKind::HandGlobal: {
                const HandState& h = node.hand == Hand::Right ? state_.right : state_.left;
                const HandFK& fk = node.hand == Hand::Right ? right_fk_ : left_fk_;
                const HandFK& rfk = node.hand == Hand::Right ? ref_r : ref_l;
                push_vec(f, h.wrist.p, cfg_.obs_pos_scale);
                push_quat(f, h.wrist.q);
                push_vec(f, h.wrist_lin_vel, cfg_.obs_vel_scale);
                push_vec(f, h.wrist_ang_vel, cfg_.obs_vel_scale);
                Vec3 mean_delta{};
                for (std::size_t k = 0; k < fk.tips.size(); ++k)
                    mean_delta += rfk.tips[k] - fk.tips[k];
                mean_delta = mean_delta / static_cast<double>(fk.tips.size());
                push_vec(f, mean_delta, cfg_.obs_delta_scale);
                break;
            }
            case TokenKind::Link: {
                const HandFK& fk = node.hand == Hand::Right ? right_fk_ : left_fk_;
                const HandFK& rfk = node.hand == Hand::Right ? ref_r : ref_l;
                const auto& prev_q = node.hand == Hand::Right ? prev_link_quats_right_
                                                              : prev_link_quats_left_;
                int links = node.hand == Hand::Right ? right_layout_.links : left_layout_.links;
                std::size_t li = static_cast<std::size_t>(node.finger * links + node.level);
                Vec3 pos = positions_[static_cast<std::size_t>(node.id)];
                push_vec(f, pos, cfg_.obs_pos_scale);
                push_quat(f, fk.link_quats[li]);
                Vec3 vel = (pos - prev_positions_[static_cast<std::size_t>(node.id)]) / cfg_.dt;
                push_vec(f, vel, cfg_.obs_vel_scale);
                Vec3 ang = quat_delta(fk.link_quats[li], prev_q[li]).to_rotvec() / cfg_.dt;
                push_vec(f, ang, cfg_.obs_vel_scale);
                push_vec(f, rfk.link_ends[li] - pos, cfg_.obs_delta_scale);
                bool touching = false;
                for (auto [u, v] : contacts_.pairs)
                    if (u == node.id || v == node.id) touching = true;
                f.push_back(touching ? 1.0 : 0.0);
                break;
            }
            case TokenKind::Tool:
            case TokenKind::Object: {
                const BodyState& b = td.kind == TokenKind::Tool ? state_.tool : state_.object;
                const Pose& ref_pose = td.kind == TokenKind::Tool
                                           ? ref_.tool[static_cast<std::size_t>(tn)]
                                           : ref_.object[static_cast<std::size_t>(tn)];
                push_vec(f, b.pose.p, cfg_.obs_pos_scale);
                push_quat(f, b.pose.q);
                push_vec(f, b.lin_vel, cfg_.obs_vel_scale);
                push_vec(f, b.ang_vel, cfg_.obs_vel_scale);
                push_vec(f, ref_pose.p - b.pose.p, cfg_.obs_delta_scale);
                push_quat(f, quat_delta(ref_pose.q, b.pose.q));
                break;
            }
            case TokenKind::Policy:
                break;
        }
    }
    return obs;
}

std::vector<double> ToyEnv::reference_action() const {
    const int tn = std::min(state_.t + 1, ref_.horizon);
    std::vector<double> a;
    a.reserve(static_cast<std::size_t>(action_dim()));
    auto hand_action = [&](const HandState& h, const Pose& target,
                           const std::vector<double>& target_joints) {
        Vec3 dp = target.p - h.wrist.p;
        a.push_back(clip(dp.x / cfg_.wrist_pos_delta, -1.0, 1.0));
        a.push_back(clip(dp.y / cfg_.wrist_pos_delta, -1.0, 1.0));
        a.push_back(clip(dp.z / cfg_.wrist_pos_delta, -1.0, 1.0));
        Vec3 dr = quat_delta(target.q, h.wrist.q).to_rotvec();
        a.push_back(clip(dr.x / cfg_.wrist_rot_delta, -1.0, 1.0));
        a.push_back(clip(dr.y / cfg_.wrist_rot_delta, -1.0, 1.0));
        a.push_back(clip(dr.z / cfg_.wrist_rot_delta, -1.0, 1.0));
        for (std::size_t j = 0; j < h.joints.size(); ++j)
            a.push_back(clip((target_joints[j] - h.joints[j]) / cfg_.joint_delta, -1.0, 1.0));
    };
    hand_action(state_.right, ref_.right_wrist[static_cast<std::size_t>(tn)],
                ref_.right_joints[static_cast<std::size_t>(tn)]);
    hand_action(state_.left, ref_.left_wrist[static_cast<std::size_t>(tn)],
                ref_.left_joints[static_cast<std::size_t>(tn)]);
    return a;
}

std::vector<double> ToyEnv::random_action(Rng& rng) const {
    std::vector<double> a(static_cast<std::size_t>(action_dim()));
    for (double& v : a) v = rng.uniform(-1.0, 1.0);
    return a;
}

// ---- state serialization (fixed flat-double layout) ----

namespace {
void put_pose(std::vector<double>& out, const Pose& p) {
    out.insert(out.end(), {p.p.x, p.p.y, p.p.z, p.q.w, p.q.x, p.q.y, p.q.z});
}
void put_vec(std::vector<double>& out, const Vec3& v) { out.insert(out.end(), {v.x, v.y, v.z}); }

struct Reader {
    const std::vector<double>& d;
    std::size_t i = 0;
    double next() { return d.at(i++); }
    Pose pose() {
        Pose p;
        p.p = vec();
        p.q.w = next();
        p.q.x = next();
        p.q.y = next();
        p.q.z = next();
        return p;
    }
    Vec3 vec() {
        Vec3 v;
        v.x = next();
        v.y = next();
        v.z = next();
        return v;
    }
};
}  // namespace

std::vector<double> ToyEnv::serialize_state() const {
    std::vector<double> out;
    out.push_back(static_cast<double>(state_.t));
    out.push_back(done_ ? 1.0 : 0.0);
    auto put_hand = [&](const HandState& h) {
        put_pose(out, h.wrist);
        put_vec(out, h.wrist_lin_vel);
        put_vec(out, h.wrist_ang_vel);
        out.insert(out.end(), h.joints.begin(), h.joints.end());
        out.insert(out.end(), h.joint_vel.begin(), h.joint_vel.end());
    };
    put_hand(state_.right);
    put_hand(state_.left);
    auto put_body = [&](const BodyState& b) {
        put_pose(out, b.pose);
        put_vec(out, b.lin_vel);
        put_vec(out, b.ang_vel);
        out.push_back(static_cast<double>(b.grasped_by));
        put_pose(out, b.grasp_rel);
        out.push_back(static_cast<double>(b.release_count));
    };
    put_body(state_.tool);
    put_body(state_.object);
    for (const Vec3& p : prev_positions_) put_vec(out, p);
    for (const Quat& q : prev_link_quats_right_) out.insert(out.end(), {q.w, q.x, q.y, q.z});
    for (const Quat& q : prev_link_quats_left_) out.insert(out.end(), {q.w, q.x, q.y, q.z});
    return out;
}

void ToyEnv::restore_state(const std::vector<double>& blob, std::uint64_t master_seed,
                           int env_index, int episode) {
    episode_ = episode;
    std::uint64_t seed = mix_key(master_seed, static_cast<std::uint64_t>(env_index),
                                 static_cast<std::uint64_t>(episode));
    ref_ = generate_reference(morphology_, cfg_, seed);

    Reader r{blob};
    state_.t = static_cast<int>(r.next());
    done_ = r.next() != 0.0;
    auto get_hand = [&](HandState& h, int joint_count) {
        h.wrist = r.pose();
        h.wrist_lin_vel = r.vec();
        h.wrist_ang_vel = r.vec();
        h.joints.resize(static_cast<std::size_t>(joint_count));
        for (double& j : h.joints) j = r.next();
        h.joint_vel.resize(static_cast<std::size_t>(joint_count));
        for (double& j : h.joint_vel) j = r.next();
    };
    get_hand(state_.right, right_layout_.fingers * right_layout_.links);
    get_hand(state_.left, left_layout_.fingers * left_layout_.links);
    auto get_body = [&](BodyState& b) {
        b.pose = r.pose();
        b.lin_vel = r.vec();
        b.ang_vel = r.vec();
        b.grasped_by = static_cast<int>(r.next());
        b.grasp_rel = r.pose();
        b.release_count = static_cast<int>(r.next());
    };
    get_body(state_.tool);
    get_body(state_.object);

    // Recompute FK, then overwrite the finite-difference history.
    positions_.clear();
    right_fk_ = HandFK{};
    left_fk_ = HandFK{};
    refresh_kinematics();
    prev_positions_.assign(positions_.size(), Vec3{});
    prev_link_quats_right_.assign(right_fk_.link_quats.size(), Quat{});
    prev_link_quats_left_.assign(left_fk_.link_quats.size(), Quat{});
    for (Vec3& p : prev_positions_) p = r.vec();
    for (Quat& q : prev_link_quats_right_) {
        q.w = r.next();
        q.x = r.next();
        q.y = r.next();
        q.z = r.next();
    }
    for (Quat& q : prev_link_quats_left_) {
        q.w = r.next();
        q.x = r.next();
        q.y = r.next();
        q.z = r.next();
    }
    if (r.i != blob.size())
        throw std::invalid_argument("ToyEnv::restore_state: blob size mismatch");
}

}  // namespace physgraph
