#pragma once
// Deterministic physics-light bimanual tracking environment.
//
// Two articulated kinematic hands (per-finger planar curl chains hanging off
// a free 6-DoF wrist), a spherical tool and object, sphere-distance contacts,
// a contact-count grasp rule with rigid attachment, procedurally generated
// reference trajectories, tracking reward, and the evaluation metrics
// (E_t, E_j, E_ft, SR). Integration is first-order target tracking with
// per-step rate limits; given (seed, action sequence) every trajectory is
// bit-reproducible.

#include <cstdint>
#include <string>
#include <vector>

#include "physgraph/encoder.hpp"
#include "physgraph/geometry.hpp"
#include "physgraph/kingraph.hpp"
#include "physgraph/rng.hpp"

namespace physgraph {

enum class Task : std::uint8_t { ReachGrasp, CarryTool, ToolToObject };

Task task_from_string(const std::string& s);
const char* task_name(Task t);

struct EnvConfig {
    Task task = Task::ReachGrasp;
    int horizon = 300;
    double dt = 1.0 / 60.0;

    // Geometry (meters).
    double link_len = 0.03;
    double palm_len = 0.03;
    double finger_spread = 0.014;
    double link_radius = 0.006;
    double palm_radius = 0.02;
    double tool_radius = 0.02;
    double object_radius = 0.025;
    double tool_scale = 1.0;    // geometry-swap factors applied at construction
    double object_scale = 1.0;

    // Joint / wrist motion limits.
    double joint_min = 0.0;
    double joint_max = 1.2;           // radians
    double joint_delta = 0.03;        // per-step rate limit, radians
    double wrist_pos_delta = 0.008;   // meters per step
    double wrist_rot_delta = 0.04;    // radians per step

    // Grasp rule.
    int grasp_contacts = 2;       // k fingertips
    double grasp_wrist_dist = 0.12;
    int release_steps = 5;        // hysteresis m

    // Reset noise.
    double noise_joint = 0.02;    // radians, uniform
    double noise_wrist_pos = 0.004;
    double noise_wrist_rot = 0.02;

    // Success thresholds (meters) and windowing.
    double theta_t = 0.03;
    double theta_j = 0.05;
    double theta_ft = 0.04;
    int sr_window = 10;
    double failure_scale = 2.0;

    // Reward shaping.
    // Precision terms dominate; the task term and contact bonus are anchors
    // so that surviving without tracking pays far less than tracking.
    double w_task = 0.25;
    double w_joint = 1.0;
    double w_ft = 1.0;
    double w_contact = 0.25;
    double c_task = 60.0;    // per meter
    double c_joint = 60.0;
    double c_ft = 60.0;

    // Observation scales.
    double obs_pos_scale = 1.0;
    double obs_vel_scale = 1.0;
    double obs_delta_scale = 10.0;

    void validate() const;
    double scaled_tool_radius() const { return tool_radius * tool_scale; }
    double scaled_object_radius() const { return object_radius * object_scale; }
};

// Attachment owner: -1 free, 0 right hand, 1 left hand.
inline constexpr int kFree = -1;
inline constexpr int kRightHand = 0;
inline constexpr int kLeftHand = 1;

struct HandState {
    Pose wrist;
    Vec3 wrist_lin_vel;
    Vec3 wrist_ang_vel;
    std::vector<double> joints;     // F*L, finger-major
    std::vector<double> joint_vel;
};

struct BodyState {
    Pose pose;
    Vec3 lin_vel;
    Vec3 ang_vel;
    int grasped_by = kFree;
    Pose grasp_rel;      // body pose in the grasping wrist frame
    int release_count = 0;
};

struct EnvState {
    HandState right, left;
    BodyState tool, object;
    int t = 0;
};

struct ReferenceTrajectory {
    int horizon = 0;  // entries are 0..horizon inclusive
    std::vector<Pose> right_wrist, left_wrist;
    std::vector<std::vector<double>> right_joints, left_joints;
    std::vector<Pose> tool, object;
    std::vector<int> tool_grasped_by, object_grasped_by;  // kFree / kRightHand / kLeftHand
    std::vector<std::vector<Vec3>> right_tips, left_tips;  // fingertip positions per step
};

// Forward kinematics of one hand: world positions of link distal endpoints
// (finger-major), link origins, link orientations and fingertips.
struct HandFK {
    std::vector<Vec3> link_ends;     // F*L node positions
    std::vector<Vec3> link_origins;  // F*L proximal ends
    std::vector<Quat> link_quats;    // F*L orientations
    std::vector<Vec3> tips;          // F fingertips (= last link end per finger)
};

HandFK hand_fk(const EnvConfig& cfg, int fingers, int links, const Pose& wrist,
               const std::vector<double>& joints);

// Deterministic reference generation; throws on kinematically infeasible
// setups (e.g. a body no finger can reach).
ReferenceTrajectory generate_reference(const GraphSpec& morphology, const EnvConfig& cfg,
                                       std::uint64_t seed);

struct StepResult {
    StructuredObs obs;
    double reward = 0.0;
    bool done = false;
    bool failed = false;
    double e_t = 0.0;   // instantaneous tracking errors, meters
    double e_j = 0.0;
    double e_ft = 0.0;
    int contact_count = 0;
};

// Per-episode metric record; one entry per recorded state (reset + each step).
struct EpisodeRecord {
    std::vector<double> e_t, e_j, e_ft;  // meters
    bool failed = false;
    bool completed = false;

    void add(double et, double ej, double eft) {
        e_t.push_back(et);
        e_j.push_back(ej);
        e_ft.push_back(eft);
    }
};

struct EpisodeMetrics {
    double e_t_cm = 0.0;
    double e_j_cm = 0.0;
    double e_ft_cm = 0.0;
    bool success = false;
};

// Episode means in centimeters plus the windowed success decision: every
// sliding window of sr_window steps must keep each mean error strictly below
// its threshold, and the episode must have completed without failure.
EpisodeMetrics compute_metrics(const EpisodeRecord& rec, const EnvConfig& cfg);

class ToyEnv {
public:
    ToyEnv(GraphSpec morphology, EnvConfig cfg);

    const KinematicGraph& graph() const { return graph_; }
    const TokenMap& token_map() const { return token_map_; }
    const EnvConfig& config() const { return cfg_; }
    int action_dim() const;

    StructuredObs reset(std::uint64_t master_seed, int env_index, int episode);
    StepResult step(const std::vector<double>& action);

    // Observation of the current state (same builder step() uses).
    StructuredObs observe() const { return build_obs(); }

    const EnvState& state() const { return state_; }
    const ReferenceTrajectory& reference() const { return ref_; }
    int timestep() const { return state_.t; }
    bool episode_done() const { return done_; }

    // Action replaying the reference from the current state (rate limits are
    // respected by construction of the reference).
    std::vector<double> reference_action() const;

    // Uniform random action in [-1, 1] per channel.
    std::vector<double> random_action(Rng& rng) const;

    // Full state serialization for bit-exact checkpoint resume.
    std::vector<double> serialize_state() const;
    void restore_state(const std::vector<double>& blob, std::uint64_t master_seed, int env_index,
                       int episode);
    int episode() const { return episode_; }

    // Current node positions / radii (world frame), for bias inspection.
    std::vector<Vec3> node_positions() const { return positions_; }
    const std::vector<double>& node_radii() const { return radii_; }

private:
    struct HandLayout {
        Hand side;
        int fingers = 0;
        int links = 0;
    };

    void refresh_kinematics();  // FK + node positions from state_
    StructuredObs build_obs() const;
    void tracking_errors(double& et, double& ej, double& eft) const;
    HandState& hand(int which) { return which == kRightHand ? state_.right : state_.left; }
    const HandState& hand(int which) const {
        return which == kRightHand ? state_.right : state_.left;
    }

    GraphSpec morphology_;
    EnvConfig cfg_;
    KinematicGraph graph_;
    TokenMap token_map_;
    std::vector<double> radii_;
    HandLayout right_layout_, left_layout_;

    EnvState state_;
    ReferenceTrajectory ref_;
    bool done_ = true;
    int episode_ = 0;

    // Current and previous FK snapshots for finite-difference velocities.
    std::vector<Vec3> positions_, prev_positions_;
    HandFK right_fk_, left_fk_;
    std::vector<Quat> prev_link_quats_right_, prev_link_quats_left_;
    ContactSet contacts_;
};

}  // namespace physgraph
