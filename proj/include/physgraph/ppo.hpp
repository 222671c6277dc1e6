#pragma once
// Clipped-surrogate PPO with GAE over vectorized ToyEnv rollouts.
//
// The trainer is architecture agnostic: anything implementing PolicyNetwork
// (PhysGraph, its no-bias ablation, or the flat MLP baseline) trains through
// the same loop. All randomness is counter-based and keyed by (master seed,
// env index, episode, timestep), which makes runs bit-reproducible and lets
// checkpoint resume continue the exact trajectory.

#include <cstdint>
#include <memory>
#include <optional>
#include <string>
#include <vector>

#include <json.hpp>

#include "physgraph/encoder.hpp"
#include "physgraph/nncore.hpp"
#include "physgraph/toyenv.hpp"

namespace physgraph {

struct PpoConfig {
    int envs = 64;
    int rollout_steps = 32;
    double gamma = 0.99;
    double gae_lambda = 0.95;
    double clip = 0.2;
    int epochs = 4;
    int minibatch = 1024;
    int accum_chunk = 256;  // tape batch size inside a minibatch
    double lr = 3e-4;
    double value_coef = 0.5;
    double entropy_coef = 0.003;
    double max_grad_norm = 1.0;
    int max_updates = 300;
    int eval_interval = 10;
    int eval_episodes = 32;
    bool normalize_advantages = true;
    int checkpoint_interval = 0;  // 0: checkpoints only at eval/best/final
    int rollout_threads = 1;      // >1 fans env stepping out to a small pool

    void validate() const;
};

struct Transition {
    StructuredObs obs;  // positions/contacts snapshots ride along for bias recomputation
    std::vector<double> action;
    double log_prob = 0.0;
    double value = 0.0;
    double reward = 0.0;
    bool done = false;
};

struct RolloutBatch {
    std::vector<std::vector<Transition>> per_env;  // [env][step]
    std::vector<double> bootstrap_values;          // V(s_R) per env
    std::vector<std::vector<double>> advantages;   // filled by compute_gae
    std::vector<std::vector<double>> returns;

    int total() const {
        int n = 0;
        for (const auto& v : per_env) n += static_cast<int>(v.size());
        return n;
    }
};

// delta_t = r_t + gamma V_{t+1} (1-done_t) - V_t;
// A_t = delta_t + gamma lambda (1-done_t) A_{t+1}; returns = A + V.
void compute_gae(RolloutBatch& batch, double gamma, double lambda);

// Normalizes a flat view of the advantages to zero mean / unit variance.
void normalize_advantages(RolloutBatch& batch);

struct LossReport {
    double policy_loss = 0.0;
    double value_loss = 0.0;
    double entropy = 0.0;
    double approx_kl = 0.0;
    double clip_fraction = 0.0;
    double grad_norm = 0.0;
};

struct EvalSummary {
    double sr = 0.0;
    double e_t_cm = 0.0;
    double e_j_cm = 0.0;
    double e_ft_cm = 0.0;
    double mean_return = 0.0;
    int episodes = 0;
};

// Deterministic-policy evaluation on fresh environments. With
// random_policy=true the checkpoint policy is ignored and uniform random
// actions are used (zero-shot baseline).
EvalSummary evaluate_policy(const PolicyNetwork* policy, const GraphSpec& morphology,
                            const EnvConfig& env_cfg, int episodes, std::uint64_t seed,
                            bool random_policy = false, int batch_envs = 16);

class Trainer {
public:
    Trainer(GraphSpec morphology, EnvConfig env_cfg, PpoConfig ppo_cfg,
            std::unique_ptr<PolicyNetwork> policy, std::uint64_t master_seed,
            std::string out_dir, nlohmann::json run_config_json);

    // Full training loop: collect / GAE / update / periodic eval, metrics
    // JSONL per update, best-by-eval-SR and latest checkpoints. Returns the
    // best eval summary seen. Fails fast on non-finite losses, keeping the
    // last good checkpoint on disk.
    EvalSummary train();

    // Single update step (collect + GAE + optimize). Exposed for tests.
    LossReport run_update();

    RolloutBatch collect_rollouts();
    LossReport optimize(RolloutBatch& batch);
    EvalSummary run_eval();

    PolicyNetwork& policy() { return *policy_; }
    const PpoConfig& ppo_config() const { return ppo_; }
    int update_index() const { return update_; }
    double best_sr() const { return best_sr_; }

    void save_checkpoint(const std::string& path, bool with_trainer_state) const;
    // Restores parameters, optimizer moments and (when present) the exact
    // trainer/env state, so the next update reproduces the original run.
    void restore_checkpoint(const std::string& path);

    std::uint64_t master_seed() const { return seed_; }

private:
    void reset_env(int index);
    void write_metrics_line(const LossReport& loss, double wall_s,
                            const std::optional<EvalSummary>& eval, double mean_step_reward,
                            double mean_episode_return);

    GraphSpec morphology_;
    EnvConfig env_cfg_;
    PpoConfig ppo_;
    std::unique_ptr<PolicyNetwork> policy_;
    std::uint64_t seed_;
    std::string out_dir_;
    nlohmann::json run_config_json_;

    std::vector<std::unique_ptr<ToyEnv>> envs_;
    std::vector<StructuredObs> current_obs_;
    std::vector<int> episodes_;
    std::vector<int> env_t_;  // per-env local step (for noise keys)
    std::vector<double> episode_return_;
    std::vector<double> finished_returns_;  // drained each update for logging

    std::unique_ptr<nn::Adam> adam_;
    int update_ = 0;
    double best_sr_ = -1.0;
    int best_update_ = -1;
};

}  // namespace physgraph
