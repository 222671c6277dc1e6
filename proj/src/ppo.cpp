#include "physgraph/ppo.hpp"

#include <algorithm>
#include <chrono>
#include <cmath>
#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <numeric>
#include <stdexcept>
#include <thread>

#include "physgraph/checkpoint.hpp"
#include "physgraph/rng.hpp"

namespace physgraph {

namespace {

constexpr std::uint64_t kActTag = 0xAC7ULL;
constexpr std::uint64_t kShuffleTag = 0x5F1EULL;
constexpr std::uint64_t kEvalTag = 0xE7A1ULL;

bool deterministic_env() {
    const char* v = std::getenv("PHYSGRAPH_DETERMINISTIC");
    return v != nullptr && v[0] == '1';
}

}  // namespace

void PpoConfig::validate() const {
    if (envs < 1) throw std::invalid_argument("ppo.envs must be >= 1");
    if (rollout_steps < 1) throw std::invalid_argument("ppo.rollout_steps must be >= 1");
    if (gamma <= 0 || gamma > 1) throw std::invalid_argument("ppo.gamma must be in (0,1]");
    if (gae_lambda < 0 || gae_lambda > 1)
        throw std::invalid_argument("ppo.gae_lambda must be in [0,1]");
    if (clip <= 0) throw std::invalid_argument("ppo.clip must be > 0");
    if (epochs < 0) throw std::invalid_argument("ppo.epochs must be >= 0");
    if (minibatch < 1) throw std::invalid_argument("ppo.minibatch must be >= 1");
    if (accum_chunk < 1) throw std::invalid_argument("ppo.accum_chunk must be >= 1");
    if (max_updates < 0) throw std::invalid_argument("ppo.max_updates must be >= 0");
    if (eval_interval < 1) throw std::invalid_argument("ppo.eval_interval must be >= 1");
    if (eval_episodes < 1) throw std::invalid_argument("ppo.eval_episodes must be >= 1");
    if (rollout_threads < 1) throw std::invalid_argument("ppo.rollout_threads must be >= 1");
}

void compute_gae(RolloutBatch& batch, double gamma, double lambda) {
    const std::size_t E = batch.per_env.size();
    batch.advantages.assign(E, {});
    batch.returns.assign(E, {});
    for (std::size_t e = 0; e < E; ++e) {
        const auto& traj = batch.per_env[e];
        const int R = static_cast<int>(traj.size());
        auto& adv = batch.advantages[e];
        auto& ret = batch.returns[e];
        adv.assign(static_cast<std::size_t>(R), 0.0);
        ret.assign(static_cast<std::size_t>(R), 0.0);
        double running = 0.0;
        for (int t = R - 1; t >= 0; --t) {
            const Transition& tr = traj[static_cast<std::size_t>(t)];
            double not_done = tr.done ? 0.0 : 1.0;
            double v_next = (t + 1 < R) ? traj[static_cast<std::size_t>(t + 1)].value
                                        : batch.bootstrap_values[e];
            double delta = tr.reward + gamma * v_next * not_done - tr.value;
            running = delta + gamma * lambda * not_done * running;
            adv[static_cast<std::size_t>(t)] = running;
            ret[static_cast<std::size_t>(t)] = running + tr.value;
        }
    }
}

void normalize_advantages(RolloutBatch& batch) {
    double sum = 0.0;
    std::int64_t n = 0;
    for (const auto& adv : batch.advantages)
        for (double a : adv) {
            sum += a;
            ++n;
        }
    if (n < 2) return;
    double mean = sum / static_cast<double>(n);
    double var = 0.0;
    for (const auto& adv : batch.advantages)
        for (double a : adv) var += (a - mean) * (a - mean);
    var /= static_cast<double>(n);
    double inv = 1.0 / (std::sqrt(var) + 1e-8);
    for (auto& adv : batch.advantages)
        for (double& a : adv) a = (a - mean) * inv;
}

EvalSummary evaluate_policy(const PolicyNetwork* policy, const GraphSpec& morphology,
                            const EnvConfig& env_cfg, int episodes, std::uint64_t seed,
                            bool random_policy, int batch_envs) {
    if (!random_policy && policy == nullptr)
        throw std::invalid_argument("evaluate_policy: policy required unless random_policy");
    const int B = std::min(batch_envs, episodes);
    std::vector<std::unique_ptr<ToyEnv>> envs;
    for (int j = 0; j < B; ++j) envs.push_back(std::make_unique<ToyEnv>(morphology, env_cfg));

    EvalSummary out;
    out.episodes = episodes;
    int launched = 0;
    for (int wave = 0; launched < episodes; ++wave) {
        int active = std::min(B, episodes - launched);
        std::vector<StructuredObs> obs(static_cast<std::size_t>(active));
        std::vector<EpisodeRecord> records(static_cast<std::size_t>(active));
        std::vector<double> returns(static_cast<std::size_t>(active), 0.0);
        std::vector<bool> finished(static_cast<std::size_t>(active), false);
        for (int j = 0; j < active; ++j)
            obs[static_cast<std::size_t>(j)] = envs[static_cast<std::size_t>(j)]->reset(
                seed, j, wave);

        int remaining = active;
        while (remaining > 0) {
            std::vector<int> live;
            std::vector<const StructuredObs*> live_obs;
            for (int j = 0; j < active; ++j)
                if (!finished[static_cast<std::size_t>(j)]) {
                    live.push_back(j);
                    live_obs.push_back(&obs[static_cast<std::size_t>(j)]);
                }
            ActResult act;
            if (!random_policy) act = policy->act(live_obs, true, nullptr);
            for (std::size_t k = 0; k < live.size(); ++k) {
                int j = live[k];
                ToyEnv& env = *envs[static_cast<std::size_t>(j)];
                std::vector<double> action;
                if (random_policy) {
                    Rng rng = Rng::keyed(seed, 0x7A2DULL, static_cast<std::uint64_t>(j),
                                         static_cast<std::uint64_t>(wave),
                                         static_cast<std::uint64_t>(env.timestep()));
                    action = env.random_action(rng);
                } else {
                    int A = static_cast<int>(act.actions.shape[1]);
                    action.assign(act.actions.data.begin() + static_cast<std::ptrdiff_t>(k) * A,
                                  act.actions.data.begin() + static_cast<std::ptrdiff_t>(k + 1) * A);
                }
                StepResult r = env.step(action);
                records[static_cast<std::size_t>(j)].add(r.e_t, r.e_j, r.e_ft);
                returns[static_cast<std::size_t>(j)] += r.reward;
                obs[static_cast<std::size_t>(j)] = r.obs;
                if (r.done) {
                    records[static_cast<std::size_t>(j)].failed = r.failed;
                    records[static_cast<std::size_t>(j)].completed = !r.failed;
                    finished[static_cast<std::size_t>(j)] = true;
                    --remaining;
                }
            }
        }
        for (int j = 0; j < active; ++j) {
            EpisodeMetrics m = compute_metrics(records[static_cast<std::size_t>(j)], env_cfg);
            out.sr += m.success ? 1.0 : 0.0;
            out.e_t_cm += m.e_t_cm;
            out.e_j_cm += m.e_j_cm;
            out.e_ft_cm += m.e_ft_cm;
            out.mean_return += returns[static_cast<std::size_t>(j)];
        }
        launched += active;
    }
    out.sr /= episodes;
    out.e_t_cm /= episodes;
    out.e_j_cm /= episodes;
    out.e_ft_cm /= episodes;
    out.mean_return /= episodes;
    return out;
}

Trainer::Trainer(GraphSpec morphology, EnvConfig env_cfg, PpoConfig ppo_cfg,
                 std::unique_ptr<PolicyNetwork> policy, std::uint64_t master_seed,
                 std::string out_dir, nlohmann::json run_config_json)
    : morphology_(std::move(morphology)),
      env_cfg_(std::move(env_cfg)),
      ppo_(std::move(ppo_cfg)),
      policy_(std::move(policy)),
      seed_(master_seed),
      out_dir_(std::move(out_dir)),
      run_config_json_(std::move(run_config_json)) {
    ppo_.validate();
    if (deterministic_env()) ppo_.rollout_threads = 1;
    nn::AdamConfig acfg;
    acfg.lr = ppo_.lr;
    adam_ = std::make_unique<nn::Adam>(policy_->params(), acfg);
    for (int i = 0; i < ppo_.envs; ++i) {
        envs_.push_back(std::make_unique<ToyEnv>(morphology_, env_cfg_));
        episodes_.push_back(0);
        episode_return_.push_back(0.0);
        current_obs_.emplace_back();
    }
    for (int i = 0; i < ppo_.envs; ++i) reset_env(i);
    if (!out_dir_.empty()) std::filesystem::create_directories(out_dir_);
}

void Trainer::reset_env(int index) {
    current_obs_[static_cast<std::size_t>(index)] =
        envs_[static_cast<std::size_t>(index)]->reset(seed_, index,
                                                      episodes_[static_cast<std::size_t>(index)]);
    episode_return_[static_cast<std::size_t>(index)] = 0.0;
}

RolloutBatch Trainer::collect_rollouts() {
    const int E = ppo_.envs;
    const int A = policy_->action_dim();
    RolloutBatch batch;
    batch.per_env.assign(static_cast<std::size_t>(E), {});
    for (auto& v : batch.per_env) v.reserve(static_cast<std::size_t>(ppo_.rollout_steps));

    for (int step = 0; step < ppo_.rollout_steps; ++step) {
        std::vector<const StructuredObs*> obs_ptrs;
        obs_ptrs.reserve(static_cast<std::size_t>(E));
        for (int i = 0; i < E; ++i) obs_ptrs.push_back(&current_obs_[static_cast<std::size_t>(i)]);

        nn::Array noise({E, A});
        for (int i = 0; i < E; ++i) {
            Rng rng = Rng::keyed(seed_, kActTag, static_cast<std::uint64_t>(i),
                                 static_cast<std::uint64_t>(episodes_[static_cast<std::size_t>(i)]),
                                 static_cast<std::uint64_t>(
                                     envs_[static_cast<std::size_t>(i)]->timestep()));
            for (int a = 0; a < A; ++a)
                noise.data[static_cast<std::size_t>(i * A + a)] = rng.normal();
        }
        ActResult act = policy_->act(obs_ptrs, false, &noise);

        auto step_env = [&](int i) {
            std::vector<double> action(
                act.actions.data.begin() + static_cast<std::ptrdiff_t>(i) * A,
                act.actions.data.begin() + static_cast<std::ptrdiff_t>(i + 1) * A);
            Transition tr;
            tr.obs = current_obs_[static_cast<std::size_t>(i)];
            tr.action = action;
            tr.log_prob = act.log_probs[static_cast<std::size_t>(i)];
            tr.value = act.values[static_cast<std::size_t>(i)];
            StepResult r = envs_[static_cast<std::size_t>(i)]->step(action);
            tr.reward = r.reward;
            tr.done = r.done;
            batch.per_env[static_cast<std::size_t>(i)].push_back(std::move(tr));
            episode_return_[static_cast<std::size_t>(i)] += r.reward;
            if (r.done) {
                finished_returns_.push_back(episode_return_[static_cast<std::size_t>(i)]);
                episodes_[static_cast<std::size_t>(i)] += 1;
                reset_env(i);
            } else {
                current_obs_[static_cast<std::size_t>(i)] = std::move(r.obs);
            }
        };

        if (ppo_.rollout_threads > 1) {
            // Env slots are independent; fixed chunking keeps results identical
            // to the sequential path.
            int workers = std::min(ppo_.rollout_threads, E);
            std::vector<std::thread> pool;
            int chunk = (E + workers - 1) / workers;
            for (int w = 0; w < workers; ++w) {
                int lo = w * chunk, hi = std::min(E, lo + chunk);
                pool.emplace_back([&, lo, hi]() {
                    for (int i = lo; i < hi; ++i) step_env(i);
                });
            }
            for (auto& th : pool) th.join();
        } else {
            for (int i = 0; i < E; ++i) step_env(i);
        }
    }

    // Bootstrap values for the unfinished tails.
    std::vector<const StructuredObs*> obs_ptrs;
    for (int i = 0; i < E; ++i) obs_ptrs.push_back(&current_obs_[static_cast<std::size_t>(i)]);
    ActResult tail = policy_->act(obs_ptrs, true, nullptr);
    batch.bootstrap_values = tail.values;
    return batch;
}

LossReport Trainer::optimize(RolloutBatch& batch) {
    struct Flat {
        const Transition* tr;
        double adv;
        double ret;
    };
    std::vector<Flat> flat;
    flat.reserve(static_cast<std::size_t>(batch.total()));
    for (std::size_t e = 0; e < batch.per_env.size(); ++e)
        for (std::size_t t = 0; t < batch.per_env[e].size(); ++t)
            flat.push_back({&batch.per_env[e][t], batch.advantages[e][t], batch.returns[e][t]});

    const int N = static_cast<int>(flat.size());
    const int A = policy_->action_dim();
    LossReport report;
    double kl_sum = 0.0;
    std::int64_t clip_count = 0, sample_count = 0;
    int minibatch_steps = 0;

    std::vector<int> order(static_cast<std::size_t>(N));
    for (int epoch = 0; epoch < ppo_.epochs; ++epoch) {
        std::iota(order.begin(), order.end(), 0);
        Rng shuffle = Rng::keyed(seed_, kShuffleTag, static_cast<std::uint64_t>(update_),
                                 static_cast<std::uint64_t>(epoch));
        for (int i = N - 1; i > 0; --i)
            std::swap(order[static_cast<std::size_t>(i)],
                      order[static_cast<std::size_t>(shuffle.below(static_cast<std::uint64_t>(i + 1)))]);

        for (int start = 0; start < N; start += ppo_.minibatch) {
            const int mb = std::min(ppo_.minibatch, N - start);
            policy_->params().zero_grad();
            double mb_policy = 0.0, mb_value = 0.0, mb_entropy = 0.0;

            for (int cstart = 0; cstart < mb; cstart += ppo_.accum_chunk) {
                const int C = std::min(ppo_.accum_chunk, mb - cstart);
                std::vector<const StructuredObs*> obs;
                obs.reserve(static_cast<std::size_t>(C));
                nn::Array actions({C, A});
                nn::Array adv({C});
                nn::Array ret({C});
                nn::Array logp_old({C});
                for (int k = 0; k < C; ++k) {
                    const Flat& f = flat[static_cast<std::size_t>(
                        order[static_cast<std::size_t>(start + cstart + k)])];
                    obs.push_back(&f.tr->obs);
                    std::copy_n(f.tr->action.data(), A, actions.data.data() + k * A);
                    adv.data[static_cast<std::size_t>(k)] = f.adv;
                    ret.data[static_cast<std::size_t>(k)] = f.ret;
                    logp_old.data[static_cast<std::size_t>(k)] = f.tr->log_prob;
                }

                nn::Tape tape(&policy_->params(), true);
                EvalVars ev = policy_->evaluate(tape, obs, actions);
                nn::Var ratio = nn::exp_op(tape, nn::sub_const(tape, ev.log_probs, logp_old));
                nn::Var surr1 = nn::hadamard_const(tape, ratio, adv);
                nn::Var clipped = nn::clamp(tape, ratio, 1.0 - ppo_.clip, 1.0 + ppo_.clip);
                nn::Var surr2 = nn::hadamard_const(tape, clipped, adv);
                nn::Var policy_loss =
                    nn::scale_const(tape, nn::mean_all(tape, nn::minimum(tape, surr1, surr2)), -1.0);
                nn::Var verr = nn::sub_const(tape, ev.values, ret);
                nn::Var value_loss = nn::mean_all(tape, nn::square(tape, verr));
                nn::Var loss = nn::add_n(
                    tape, {policy_loss, nn::scale_const(tape, value_loss, ppo_.value_coef),
                           nn::scale_const(tape, ev.entropy, -ppo_.entropy_coef)});

                double loss_val = tape.val(loss)[0];
                if (!std::isfinite(loss_val))
                    throw std::runtime_error(
                        "ppo: non-finite loss at update " + std::to_string(update_) +
                        " (policy=" + std::to_string(tape.val(policy_loss)[0]) +
                        ", value=" + std::to_string(tape.val(value_loss)[0]) + ")");

                tape.backward(loss);
                tape.accumulate_param_grads(static_cast<double>(C) / mb);

                mb_policy += tape.val(policy_loss)[0] * C;
                mb_value += tape.val(value_loss)[0] * C;
                mb_entropy += tape.val(ev.entropy)[0] * C;
                for (int k = 0; k < C; ++k) {
                    double lp_new = tape.val(ev.log_probs)[static_cast<std::size_t>(k)];
                    kl_sum += logp_old.data[static_cast<std::size_t>(k)] - lp_new;
                    double rv = tape.val(ratio)[static_cast<std::size_t>(k)];
                    if (std::abs(rv - 1.0) > ppo_.clip) ++clip_count;
                }
                sample_count += C;
            }

            report.grad_norm += nn::clip_grad_norm(policy_->params(), ppo_.max_grad_norm);
            adam_->step();
            report.policy_loss += mb_policy / mb;
            report.value_loss += mb_value / mb;
            report.entropy += mb_entropy / mb;
            ++minibatch_steps;
        }
    }

    if (minibatch_steps > 0) {
        report.policy_loss /= minibatch_steps;
        report.value_loss /= minibatch_steps;
        report.entropy /= minibatch_steps;
        report.grad_norm /= minibatch_steps;
    }
    if (sample_count > 0) {
        report.approx_kl = kl_sum / static_cast<double>(sample_count);
        report.clip_fraction = static_cast<double>(clip_count) / static_cast<double>(sample_count);
    }
    return report;
}

LossReport Trainer::run_update() {
    ++update_;
    RolloutBatch batch = collect_rollouts();
    compute_gae(batch, ppo_.gamma, ppo_.gae_lambda);
    if (ppo_.normalize_advantages) normalize_advantages(batch);
    return optimize(batch);
}

EvalSummary Trainer::run_eval() {
    return evaluate_policy(policy_.get(), morphology_, env_cfg_, ppo_.eval_episodes,
                           mix_key(seed_, kEvalTag, static_cast<std::uint64_t>(update_)));
}

void Trainer::write_metrics_line(const LossReport& loss, double wall_s,
                                 const std::optional<EvalSummary>& eval, double mean_step_reward,
                                 double mean_episode_return) {
    nlohmann::json line;
    line["update"] = update_;
    line["wall_time_s"] = wall_s;
    line["mean_reward"] = mean_step_reward;
    line["mean_episode_return"] = mean_episode_return;
    line["policy_loss"] = loss.policy_loss;
    line["value_loss"] = loss.value_loss;
    line["entropy"] = loss.entropy;
    line["approx_kl"] = loss.approx_kl;
    line["clip_fraction"] = loss.clip_fraction;
    line["grad_norm"] = loss.grad_norm;
    if (eval) {
        line["eval_sr"] = eval->sr;
        line["eval_e_t_cm"] = eval->e_t_cm;
        line["eval_e_j_cm"] = eval->e_j_cm;
        line["eval_e_ft_cm"] = eval->e_ft_cm;
        line["eval_return"] = eval->mean_return;
    }
    const nn::ParamStore& store = policy_->params();
    if (store.has("bias/lambda_sp")) {
        line["lambda_sp"] = store.at("bias/lambda_sp").value[0];
        line["lambda_edge"] = store.at("bias/lambda_edge").value[0];
        line["lambda_geo"] = store.at("bias/lambda_geo").value[0];
        const auto& la = store.at("bias/lambda_anat").value;
        double mean = 0;
        for (double v : la.data) mean += v;
        line["lambda_anat_mean"] = mean / static_cast<double>(la.numel());
        line["sigma"] = BiasGenerator::sigma_value(store);
        line["alpha_ser"] = store.at("bias/alpha_ser").value[0];
        line["alpha_syn"] = store.at("bias/alpha_syn").value[0];
    }
    std::ofstream os(out_dir_ + "/metrics.jsonl", std::ios::app);
    os << line.dump() << "\n";
}

EvalSummary Trainer::train() {
    EvalSummary best;
    const std::string latest = out_dir_ + "/ckpt_latest.bin";
    const std::string best_path = out_dir_ + "/ckpt_best.bin";
    while (update_ < ppo_.max_updates) {
        auto t0 = std::chrono::steady_clock::now();
        double mean_step_reward = 0.0;
        LossReport loss;
        try {
            ++update_;
            RolloutBatch batch = collect_rollouts();
            double acc = 0.0;
            for (const auto& env_traj : batch.per_env)
                for (const auto& tr : env_traj) acc += tr.reward;
            mean_step_reward = acc / std::max(1, batch.total());
            compute_gae(batch, ppo_.gamma, ppo_.gae_lambda);
            if (ppo_.normalize_advantages) normalize_advantages(batch);
            loss = optimize(batch);
        } catch (const std::runtime_error& e) {
            // Fail fast; the last checkpoints on disk stay untouched.
            std::ofstream os(out_dir_ + "/metrics.jsonl", std::ios::app);
            os << nlohmann::json{{"update", update_}, {"aborted", true}, {"error", e.what()}}.dump()
               << "\n";
            throw;
        }

        double mean_episode_return = 0.0;
        if (!finished_returns_.empty()) {
            for (double r : finished_returns_) mean_episode_return += r;
            mean_episode_return /= static_cast<double>(finished_returns_.size());
            finished_returns_.clear();
        }

        std::optional<EvalSummary> eval;
        if (update_ % ppo_.eval_interval == 0 || update_ == ppo_.max_updates) {
            eval = run_eval();
            if (eval->sr > best_sr_) {
                best_sr_ = eval->sr;
                best_update_ = update_;
                best = *eval;
                save_checkpoint(best_path, false);
            }
            save_checkpoint(latest, true);
        }
        if (ppo_.checkpoint_interval > 0 && update_ % ppo_.checkpoint_interval == 0)
            save_checkpoint(latest, true);

        double wall =
            std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
        write_metrics_line(loss, wall, eval, mean_step_reward, mean_episode_return);
    }
    save_checkpoint(latest, true);
    return best;
}

void Trainer::save_checkpoint(const std::string& path, bool with_trainer_state) const {
    Checkpoint ckpt = Checkpoint::from_store(policy_->params(), policy_->arch_name(),
                                             run_config_json_);
    ckpt.has_adam = true;
    ckpt.adam_t = adam_->t();
    ckpt.adam_m = adam_->m();
    ckpt.adam_v = adam_->v();
    if (with_trainer_state) {
        ckpt.has_trainer = true;
        ckpt.trainer.update = update_;
        ckpt.trainer.master_seed = seed_;
        ckpt.trainer.best_sr = best_sr_;
        ckpt.trainer.best_update = best_update_;
        for (std::size_t i = 0; i < envs_.size(); ++i) {
            EnvSnapshot snap;
            snap.episode = episodes_[i];
            snap.episode_return = episode_return_[i];
            snap.blob = envs_[i]->serialize_state();
            ckpt.trainer.envs.push_back(std::move(snap));
        }
    }
    physgraph::save_checkpoint(path, ckpt);
}

void Trainer::restore_checkpoint(const std::string& path) {
    Checkpoint ckpt = load_checkpoint(path);
    if (ckpt.arch != policy_->arch_name())
        throw std::runtime_error("checkpoint arch '" + ckpt.arch + "' does not match policy '" +
                                 policy_->arch_name() + "'");
    ckpt.restore_store(policy_->params());
    if (ckpt.has_adam) {
        adam_->set_t(ckpt.adam_t);
        adam_->m() = ckpt.adam_m;
        adam_->v() = ckpt.adam_v;
    }
    if (ckpt.has_trainer) {
        if (ckpt.trainer.envs.size() != envs_.size())
            throw std::runtime_error("checkpoint env count mismatch");
        update_ = static_cast<int>(ckpt.trainer.update);
        seed_ = ckpt.trainer.master_seed;
        best_sr_ = ckpt.trainer.best_sr;
        best_update_ = static_cast<int>(ckpt.trainer.best_update);
        for (std::size_t i = 0; i < envs_.size(); ++i) {
            episodes_[i] = static_cast<int>(ckpt.trainer.envs[i].episode);
            episode_return_[i] = ckpt.trainer.envs[i].episode_return;
            envs_[i]->restore_state(ckpt.trainer.envs[i].blob, seed_, static_cast<int>(i),
                                    episodes_[i]);
            current_obs_[i] = envs_[i]->observe();
        }
    }
}

}  // namespace physgraph
