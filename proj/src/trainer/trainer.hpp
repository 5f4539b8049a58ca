#pragma once

#include <cstdint>
#include <functional>
#include <string>
#include <vector>

#include "numerics/optim.hpp"
#include "numerics/tape.hpp"
#include "pareto/pareto.hpp"
#include "policy/model.hpp"
#include "rewards/rewards.hpp"
#include "util/rng.hpp"

namespace morl::trainer {

using numerics::TapeT;
using numerics::TensorT;

struct PPOConfig {
  float clip_eps = 0.2f;
  float kl_beta = 0.1f;
  int ppo_epochs = 2;
  int minibatch = 32;  // sequences per minibatch
  float lr = 5e-6f;
  float gamma = 1.0f;
  int samples_per_group = 8;  // N sequences per reward group
  int iterations = 300;       // E
  float rollout_temperature = 1.5f;
  float value_coef = 0.5f;
  float alpha_start = 0.5f;  // reward-token blend schedule, linear over E
  float alpha_end = 1.0f;
  int checkpoint_interval = 50;

  void validate() const;
  float alpha_at(int iteration) const;
};

// Pareto: actor updates use only non-dominated samples, each group's
// terminal reward is its own channel. Weighted-sum baseline: all samples
// update the actor and the terminal reward is the channel mean.
enum class RewardMode { pareto, weighted_sum };

struct SampleRollout {
  policy::PromptSpec spec;
  int group = 0;  // 0-based reward channel this group targets
  policy::TokenSequence seq;
  std::vector<float> old_logprob;  // actor at temperature 1, sampling time
  std::vector<float> ref_logprob;
  std::vector<float> values;
  rewards::RewardVector reward;
  bool pareto_member = true;
  double terminal_reward = 0.0;
  std::vector<float> returns;
  std::vector<float> advantages;
};

struct RolloutBatch {
  int prompt_id = 0;
  int n_groups = 0;
  int samples_per_group = 0;
  RewardMode mode = RewardMode::pareto;
  std::vector<SampleRollout> samples;  // index = group * N + i
  std::vector<int> pareto_count;       // per group, as used for weighting
  double mean_kl = 0.0;                // mean over steps of log(pi/pi_ref)
};

// One outer-loop sampling phase: draws a prompt, samples N sequences per
// reward group with that group's token blended in, evaluates all reward
// channels, and marks each group's non-dominated set.
RolloutBatch collect_rollouts(const policy::GptParams& actor,
                              const policy::GptParams& ref,
                              const policy::GptParams& critic,
                              const rewards::RewardContext& rctx, const PPOConfig& cfg,
                              RewardMode mode, float alpha, Rng& rng);

// Per-step reward stream: -beta * log(pi/pi_ref) at every step, the sample's
// terminal reward added at the End step; returns are discounted suffix sums.
void shaped_returns(RolloutBatch& batch, float beta, float gamma);

// A = G - V per step, then standardized to zero mean / unit variance across
// every step of the batch.
void compute_advantages(RolloutBatch& batch);

// Clipped-surrogate actor loss over aligned per-step vectors: the mean of
// -min(ratio * A, clip(ratio, 1-eps, 1+eps) * A).
template <class S>
TensorT<S> ppo_actor_loss(TapeT<S>& tape, const TensorT<S>& logp_new,
                          const std::vector<S>& logp_old, const std::vector<S>& advantage,
                          S clip_eps);

// Mean squared error between predicted values and returns.
template <class S>
TensorT<S> ppo_critic_loss(TapeT<S>& tape, const TensorT<S>& values,
                           const std::vector<S>& returns);

struct UpdateResult {
  float actor_loss = 0.f;
  float critic_loss = 0.f;
  bool aborted = false;
  std::string incident;
};

// PPO epochs over shuffled sequence minibatches. Actor gradients use only
// Pareto-member samples weighted 1/n(P_k); the critic regresses on every
// sample. A non-finite loss or gradient rolls actor, critic and optimizer
// state back to the pre-update snapshot.
UpdateResult ppo_update(policy::GptParams& actor, policy::GptParams& critic,
                        numerics::AdamW& actor_opt, numerics::AdamW& critic_opt,
                        const RolloutBatch& batch, const PPOConfig& cfg, Rng& shuffle_rng);

struct IterationMetrics {
  int iteration = 0;
  std::vector<double> mean_raw;   // per channel
  std::vector<double> mean_norm;  // per channel
  std::vector<int> pareto_sizes;  // per group
  double mean_kl = 0.0;
  float actor_loss = 0.f;
  float critic_loss = 0.f;
  bool aborted = false;
  double wall_ms = 0.0;
};

struct TrainLoopOptions {
  int start_iteration = 0;
  std::function<void(const IterationMetrics&)> on_iteration;
  std::function<void(int)> on_checkpoint;  // called every checkpoint_interval
};

std::vector<IterationMetrics> train_loop(policy::GptParams& actor,
                                         policy::GptParams& critic,
                                         const policy::GptParams& ref,
                                         const rewards::RewardContext& rctx,
                                         const PPOConfig& cfg, RewardMode mode,
                                         numerics::AdamW& actor_opt,
                                         numerics::AdamW& critic_opt, Rng& rollout_rng,
                                         Rng& shuffle_rng,
                                         const TrainLoopOptions& options = {});

extern template TensorT<float> ppo_actor_loss<float>(TapeT<float>&, const TensorT<float>&,
                                                     const std::vector<float>&,
                                                     const std::vector<float>&, float);
extern template TensorT<double> ppo_actor_loss<double>(TapeT<double>&,
                                                       const TensorT<double>&,
                                                       const std::vector<double>&,
                                                       const std::vector<double>&, double);
extern template TensorT<float> ppo_critic_loss<float>(TapeT<float>&, const TensorT<float>&,
                                                      const std::vector<float>&);
extern template TensorT<double> ppo_critic_loss<double>(TapeT<double>&,
                                                        const TensorT<double>&,
                                                        const std::vector<double>&);

}  // namespace morl::trainer
