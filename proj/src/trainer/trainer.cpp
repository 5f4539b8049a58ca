#include "trainer/trainer.hpp"

#include <chrono>
#include <cmath>
#include <stdexcept>

namespace morl::trainer {
namespace {

using numerics::AdamW;
using numerics::Tape;
using numerics::Tensor;

template <class S>
TensorT<S> const_tensor(const std::vector<S>& v) {
  return TensorT<S>::from({static_cast<int>(v.size())}, std::vector<S>(v));
}

struct ModelSnapshot {
  std::vector<float> actor, critic;
  std::vector<float> actor_m, actor_v, critic_m, critic_v;
  std::int64_t actor_step = 0, critic_step = 0;
};

ModelSnapshot take_snapshot(policy::GptParams& actor, policy::GptParams& critic,
                            AdamW& actor_opt, AdamW& critic_opt) {
  return {actor.store.flat_values(), critic.store.flat_values(),
          actor_opt.first_moments(), actor_opt.second_moments(),
          critic_opt.first_moments(), critic_opt.second_moments(),
          actor_opt.step_count(),     critic_opt.step_count()};
}

void restore_snapshot(const ModelSnapshot& snap, policy::GptParams& actor,
                      policy::GptParams& critic, AdamW& actor_opt, AdamW& critic_opt) {
  actor.store.set_flat_values(snap.actor);
  critic.store.set_flat_values(snap.critic);
  actor.store.zero_grad();
  critic.store.zero_grad();
  actor_opt.restore(snap.actor_m, snap.actor_v, snap.actor_step);
  critic_opt.restore(snap.critic_m, snap.critic_v, snap.critic_step);
}

}  // namespace

void PPOConfig::validate() const {
  if (!(clip_eps > 0.f && clip_eps < 1.f))
    throw std::invalid_argument("ppo config: clip_eps must lie in (0,1)");
  if (kl_beta < 0.f) throw std::invalid_argument("ppo config: kl_beta must be >= 0");
  if (!(gamma > 0.f && gamma <= 1.f))
    throw std::invalid_argument("ppo config: gamma must lie in (0,1]");
  if (samples_per_group < 2)
    throw std::invalid_argument("ppo config: need at least 2 samples per group");
  if (ppo_epochs < 1 || minibatch < 1 || iterations < 0)
    throw std::invalid_argument("ppo config: bad epoch/minibatch/iteration counts");
  if (!(rollout_temperature > 0.f))
    throw std::invalid_argument("ppo config: rollout temperature must be > 0");
  if (alpha_start < 0.f || alpha_start > 1.f || alpha_end < 0.f || alpha_end > 1.f)
    throw std::invalid_argument("ppo config: alpha schedule must stay in [0,1]");
  if (checkpoint_interval < 1)
    throw std::invalid_argument("ppo config: checkpoint interval must be >= 1");
}

float PPOConfig::alpha_at(int iteration) const {
  if (iterations <= 1) return alpha_start;
  const float t = static_cast<float>(iteration) / static_cast<float>(iterations - 1);
  return alpha_start + (alpha_end - alpha_start) * t;
}

RolloutBatch collect_rollouts(const policy::GptParams& actor,
                              const policy::GptParams& ref,
                              const policy::GptParams& critic,
                              const rewards::RewardContext& rctx, const PPOConfig& cfg,
                              RewardMode mode, float alpha, Rng& rng) {
  RolloutBatch batch;
  batch.mode = mode;
  batch.n_groups = actor.cfg.n_reward_tokens;
  batch.samples_per_group = cfg.samples_per_group;
  batch.prompt_id =
      static_cast<int>(rng.below(static_cast<std::uint32_t>(actor.cfg.n_prompts)));

  double kl_sum = 0.0;
  std::size_t kl_steps = 0;
  for (int k = 0; k < batch.n_groups; ++k) {
    for (int i = 0; i < cfg.samples_per_group; ++i) {
      SampleRollout s;
      s.group = k;
      s.spec = policy::PromptSpec{.prompt_id = batch.prompt_id,
                                  .reward_token = k + 1,
                                  .blend_alpha = alpha};
      auto res = policy::sample_sequence(actor, s.spec, cfg.rollout_temperature, rng);
      s.seq = std::move(res.seq);
      s.old_logprob = std::move(res.logprobs);
      s.ref_logprob = policy::sequence_logprob_values(ref, s.spec, s.seq);
      s.values = policy::critic_values_values(critic, s.spec, s.seq);
      s.reward = rewards::compute_reward_vector(rctx, batch.prompt_id, s.seq);
      for (std::size_t t = 0; t < s.old_logprob.size(); ++t) {
        kl_sum += static_cast<double>(s.old_logprob[t]) - s.ref_logprob[t];
        ++kl_steps;
      }
      batch.samples.push_back(std::move(s));
    }
  }
  batch.mean_kl = kl_steps ? kl_sum / static_cast<double>(kl_steps) : 0.0;

  const int n_channels = rctx.cfg.n_channels;
  for (int k = 0; k < batch.n_groups; ++k) {
    if (mode == RewardMode::weighted_sum) {
      // Baseline: no filtering, channel-mean terminal reward.
      for (int i = 0; i < cfg.samples_per_group; ++i) {
        auto& s = batch.samples[k * cfg.samples_per_group + i];
        s.pareto_member = true;
        double mean = 0.0;
        for (double v : s.reward.normalized) mean += v;
        s.terminal_reward = mean / s.reward.normalized.size();
      }
      batch.pareto_count.push_back(cfg.samples_per_group);
      continue;
    }
    pareto::RewardMatrix m;
    m.n = cfg.samples_per_group;
    m.k = n_channels;
    for (int i = 0; i < cfg.samples_per_group; ++i) {
      const auto& s = batch.samples[k * cfg.samples_per_group + i];
      m.values.insert(m.values.end(), s.reward.normalized.begin(),
                      s.reward.normalized.end());
    }
    const auto front = pareto::non_dominated_set(m);
    batch.pareto_count.push_back(front.size());
    for (int i = 0; i < cfg.samples_per_group; ++i) {
      auto& s = batch.samples[k * cfg.samples_per_group + i];
      s.pareto_member = front.contains(i);
      // Group k was conditioned on token k, so its scalar is channel k.
      s.terminal_reward = s.reward.normalized[k % n_channels];
    }
  }
  return batch;
}

void shaped_returns(RolloutBatch& batch, float beta, float gamma) {
  for (auto& s : batch.samples) {
    const int T = s.seq.length();
    std::vector<double> stream(T);
    for (int t = 0; t < T; ++t)
      stream[t] = -static_cast<double>(beta) *
                  (static_cast<double>(s.old_logprob[t]) - s.ref_logprob[t]);
    stream[T - 1] += s.terminal_reward;
    s.returns.assign(T, 0.f);
    double acc = 0.0;
    for (int t = T - 1; t >= 0; --t) {
      acc = stream[t] + static_cast<double>(gamma) * acc;
      s.returns[t] = static_cast<float>(acc);
    }
  }
}

void compute_advantages(RolloutBatch& batch) {
  double sum = 0.0, sq = 0.0;
  std::size_t n = 0;
  for (auto& s : batch.samples) {
    if (s.returns.size() != s.values.size())
      throw std::invalid_argument("advantages: returns/values length mismatch");
    s.advantages.resize(s.returns.size());
    for (std::size_t t = 0; t < s.returns.size(); ++t) {
      const double a = static_cast<double>(s.returns[t]) - s.values[t];
      s.advantages[t] = static_cast<float>(a);
      sum += a;
      sq += a * a;
      ++n;
    }
  }
  if (n == 0) return;
  const double mean = sum / n;
  const double var = std::max(0.0, sq / n - mean * mean);
  const double inv = 1.0 / (std::sqrt(var) + 1e-8);
  for (auto& s : batch.samples)
    for (auto& a : s.advantages) a = static_cast<float>((a - mean) * inv);
}

template <class S>
TensorT<S> ppo_actor_loss(TapeT<S>& tape, const TensorT<S>& logp_new,
                          const std::vector<S>& logp_old, const std::vector<S>& advantage,
                          S clip_eps) {
  if (logp_new.numel() != logp_old.size() || logp_old.size() != advantage.size())
    throw std::invalid_argument("ppo_actor_loss: per-step vectors misaligned");
  auto neg_old = logp_old;
  for (auto& v : neg_old) v = -v;
  auto ratio = tape.exp(tape.add(logp_new, const_tensor(neg_old)));
  auto adv = const_tensor(advantage);
  auto surr = tape.multiply(ratio, adv);
  auto clipped = tape.multiply(tape.clamp(ratio, S(1) - clip_eps, S(1) + clip_eps), adv);
  return tape.scale(tape.mean(tape.minimum(surr, clipped)), S(-1));
}

template <class S>
TensorT<S> ppo_critic_loss(TapeT<S>& tape, const TensorT<S>& values,
                           const std::vector<S>& returns) {
  if (values.numel() != returns.size())
    throw std::invalid_argument("ppo_critic_loss: values/returns misaligned");
  auto target = TensorT<S>::from(values.shape(), std::vector<S>(returns));
  auto se = tape.squared_error(values, target);
  return tape.scale(se, S(1) / static_cast<S>(returns.size()));
}

UpdateResult ppo_update(policy::GptParams& actor, policy::GptParams& critic,
                        AdamW& actor_opt, AdamW& critic_opt, const RolloutBatch& batch,
                        const PPOConfig& cfg, Rng& shuffle_rng) {
  cfg.validate();
  UpdateResult result;
  const auto snapshot = take_snapshot(actor, critic, actor_opt, critic_opt);

  // Per-sample actor weight: 1/n(P_k) for members of group k's front.
  const int n = static_cast<int>(batch.samples.size());
  std::vector<double> weight(n, 0.0);
  for (int i = 0; i < n; ++i) {
    const auto& s = batch.samples[i];
    if (s.pareto_member) weight[i] = 1.0 / batch.pareto_count[s.group];
  }

  std::vector<int> order(n);
  for (int i = 0; i < n; ++i) order[i] = i;

  double actor_loss_sum = 0.0, critic_loss_sum = 0.0;
  int n_minibatches = 0;
  try {
    for (int epoch = 0; epoch < cfg.ppo_epochs; ++epoch) {
      for (int i = n; i > 1; --i)
        std::swap(order[i - 1], order[shuffle_rng.below(static_cast<std::uint32_t>(i))]);
      for (int mb_start = 0; mb_start < n; mb_start += cfg.minibatch) {
        const int mb_end = std::min(n, mb_start + cfg.minibatch);
        Tape tape;
        Tensor actor_acc = Tensor::scalar(0.f);
        Tensor critic_acc = Tensor::scalar(0.f);
        double weighted_steps = 0.0;
        std::size_t critic_steps = 0;
        for (int oi = mb_start; oi < mb_end; ++oi) {
          const auto& s = batch.samples[order[oi]];
          const double w = weight[order[oi]];
          const int T = s.seq.length();
          if (w > 0.0) {
            auto emb = policy::embed_prompt(tape, actor, s.spec);
            auto logp_new = policy::sequence_logprob(tape, actor, emb, s.seq);
            auto neg_old = s.old_logprob;
            for (auto& v : neg_old) v = -v;
            auto ratio = tape.exp(tape.add(logp_new, const_tensor(neg_old)));
            auto adv = const_tensor(s.advantages);
            auto surr = tape.multiply(ratio, adv);
            auto clipped = tape.multiply(
                tape.clamp(ratio, 1.f - cfg.clip_eps, 1.f + cfg.clip_eps), adv);
            auto step_sum = tape.sum(tape.minimum(surr, clipped));
            actor_acc = tape.add(actor_acc, tape.scale(step_sum, static_cast<float>(w)));
            weighted_steps += w * T;
          }
          auto emb_c = policy::embed_prompt(tape, critic, s.spec);
          auto vals = policy::critic_values(tape, critic, emb_c, s.seq);
          auto target = Tensor::from(vals.shape(),
                                     std::vector<float>(s.returns.begin(), s.returns.end()));
          critic_acc = tape.add(critic_acc, tape.squared_error(vals, target));
          critic_steps += static_cast<std::size_t>(T);
        }
        // Weighted mean over steps, negated because the surrogate is maximized.
        Tensor actor_loss =
            weighted_steps > 0.0
                ? tape.scale(actor_acc, static_cast<float>(-1.0 / weighted_steps))
                : Tensor::scalar(0.f);
        Tensor critic_loss =
            critic_steps > 0
                ? tape.scale(critic_acc, 1.f / static_cast<float>(critic_steps))
                : Tensor::scalar(0.f);
        auto total = tape.add(actor_loss, tape.scale(critic_loss, cfg.value_coef));
        if (!std::isfinite(total.item())) {
          restore_snapshot(snapshot, actor, critic, actor_opt, critic_opt);
          result.aborted = true;
          result.incident = "non-finite loss; update aborted and state rolled back";
          return result;
        }
        tape.backward(total);
        numerics::clip_grad_norm(actor.store, 1.0);
        numerics::clip_grad_norm(critic.store, 1.0);
        actor_opt.step(actor.store);
        critic_opt.step(critic.store);
        actor_loss_sum += actor_loss.item();
        critic_loss_sum += critic_loss.item();
        ++n_minibatches;
      }
    }
  } catch (const numerics::NonFiniteGradient& e) {
    restore_snapshot(snapshot, actor, critic, actor_opt, critic_opt);
    result.aborted = true;
    result.incident = std::string("non-finite update aborted and rolled back (") +
                      e.what() + ")";
    return result;
  }
  if (n_minibatches > 0) {
    result.actor_loss = static_cast<float>(actor_loss_sum / n_minibatches);
    result.critic_loss = static_cast<float>(critic_loss_sum / n_minibatches);
  }
  return result;
}

std::vector<IterationMetrics> train_loop(policy::GptParams& actor,
                                         policy::GptParams& critic,
                                         const policy::GptParams& ref,
                                         const rewards::RewardContext& rctx,
                                         const PPOConfig& cfg, RewardMode mode,
                                         numerics::AdamW& actor_opt,
                                         numerics::AdamW& critic_opt, Rng& rollout_rng,
                                         Rng& shuffle_rng,
                                         const TrainLoopOptions& options) {
  cfg.validate();
  std::vector<IterationMetrics> history;
  for (int e = options.start_iteration; e < cfg.iterations; ++e) {
    const auto t0 = std::chrono::steady_clock::now();
    auto batch = collect_rollouts(actor, ref, critic, rctx, cfg, mode, cfg.alpha_at(e),
                                  rollout_rng);
    shaped_returns(batch, cfg.kl_beta, cfg.gamma);
    compute_advantages(batch);
    const auto update = ppo_update(actor, critic, actor_opt, critic_opt, batch, cfg,
                                   shuffle_rng);
    if (update.aborted)
      std::fprintf(stderr, "iteration %d: %s\n", e, update.incident.c_str());

    IterationMetrics m;
    m.iteration = e;
    const int K = rctx.cfg.n_channels;
    m.mean_raw.assign(K, 0.0);
    m.mean_norm.assign(K, 0.0);
    for (const auto& s : batch.samples)
      for (int k = 0; k < K; ++k) {
        m.mean_raw[k] += s.reward.raw[k];
        m.mean_norm[k] += s.reward.normalized[k];
      }
    for (int k = 0; k < K; ++k) {
      m.mean_raw[k] /= batch.samples.size();
      m.mean_norm[k] /= batch.samples.size();
    }
    m.pareto_sizes = batch.pareto_count;
    m.mean_kl = batch.mean_kl;
    m.actor_loss = update.actor_loss;
    m.critic_loss = update.critic_loss;
    m.aborted = update.aborted;
    m.wall_ms = std::chrono::duration<double, std::milli>(
                    std::chrono::steady_clock::now() - t0)
                    .count();
    if (options.on_iteration) options.on_iteration(m);
    history.push_back(std::move(m));
    if (options.on_checkpoint && (e + 1) % cfg.checkpoint_interval == 0)
      options.on_checkpoint(e);
  }
  return history;
}

template TensorT<float> ppo_actor_loss<float>(TapeT<float>&, const TensorT<float>&,
                                              const std::vector<float>&,
                                              const std::vector<float>&, float);
template TensorT<double> ppo_actor_loss<double>(TapeT<double>&, const TensorT<double>&,
                                                const std::vector<double>&,
                                                const std::vector<double>&, double);
template TensorT<float> ppo_critic_loss<float>(TapeT<float>&, const TensorT<float>&,
                                               const std::vector<float>&);
template TensorT<double> ppo_critic_loss<double>(TapeT<double>&, const TensorT<double>&,
                                                 const std::vector<double>&);

}  // namespace morl::trainer
