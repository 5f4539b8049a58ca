#include "rewards/rewards.hpp"

#include <algorithm>
#include <cmath>
#include <stdexcept>
#include <string>

#include "numerics/tape.hpp"

namespace morl::rewards {
namespace {

double squared_distance(const std::vector<float>& a, const std::vector<float>& b) {
  double acc = 0.0;
  for (std::size_t i = 0; i < a.size(); ++i) {
    const double d = static_cast<double>(a[i]) - b[i];
    acc += d * d;
  }
  return acc;
}

std::vector<float> prompt_emb(const encoders::TextMotionEncoder& e, int prompt_id) {
  numerics::Tape tape(false);
  auto f = encoders::prompt_embedding(tape, e, prompt_id);
  return {f.value().begin(), f.value().end()};
}

std::vector<float> seq_emb(const encoders::TextMotionEncoder& e,
                           const TokenSequence& seq) {
  numerics::Tape tape(false);
  auto f = encoders::sequence_embedding(tape, e, seq);
  return {f.value().begin(), f.value().end()};
}

// The two trained families in lambda order.
const encoders::TextMotionEncoder& family(const EncoderPair& enc, std::size_t i) {
  return i == 0 ? enc.contrastive : enc.infonce;
}

bool family_trained(const EncoderPair& enc, std::size_t i) {
  return i == 0 ? enc.contrastive_trained : enc.infonce_trained;
}

}  // namespace

void RewardConfig::validate() const {
  if (n_channels < 2)
    throw std::invalid_argument("reward config: need at least two channels");
  if (lambda.empty() || lambda.size() > 2)
    throw std::invalid_argument("reward config: expected one or two family weights");
  bool any = false;
  for (float l : lambda) {
    if (l < 0.f) throw std::invalid_argument("reward config: lambda must be >= 0");
    any = any || l > 0.f;
  }
  if (!any) throw std::invalid_argument("reward config: at least one lambda must be > 0");
}

void NormalizerState::validate() const {
  if (min_val.size() != max_val.size() || min_val.empty())
    throw std::invalid_argument("normalizer: inconsistent bounds");
  for (std::size_t k = 0; k < min_val.size(); ++k)
    if (!(min_val[k] < max_val[k]))
      throw std::invalid_argument("normalizer: channel " + std::to_string(k) +
                                  " has min >= max");
}

double reward_adherence(const EncoderPair& enc, const RewardConfig& cfg, int prompt_id,
                        const TokenSequence& seq) {
  cfg.validate();
  double r = 0.0;
  for (std::size_t i = 0; i < cfg.lambda.size(); ++i) {
    if (cfg.lambda[i] == 0.f) continue;
    if (!family_trained(enc, i))
      throw std::invalid_argument("reward_adherence: encoder family " +
                                  std::to_string(i) + " has weight > 0 but is untrained");
    const auto& e = family(enc, i);
    r -= cfg.lambda[i] * squared_distance(prompt_emb(e, prompt_id), seq_emb(e, seq));
  }
  return r;
}

double reward_quality(const EncoderPair& enc, const RewardConfig& cfg,
                      const TokenSequence& gt_seq, const TokenSequence& pred_seq) {
  cfg.validate();
  double r = 0.0;
  for (std::size_t i = 0; i < cfg.lambda.size(); ++i) {
    if (cfg.lambda[i] == 0.f) continue;
    if (!family_trained(enc, i))
      throw std::invalid_argument("reward_quality: encoder family " + std::to_string(i) +
                                  " has weight > 0 but is untrained");
    const auto& e = family(enc, i);
    r -= cfg.lambda[i] * squared_distance(seq_emb(e, gt_seq), seq_emb(e, pred_seq));
  }
  return r;
}

double reward_preference(const PreferenceScorer& scorer, const TokenSequence& seq) {
  return encoders::score_sequence(scorer, seq);
}

double normalize(double r, int channel, const NormalizerState& state) {
  state.validate();
  if (channel < 0 || channel >= state.channels())
    throw std::invalid_argument("normalize: channel out of range");
  return (r - state.min_val[channel]) / (state.max_val[channel] - state.min_val[channel]);
}

NormalizerState fit_normalizer(const std::vector<std::vector<double>>& per_channel) {
  NormalizerState state;
  for (std::size_t k = 0; k < per_channel.size(); ++k) {
    auto sorted = per_channel[k];
    if (sorted.size() < 2)
      throw std::invalid_argument("fit_normalizer: channel " + std::to_string(k) +
                                  " needs at least two samples");
    std::sort(sorted.begin(), sorted.end());
    const auto rank = [&](double p) {
      const auto n = static_cast<double>(sorted.size());
      const auto idx = static_cast<std::size_t>(std::max(0.0, std::ceil(p * n) - 1.0));
      return sorted[std::min(idx, sorted.size() - 1)];
    };
    const double lo = rank(0.05), hi = rank(0.95);
    if (!(lo < hi))
      throw std::invalid_argument("fit_normalizer: channel " + std::to_string(k) +
                                  " is constant across the warmup samples");
    state.min_val.push_back(lo);
    state.max_val.push_back(hi);
  }
  state.validate();
  return state;
}

const TokenSequence& RewardContext::ground_truth(int prompt_id) const {
  if (!gt_per_prompt || prompt_id < 0 ||
      prompt_id >= static_cast<int>(gt_per_prompt->size()))
    throw std::invalid_argument("reward context: no ground-truth sequence for prompt " +
                                std::to_string(prompt_id));
  return (*gt_per_prompt)[prompt_id];
}

std::vector<double> compute_raw_rewards(const RewardContext& ctx, int prompt_id,
                                        const TokenSequence& seq) {
  if (!ctx.encoders || !ctx.scorer)
    throw std::invalid_argument("reward context: models missing");
  return {reward_adherence(*ctx.encoders, ctx.cfg, prompt_id, seq),
          reward_quality(*ctx.encoders, ctx.cfg, ctx.ground_truth(prompt_id), seq),
          reward_preference(*ctx.scorer, seq)};
}

RewardVector compute_reward_vector(const RewardContext& ctx, int prompt_id,
                                   const TokenSequence& seq) {
  if (!ctx.normalizer)
    throw std::invalid_argument("reward context: normalizer not fitted");
  RewardVector out;
  out.raw = compute_raw_rewards(ctx, prompt_id, seq);
  out.normalized.resize(out.raw.size());
  for (std::size_t k = 0; k < out.raw.size(); ++k)
    out.normalized[k] = normalize(out.raw[k], static_cast<int>(k), *ctx.normalizer);
  return out;
}

}  // namespace morl::rewards
