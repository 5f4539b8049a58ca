#pragma once

#include <vector>

#include "encoders/encoders.hpp"
#include "policy/vocab.hpp"

namespace morl::rewards {

using encoders::EncoderPair;
using encoders::PreferenceScorer;
using policy::TokenSequence;

// Channel order is fixed: [adherence, quality, preference].
inline constexpr int kAdherence = 0;
inline constexpr int kQuality = 1;
inline constexpr int kPreference = 2;

struct RewardConfig {
  // Per encoder-family weights: [contrastive family, InfoNCE family].
  std::vector<float> lambda{1.f, 1.f};
  int n_channels = 3;

  void validate() const;
};

struct NormalizerState {
  std::vector<double> min_val, max_val;

  int channels() const { return static_cast<int>(min_val.size()); }
  void validate() const;
};

struct RewardVector {
  std::vector<double> raw;
  std::vector<double> normalized;
};

// Negative lambda-weighted sum of squared embedding distances between the
// prompt and the generated sequence, over the trained encoder families.
// Always <= 0; 0 iff every distance vanishes.
double reward_adherence(const EncoderPair& enc, const RewardConfig& cfg, int prompt_id,
                        const TokenSequence& seq);

// Same form between the ground-truth and generated sequences.
double reward_quality(const EncoderPair& enc, const RewardConfig& cfg,
                      const TokenSequence& gt_seq, const TokenSequence& pred_seq);

double reward_preference(const PreferenceScorer& scorer, const TokenSequence& seq);

// The extended min-max map. All three case branches reduce to this single
// affine form; inputs outside [min, max] map linearly outside [0, 1].
double normalize(double r, int channel, const NormalizerState& state);

// Percentile-based bounds (5th/95th, nearest-rank) from warmup samples.
NormalizerState fit_normalizer(const std::vector<std::vector<double>>& per_channel);

struct RewardContext {
  const EncoderPair* encoders = nullptr;
  const PreferenceScorer* scorer = nullptr;
  const std::vector<TokenSequence>* gt_per_prompt = nullptr;
  RewardConfig cfg;
  const NormalizerState* normalizer = nullptr;  // required by compute_reward_vector

  const TokenSequence& ground_truth(int prompt_id) const;
};

// Raw channel values only (used while fitting the normalizer).
std::vector<double> compute_raw_rewards(const RewardContext& ctx, int prompt_id,
                                        const TokenSequence& seq);

RewardVector compute_reward_vector(const RewardContext& ctx, int prompt_id,
                                   const TokenSequence& seq);

}  // namespace morl::rewards
