#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include "encoders/encoders.hpp"
#include "policy/model.hpp"
#include "policy/vocab.hpp"
#include "util/rng.hpp"

namespace morl::tasks {

using encoders::PairedExample;
using encoders::PreferencePair;
using policy::TokenSequence;
using policy::Vocabulary;

struct TaskConfig {
  int n_prompts = 8;
  int vocab = 32;
  int len_min = 12;  // canonical motion-token count, End excluded
  int len_max = 20;
  float positive_noise = 0.1f;  // per-token substitution rate for matched pairs
  std::uint64_t seed = 1;
};

// Synthetic stand-in for paired text/sequence data: each prompt owns one
// canonical sequence (a mostly-smooth bounded token walk), and a hidden
// seeded preference function scores arbitrary sequences. The preference
// favors smooth token trajectories plus a fixed random direction, so it
// conflicts mildly with exact canonical matching.
class SyntheticTask {
 public:
  static SyntheticTask make(const TaskConfig& cfg);

  const TaskConfig& config() const { return cfg_; }
  Vocabulary vocabulary() const { return Vocabulary{cfg_.vocab}; }
  int n_prompts() const { return cfg_.n_prompts; }
  const std::vector<TokenSequence>& canonical() const { return canonical_; }

  // The hidden "true preference": deterministic, fixed by the task seed,
  // never trained on.
  double hidden_preference(const TokenSequence& seq) const;

  // Canonical sequence with per-token substitution noise.
  TokenSequence noisy_canonical(int prompt_id, float noise, Rng& rng) const;

 private:
  TaskConfig cfg_;
  std::vector<TokenSequence> canonical_;
  std::vector<double> pref_direction_;  // over the token histogram
  double smooth_weight_ = 0.0;
  double proj_weight_ = 0.0;
};

struct Dataset {
  std::vector<PairedExample> pairs;        // positives and negatives
  std::vector<PreferencePair> preferences; // labeled by the hidden function
  std::vector<PairedExample> corpus;       // pretraining sequences (label 1)
};

struct DatasetSizes {
  int n_positive = 256;
  int n_negative = 256;
  int n_preference = 2000;
  int n_corpus = 512;
};

Dataset generate_dataset(const SyntheticTask& task, const DatasetSizes& sizes, Rng& rng);

// Line-oriented text serialization: "<kind> <prompt_id> <label> <tokens...>"
// with kinds P (pair), H/L (preference better/worse), C (corpus).
void save_dataset(const std::string& path, const Dataset& ds);
Dataset load_dataset(const std::string& path);

struct PretrainConfig {
  int steps = 600;
  int batch = 16;
  float lr = 3e-4f;
  float w_align = 0.1f;
  float holdout_frac = 0.1f;
};

struct PretrainReport {
  std::vector<float> losses;        // per step
  float holdout_accuracy = 0.f;     // teacher-forced next-token accuracy
};

// Cross-entropy teacher forcing plus w_align times the embedding alignment
// loss between the prompt embedding and the soft predicted-sequence
// embedding under the (frozen) trained encoders.
PretrainReport pretrain_actor(policy::GptParams& actor, const Dataset& dataset,
                              const encoders::EncoderPair& enc, const PretrainConfig& cfg,
                              std::uint64_t seed);

struct OracleScores {
  double exact_match_rate = 0.0;  // P(sampled sequence == canonical)
  double mean_preference = 0.0;   // hidden preference, averaged over samples
  double token_match_rate = 0.0;  // per-position diagnostic, not a criterion input
};

// Analytic evaluation against the task's hidden structure, independent of
// every learned reward model. Samples n_samples sequences across prompts
// with plain (token-free) conditioning at temperature 1.
OracleScores oracle_eval(const policy::GptParams& actor, const SyntheticTask& task,
                         int n_samples, Rng& rng);

}  // namespace morl::tasks
