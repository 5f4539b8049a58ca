#pragma once

#include <cmath>
#include <cstdint>
#include <string>
#include <vector>

#include "numerics/optim.hpp"
#include "numerics/tape.hpp"
#include "policy/vocab.hpp"
#include "util/rng.hpp"

namespace morl::encoders {

using numerics::ParameterStoreT;
using numerics::TapeT;
using numerics::TensorT;
using policy::TokenSequence;
using policy::Vocabulary;

struct PairedExample {
  int prompt_id = 0;
  TokenSequence seq;
  int label = 1;  // 1: matched pair, 0: mismatched
};

struct PreferencePair {
  int prompt_id = 0;
  TokenSequence better;
  TokenSequence worse;
};

// ---------------------------------------------------------------------------
// Paired prompt/sequence encoders. Two families are trained: one under the
// margin-contrastive objective (unnormalized embeddings, metric distances)
// and one under symmetric InfoNCE (L2-normalized embeddings, learnable
// temperature stored as log tau).

struct EncoderConfig {
  int n_prompts = 8;
  int vocab = 32;  // codebook size
  int d_hidden = 32;
  int d_e = 32;
  float margin = 1.0f;
  float tau_init = 0.07f;
  int train_steps = 1500;
  int batch = 32;
  float lr = 1e-3f;
};

template <class S>
struct TextMotionEncoderT {
  EncoderConfig cfg;
  bool normalized = false;  // L2-normalize embeddings (InfoNCE family)

  TensorT<S> prompt_table;  // [P, d_hidden]
  TensorT<S> prompt_w, prompt_b;
  TensorT<S> tok_table;  // [total, d_hidden]
  TensorT<S> seq_w, seq_b;
  TensorT<S> log_tau;  // [1]

  ParameterStoreT<S> store;
  bool frozen = false;

  static TextMotionEncoderT init(const EncoderConfig& cfg, bool normalized, Rng& rng);
  TextMotionEncoderT frozen_clone() const;
  void for_each_param(const std::function<void(const std::string&, TensorT<S>&)>& fn);

  S tau() const { return std::exp(log_tau.value()[0]); }
};

template <class S>
TensorT<S> prompt_embedding(TapeT<S>& tape, const TextMotionEncoderT<S>& enc,
                            int prompt_id);

template <class S>
TensorT<S> sequence_embedding(TapeT<S>& tape, const TextMotionEncoderT<S>& enc,
                              const TokenSequence& seq);

// Differentiable embedding of a predicted token distribution: expected token
// embedding per step under probs [T, total], then the usual pool + map.
template <class S>
TensorT<S> soft_sequence_embedding(TapeT<S>& tape, const TextMotionEncoderT<S>& enc,
                                   const TensorT<S>& probs);

// y * d^2 + (1-y) * max(0, margin - d)^2 with d the Euclidean embedding
// distance. Squared distance for positives, squared hinge for negatives.
template <class S>
TensorT<S> contrastive_loss(TapeT<S>& tape, const TensorT<S>& f_t, const TensorT<S>& f_m,
                            int label, S margin);

// Symmetric InfoNCE over a batch of matched pairs; rows must be
// L2-normalized. log_tau is the learnable log-temperature.
template <class S>
TensorT<S> infonce_loss(TapeT<S>& tape, const TensorT<S>& f_t, const TensorT<S>& f_m,
                        const TensorT<S>& log_tau);

// -log sigma(score_h - score_l): the pairwise preference log-likelihood.
template <class S>
TensorT<S> preference_loss(TapeT<S>& tape, const TensorT<S>& score_h,
                           const TensorT<S>& score_l);

struct EncoderPair {
  TextMotionEncoderT<float> contrastive;  // margin-contrastive family
  TextMotionEncoderT<float> infonce;      // InfoNCE family
  bool contrastive_trained = false;
  bool infonce_trained = false;
};

// Trains both encoder families on the paired dataset. A dataset whose labels
// are all identical skips the contrastive branch with a warning; one with no
// positives skips InfoNCE likewise.
EncoderPair train_encoders(const std::vector<PairedExample>& dataset,
                           const EncoderConfig& cfg, std::uint64_t seed);

void save_encoders(const std::string& path, EncoderPair& pair, std::uint64_t config_hash);
EncoderPair load_encoders(const std::string& path, const EncoderConfig& cfg,
                          std::uint64_t expected_hash);

// ---------------------------------------------------------------------------
// Preference scorer: fixed random-feature transform g followed by a small
// trained network C, so r_p = C(g(sequence)).

struct ScorerConfig {
  int d_g = 48;
  int d_hidden = 32;
  int train_steps = 1200;
  int batch = 32;
  float lr = 1e-3f;
  std::uint64_t feature_seed = 0x67666561u;  // fixes the g projections
};

// Deterministic untrained features: random projections of the token
// histogram and of first-difference statistics.
std::vector<float> feature_transform_g(const Vocabulary& vocab, const TokenSequence& seq,
                                       int d_g, std::uint64_t feature_seed);

template <class S>
struct PreferenceScorerT {
  ScorerConfig cfg;
  Vocabulary vocab;
  TensorT<S> w1, b1, w2, b2;
  ParameterStoreT<S> store;
  bool frozen = false;

  static PreferenceScorerT init(const ScorerConfig& cfg, const Vocabulary& vocab,
                                Rng& rng);
  PreferenceScorerT frozen_clone() const;
  void for_each_param(const std::function<void(const std::string&, TensorT<S>&)>& fn);
};

using PreferenceScorer = PreferenceScorerT<float>;

template <class S>
TensorT<S> scorer_forward(TapeT<S>& tape, const PreferenceScorerT<S>& scorer,
                          const TensorT<S>& features);

float score_sequence(const PreferenceScorer& scorer, const TokenSequence& seq);

PreferenceScorer train_preference_scorer(const std::vector<PreferencePair>& pairs,
                                         const ScorerConfig& cfg, const Vocabulary& vocab,
                                         std::uint64_t seed);

void save_scorer(const std::string& path, PreferenceScorer& scorer,
                 std::uint64_t config_hash);
PreferenceScorer load_scorer(const std::string& path, const ScorerConfig& cfg,
                             const Vocabulary& vocab, std::uint64_t expected_hash);

extern template struct TextMotionEncoderT<float>;
extern template struct TextMotionEncoderT<double>;
extern template struct PreferenceScorerT<float>;
extern template struct PreferenceScorerT<double>;

using TextMotionEncoder = TextMotionEncoderT<float>;

}  // namespace morl::encoders
