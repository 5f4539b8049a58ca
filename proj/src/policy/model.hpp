#pragma once

#include <cstdint>
#include <functional>
#include <optional>
#include <string>
#include <vector>

#include "numerics/optim.hpp"
#include "numerics/tape.hpp"
#include "policy/vocab.hpp"
#include "util/rng.hpp"

namespace morl::policy {

using numerics::ParameterStoreT;
using numerics::TapeT;
using numerics::TensorT;

struct ModelConfig {
  int vocab = 32;  // codebook size V; embeddings cover V+2 ids
  int d_model = 64;
  int n_layers = 2;
  int n_heads = 4;
  int d_ff = 256;
  int max_T = 24;
  int n_prompts = 8;
  int n_reward_tokens = 3;

  Vocabulary vocabulary() const { return Vocabulary{vocab}; }
  bool operator==(const ModelConfig&) const = default;
};

// Prompt conditioning: which prompt, an optional reward-specific token
// k in 1..K, and the blend weight between the plain and token-augmented
// prompt embeddings.
struct PromptSpec {
  int prompt_id = 0;
  std::optional<int> reward_token;  // 1-based
  float blend_alpha = 0.f;
};

template <class S>
struct LayerParamsT {
  TensorT<S> ln1_g, ln1_b;
  TensorT<S> wq, bq, wk, bk, wv, bv, wo, bo;
  TensorT<S> ln2_g, ln2_b;
  TensorT<S> w1, b1, w2, b2;
};

// Decoder-only causal transformer over the token codebook, conditioned on a
// learned per-prompt embedding occupying context slot 0. Used for both the
// actor (out_dim = vocabulary total) and the critic (out_dim = 1).
template <class S>
struct GptParamsT {
  ModelConfig cfg;
  int out_dim = 0;

  TensorT<S> prompt_emb;  // [P, d]
  TensorT<S> reward_emb;  // [K, d]
  TensorT<S> tok_emb;     // [total, d]
  TensorT<S> pos_emb;     // [max_T, d], token positions only
  std::vector<LayerParamsT<S>> layers;
  TensorT<S> lnf_g, lnf_b;
  TensorT<S> head_w, head_b;

  // Populated for trainable models; empty for frozen clones.
  ParameterStoreT<S> store;
  bool frozen = false;

  static GptParamsT init(const ModelConfig& cfg, int out_dim, Rng& rng);
  static GptParamsT init_actor(const ModelConfig& cfg, Rng& rng) {
    return init(cfg, cfg.vocabulary().total(), rng);
  }
  static GptParamsT init_critic(const ModelConfig& cfg, Rng& rng) {
    return init(cfg, 1, rng);
  }

  // Deep copy with gradients disabled; never registered with an optimizer.
  GptParamsT frozen_clone() const;

  // Enumerates (name, tensor) in a fixed canonical order.
  void for_each_param(const std::function<void(const std::string&, TensorT<S>&)>& fn);
};

template <class S>
void validate_spec(const GptParamsT<S>& m, const PromptSpec& spec);

// Eq.-style blended prompt embedding: (1-alpha) f_t + alpha (f_t + r_k)
// when a reward token is present, else the plain prompt embedding. [1, d]
template <class S>
TensorT<S> embed_prompt(TapeT<S>& tape, const GptParamsT<S>& m, const PromptSpec& spec);

// Logits for each next-token position given the prompt and a prefix of
// codebook tokens (no End/pad allowed). Row i is the distribution for
// token i+1; output is [len(prefix)+1, total].
template <class S>
TensorT<S> actor_logits(TapeT<S>& tape, const GptParamsT<S>& m,
                        const TensorT<S>& prompt_emb, const std::vector<int>& prefix);

// Per-step log pi(s_t | c, S_<t) for a complete sequence, [T].
template <class S>
TensorT<S> sequence_logprob(TapeT<S>& tape, const GptParamsT<S>& m,
                            const TensorT<S>& prompt_emb, const TokenSequence& seq);

// Critic values for states (c, S_<=t), t = 1..T, [T].
template <class S>
TensorT<S> critic_values(TapeT<S>& tape, const GptParamsT<S>& m,
                         const TensorT<S>& prompt_emb, const TokenSequence& seq);

extern template struct GptParamsT<float>;
extern template struct GptParamsT<double>;

using GptParams = GptParamsT<float>;

struct SampleResult {
  TokenSequence seq;
  // log-probabilities of the sampled tokens at temperature 1.0, computed by
  // the same path sequence_logprob uses, so re-scoring is bit-identical.
  std::vector<float> logprobs;
};

// Ancestral sampling at the given temperature until End (forced at max_T).
// The pad token is excluded from sampling; End remains available at every
// step. Temperature shapes exploration only; logprobs are at 1.0.
SampleResult sample_sequence(const GptParams& actor, const PromptSpec& spec,
                             float temperature, Rng& rng);

// Convenience no-grad wrappers.
std::vector<float> sequence_logprob_values(const GptParams& m, const PromptSpec& spec,
                                           const TokenSequence& seq);
std::vector<float> critic_values_values(const GptParams& m, const PromptSpec& spec,
                                        const TokenSequence& seq);

// Model checkpointing in the versioned blob format.
void save_model(const std::string& path, GptParams& m, std::uint64_t config_hash);
void load_model(const std::string& path, GptParams& m, std::uint64_t expected_hash);

}  // namespace morl::policy
