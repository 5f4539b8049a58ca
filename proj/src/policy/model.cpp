#include "policy/model.hpp"

#include <Eigen/Core>

#include <cmath>
#include <stdexcept>

#include "util/blob.hpp"

namespace morl::policy {
namespace {

template <class S>
TensorT<S> param(ParameterStoreT<S>& store, const std::string& name,
                 std::vector<int> shape, Rng& rng, double stddev) {
  auto t = TensorT<S>::zeros(std::move(shape), true);
  if (stddev > 0.0)
    for (auto& v : t.value()) v = static_cast<S>(rng.normal() * stddev);
  return store.add(name, t);
}

template <class S>
TensorT<S> ones_param(ParameterStoreT<S>& store, const std::string& name, int n) {
  auto t = TensorT<S>::zeros({n}, true);
  for (auto& v : t.value()) v = S(1);
  return store.add(name, t);
}

template <class S>
TensorT<S> ids_tensor(const std::vector<int>& ids) {
  auto t = TensorT<S>::zeros({static_cast<int>(ids.size())});
  for (std::size_t i = 0; i < ids.size(); ++i)
    t.value()[i] = static_cast<S>(ids[i]);
  return t;
}

// Transformer trunk: rows [prompt; tokens...] -> final layer-normed hidden.
template <class S>
TensorT<S> hidden_states(TapeT<S>& tape, const GptParamsT<S>& m,
                         const TensorT<S>& prompt_emb, const std::vector<int>& tokens) {
  const int L = static_cast<int>(tokens.size());
  TensorT<S> x;
  if (L == 0) {
    x = prompt_emb;
  } else {
    std::vector<int> positions(L);
    for (int i = 0; i < L; ++i) positions[i] = i;
    auto tok = tape.gather_rows(m.tok_emb, ids_tensor<S>(tokens));
    auto pos = tape.gather_rows(m.pos_emb, ids_tensor<S>(positions));
    x = tape.concat_rows(prompt_emb, tape.add(tok, pos));
  }
  for (const auto& layer : m.layers) {
    auto a = tape.layer_norm(x, layer.ln1_g, layer.ln1_b);
    auto q = tape.add(tape.matmul(a, layer.wq), layer.bq);
    auto k = tape.add(tape.matmul(a, layer.wk), layer.bk);
    auto v = tape.add(tape.matmul(a, layer.wv), layer.bv);
    auto attn = tape.causal_self_attention(q, k, v, m.cfg.n_heads);
    x = tape.add(x, tape.add(tape.matmul(attn, layer.wo), layer.bo));
    auto f = tape.layer_norm(x, layer.ln2_g, layer.ln2_b);
    auto h = tape.relu(tape.add(tape.matmul(f, layer.w1), layer.b1));
    x = tape.add(x, tape.add(tape.matmul(h, layer.w2), layer.b2));
  }
  return tape.layer_norm(x, m.lnf_g, m.lnf_b);
}

template <class S>
TensorT<S> head_logits(TapeT<S>& tape, const GptParamsT<S>& m, const TensorT<S>& hidden) {
  return tape.add(tape.matmul(hidden, m.head_w), m.head_b);
}

template <class S>
std::vector<int> motion_prefix_of(const GptParamsT<S>& m, const TokenSequence& seq) {
  validate_sequence(m.cfg.vocabulary(), seq, m.cfg.max_T);
  return std::vector<int>(seq.tokens.begin(), seq.tokens.end() - 1);
}

}  // namespace

template <class S>
GptParamsT<S> GptParamsT<S>::init(const ModelConfig& cfg, int out_dim, Rng& rng) {
  if (cfg.d_model % cfg.n_heads != 0)
    throw std::invalid_argument("model: d_model must be divisible by n_heads");
  GptParamsT<S> m;
  m.cfg = cfg;
  m.out_dim = out_dim;
  const int d = cfg.d_model;
  const double w_std = 0.08;
  auto& st = m.store;
  m.prompt_emb = param(st, "prompt_emb", {cfg.n_prompts, d}, rng, w_std);
  m.reward_emb = param(st, "reward_emb", {cfg.n_reward_tokens, d}, rng, w_std);
  m.tok_emb = param(st, "tok_emb", {cfg.vocabulary().total(), d}, rng, w_std);
  m.pos_emb = param(st, "pos_emb", {cfg.max_T, d}, rng, w_std);
  m.layers.resize(cfg.n_layers);
  for (int i = 0; i < cfg.n_layers; ++i) {
    const std::string p = "layer" + std::to_string(i) + ".";
    auto& L = m.layers[i];
    L.ln1_g = ones_param<S>(st, p + "ln1_g", d);
    L.ln1_b = param(st, p + "ln1_b", {d}, rng, 0.0);
    L.wq = param(st, p + "wq", {d, d}, rng, w_std);
    L.bq = param(st, p + "bq", {1, d}, rng, 0.0);
    L.wk = param(st, p + "wk", {d, d}, rng, w_std);
    L.bk = param(st, p + "bk", {1, d}, rng, 0.0);
    L.wv = param(st, p + "wv", {d, d}, rng, w_std);
    L.bv = param(st, p + "bv", {1, d}, rng, 0.0);
    L.wo = param(st, p + "wo", {d, d}, rng, w_std);
    L.bo = param(st, p + "bo", {1, d}, rng, 0.0);
    L.ln2_g = ones_param<S>(st, p + "ln2_g", d);
    L.ln2_b = param(st, p + "ln2_b", {d}, rng, 0.0);
    L.w1 = param(st, p + "w1", {d, cfg.d_ff}, rng, w_std);
    L.b1 = param(st, p + "b1", {1, cfg.d_ff}, rng, 0.0);
    L.w2 = param(st, p + "w2", {cfg.d_ff, d}, rng, w_std);
    L.b2 = param(st, p + "b2", {1, d}, rng, 0.0);
  }
  m.lnf_g = ones_param<S>(st, "final_ln_g", d);
  m.lnf_b = param(st, "final_ln_b", {d}, rng, 0.0);
  // The critic head starts at zero so initial value estimates are zero.
  const double head_std = out_dim == 1 ? 0.0 : 0.05;
  m.head_w = param(st, "head_w", {d, out_dim}, rng, head_std);
  m.head_b = param(st, "head_b", {1, out_dim}, rng, 0.0);
  return m;
}

template <class S>
void GptParamsT<S>::for_each_param(
    const std::function<void(const std::string&, TensorT<S>&)>& fn) {
  fn("prompt_emb", prompt_emb);
  fn("reward_emb", reward_emb);
  fn("tok_emb", tok_emb);
  fn("pos_emb", pos_emb);
  for (std::size_t i = 0; i < layers.size(); ++i) {
    const std::string p = "layer" + std::to_string(i) + ".";
    auto& L = layers[i];
    fn(p + "ln1_g", L.ln1_g);
    fn(p + "ln1_b", L.ln1_b);
    fn(p + "wq", L.wq);
    fn(p + "bq", L.bq);
    fn(p + "wk", L.wk);
    fn(p + "bk", L.bk);
    fn(p + "wv", L.wv);
    fn(p + "bv", L.bv);
    fn(p + "wo", L.wo);
    fn(p + "bo", L.bo);
    fn(p + "ln2_g", L.ln2_g);
    fn(p + "ln2_b", L.ln2_b);
    fn(p + "w1", L.w1);
    fn(p + "b1", L.b1);
    fn(p + "w2", L.w2);
    fn(p + "b2", L.b2);
  }
  fn("final_ln_g", lnf_g);
  fn("final_ln_b", lnf_b);
  fn("head_w", head_w);
  fn("head_b", head_b);
}

template <class S>
GptParamsT<S> GptParamsT<S>::frozen_clone() const {
  GptParamsT<S> out;
  out.cfg = cfg;
  out.out_dim = out_dim;
  out.frozen = true;
  auto copy = [](const TensorT<S>& t) {
    return TensorT<S>::from(t.shape(), std::vector<S>(t.value().begin(), t.value().end()));
  };
  out.prompt_emb = copy(prompt_emb);
  out.reward_emb = copy(reward_emb);
  out.tok_emb = copy(tok_emb);
  out.pos_emb = copy(pos_emb);
  out.layers.resize(layers.size());
  for (std::size_t i = 0; i < layers.size(); ++i) {
    const auto& a = layers[i];
    auto& b = out.layers[i];
    b.ln1_g = copy(a.ln1_g); b.ln1_b = copy(a.ln1_b);
    b.wq = copy(a.wq); b.bq = copy(a.bq);
    b.wk = copy(a.wk); b.bk = copy(a.bk);
    b.wv = copy(a.wv); b.bv = copy(a.bv);
    b.wo = copy(a.wo); b.bo = copy(a.bo);
    b.ln2_g = copy(a.ln2_g); b.ln2_b = copy(a.ln2_b);
    b.w1 = copy(a.w1); b.b1 = copy(a.b1);
    b.w2 = copy(a.w2); b.b2 = copy(a.b2);
  }
  out.lnf_g = copy(lnf_g);
  out.lnf_b = copy(lnf_b);
  out.head_w = copy(head_w);
  out.head_b = copy(head_b);
  return out;
}

template <class S>
void validate_spec(const GptParamsT<S>& m, const PromptSpec& spec) {
  if (spec.prompt_id < 0 || spec.prompt_id >= m.cfg.n_prompts)
    throw std::invalid_argument("prompt id " + std::to_string(spec.prompt_id) +
                                " outside [0," + std::to_string(m.cfg.n_prompts) + ")");
  if (spec.reward_token &&
      (*spec.reward_token < 1 || *spec.reward_token > m.cfg.n_reward_tokens))
    throw std::invalid_argument("reward token " + std::to_string(*spec.reward_token) +
                                " outside [1," + std::to_string(m.cfg.n_reward_tokens) +
                                "]");
  if (spec.blend_alpha < 0.f || spec.blend_alpha > 1.f)
    throw std::invalid_argument("blend alpha must lie in [0,1]");
}

template <class S>
TensorT<S> embed_prompt(TapeT<S>& tape, const GptParamsT<S>& m, const PromptSpec& spec) {
  validate_spec(m, spec);
  auto f_t = tape.gather_rows(m.prompt_emb, ids_tensor<S>({spec.prompt_id}));
  if (!spec.reward_token) return f_t;
  const S alpha = static_cast<S>(spec.blend_alpha);
  auto token_vec = tape.gather_rows(m.reward_emb, ids_tensor<S>({*spec.reward_token - 1}));
  auto f_tk = tape.add(f_t, token_vec);
  return tape.add(tape.scale(f_t, S(1) - alpha), tape.scale(f_tk, alpha));
}

template <class S>
TensorT<S> actor_logits(TapeT<S>& tape, const GptParamsT<S>& m,
                        const TensorT<S>& prompt_emb, const std::vector<int>& prefix) {
  if (static_cast<int>(prefix.size()) >= m.cfg.max_T)
    throw std::invalid_argument("actor_logits: prefix length " +
                                std::to_string(prefix.size()) + " must be < max_T " +
                                std::to_string(m.cfg.max_T));
  const auto vocab = m.cfg.vocabulary();
  for (int t : prefix)
    if (t < 0 || t >= vocab.codebook)
      throw std::invalid_argument(
          "actor_logits: prefix may only contain codebook tokens, got " +
          std::to_string(t));
  return head_logits(tape, m, hidden_states(tape, m, prompt_emb, prefix));
}

template <class S>
TensorT<S> sequence_logprob(TapeT<S>& tape, const GptParamsT<S>& m,
                            const TensorT<S>& prompt_emb, const TokenSequence& seq) {
  const auto prefix = motion_prefix_of(m, seq);
  auto logits = head_logits(tape, m, hidden_states(tape, m, prompt_emb, prefix));
  auto logsm = tape.log_softmax_rows(logits);
  return tape.pick_per_row(logsm, ids_tensor<S>(seq.tokens));
}

template <class S>
TensorT<S> critic_values(TapeT<S>& tape, const GptParamsT<S>& m,
                         const TensorT<S>& prompt_emb, const TokenSequence& seq) {
  validate_sequence(m.cfg.vocabulary(), seq, m.cfg.max_T);
  if (m.out_dim != 1)
    throw std::invalid_argument("critic_values: model head is not scalar");
  // Context includes the End token: values cover states (c, S_<=t).
  auto hidden = hidden_states(tape, m, prompt_emb, seq.tokens);
  auto vals = head_logits(tape, m, hidden);  // [T+1, 1]
  auto from_first_token = tape.slice_rows(vals, 1, seq.length() + 1);
  return tape.transpose(from_first_token);  // [1, T] — row vector of values
}

// --------------------------- incremental sampler ---------------------------

namespace {

using RowVec = Eigen::Matrix<float, 1, Eigen::Dynamic, Eigen::RowMajor>;
using CMap = Eigen::Map<const Eigen::Matrix<float, Eigen::Dynamic, Eigen::Dynamic,
                                            Eigen::RowMajor>>;

CMap cmap(const numerics::TensorT<float>& t) {
  return CMap(t.value().data(), t.rows(), t.cols());
}

void layer_norm_row(RowVec& x, const numerics::TensorT<float>& g,
                    const numerics::TensorT<float>& b) {
  const int n = static_cast<int>(x.size());
  double mu = 0.0;
  for (int j = 0; j < n; ++j) mu += x[j];
  mu /= n;
  double var = 0.0;
  for (int j = 0; j < n; ++j) {
    const double c = x[j] - mu;
    var += c * c;
  }
  var /= n;
  const double istd = 1.0 / std::sqrt(var + 1e-5);
  for (int j = 0; j < n; ++j)
    x[j] = static_cast<float>((x[j] - mu) * istd) * g.value()[j] + b.value()[j];
}

struct LayerCache {
  std::vector<float> k, v;  // len * d, appended row by row
  int len = 0;
};

class IncrementalDecoder {
 public:
  IncrementalDecoder(const GptParams& m, RowVec prompt_row)
      : m_(m), cache_(m.layers.size()), x_(std::move(prompt_row)) {}

  // Feeds one context row and returns the logits row predicting the next
  // token. The first call consumes the prompt embedding; later calls embed
  // the given sampled token at the next position.
  RowVec step(int token) {
    const int d = m_.cfg.d_model;
    if (pos_ > 0) {
      x_ = cmap(m_.tok_emb).row(token) + cmap(m_.pos_emb).row(pos_ - 1);
    }
    RowVec x = x_;
    for (std::size_t li = 0; li < m_.layers.size(); ++li) {
      const auto& L = m_.layers[li];
      auto& kv = cache_[li];
      RowVec a = x;
      layer_norm_row(a, L.ln1_g, L.ln1_b);
      RowVec q = a * cmap(L.wq) + cmap(L.bq);
      RowVec k = a * cmap(L.wk) + cmap(L.bk);
      RowVec v = a * cmap(L.wv) + cmap(L.bv);
      kv.k.insert(kv.k.end(), k.data(), k.data() + d);
      kv.v.insert(kv.v.end(), v.data(), v.data() + d);
      ++kv.len;

      const int H = m_.cfg.n_heads, dh = d / H;
      const double inv_sqrt = 1.0 / std::sqrt(static_cast<double>(dh));
      RowVec attn(d);
      std::vector<double> scores(kv.len);
      for (int h = 0; h < H; ++h) {
        const int off = h * dh;
        double mx = -1e300;
        for (int j = 0; j < kv.len; ++j) {
          double s = 0.0;
          const float* kj = kv.k.data() + static_cast<std::size_t>(j) * d + off;
          for (int c = 0; c < dh; ++c) s += static_cast<double>(q[off + c]) * kj[c];
          scores[j] = s * inv_sqrt;
          mx = std::max(mx, scores[j]);
        }
        double denom = 0.0;
        for (int j = 0; j < kv.len; ++j) denom += std::exp(scores[j] - mx);
        for (int c = 0; c < dh; ++c) {
          double acc = 0.0;
          for (int j = 0; j < kv.len; ++j)
            acc += std::exp(scores[j] - mx) / denom *
                   kv.v[static_cast<std::size_t>(j) * d + off + c];
          attn[off + c] = static_cast<float>(acc);
        }
      }
      x += attn * cmap(L.wo) + cmap(L.bo);
      RowVec f = x;
      layer_norm_row(f, L.ln2_g, L.ln2_b);
      RowVec h1 = (f * cmap(L.w1) + cmap(L.b1)).cwiseMax(0.f);
      x += h1 * cmap(L.w2) + cmap(L.b2);
    }
    ++pos_;
    layer_norm_row(x, m_.lnf_g, m_.lnf_b);
    return x * cmap(m_.head_w) + cmap(m_.head_b);
  }

 private:
  const GptParams& m_;
  std::vector<LayerCache> cache_;
  RowVec x_;
  int pos_ = 0;
};

int sample_from_logits(const RowVec& logits, float temperature, int pad_id, Rng& rng) {
  const int n = static_cast<int>(logits.size());
  std::vector<double> p(n);
  double mx = -1e300;
  for (int j = 0; j < n; ++j) {
    p[j] = (j == pad_id) ? -1e30 : static_cast<double>(logits[j]) / temperature;
    mx = std::max(mx, p[j]);
  }
  double denom = 0.0;
  for (int j = 0; j < n; ++j) {
    p[j] = std::exp(p[j] - mx);
    denom += p[j];
  }
  const double u = rng.uniform() * denom;
  double acc = 0.0;
  for (int j = 0; j < n; ++j) {
    acc += p[j];
    if (u < acc) return j;
  }
  return n - 1;
}

}  // namespace

SampleResult sample_sequence(const GptParams& actor, const PromptSpec& spec,
                             float temperature, Rng& rng) {
  if (!(temperature > 0.f))
    throw std::invalid_argument("sample_sequence: temperature must be > 0");
  const auto vocab = actor.cfg.vocabulary();

  RowVec prompt_row;
  {
    numerics::Tape tape(/*recording=*/false);
    auto emb = embed_prompt(tape, actor, spec);
    prompt_row = RowVec(actor.cfg.d_model);
    for (int j = 0; j < actor.cfg.d_model; ++j) prompt_row[j] = emb.value()[j];
  }

  IncrementalDecoder dec(actor, std::move(prompt_row));
  std::vector<int> tokens;
  int prev = -1;
  while (true) {
    RowVec logits = dec.step(prev);
    int tok;
    if (static_cast<int>(tokens.size()) == actor.cfg.max_T - 1) {
      tok = vocab.end_id();  // forced termination at the length limit
    } else {
      tok = sample_from_logits(logits, temperature, vocab.pad_id(), rng);
    }
    tokens.push_back(tok);
    if (tok == vocab.end_id()) break;
    prev = tok;
  }

  SampleResult out;
  out.seq = TokenSequence{std::move(tokens)};
  out.logprobs = sequence_logprob_values(actor, spec, out.seq);
  return out;
}

std::vector<float> sequence_logprob_values(const GptParams& m, const PromptSpec& spec,
                                           const TokenSequence& seq) {
  numerics::Tape tape(/*recording=*/false);
  auto lp = sequence_logprob(tape, m, embed_prompt(tape, m, spec), seq);
  return {lp.value().begin(), lp.value().end()};
}

std::vector<float> critic_values_values(const GptParams& m, const PromptSpec& spec,
                                        const TokenSequence& seq) {
  numerics::Tape tape(/*recording=*/false);
  auto v = critic_values(tape, m, embed_prompt(tape, m, spec), seq);
  return {v.value().begin(), v.value().end()};
}

void save_model(const std::string& path, GptParams& m, std::uint64_t config_hash) {
  io::Blob blob;
  blob.config_hash = config_hash;
  m.for_each_param([&](const std::string& name, numerics::Tensor& t) {
    std::vector<std::int64_t> dims(t.shape().begin(), t.shape().end());
    blob.sections.push_back(
        io::Section::f32(name, std::move(dims), t.value().data(), t.numel()));
  });
  io::save_blob(path, blob);
}

void load_model(const std::string& path, GptParams& m, std::uint64_t expected_hash) {
  const io::Blob blob = io::load_blob(path, expected_hash);
  m.for_each_param([&](const std::string& name, numerics::Tensor& t) {
    const auto& s = blob.find(name);
    auto vals = s.as_f32();
    if (vals.size() != t.numel())
      throw std::runtime_error(path + ": section " + name + " has " +
                               std::to_string(vals.size()) + " values, expected " +
                               std::to_string(t.numel()));
    std::copy(vals.begin(), vals.end(), t.value().begin());
  });
}

// Explicit instantiations: float for production, double for verification.
template struct GptParamsT<float>;
template struct GptParamsT<double>;
template void validate_spec<float>(const GptParamsT<float>&, const PromptSpec&);
template void validate_spec<double>(const GptParamsT<double>&, const PromptSpec&);
template TensorT<float> embed_prompt<float>(TapeT<float>&, const GptParamsT<float>&,
                                            const PromptSpec&);
template TensorT<double> embed_prompt<double>(TapeT<double>&, const GptParamsT<double>&,
                                              const PromptSpec&);
template TensorT<float> actor_logits<float>(TapeT<float>&, const GptParamsT<float>&,
                                            const TensorT<float>&,
                                            const std::vector<int>&);
template TensorT<double> actor_logits<double>(TapeT<double>&, const GptParamsT<double>&,
                                              const TensorT<double>&,
                                              const std::vector<int>&);
template TensorT<float> sequence_logprob<float>(TapeT<float>&, const GptParamsT<float>&,
                                                const TensorT<float>&,
                                                const TokenSequence&);
template TensorT<double> sequence_logprob<double>(TapeT<double>&,
                                                  const GptParamsT<double>&,
                                                  const TensorT<double>&,
                                                  const TokenSequence&);
template TensorT<float> critic_values<float>(TapeT<float>&, const GptParamsT<float>&,
                                             const TensorT<float>&, const TokenSequence&);
template TensorT<double> critic_values<double>(TapeT<double>&, const GptParamsT<double>&,
                                               const TensorT<double>&,
                                               const TokenSequence&);

}  // namespace morl::policy
