#include "encoders/encoders.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <stdexcept>

#include "util/blob.hpp"

namespace morl::encoders {
namespace {

template <class S>
TensorT<S> ids_tensor(const std::vector<int>& ids) {
  auto t = TensorT<S>::zeros({static_cast<int>(ids.size())});
  for (std::size_t i = 0; i < ids.size(); ++i) t.value()[i] = static_cast<S>(ids[i]);
  return t;
}

template <class S>
TensorT<S> mean_pool_rows(TapeT<S>& tape, const TensorT<S>& rows) {
  auto w = TensorT<S>::zeros({1, rows.rows()});
  const S inv = S(1) / static_cast<S>(rows.rows());
  for (auto& v : w.value()) v = inv;
  return tape.matmul(w, rows);
}

}  // namespace

template <class S>
TextMotionEncoderT<S> TextMotionEncoderT<S>::init(const EncoderConfig& cfg,
                                                  bool normalized, Rng& rng) {
  TextMotionEncoderT<S> e;
  e.cfg = cfg;
  e.normalized = normalized;
  const Vocabulary vocab{cfg.vocab};
  auto mk = [&](const std::string& name, std::vector<int> shape, double stddev) {
    auto t = TensorT<S>::zeros(std::move(shape), true);
    for (auto& v : t.value()) v = static_cast<S>(rng.normal() * stddev);
    return e.store.add(name, t);
  };
  e.prompt_table = mk("prompt_table", {cfg.n_prompts, cfg.d_hidden}, 0.3);
  e.prompt_w = mk("prompt_w", {cfg.d_hidden, cfg.d_e}, 0.3);
  e.prompt_b = mk("prompt_b", {1, cfg.d_e}, 0.0);
  e.tok_table = mk("tok_table", {vocab.total(), cfg.d_hidden}, 0.3);
  e.seq_w = mk("seq_w", {cfg.d_hidden, cfg.d_e}, 0.3);
  e.seq_b = mk("seq_b", {1, cfg.d_e}, 0.0);
  e.log_tau = e.store.add("log_tau",
                          TensorT<S>::from({1}, {static_cast<S>(std::log(cfg.tau_init))},
                                           true));
  return e;
}

template <class S>
void TextMotionEncoderT<S>::for_each_param(
    const std::function<void(const std::string&, TensorT<S>&)>& fn) {
  fn("prompt_table", prompt_table);
  fn("prompt_w", prompt_w);
  fn("prompt_b", prompt_b);
  fn("tok_table", tok_table);
  fn("seq_w", seq_w);
  fn("seq_b", seq_b);
  fn("log_tau", log_tau);
}

template <class S>
TextMotionEncoderT<S> TextMotionEncoderT<S>::frozen_clone() const {
  TextMotionEncoderT<S> out;
  out.cfg = cfg;
  out.normalized = normalized;
  out.frozen = true;
  auto copy = [](const TensorT<S>& t) {
    return TensorT<S>::from(t.shape(), std::vector<S>(t.value().begin(), t.value().end()));
  };
  out.prompt_table = copy(prompt_table);
  out.prompt_w = copy(prompt_w);
  out.prompt_b = copy(prompt_b);
  out.tok_table = copy(tok_table);
  out.seq_w = copy(seq_w);
  out.seq_b = copy(seq_b);
  out.log_tau = copy(log_tau);
  return out;
}

template <class S>
TensorT<S> prompt_embedding(TapeT<S>& tape, const TextMotionEncoderT<S>& enc,
                            int prompt_id) {
  if (prompt_id < 0 || prompt_id >= enc.cfg.n_prompts)
    throw std::invalid_argument("prompt_embedding: prompt id out of range");
  auto h = tape.gather_rows(enc.prompt_table, ids_tensor<S>({prompt_id}));
  auto f = tape.tanh(tape.add(tape.matmul(h, enc.prompt_w), enc.prompt_b));
  return enc.normalized ? tape.rows_l2_normalize(f) : f;
}

template <class S>
TensorT<S> sequence_embedding(TapeT<S>& tape, const TextMotionEncoderT<S>& enc,
                              const TokenSequence& seq) {
  auto rows = tape.gather_rows(enc.tok_table, ids_tensor<S>(seq.tokens));
  auto pooled = mean_pool_rows(tape, rows);
  auto f = tape.tanh(tape.add(tape.matmul(pooled, enc.seq_w), enc.seq_b));
  return enc.normalized ? tape.rows_l2_normalize(f) : f;
}

template <class S>
TensorT<S> soft_sequence_embedding(TapeT<S>& tape, const TextMotionEncoderT<S>& enc,
                                   const TensorT<S>& probs) {
  if (probs.cols() != enc.tok_table.rows())
    throw std::invalid_argument("soft_sequence_embedding: distribution width mismatch");
  auto rows = tape.matmul(probs, enc.tok_table);  // expected embedding per step
  auto pooled = mean_pool_rows(tape, rows);
  auto f = tape.tanh(tape.add(tape.matmul(pooled, enc.seq_w), enc.seq_b));
  return enc.normalized ? tape.rows_l2_normalize(f) : f;
}

template <class S>
TensorT<S> contrastive_loss(TapeT<S>& tape, const TensorT<S>& f_t, const TensorT<S>& f_m,
                            int label, S margin) {
  if (!(margin > S(0))) throw std::invalid_argument("contrastive_loss: margin must be > 0");
  if (label != 0 && label != 1)
    throw std::invalid_argument("contrastive_loss: label must be 0 or 1");
  auto sq = tape.squared_error(f_t, f_m);
  if (label == 1) return sq;
  auto dist = tape.sqrt(sq);
  auto gap = tape.add(TensorT<S>::scalar(margin), tape.scale(dist, S(-1)));
  auto hinge = tape.relu(gap);
  return tape.multiply(hinge, hinge);
}

template <class S>
TensorT<S> infonce_loss(TapeT<S>& tape, const TensorT<S>& f_t, const TensorT<S>& f_m,
                        const TensorT<S>& log_tau) {
  if (f_t.rows() < 1) throw std::invalid_argument("infonce_loss: empty batch");
  if (f_t.shape() != f_m.shape())
    throw std::invalid_argument("infonce_loss: batch shapes differ");
  const int B = f_t.rows();
  auto inv_tau = tape.exp(tape.scale(log_tau, S(-1)));
  auto sims = tape.scale_by_scalar(tape.matmul(f_t, tape.transpose(f_m)), inv_tau);
  std::vector<int> diag(B);
  for (int i = 0; i < B; ++i) diag[i] = i;
  auto ids = ids_tensor<S>(diag);
  auto row_terms = tape.pick_per_row(tape.log_softmax_rows(sims), ids);
  auto col_terms = tape.pick_per_row(tape.log_softmax_rows(tape.transpose(sims)), ids);
  auto total = tape.add(tape.sum(row_terms), tape.sum(col_terms));
  return tape.scale(total, S(-1) / static_cast<S>(B));
}

template <class S>
TensorT<S> preference_loss(TapeT<S>& tape, const TensorT<S>& score_h,
                           const TensorT<S>& score_l) {
  auto diff = tape.add(score_h, tape.scale(score_l, S(-1)));
  return tape.softplus(tape.scale(diff, S(-1)));
}

// ---------------------------------------------------------------------------

EncoderPair train_encoders(const std::vector<PairedExample>& dataset,
                           const EncoderConfig& cfg, std::uint64_t seed) {
  Rng init_rng(seed, "encoders-init");
  EncoderPair pair;
  pair.contrastive = TextMotionEncoder::init(cfg, /*normalized=*/false, init_rng);
  pair.infonce = TextMotionEncoder::init(cfg, /*normalized=*/true, init_rng);

  std::size_t n_pos = 0;
  for (const auto& ex : dataset) n_pos += ex.label == 1;
  const bool has_both_labels = n_pos > 0 && n_pos < dataset.size();

  if (!has_both_labels) {
    std::fprintf(stderr,
                 "train_encoders: dataset labels are degenerate; "
                 "contrastive branch skipped\n");
  } else {
    Rng rng(seed, "encoders-cl");
    numerics::AdamW opt(pair.contrastive.store, {.lr = cfg.lr});
    for (int step = 0; step < cfg.train_steps; ++step) {
      numerics::Tape tape;
      numerics::Tensor loss = numerics::Tensor::scalar(0.f);
      for (int b = 0; b < cfg.batch; ++b) {
        const auto& ex = dataset[rng.below(static_cast<std::uint32_t>(dataset.size()))];
        auto f_t = prompt_embedding(tape, pair.contrastive, ex.prompt_id);
        auto f_m = sequence_embedding(tape, pair.contrastive, ex.seq);
        loss = tape.add(loss, contrastive_loss(tape, f_t, f_m, ex.label, cfg.margin));
      }
      loss = tape.scale(loss, 1.f / static_cast<float>(cfg.batch));
      tape.backward(loss);
      numerics::clip_grad_norm(pair.contrastive.store, 1.0);
      opt.step(pair.contrastive.store);
    }
    pair.contrastive_trained = true;
  }

  // Matched pairs per prompt for InfoNCE batches: one positive per prompt so
  // no in-batch negative is secretly a match.
  std::vector<std::vector<const PairedExample*>> by_prompt(cfg.n_prompts);
  for (const auto& ex : dataset)
    if (ex.label == 1 && ex.prompt_id >= 0 && ex.prompt_id < cfg.n_prompts)
      by_prompt[ex.prompt_id].push_back(&ex);
  std::vector<int> usable;
  for (int p = 0; p < cfg.n_prompts; ++p)
    if (!by_prompt[p].empty()) usable.push_back(p);

  if (usable.size() < 2) {
    std::fprintf(stderr,
                 "train_encoders: fewer than two prompts with positive pairs; "
                 "InfoNCE branch skipped\n");
  } else {
    Rng rng(seed, "encoders-nce");
    numerics::AdamW opt(pair.infonce.store, {.lr = cfg.lr});
    const int B = static_cast<int>(usable.size());
    for (int step = 0; step < cfg.train_steps; ++step) {
      numerics::Tape tape;
      std::vector<numerics::Tensor> t_rows, m_rows;
      numerics::Tensor f_t, f_m;
      for (int bi = 0; bi < B; ++bi) {
        const int p = usable[bi];
        const auto& ex =
            *by_prompt[p][rng.below(static_cast<std::uint32_t>(by_prompt[p].size()))];
        auto ft = prompt_embedding(tape, pair.infonce, p);
        auto fm = sequence_embedding(tape, pair.infonce, ex.seq);
        f_t = bi == 0 ? ft : tape.concat_rows(f_t, ft);
        f_m = bi == 0 ? fm : tape.concat_rows(f_m, fm);
      }
      auto loss = infonce_loss(tape, f_t, f_m, pair.infonce.log_tau);
      tape.backward(loss);
      numerics::clip_grad_norm(pair.infonce.store, 1.0);
      opt.step(pair.infonce.store);
    }
    pair.infonce_trained = true;
  }
  return pair;
}

void save_encoders(const std::string& path, EncoderPair& pair,
                   std::uint64_t config_hash) {
  io::Blob blob;
  blob.config_hash = config_hash;
  auto dump = [&](const char* prefix, TextMotionEncoder& e) {
    e.for_each_param([&](const std::string& name, numerics::Tensor& t) {
      std::vector<std::int64_t> dims(t.shape().begin(), t.shape().end());
      blob.sections.push_back(io::Section::f32(std::string(prefix) + "." + name,
                                               std::move(dims), t.value().data(),
                                               t.numel()));
    });
  };
  dump("cl", pair.contrastive);
  dump("nce", pair.infonce);
  const std::uint64_t flags[2] = {pair.contrastive_trained ? 1ull : 0ull,
                                  pair.infonce_trained ? 1ull : 0ull};
  blob.sections.push_back(io::Section::u64("trained_flags", flags, 2));
  io::save_blob(path, blob);
}

EncoderPair load_encoders(const std::string& path, const EncoderConfig& cfg,
                          std::uint64_t expected_hash) {
  const io::Blob blob = io::load_blob(path, expected_hash);
  Rng rng(0, "encoders-load");
  EncoderPair pair;
  pair.contrastive = TextMotionEncoder::init(cfg, false, rng);
  pair.infonce = TextMotionEncoder::init(cfg, true, rng);
  auto fill = [&](const char* prefix, TextMotionEncoder& e) {
    e.for_each_param([&](const std::string& name, numerics::Tensor& t) {
      auto vals = blob.find(std::string(prefix) + "." + name).as_f32();
      if (vals.size() != t.numel())
        throw std::runtime_error(path + ": bad section size for " + name);
      std::copy(vals.begin(), vals.end(), t.value().begin());
    });
  };
  fill("cl", pair.contrastive);
  fill("nce", pair.infonce);
  const auto flags = blob.find("trained_flags").as_u64();
  pair.contrastive_trained = flags.at(0) != 0;
  pair.infonce_trained = flags.at(1) != 0;
  return pair;
}

// ---------------------------------------------------------------------------

std::vector<float> feature_transform_g(const Vocabulary& vocab, const TokenSequence& seq,
                                       int d_g, std::uint64_t feature_seed) {
  const int total = vocab.total();
  std::vector<double> hist(total, 0.0);
  const int M = seq.motion_length();
  for (int i = 0; i < M; ++i) hist[seq.tokens[i]] += 1.0;
  if (M > 0)
    for (auto& h : hist) h /= M;

  // First-difference and magnitude statistics over the motion tokens.
  const double V = vocab.codebook;
  double mean_abs = 0, mean_sq = 0, frac_zero = 0, frac_small = 0;
  if (M >= 2) {
    for (int i = 0; i + 1 < M; ++i) {
      const double diff = seq.tokens[i + 1] - seq.tokens[i];
      mean_abs += std::abs(diff);
      mean_sq += diff * diff;
      frac_zero += diff == 0.0;
      frac_small += std::abs(diff) <= 2.0;
    }
    mean_abs /= M - 1;
    mean_sq /= M - 1;
    frac_zero /= M - 1;
    frac_small /= M - 1;
  }
  double mean_tok = 0, var_tok = 0;
  for (int i = 0; i < M; ++i) mean_tok += seq.tokens[i];
  if (M > 0) mean_tok /= M;
  for (int i = 0; i < M; ++i) {
    const double c = seq.tokens[i] - mean_tok;
    var_tok += c * c;
  }
  if (M > 0) var_tok /= M;
  const std::vector<double> stats{mean_abs / V,       mean_sq / (V * V),
                                  frac_zero,          frac_small,
                                  mean_tok / V,       std::sqrt(var_tok) / V,
                                  M / 64.0,           1.0};

  // Fixed random projections; the seed pins them for the artifact lifetime.
  Rng hist_rng(feature_seed, "g-hist");
  Rng stat_rng(feature_seed, "g-stats");
  std::vector<float> out(d_g, 0.f);
  std::vector<double> acc(d_g, 0.0);
  for (int j = 0; j < total; ++j)
    for (int i = 0; i < d_g; ++i) {
      const double w = hist_rng.normal() / std::sqrt(static_cast<double>(total));
      acc[i] += w * hist[j];
    }
  for (std::size_t j = 0; j < stats.size(); ++j)
    for (int i = 0; i < d_g; ++i) {
      const double w = stat_rng.normal() / std::sqrt(static_cast<double>(stats.size()));
      acc[i] += w * stats[j];
    }
  for (int i = 0; i < d_g; ++i) out[i] = static_cast<float>(acc[i]);
  return out;
}

template <class S>
PreferenceScorerT<S> PreferenceScorerT<S>::init(const ScorerConfig& cfg,
                                                const Vocabulary& vocab, Rng& rng) {
  PreferenceScorerT<S> s;
  s.cfg = cfg;
  s.vocab = vocab;
  auto mk = [&](const std::string& name, std::vector<int> shape, double stddev) {
    auto t = TensorT<S>::zeros(std::move(shape), true);
    for (auto& v : t.value()) v = static_cast<S>(rng.normal() * stddev);
    return s.store.add(name, t);
  };
  s.w1 = mk("w1", {cfg.d_g, cfg.d_hidden}, 0.3);
  s.b1 = mk("b1", {1, cfg.d_hidden}, 0.0);
  s.w2 = mk("w2", {cfg.d_hidden, 1}, 0.3);
  s.b2 = mk("b2", {1, 1}, 0.0);
  return s;
}

template <class S>
void PreferenceScorerT<S>::for_each_param(
    const std::function<void(const std::string&, TensorT<S>&)>& fn) {
  fn("w1", w1);
  fn("b1", b1);
  fn("w2", w2);
  fn("b2", b2);
}

template <class S>
PreferenceScorerT<S> PreferenceScorerT<S>::frozen_clone() const {
  PreferenceScorerT<S> out;
  out.cfg = cfg;
  out.vocab = vocab;
  out.frozen = true;
  auto copy = [](const TensorT<S>& t) {
    return TensorT<S>::from(t.shape(), std::vector<S>(t.value().begin(), t.value().end()));
  };
  out.w1 = copy(w1);
  out.b1 = copy(b1);
  out.w2 = copy(w2);
  out.b2 = copy(b2);
  return out;
}

template <class S>
TensorT<S> scorer_forward(TapeT<S>& tape, const PreferenceScorerT<S>& scorer,
                          const TensorT<S>& features) {
  auto h = tape.tanh(tape.add(tape.matmul(features, scorer.w1), scorer.b1));
  return tape.add(tape.matmul(h, scorer.w2), scorer.b2);
}

float score_sequence(const PreferenceScorer& scorer, const TokenSequence& seq) {
  const auto feats =
      feature_transform_g(scorer.vocab, seq, scorer.cfg.d_g, scorer.cfg.feature_seed);
  numerics::Tape tape(false);
  auto f = numerics::Tensor::from({1, scorer.cfg.d_g},
                                  std::vector<float>(feats.begin(), feats.end()));
  return scorer_forward(tape, scorer, f).item();
}

PreferenceScorer train_preference_scorer(const std::vector<PreferencePair>& pairs,
                                         const ScorerConfig& cfg, const Vocabulary& vocab,
                                         std::uint64_t seed) {
  if (pairs.empty())
    throw std::invalid_argument("train_preference_scorer: need at least one pair");
  Rng init_rng(seed, "scorer-init");
  auto scorer = PreferenceScorer::init(cfg, vocab, init_rng);

  // Features are fixed; compute them once.
  std::vector<std::vector<float>> fh(pairs.size()), fl(pairs.size());
  for (std::size_t i = 0; i < pairs.size(); ++i) {
    fh[i] = feature_transform_g(vocab, pairs[i].better, cfg.d_g, cfg.feature_seed);
    fl[i] = feature_transform_g(vocab, pairs[i].worse, cfg.d_g, cfg.feature_seed);
  }

  Rng rng(seed, "scorer-train");
  numerics::AdamW opt(scorer.store, {.lr = cfg.lr});
  for (int step = 0; step < cfg.train_steps; ++step) {
    numerics::Tape tape;
    numerics::Tensor h_batch, l_batch;
    for (int b = 0; b < cfg.batch; ++b) {
      const auto i = rng.below(static_cast<std::uint32_t>(pairs.size()));
      auto h = numerics::Tensor::from({1, cfg.d_g},
                                      std::vector<float>(fh[i].begin(), fh[i].end()));
      auto l = numerics::Tensor::from({1, cfg.d_g},
                                      std::vector<float>(fl[i].begin(), fl[i].end()));
      h_batch = b == 0 ? h : tape.concat_rows(h_batch, h);
      l_batch = b == 0 ? l : tape.concat_rows(l_batch, l);
    }
    auto sh = scorer_forward(tape, scorer, h_batch);
    auto sl = scorer_forward(tape, scorer, l_batch);
    auto loss = tape.mean(preference_loss(tape, sh, sl));
    tape.backward(loss);
    numerics::clip_grad_norm(scorer.store, 1.0);
    opt.step(scorer.store);
  }
  return scorer;
}

void save_scorer(const std::string& path, PreferenceScorer& scorer,
                 std::uint64_t config_hash) {
  io::Blob blob;
  blob.config_hash = config_hash;
  scorer.for_each_param([&](const std::string& name, numerics::Tensor& t) {
    std::vector<std::int64_t> dims(t.shape().begin(), t.shape().end());
    blob.sections.push_back(
        io::Section::f32(name, std::move(dims), t.value().data(), t.numel()));
  });
  io::save_blob(path, blob);
}

PreferenceScorer load_scorer(const std::string& path, const ScorerConfig& cfg,
                             const Vocabulary& vocab, std::uint64_t expected_hash) {
  const io::Blob blob = io::load_blob(path, expected_hash);
  Rng rng(0, "scorer-load");
  auto scorer = PreferenceScorer::init(cfg, vocab, rng);
  scorer.for_each_param([&](const std::string& name, numerics::Tensor& t) {
    auto vals = blob.find(name).as_f32();
    if (vals.size() != t.numel())
      throw std::runtime_error(path + ": bad section size for " + name);
    std::copy(vals.begin(), vals.end(), t.value().begin());
  });
  return scorer;
}

template struct TextMotionEncoderT<float>;
template struct TextMotionEncoderT<double>;
template struct PreferenceScorerT<float>;
template struct PreferenceScorerT<double>;

#define MORL_INSTANTIATE(S)                                                              \
  template TensorT<S> prompt_embedding<S>(TapeT<S>&, const TextMotionEncoderT<S>&, int); \
  template TensorT<S> sequence_embedding<S>(TapeT<S>&, const TextMotionEncoderT<S>&,     \
                                            const TokenSequence&);                       \
  template TensorT<S> soft_sequence_embedding<S>(TapeT<S>&,                              \
                                                 const TextMotionEncoderT<S>&,           \
                                                 const TensorT<S>&);                     \
  template TensorT<S> contrastive_loss<S>(TapeT<S>&, const TensorT<S>&,                  \
                                          const TensorT<S>&, int, S);                    \
  template TensorT<S> infonce_loss<S>(TapeT<S>&, const TensorT<S>&, const TensorT<S>&,   \
                                      const TensorT<S>&);                                \
  template TensorT<S> preference_loss<S>(TapeT<S>&, const TensorT<S>&,                   \
                                         const TensorT<S>&);                             \
  template TensorT<S> scorer_forward<S>(TapeT<S>&, const PreferenceScorerT<S>&,          \
                                        const TensorT<S>&);

MORL_INSTANTIATE(float)
MORL_INSTANTIATE(double)
#undef MORL_INSTANTIATE

}  // namespace morl::encoders
