#include "tasks/tasks.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <set>
#include <sstream>
#include <stdexcept>

#include "numerics/optim.hpp"
#include "numerics/tape.hpp"

namespace morl::tasks {
namespace {

template <class S>
numerics::TensorT<S> ids_tensor(const std::vector<int>& ids) {
  auto t = numerics::TensorT<S>::zeros({static_cast<int>(ids.size())});
  for (std::size_t i = 0; i < ids.size(); ++i) t.value()[i] = static_cast<S>(ids[i]);
  return t;
}

}  // namespace

SyntheticTask SyntheticTask::make(const TaskConfig& cfg) {
  if (cfg.len_min < 2 || cfg.len_max < cfg.len_min)
    throw std::invalid_argument("task: bad canonical length range");
  SyntheticTask task;
  task.cfg_ = cfg;
  const Vocabulary vocab{cfg.vocab};

  Rng canon_rng(cfg.seed, "task-canonical");
  for (int p = 0; p < cfg.n_prompts; ++p) {
    const int len = cfg.len_min +
                    static_cast<int>(canon_rng.below(
                        static_cast<std::uint32_t>(cfg.len_max - cfg.len_min + 1)));
    std::vector<int> toks(len);
    toks[0] = static_cast<int>(canon_rng.below(static_cast<std::uint32_t>(cfg.vocab)));
    for (int i = 1; i < len; ++i) {
      // Bounded walk: small steps usually, the occasional larger jump.
      int step;
      if (canon_rng.uniform() < 0.15) {
        step = static_cast<int>(canon_rng.below(13)) - 6;
      } else {
        step = static_cast<int>(canon_rng.below(5)) - 2;
      }
      toks[i] = std::clamp(toks[i - 1] + step, 0, cfg.vocab - 1);
    }
    task.canonical_.push_back(make_sequence(std::move(toks), vocab));
  }

  // Hidden preference weights, seeded apart from anything that gets trained.
  Rng pref_rng(cfg.seed, "task-hidden-preference");
  task.pref_direction_.resize(vocab.total());
  double norm = 0.0;
  for (auto& w : task.pref_direction_) {
    w = pref_rng.normal();
    norm += w * w;
  }
  norm = std::sqrt(norm);
  for (auto& w : task.pref_direction_) w /= norm;
  task.smooth_weight_ = 2.0;
  task.proj_weight_ = 0.5;
  return task;
}

double SyntheticTask::hidden_preference(const TokenSequence& seq) const {
  const Vocabulary vocab = vocabulary();
  const int M = seq.motion_length();
  // Smoothness: negative mean squared first difference, scaled to O(1).
  double smooth = 0.0;
  if (M >= 2) {
    for (int i = 0; i + 1 < M; ++i) {
      const double d = static_cast<double>(seq.tokens[i + 1] - seq.tokens[i]) /
                       static_cast<double>(vocab.codebook);
      smooth += d * d;
    }
    smooth /= M - 1;
  }
  // Histogram projection onto a fixed random direction.
  double proj = 0.0;
  if (M > 0) {
    for (int i = 0; i < M; ++i) proj += pref_direction_[seq.tokens[i]];
    proj /= M;
  }
  return -smooth_weight_ * smooth * 16.0 + proj_weight_ * proj;
}

TokenSequence SyntheticTask::noisy_canonical(int prompt_id, float noise, Rng& rng) const {
  const auto& canon = canonical_.at(prompt_id);
  std::vector<int> toks(canon.tokens.begin(), canon.tokens.end() - 1);
  for (auto& t : toks)
    if (rng.uniform() < noise)
      t = static_cast<int>(rng.below(static_cast<std::uint32_t>(cfg_.vocab)));
  return make_sequence(std::move(toks), vocabulary());
}

Dataset generate_dataset(const SyntheticTask& task, const DatasetSizes& sizes, Rng& rng) {
  Dataset ds;
  const int P = task.n_prompts();
  const float noise = task.config().positive_noise;

  // Positives: noisy copies of the prompt's own canonical sequence.
  std::vector<std::set<std::vector<int>>> positive_keys(P);
  for (int i = 0; i < sizes.n_positive; ++i) {
    const int p = i % P;
    auto seq = task.noisy_canonical(p, noise, rng);
    positive_keys[p].insert(seq.tokens);
    ds.pairs.push_back({p, std::move(seq), 1});
  }
  // Negatives: cross-prompt pairings; never a sequence already labeled
  // positive for the same prompt.
  for (int i = 0; i < sizes.n_negative; ++i) {
    const int p = i % P;
    while (true) {
      int other = static_cast<int>(rng.below(static_cast<std::uint32_t>(P)));
      if (other == p) continue;
      auto seq = task.noisy_canonical(other, noise, rng);
      if (positive_keys[p].count(seq.tokens)) continue;
      ds.pairs.push_back({p, std::move(seq), 0});
      break;
    }
  }

  // Preference pairs: two variants of the same prompt at assorted noise
  // levels, ordered by the hidden preference function.
  const float levels[] = {0.0f, 0.1f, 0.2f, 0.35f, 0.5f};
  for (int i = 0; i < sizes.n_preference; ++i) {
    const int p = static_cast<int>(rng.below(static_cast<std::uint32_t>(P)));
    TokenSequence a, b;
    double sa = 0, sb = 0;
    do {
      a = task.noisy_canonical(p, levels[rng.below(5)], rng);
      b = task.noisy_canonical(p, levels[rng.below(5)], rng);
      sa = task.hidden_preference(a);
      sb = task.hidden_preference(b);
    } while (a == b || sa == sb);
    if (sa > sb)
      ds.preferences.push_back({p, std::move(a), std::move(b)});
    else
      ds.preferences.push_back({p, std::move(b), std::move(a)});
  }

  for (int i = 0; i < sizes.n_corpus; ++i) {
    const int p = i % P;
    ds.corpus.push_back({p, task.noisy_canonical(p, noise, rng), 1});
  }
  return ds;
}

void save_dataset(const std::string& path, const Dataset& ds) {
  std::ofstream os(path, std::ios::trunc);
  if (!os) throw std::runtime_error("cannot write dataset file " + path);
  auto line = [&](char kind, int prompt, int label, const TokenSequence& seq) {
    os << kind << ' ' << prompt << ' ' << label;
    for (int t : seq.tokens) os << ' ' << t;
    os << '\n';
  };
  for (const auto& ex : ds.pairs) line('P', ex.prompt_id, ex.label, ex.seq);
  for (const auto& pr : ds.preferences) {
    line('H', pr.prompt_id, 1, pr.better);
    line('L', pr.prompt_id, 0, pr.worse);
  }
  for (const auto& ex : ds.corpus) line('C', ex.prompt_id, ex.label, ex.seq);
  if (!os) throw std::runtime_error("write failed for dataset file " + path);
}

Dataset load_dataset(const std::string& path) {
  std::ifstream is(path);
  if (!is) throw std::runtime_error("cannot open dataset file " + path);
  Dataset ds;
  std::string row;
  PreferencePair pending;
  bool have_better = false;
  int lineno = 0;
  while (std::getline(is, row)) {
    ++lineno;
    if (row.empty() || row[0] == '#') continue;
    std::istringstream ss(row);
    char kind;
    int prompt, label;
    if (!(ss >> kind >> prompt >> label))
      throw std::runtime_error(path + ":" + std::to_string(lineno) + ": malformed line");
    std::vector<int> toks;
    int t;
    while (ss >> t) toks.push_back(t);
    TokenSequence seq{std::move(toks)};
    switch (kind) {
      case 'P': ds.pairs.push_back({prompt, std::move(seq), label}); break;
      case 'H':
        pending = PreferencePair{prompt, std::move(seq), {}};
        have_better = true;
        break;
      case 'L':
        if (!have_better)
          throw std::runtime_error(path + ":" + std::to_string(lineno) +
                                   ": L line without preceding H");
        pending.worse = std::move(seq);
        ds.preferences.push_back(std::move(pending));
        have_better = false;
        break;
      case 'C': ds.corpus.push_back({prompt, std::move(seq), label}); break;
      default:
        throw std::runtime_error(path + ":" + std::to_string(lineno) +
                                 ": unknown record kind");
    }
  }
  return ds;
}

PretrainReport pretrain_actor(policy::GptParams& actor, const Dataset& dataset,
                              const encoders::EncoderPair& enc, const PretrainConfig& cfg,
                              std::uint64_t seed) {
  if (dataset.corpus.empty())
    throw std::invalid_argument("pretrain_actor: empty corpus");
  const auto vocab = actor.cfg.vocabulary();

  // Deterministic holdout split.
  Rng split_rng(seed, "pretrain-split");
  std::vector<int> order(dataset.corpus.size());
  for (std::size_t i = 0; i < order.size(); ++i) order[i] = static_cast<int>(i);
  for (std::size_t i = order.size(); i > 1; --i)
    std::swap(order[i - 1], order[split_rng.below(static_cast<std::uint32_t>(i))]);
  const std::size_t n_holdout = std::max<std::size_t>(
      1, static_cast<std::size_t>(cfg.holdout_frac * order.size()));
  std::vector<int> holdout(order.begin(), order.begin() + n_holdout);
  std::vector<int> train(order.begin() + n_holdout, order.end());
  if (train.empty()) train = holdout;

  const auto enc_cl = enc.contrastive_trained ? enc.contrastive.frozen_clone()
                                              : encoders::TextMotionEncoder{};
  const auto enc_nce = enc.infonce_trained ? enc.infonce.frozen_clone()
                                           : encoders::TextMotionEncoder{};

  Rng rng(seed, "pretrain");
  numerics::AdamW opt(actor.store, {.lr = cfg.lr});
  PretrainReport report;
  for (int step = 0; step < cfg.steps; ++step) {
    numerics::Tape tape;
    numerics::Tensor loss = numerics::Tensor::scalar(0.f);
    for (int b = 0; b < cfg.batch; ++b) {
      const auto& ex =
          dataset.corpus[train[rng.below(static_cast<std::uint32_t>(train.size()))]];
      policy::validate_sequence(vocab, ex.seq, actor.cfg.max_T);
      policy::PromptSpec spec{.prompt_id = ex.prompt_id};
      auto emb = policy::embed_prompt(tape, actor, spec);
      std::vector<int> prefix(ex.seq.tokens.begin(), ex.seq.tokens.end() - 1);
      auto logits = policy::actor_logits(tape, actor, emb, prefix);
      auto ce = tape.cross_entropy_from_logits(logits, ids_tensor<float>(ex.seq.tokens));
      loss = tape.add(loss, ce);
      if (cfg.w_align > 0.f) {
        auto probs = tape.softmax_rows(logits);
        numerics::Tensor align = numerics::Tensor::scalar(0.f);
        if (enc.contrastive_trained) {
          auto f_t = encoders::prompt_embedding(tape, enc_cl, ex.prompt_id);
          auto f_m = encoders::soft_sequence_embedding(tape, enc_cl, probs);
          align = tape.add(align, tape.squared_error(f_t, f_m));
        }
        if (enc.infonce_trained) {
          auto f_t = encoders::prompt_embedding(tape, enc_nce, ex.prompt_id);
          auto f_m = encoders::soft_sequence_embedding(tape, enc_nce, probs);
          align = tape.add(align, tape.squared_error(f_t, f_m));
        }
        loss = tape.add(loss, tape.scale(align, cfg.w_align));
      }
    }
    loss = tape.scale(loss, 1.f / static_cast<float>(cfg.batch));
    report.losses.push_back(loss.item());
    tape.backward(loss);
    numerics::clip_grad_norm(actor.store, 1.0);
    opt.step(actor.store);
  }

  // Teacher-forced next-token accuracy on the holdout split.
  std::size_t correct = 0, total_preds = 0;
  for (int idx : holdout) {
    const auto& ex = dataset.corpus[idx];
    numerics::Tape tape(false);
    auto emb = policy::embed_prompt(tape, actor, policy::PromptSpec{.prompt_id = ex.prompt_id});
    std::vector<int> prefix(ex.seq.tokens.begin(), ex.seq.tokens.end() - 1);
    auto logits = policy::actor_logits(tape, actor, emb, prefix);
    const int n = logits.cols();
    for (int row = 0; row < logits.rows(); ++row) {
      int argmax = 0;
      for (int j = 1; j < n; ++j)
        if (logits.value()[row * n + j] > logits.value()[row * n + argmax]) argmax = j;
      correct += argmax == ex.seq.tokens[row];
      ++total_preds;
    }
  }
  report.holdout_accuracy =
      total_preds ? static_cast<float>(correct) / static_cast<float>(total_preds) : 0.f;
  return report;
}

OracleScores oracle_eval(const policy::GptParams& actor, const SyntheticTask& task,
                         int n_samples, Rng& rng) {
  OracleScores out;
  if (n_samples <= 0) return out;
  const int P = task.n_prompts();
  double exact = 0, pref = 0, tok_match = 0;
  for (int i = 0; i < n_samples; ++i) {
    const int p = i % P;
    auto res = policy::sample_sequence(actor, policy::PromptSpec{.prompt_id = p}, 1.0f, rng);
    const auto& canon = task.canonical()[p];
    exact += res.seq == canon;
    pref += task.hidden_preference(res.seq);
    const int overlap = std::min(res.seq.length(), canon.length());
    int same = 0;
    for (int t = 0; t < overlap; ++t) same += res.seq.tokens[t] == canon.tokens[t];
    tok_match += static_cast<double>(same) / std::max(res.seq.length(), canon.length());
  }
  out.exact_match_rate = exact / n_samples;
  out.mean_preference = pref / n_samples;
  out.token_match_rate = tok_match / n_samples;
  return out;
}

}  // namespace morl::tasks
