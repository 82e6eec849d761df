#include "triad/trainer.hpp"

#include <algorithm>
#include <cmath>
#include <cstring>
#include <stdexcept>

namespace triad::train {

Adam::Adam(std::vector<nn::Param*> params, double lr, double beta1, double beta2, double eps)
    : params_(std::move(params)), lr_(lr), beta1_(beta1), beta2_(beta2), eps_(eps) {
  m_.reserve(params_.size());
  v_.reserve(params_.size());
  for (auto* p : params_) {
    m_.emplace_back(p->value.size(), 0.0);
    v_.emplace_back(p->value.size(), 0.0);
  }
}

void Adam::step() {
  ++t_;
  const double bc1 = 1.0 - std::pow(beta1_, static_cast<double>(t_));
  const double bc2 = 1.0 - std::pow(beta2_, static_cast<double>(t_));
  for (std::size_t i = 0; i < params_.size(); ++i) {
    auto& p = *params_[i];
    auto& m = m_[i];
    auto& v = v_[i];
    for (std::size_t j = 0; j < m.size(); ++j) {
      const double g = p.grad[j];
      m[j] = beta1_ * m[j] + (1.0 - beta1_) * g;
      v[j] = beta2_ * v[j] + (1.0 - beta2_) * g * g;
      const double mhat = m[j] / bc1;
      const double vhat = v[j] / bc2;
      p.value[j] -= lr_ * mhat / (std::sqrt(vhat) + eps_);
    }
  }
}

void Adam::zero_grads() {
  for (auto* p : params_) p->zero_grad();
}

// ---------------------------------------------------------------------------
// Batch assembly

namespace {

struct BatchInputs {
  Tensor chunks;                   // [M_b, T_a, F_a]
  Tensor genre_seqs;               // [M_b, T_w, F_w]
  std::vector<std::uint8_t> mask;  // M_b * T_w
  Tensor cf_rows;                  // [M_b, F_cf]
};

// Assembles the three aligned modality tensors for a batch of track indices.
// `sampler` is non-null for random chunk sampling; otherwise center chunks.
BatchInputs assemble_batch(const Corpus& corpus, const std::vector<std::size_t>& indices,
                           const enc::Model& model, const cf::CfFactors* factors, Rng* sampler) {
  const auto& cfg = model.cfg;
  const std::size_t n = indices.size();
  BatchInputs batch;
  batch.chunks = Tensor({n, cfg.audio_frames, cfg.audio_bands});
  const bool want_genre = uses_genre_encoder(model.kind) || uses_genre_head(model.kind);
  const bool want_cf = needs_cf_factors(model.kind);
  if (uses_genre_encoder(model.kind)) {
    batch.genre_seqs = Tensor({n, cfg.genre_len, cfg.genre_dim});
    batch.mask.assign(n * cfg.genre_len, 0);
  }
  if (want_cf) batch.cf_rows = Tensor({n, cfg.cf_dim});
  (void)want_genre;

  for (std::size_t i = 0; i < n; ++i) {
    const TrackRecord& track = corpus.tracks[indices[i]];
    const MelChunk chunk = sampler ? sample_chunk(track, *sampler) : center_chunk(track);
    std::memcpy(batch.chunks.data() + i * cfg.audio_frames * cfg.audio_bands,
                chunk.data.data(), chunk.data.size() * sizeof(double));
    if (uses_genre_encoder(model.kind)) {
      const GenreSequence seq = lookup_genre_sequence(track, corpus.embedding_table);
      std::memcpy(batch.genre_seqs.data() + i * cfg.genre_len * cfg.genre_dim, seq.data.data(),
                  seq.data.size() * sizeof(double));
      std::memcpy(batch.mask.data() + i * cfg.genre_len, seq.mask.data(), cfg.genre_len);
    }
    if (want_cf) {
      if (factors == nullptr) throw std::invalid_argument("model kind requires CF factors");
      if (factors->n_tracks != corpus.tracks.size() || factors->rank != cfg.cf_dim) {
        throw std::invalid_argument("CF factors do not cover this corpus/config");
      }
      std::memcpy(batch.cf_rows.data() + i * cfg.cf_dim, factors->track_row(indices[i]),
                  cfg.cf_dim * sizeof(double));
    }
  }
  return batch;
}

std::vector<std::size_t> split_indices(const Corpus& corpus, const std::set<std::int64_t>& ids) {
  std::vector<std::size_t> out;
  out.reserve(ids.size());
  for (std::int64_t id : ids) out.push_back(corpus.index_of(id));
  std::sort(out.begin(), out.end());
  return out;
}

// Forms fixed evaluation batches: batch_size rows when possible, otherwise a
// single batch of everything (keeps the loss comparable across epochs).
std::vector<std::vector<std::size_t>> eval_batches(const std::vector<std::size_t>& indices,
                                                   std::size_t batch_size) {
  std::vector<std::vector<std::size_t>> out;
  if (indices.size() < batch_size) {
    if (!indices.empty()) out.push_back(indices);
    return out;
  }
  for (std::size_t start = 0; start + batch_size <= indices.size(); start += batch_size) {
    out.emplace_back(indices.begin() + start, indices.begin() + start + batch_size);
  }
  return out;
}

void check_finite(double v, const char* what, std::size_t epoch) {
  if (!std::isfinite(v)) {
    throw std::runtime_error(std::string("training diverged: non-finite ") + what + " at epoch " +
                             std::to_string(epoch));
  }
}

std::vector<Tensor> snapshot_state(enc::Model& model) {
  std::vector<Tensor> out;
  for (auto& [name, t] : model.state()) out.push_back(*t);
  return out;
}

void restore_state(enc::Model& model, const std::vector<Tensor>& snapshot) {
  auto state = model.state();
  for (std::size_t i = 0; i < state.size(); ++i) *state[i].second = snapshot[i];
}

}  // namespace

// ---------------------------------------------------------------------------
// Contrastive training

TrainResult train_alignment(enc::Model& model, const Corpus& corpus, const SplitAssignment& split,
                            const cf::CfFactors* factors, const TrainConfig& cfg) {
  if (is_baseline(model.kind)) throw std::invalid_argument("train_alignment: baseline model kind");
  if (split.train.empty()) throw std::invalid_argument("empty training split");
  if (cfg.temperature <= 0.0) throw std::invalid_argument("temperature must be positive");

  // Pairs without both encoders contribute nothing.
  loss::AlignmentWeights w = cfg.lambdas;
  const bool has_genre = model.genre != nullptr;
  const bool has_cf = model.cf != nullptr;
  if (!has_genre) w.a2g = w.g2p = 0.0;
  if (!has_cf) w.a2p = w.g2p = 0.0;
  if (w.a2g < 0 || w.a2p < 0 || w.g2p < 0) throw std::invalid_argument("negative loss weight");
  if (w.a2g == 0.0 && w.a2p == 0.0 && w.g2p == 0.0) {
    throw std::invalid_argument("no active alignment loss for this model kind");
  }

  std::vector<std::size_t> train_idx = split_indices(corpus, split.train);
  const std::vector<std::size_t> val_idx = split_indices(corpus, split.validation);
  if (train_idx.size() < cfg.batch_size) {
    throw std::invalid_argument("training split smaller than one batch (" +
                                std::to_string(train_idx.size()) + " < " +
                                std::to_string(cfg.batch_size) + ")");
  }

  Rng rng_data(Rng::split(cfg.seed, "train-data"));
  Rng rng_model(Rng::split(cfg.seed, "train-model"));
  Adam opt(model.params(), cfg.learning_rate, cfg.adam_beta1, cfg.adam_beta2, cfg.adam_eps);

  TrainResult result;
  std::vector<Tensor> best_state = snapshot_state(model);
  std::size_t since_best = 0;

  auto run_batch = [&](const std::vector<std::size_t>& indices, nn::Mode mode,
                       loss::LossReport& acc) {
    BatchInputs batch = assemble_batch(corpus, indices, model, factors,
                                       mode == nn::Mode::kTrain ? &rng_data : nullptr);
    Rng* mrng = mode == nn::Mode::kTrain ? &rng_model : nullptr;
    Tensor phi_a = model.audio->forward(batch.chunks, mode, mrng);
    Tensor phi_w, phi_cf;
    if (has_genre) phi_w = model.genre->forward(batch.genre_seqs, batch.mask, mode, mrng);
    if (has_cf) phi_cf = model.cf->forward(batch.cf_rows, mode, mrng);

    Tensor da(phi_a.shape());
    Tensor dw = has_genre ? Tensor(phi_w.shape()) : Tensor();
    Tensor dcf = has_cf ? Tensor(phi_cf.shape()) : Tensor();

    loss::LossReport r;
    const double tau = cfg.temperature;
    if (w.a2g > 0.0) {
      r.a2g = loss::ntxent_loss_backward(phi_a, phi_w, tau, w.a2g, da, dw) +
              loss::ntxent_loss_backward(phi_w, phi_a, tau, w.a2g, dw, da);
    } else if (has_genre) {
      r.a2g = loss::ntxent_loss(phi_a, phi_w, tau) + loss::ntxent_loss(phi_w, phi_a, tau);
    }
    if (w.a2p > 0.0) {
      r.a2p = loss::ntxent_loss_backward(phi_a, phi_cf, tau, w.a2p, da, dcf) +
              loss::ntxent_loss_backward(phi_cf, phi_a, tau, w.a2p, dcf, da);
    } else if (has_cf) {
      r.a2p = loss::ntxent_loss(phi_a, phi_cf, tau) + loss::ntxent_loss(phi_cf, phi_a, tau);
    }
    if (w.g2p > 0.0) {
      r.g2p = loss::ntxent_loss_backward(phi_w, phi_cf, tau, w.g2p, dw, dcf) +
              loss::ntxent_loss_backward(phi_cf, phi_w, tau, w.g2p, dcf, dw);
    } else if (has_genre && has_cf) {
      r.g2p = loss::ntxent_loss(phi_w, phi_cf, tau) + loss::ntxent_loss(phi_cf, phi_w, tau);
    }
    r.total = w.a2g * r.a2g + w.a2p * r.a2p + w.g2p * r.g2p;

    if (mode == nn::Mode::kTrain) {
      model.audio->backward(da);
      if (has_genre) model.genre->backward(dw);
      if (has_cf) model.cf->backward(dcf);
    }
    acc.a2g += r.a2g;
    acc.a2p += r.a2p;
    acc.g2p += r.g2p;
    acc.total += r.total;
  };

  const auto val_batch_list = eval_batches(val_idx, cfg.batch_size);

  for (std::size_t epoch = 0; epoch < cfg.max_epochs; ++epoch) {
    rng_data.shuffle(train_idx);
    loss::LossReport train_acc;
    std::size_t n_batches = 0;
    for (std::size_t start = 0; start + cfg.batch_size <= train_idx.size();
         start += cfg.batch_size) {
      std::vector<std::size_t> indices(train_idx.begin() + start,
                                       train_idx.begin() + start + cfg.batch_size);
      run_batch(indices, nn::Mode::kTrain, train_acc);
      check_finite(train_acc.total, "training loss", epoch);
      opt.step();
      opt.zero_grads();
      ++n_batches;
    }
    const double inv = 1.0 / static_cast<double>(n_batches);
    train_acc.a2g *= inv;
    train_acc.a2p *= inv;
    train_acc.g2p *= inv;
    train_acc.total *= inv;
    train_acc.epoch = epoch;
    train_acc.split = "train";
    result.history.push_back(train_acc);

    loss::LossReport val_acc;
    val_acc.epoch = epoch;
    val_acc.split = "validation";
    if (!val_batch_list.empty()) {
      for (const auto& vb : val_batch_list) run_batch(vb, nn::Mode::kEval, val_acc);
      const double vinv = 1.0 / static_cast<double>(val_batch_list.size());
      val_acc.a2g *= vinv;
      val_acc.a2p *= vinv;
      val_acc.g2p *= vinv;
      val_acc.total *= vinv;
      check_finite(val_acc.total, "validation loss", epoch);
    } else {
      val_acc.total = train_acc.total;  // no validation data: fall back to train loss
      val_acc.a2g = train_acc.a2g;
      val_acc.a2p = train_acc.a2p;
      val_acc.g2p = train_acc.g2p;
    }
    result.history.push_back(val_acc);
    result.epochs_run = epoch + 1;

    if (val_acc.total < result.best_validation) {
      result.best_validation = val_acc.total;
      result.best_epoch = epoch;
      best_state = snapshot_state(model);
      since_best = 0;
    } else {
      ++since_best;
      if (since_best > cfg.patience) break;
    }
  }

  restore_state(model, best_state);
  return result;
}

// ---------------------------------------------------------------------------
// Baseline losses

double bce_with_logits(const Tensor& logits, const Tensor& targets) {
  if (!logits.same_shape(targets)) throw std::invalid_argument("bce: shape mismatch");
  double sum = 0.0;
  for (std::size_t i = 0; i < logits.size(); ++i) {
    const double z = std::clamp(logits[i], -30.0, 30.0);
    const double t = targets[i];
    sum += std::max(z, 0.0) - z * t + std::log1p(std::exp(-std::abs(z)));
  }
  return sum / static_cast<double>(logits.size());
}

double bce_with_logits_backward(const Tensor& logits, const Tensor& targets, Tensor& dlogits) {
  const double loss = bce_with_logits(logits, targets);
  const double inv = 1.0 / static_cast<double>(logits.size());
  for (std::size_t i = 0; i < logits.size(); ++i) {
    const double z = std::clamp(logits[i], -30.0, 30.0);
    const double sig = 1.0 / (1.0 + std::exp(-z));
    dlogits[i] += (sig - targets[i]) * inv;
  }
  return loss;
}

double mse(const Tensor& pred, const Tensor& target) {
  if (!pred.same_shape(target)) throw std::invalid_argument("mse: shape mismatch");
  double sum = 0.0;
  for (std::size_t i = 0; i < pred.size(); ++i) {
    const double d = pred[i] - target[i];
    sum += d * d;
  }
  return sum / static_cast<double>(pred.size());
}

double mse_backward(const Tensor& pred, const Tensor& target, Tensor& dpred) {
  const double loss = mse(pred, target);
  const double inv = 2.0 / static_cast<double>(pred.size());
  for (std::size_t i = 0; i < pred.size(); ++i) dpred[i] += inv * (pred[i] - target[i]);
  return loss;
}

// ---------------------------------------------------------------------------
// Baseline training

BaselineResult train_baseline(enc::Model& model, const Corpus& corpus,
                              const SplitAssignment& split, const cf::CfFactors* factors,
                              const TrainConfig& cfg) {
  if (!is_baseline(model.kind)) throw std::invalid_argument("train_baseline: contrastive model kind");
  if (split.train.empty()) throw std::invalid_argument("empty training split");

  const bool has_genre_head = model.head_genre != nullptr;
  const bool has_cf_head = model.head_cf != nullptr;

  std::vector<std::size_t> train_idx = split_indices(corpus, split.train);
  const std::vector<std::size_t> val_idx = split_indices(corpus, split.validation);
  if (train_idx.size() < cfg.batch_size) {
    throw std::invalid_argument("training split smaller than one batch");
  }

  Rng rng_data(Rng::split(cfg.seed, "train-data"));
  Rng rng_model(Rng::split(cfg.seed, "train-model"));
  Adam opt(model.params(), cfg.learning_rate, cfg.adam_beta1, cfg.adam_beta2, cfg.adam_eps);

  const std::size_t vocab = static_cast<std::size_t>(corpus.genre_vocab_size);

  auto genre_targets = [&](const std::vector<std::size_t>& indices) {
    Tensor t({indices.size(), vocab});
    for (std::size_t i = 0; i < indices.size(); ++i) {
      for (int g : corpus.tracks[indices[i]].genre_ids) {
        t.at2(i, static_cast<std::size_t>(g - 1)) = 1.0;
      }
    }
    return t;
  };

  BaselineResult result;
  std::vector<Tensor> best_state = snapshot_state(model);
  std::size_t since_best = 0;

  auto run_batch = [&](const std::vector<std::size_t>& indices, nn::Mode mode,
                       BaselineReport& acc) {
    BatchInputs batch = assemble_batch(corpus, indices, model, factors,
                                       mode == nn::Mode::kTrain ? &rng_data : nullptr);
    Rng* mrng = mode == nn::Mode::kTrain ? &rng_model : nullptr;
    Tensor phi = model.audio->forward(batch.chunks, mode, mrng);
    Tensor dphi(phi.shape());
    BaselineReport r;
    if (has_genre_head) {
      Tensor logits = model.head_genre->forward(phi, mode);
      const Tensor targets = genre_targets(indices);
      if (mode == nn::Mode::kTrain) {
        Tensor dlogits(logits.shape());
        r.genre_bce = bce_with_logits_backward(logits, targets, dlogits);
        Tensor d = model.head_genre->backward(dlogits);
        for (std::size_t i = 0; i < dphi.size(); ++i) dphi[i] += d[i];
      } else {
        r.genre_bce = bce_with_logits(logits, targets);
      }
    }
    if (has_cf_head) {
      Tensor pred = model.head_cf->forward(phi, mode);
      if (mode == nn::Mode::kTrain) {
        Tensor dpred(pred.shape());
        r.cf_mse = mse_backward(pred, batch.cf_rows, dpred);
        Tensor d = model.head_cf->backward(dpred);
        for (std::size_t i = 0; i < dphi.size(); ++i) dphi[i] += d[i];
      } else {
        r.cf_mse = mse(pred, batch.cf_rows);
      }
    }
    r.total = r.genre_bce + r.cf_mse;
    if (mode == nn::Mode::kTrain) model.audio->backward(dphi);
    acc.genre_bce += r.genre_bce;
    acc.cf_mse += r.cf_mse;
    acc.total += r.total;
  };

  const auto val_batch_list = eval_batches(val_idx, cfg.batch_size);

  for (std::size_t epoch = 0; epoch < cfg.max_epochs; ++epoch) {
    rng_data.shuffle(train_idx);
    BaselineReport train_acc;
    std::size_t n_batches = 0;
    for (std::size_t start = 0; start + cfg.batch_size <= train_idx.size();
         start += cfg.batch_size) {
      std::vector<std::size_t> indices(train_idx.begin() + start,
                                       train_idx.begin() + start + cfg.batch_size);
      run_batch(indices, nn::Mode::kTrain, train_acc);
      check_finite(train_acc.total, "training loss", epoch);
      opt.step();
      opt.zero_grads();
      ++n_batches;
    }
    const double inv = 1.0 / static_cast<double>(n_batches);
    train_acc.genre_bce *= inv;
    train_acc.cf_mse *= inv;
    train_acc.total *= inv;
    train_acc.epoch = epoch;
    train_acc.split = "train";
    result.history.push_back(train_acc);

    BaselineReport val_acc;
    val_acc.epoch = epoch;
    val_acc.split = "validation";
    if (!val_batch_list.empty()) {
      for (const auto& vb : val_batch_list) run_batch(vb, nn::Mode::kEval, val_acc);
      const double vinv = 1.0 / static_cast<double>(val_batch_list.size());
      val_acc.genre_bce *= vinv;
      val_acc.cf_mse *= vinv;
      val_acc.total *= vinv;
      check_finite(val_acc.total, "validation loss", epoch);
    } else {
      val_acc = train_acc;
      val_acc.split = "validation";
    }
    result.history.push_back(val_acc);
    result.epochs_run = epoch + 1;

    if (val_acc.total < result.best_validation) {
      result.best_validation = val_acc.total;
      result.best_epoch = epoch;
      best_state = snapshot_state(model);
      since_best = 0;
    } else {
      ++since_best;
      if (since_best > cfg.patience) break;
    }
  }

  restore_state(model, best_state);
  return result;
}

}  // namespace triad::train
