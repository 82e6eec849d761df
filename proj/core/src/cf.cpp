#include "triad/cf.hpp"

#include <algorithm>
#include <cmath>
#include <cstring>
#include <fstream>
#include <stdexcept>

namespace triad::cf {

double CfFactors::score(std::size_t track, std::size_t playlist) const {
  const double* x = track_row(track);
  const double* q = playlist_row(playlist);
  double s = 0.0;
  for (std::size_t f = 0; f < rank; ++f) s += x[f] * q[f];
  return s;
}

double warp_loss_weight(std::size_t r) {
  double sum = 0.0;
  for (std::size_t j = 1; j <= r; ++j) sum += 1.0 / static_cast<double>(j);
  return sum;
}

std::size_t estimate_rank(std::size_t n_items, std::size_t n_trials_to_violation) {
  if (n_items < 2) throw std::invalid_argument("estimate_rank: need at least 2 items");
  if (n_trials_to_violation < 1) throw std::invalid_argument("estimate_rank: trials must be >= 1");
  return (n_items - 1) / n_trials_to_violation;
}

CfFactors warp_train(const PlaylistMatrix& matrix, const WarpConfig& cfg,
                     const WarpObserver& observer, WarpStats* stats) {
  if (matrix.nnz() == 0) throw std::invalid_argument("warp_train: all-zero membership matrix");
  if (cfg.learning_rate < 0.0) throw std::invalid_argument("warp_train: negative learning rate");
  if (cfg.max_negative_trials < 1) throw std::invalid_argument("warp_train: max_negative_trials must be >= 1");

  const std::size_t m = matrix.rows();
  const std::size_t n_pl = matrix.cols();
  const std::size_t rank = cfg.rank;

  CfFactors factors;
  factors.n_tracks = m;
  factors.n_playlists = n_pl;
  factors.rank = rank;
  factors.tracks.resize(m * rank);
  factors.playlists.resize(n_pl * rank);

  Rng rng(cfg.seed);
  const double init_bound = 1.0 / std::sqrt(static_cast<double>(rank));
  for (double& v : factors.tracks) v = rng.uniform() * init_bound;
  for (double& v : factors.playlists) v = rng.uniform() * init_bound;

  const std::size_t steps_per_epoch = matrix.nnz();
  std::vector<double> dq(rank);

  for (std::size_t epoch = 0; epoch < cfg.max_epochs; ++epoch) {
    for (std::size_t step = 0; step < steps_per_epoch; ++step) {
      WarpStepEvent ev;
      ev.epoch = epoch;
      ev.step = step;

      const auto [p, pos] = matrix.entry(rng.uniform_int(matrix.nnz()));
      ev.playlist = p;
      ev.positive = pos;
      if (matrix.column(p).size() >= m) {
        ev.skipped_playlist = true;
        if (stats) ++stats->skipped_no_negatives;
        if (observer) observer(factors, ev);
        continue;
      }

      const double pos_score = factors.score(pos, p);
      std::size_t trials = 0;
      std::size_t neg = 0;
      bool found = false;
      // Rejection-sample candidate tracks; only valid negatives count as trials.
      std::size_t guard = 0;
      const std::size_t guard_limit = cfg.max_negative_trials * 1000 + 1000;
      while (trials < cfg.max_negative_trials && guard < guard_limit) {
        ++guard;
        const std::size_t cand = static_cast<std::size_t>(rng.uniform_int(m));
        if (matrix.contains(cand, p)) continue;
        ++trials;
        if (factors.score(cand, p) > pos_score - cfg.margin) {
          neg = cand;
          found = true;
          break;
        }
      }
      ev.trials = trials;

      if (found) {
        ev.updated = true;
        const double weight =
            cfg.learning_rate * warp_loss_weight(estimate_rank(m, trials));
        double* xi = factors.track_row(pos);
        double* xj = factors.track_row(neg);
        double* qp = factors.playlist_row(p);
        for (std::size_t f = 0; f < rank; ++f) dq[f] = weight * (xi[f] - xj[f]);
        for (std::size_t f = 0; f < rank; ++f) {
          const double g = weight * qp[f];
          xi[f] += g;
          xj[f] -= g;
          qp[f] += dq[f];
        }
        if (cfg.nonnegative) {
          for (std::size_t f = 0; f < rank; ++f) {
            if (xi[f] < 0.0) xi[f] = 0.0;
            if (xj[f] < 0.0) xj[f] = 0.0;
            if (qp[f] < 0.0) qp[f] = 0.0;
          }
        }
        if (stats) ++stats->updates;
      } else if (!ev.skipped_playlist && stats) {
        ++stats->exhausted;
      }
      if (observer) observer(factors, ev);
    }
  }
  return factors;
}

std::vector<double> cf_vector(const CfFactors& factors, std::size_t track) {
  if (track >= factors.n_tracks) {
    throw std::out_of_range("cf_vector: track index " + std::to_string(track) + " out of range");
  }
  return std::vector<double>(factors.track_row(track), factors.track_row(track) + factors.rank);
}

double mean_playlist_auc(const PlaylistMatrix& matrix, const CfFactors& factors) {
  const std::size_t m = matrix.rows();
  double total = 0.0;
  std::size_t counted = 0;
  for (std::size_t p = 0; p < matrix.cols(); ++p) {
    const auto& col = matrix.column(p);
    if (col.empty() || col.size() >= m) continue;
    double correct = 0.0;
    std::size_t pairs = 0;
    for (std::size_t neg = 0; neg < m; ++neg) {
      if (matrix.contains(neg, p)) continue;
      const double sn = factors.score(neg, p);
      for (std::uint32_t pos : col) {
        const double sp = factors.score(pos, p);
        if (sp > sn) {
          correct += 1.0;
        } else if (sp == sn) {
          correct += 0.5;
        }
        ++pairs;
      }
    }
    total += correct / static_cast<double>(pairs);
    ++counted;
  }
  if (counted == 0) throw std::runtime_error("mean_playlist_auc: no playlist has both classes");
  return total / static_cast<double>(counted);
}

// ---------------------------------------------------------------------------
// Factors checkpoint: magic, version, dims, then X_cf and Q_cf as row-major
// little-endian f32 (Q_cf stored in its F_cf x M_pl orientation).

namespace {
constexpr char kMagic[4] = {'T', 'C', 'F', '1'};

void write_u64(std::ofstream& out, std::uint64_t v) {
  unsigned char buf[8];
  for (int i = 0; i < 8; ++i) buf[i] = static_cast<unsigned char>((v >> (8 * i)) & 0xff);
  out.write(reinterpret_cast<const char*>(buf), 8);
}

std::uint64_t read_u64(std::ifstream& in) {
  unsigned char buf[8];
  in.read(reinterpret_cast<char*>(buf), 8);
  std::uint64_t v = 0;
  for (int i = 0; i < 8; ++i) v |= static_cast<std::uint64_t>(buf[i]) << (8 * i);
  return v;
}

void write_f32_block(std::ofstream& out, const std::vector<double>& values) {
  std::vector<float> f(values.size());
  for (std::size_t i = 0; i < values.size(); ++i) f[i] = static_cast<float>(values[i]);
  out.write(reinterpret_cast<const char*>(f.data()),
            static_cast<std::streamsize>(f.size() * sizeof(float)));
}

std::vector<double> read_f32_block(std::ifstream& in, std::size_t count) {
  std::vector<float> f(count);
  in.read(reinterpret_cast<char*>(f.data()), static_cast<std::streamsize>(count * sizeof(float)));
  if (!in) throw std::runtime_error("factors file: truncated data block");
  std::vector<double> out(count);
  for (std::size_t i = 0; i < count; ++i) out[i] = static_cast<double>(f[i]);
  return out;
}
}  // namespace

void save_factors(const CfFactors& factors, const std::string& path) {
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw std::runtime_error("cannot write factors file: " + path);
  out.write(kMagic, 4);
  write_u64(out, 1);  // version
  write_u64(out, factors.n_tracks);
  write_u64(out, factors.n_playlists);
  write_u64(out, factors.rank);
  write_f32_block(out, factors.tracks);
  // Transpose playlist rows into the F_cf x M_pl layout.
  std::vector<double> q(factors.rank * factors.n_playlists);
  for (std::size_t p = 0; p < factors.n_playlists; ++p) {
    for (std::size_t f = 0; f < factors.rank; ++f) {
      q[f * factors.n_playlists + p] = factors.playlists[p * factors.rank + f];
    }
  }
  write_f32_block(out, q);
}

CfFactors load_factors(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw std::runtime_error("cannot open factors file: " + path);
  char magic[4];
  in.read(magic, 4);
  if (!in || std::memcmp(magic, kMagic, 4) != 0) {
    throw std::runtime_error("factors file: bad magic: " + path);
  }
  const std::uint64_t version = read_u64(in);
  if (version != 1) throw std::runtime_error("factors file: unsupported version");
  CfFactors factors;
  factors.n_tracks = read_u64(in);
  factors.n_playlists = read_u64(in);
  factors.rank = read_u64(in);
  factors.tracks = read_f32_block(in, factors.n_tracks * factors.rank);
  const auto q = read_f32_block(in, factors.rank * factors.n_playlists);
  factors.playlists.resize(factors.n_playlists * factors.rank);
  for (std::size_t p = 0; p < factors.n_playlists; ++p) {
    for (std::size_t f = 0; f < factors.rank; ++f) {
      factors.playlists[p * factors.rank + f] = q[f * factors.n_playlists + p];
    }
  }
  return factors;
}

}  // namespace triad::cf
