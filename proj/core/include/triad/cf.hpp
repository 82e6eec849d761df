#pragma once

#include <cstdint>
#include <functional>
#include <string>
#include <vector>

#include "triad/corpus.hpp"

namespace triad::cf {

struct WarpConfig {
  std::size_t rank = 300;  // F_cf
  double learning_rate = 0.05;
  std::size_t max_epochs = 30;
  std::size_t max_negative_trials = 100;
  double margin = 1.0;
  std::uint64_t seed = 0;
  bool nonnegative = true;  // project factors onto >= 0 after every update
};

struct CfFactors {
  std::size_t n_tracks = 0;
  std::size_t n_playlists = 0;
  std::size_t rank = 0;
  std::vector<double> tracks;     // X_cf, row-major [n_tracks, rank]
  std::vector<double> playlists;  // playlist factors, row-major [n_playlists, rank]

  const double* track_row(std::size_t m) const { return tracks.data() + m * rank; }
  double* track_row(std::size_t m) { return tracks.data() + m * rank; }
  const double* playlist_row(std::size_t p) const { return playlists.data() + p * rank; }
  double* playlist_row(std::size_t p) { return playlists.data() + p * rank; }
  double score(std::size_t track, std::size_t playlist) const;
};

// L(r): the r-th harmonic number; 0 for r = 0.
double warp_loss_weight(std::size_t r);

// WSABIE rank estimator floor((n_items - 1) / n_trials_to_violation).
std::size_t estimate_rank(std::size_t n_items, std::size_t n_trials_to_violation);

struct WarpStepEvent {
  std::size_t epoch = 0;
  std::size_t step = 0;
  bool updated = false;        // a violating negative was found
  bool skipped_playlist = false;  // sampled playlist had no negatives
  std::size_t trials = 0;
  std::size_t positive = 0, negative = 0, playlist = 0;
};
using WarpObserver = std::function<void(const CfFactors&, const WarpStepEvent&)>;

struct WarpStats {
  std::size_t updates = 0;
  std::size_t skipped_no_negatives = 0;
  std::size_t exhausted = 0;
};

CfFactors warp_train(const PlaylistMatrix& matrix, const WarpConfig& cfg,
                     const WarpObserver& observer = nullptr, WarpStats* stats = nullptr);

// Row accessor for the CF encoder input.
std::vector<double> cf_vector(const CfFactors& factors, std::size_t track);

// Mean per-playlist AUC of positives over negatives by full ranking; ties
// count one half. Playlists lacking either class are skipped.
double mean_playlist_auc(const PlaylistMatrix& matrix, const CfFactors& factors);

void save_factors(const CfFactors& factors, const std::string& path);
CfFactors load_factors(const std::string& path);

}  // namespace triad::cf
