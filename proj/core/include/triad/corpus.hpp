#pragma once

#include <array>
#include <cstdint>
#include <map>
#include <set>
#include <string>
#include <unordered_map>
#include <vector>

#include "triad/rng.hpp"
#include "triad/tensor.hpp"

namespace triad {

inline constexpr std::size_t kMelBands = 48;         // F_a
inline constexpr std::size_t kChunkFrames = 256;     // T_a
inline constexpr std::size_t kMaxGenresPerTrack = 10;  // T_w
inline constexpr std::size_t kGenreEmbedDim = 200;   // F_w
inline constexpr int kGenreVocabSize = 219;

struct TrackRecord {
  std::int64_t track_id = 0;
  Tensor mel;  // [frame_count, 48], finite, nonnegative
  std::vector<int> genre_ids;  // unique, 1..=10 entries
  std::size_t frame_count = 0;
};

// Immutable after load; stands in for the pre-optimized word-embedding model.
class GenreEmbeddingTable {
 public:
  GenreEmbeddingTable() = default;
  explicit GenreEmbeddingTable(std::map<int, std::vector<double>> vectors);

  bool contains(int genre_id) const { return vectors_.count(genre_id) > 0; }
  const std::vector<double>& vector(int genre_id) const;
  const std::map<int, std::vector<double>>& vectors() const { return vectors_; }
  std::size_t size() const { return vectors_.size(); }

 private:
  std::map<int, std::vector<double>> vectors_;
};

struct Playlist {
  std::int64_t playlist_id = 0;
  std::vector<std::int64_t> track_ids;  // no duplicates, all resolvable
};

struct Corpus {
  std::vector<TrackRecord> tracks;
  std::vector<Playlist> playlists;
  int genre_vocab_size = kGenreVocabSize;
  GenreEmbeddingTable embedding_table;
  std::unordered_map<std::int64_t, std::size_t> id_to_index;

  std::size_t index_of(std::int64_t track_id) const;
  void rebuild_index();
};

struct SplitAssignment {
  std::set<std::int64_t> train, validation, test;

  bool in_train(std::int64_t id) const { return train.count(id) > 0; }
  bool in_validation(std::int64_t id) const { return validation.count(id) > 0; }
  bool in_test(std::int64_t id) const { return test.count(id) > 0; }
};

struct MelChunk {
  Tensor data;  // [256, 48]
  std::int64_t source_track = 0;
  std::size_t start_frame = 0;
};

// Sparse binary track x playlist membership matrix. Rows are corpus track
// indices, columns are playlist indices.
class PlaylistMatrix {
 public:
  PlaylistMatrix() = default;
  PlaylistMatrix(std::size_t n_tracks, std::vector<std::vector<std::uint32_t>> columns);

  std::size_t rows() const { return n_tracks_; }
  std::size_t cols() const { return columns_.size(); }
  std::size_t nnz() const { return nnz_; }
  bool contains(std::size_t track, std::size_t playlist) const;
  const std::vector<std::uint32_t>& column(std::size_t playlist) const { return columns_[playlist]; }
  // Maps a flat index in [0, nnz) to its (playlist, track) entry.
  std::pair<std::size_t, std::size_t> entry(std::size_t flat) const;

 private:
  std::size_t n_tracks_ = 0;
  std::size_t nnz_ = 0;
  std::vector<std::vector<std::uint32_t>> columns_;  // sorted track indices per playlist
  std::vector<std::size_t> col_offsets_;             // prefix sums for entry()
};

struct GenreSequence {
  Tensor data;                      // [10, 200], zero-padded
  std::vector<std::uint8_t> mask;   // 1 for real rows
};

struct SynthConfig {
  std::size_t n_tracks = 64;
  std::size_t n_clusters = 4;
  std::size_t n_playlists = 16;
  double noise_level = 0.0;
  std::uint64_t seed = 0;
  // Generator knobs beyond the canonical five parameters.
  double extra_label_prob = 0.25;
  std::size_t frame_count = 320;
  double playlist_purity = 0.9;
  double pattern_amplitude = 0.35;
  double pattern_base = 0.05;
};

// --- Operations ------------------------------------------------------------

Corpus load_corpus(const std::string& dir);
void write_corpus(const Corpus& corpus, const std::string& dir);

SplitAssignment stratified_split(const Corpus& corpus, const std::array<double, 3>& ratios,
                                 std::uint64_t seed);

MelChunk sample_chunk(const TrackRecord& track, Rng& rng);
// Deterministic chunk used for validation/evaluation passes.
MelChunk center_chunk(const TrackRecord& track);

GenreSequence lookup_genre_sequence(const TrackRecord& track, const GenreEmbeddingTable& table);

PlaylistMatrix build_playlist_matrix(const Corpus& corpus);

Corpus generate_synthetic_corpus(std::size_t n_tracks, std::size_t n_clusters,
                                 std::size_t n_playlists, double noise_level, std::uint64_t seed);
Corpus generate_synthetic_corpus(const SynthConfig& cfg);

}  // namespace triad
