#include "triad/corpus.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <limits>
#include <sstream>
#include <stdexcept>

#include "json.hpp"

namespace fs = std::filesystem;
using nlohmann::json;

namespace triad {

GenreEmbeddingTable::GenreEmbeddingTable(std::map<int, std::vector<double>> vectors)
    : vectors_(std::move(vectors)) {
  for (const auto& [id, vec] : vectors_) {
    if (vec.size() != kGenreEmbedDim) {
      throw std::invalid_argument("genre table: vector for id " + std::to_string(id) +
                                  " has " + std::to_string(vec.size()) + " components");
    }
    for (double v : vec) {
      if (!std::isfinite(v)) {
        throw std::invalid_argument("genre table: non-finite component for id " + std::to_string(id));
      }
    }
  }
}

const std::vector<double>& GenreEmbeddingTable::vector(int genre_id) const {
  auto it = vectors_.find(genre_id);
  if (it == vectors_.end()) {
    throw std::out_of_range("genre id absent from embedding table: " + std::to_string(genre_id));
  }
  return it->second;
}

std::size_t Corpus::index_of(std::int64_t track_id) const {
  auto it = id_to_index.find(track_id);
  if (it == id_to_index.end()) {
    throw std::out_of_range("unknown track id: " + std::to_string(track_id));
  }
  return it->second;
}

void Corpus::rebuild_index() {
  id_to_index.clear();
  for (std::size_t i = 0; i < tracks.size(); ++i) id_to_index[tracks[i].track_id] = i;
}

PlaylistMatrix::PlaylistMatrix(std::size_t n_tracks, std::vector<std::vector<std::uint32_t>> columns)
    : n_tracks_(n_tracks), columns_(std::move(columns)) {
  col_offsets_.reserve(columns_.size() + 1);
  col_offsets_.push_back(0);
  for (auto& col : columns_) {
    std::sort(col.begin(), col.end());
    nnz_ += col.size();
    col_offsets_.push_back(nnz_);
  }
}

bool PlaylistMatrix::contains(std::size_t track, std::size_t playlist) const {
  const auto& col = columns_[playlist];
  return std::binary_search(col.begin(), col.end(), static_cast<std::uint32_t>(track));
}

std::pair<std::size_t, std::size_t> PlaylistMatrix::entry(std::size_t flat) const {
  if (flat >= nnz_) throw std::out_of_range("playlist matrix: entry index out of range");
  const auto it = std::upper_bound(col_offsets_.begin(), col_offsets_.end(), flat);
  const std::size_t p = static_cast<std::size_t>(it - col_offsets_.begin()) - 1;
  return {p, columns_[p][flat - col_offsets_[p]]};
}

// ---------------------------------------------------------------------------
// Validation

namespace {

void validate_track(const TrackRecord& t, int vocab_size) {
  if (t.frame_count < 1) throw std::runtime_error("track " + std::to_string(t.track_id) + ": frame_count < 1");
  if (t.mel.rank() != 2 || t.mel.dim(0) != t.frame_count || t.mel.dim(1) != kMelBands) {
    throw std::runtime_error("track " + std::to_string(t.track_id) + ": mel data shape mismatch");
  }
  for (double v : t.mel.vec()) {
    if (!std::isfinite(v) || v < 0.0) {
      throw std::runtime_error("track " + std::to_string(t.track_id) + ": mel values must be finite and >= 0");
    }
  }
  if (t.genre_ids.empty() || t.genre_ids.size() > kMaxGenresPerTrack) {
    throw std::runtime_error("track " + std::to_string(t.track_id) + ": expected 1..10 genre ids");
  }
  std::set<int> seen;
  for (int g : t.genre_ids) {
    if (g < 1 || g > vocab_size) {
      throw std::runtime_error("track " + std::to_string(t.track_id) + ": genre id " +
                               std::to_string(g) + " outside vocabulary");
    }
    if (!seen.insert(g).second) {
      throw std::runtime_error("track " + std::to_string(t.track_id) + ": duplicate genre id");
    }
  }
}

void validate_corpus(const Corpus& c) {
  for (const auto& t : c.tracks) {
    validate_track(t, c.genre_vocab_size);
    for (int g : t.genre_ids) {
      if (!c.embedding_table.contains(g)) {
        throw std::runtime_error("track " + std::to_string(t.track_id) + ": genre id " +
                                 std::to_string(g) + " absent from embedding table");
      }
    }
  }
  for (const auto& pl : c.playlists) {
    std::set<std::int64_t> seen;
    for (std::int64_t tid : pl.track_ids) {
      if (c.id_to_index.find(tid) == c.id_to_index.end()) {
        throw std::runtime_error("playlist " + std::to_string(pl.playlist_id) +
                                 ": dangling reference to track " + std::to_string(tid));
      }
      if (!seen.insert(tid).second) {
        throw std::runtime_error("playlist " + std::to_string(pl.playlist_id) +
                                 ": duplicate track " + std::to_string(tid));
      }
    }
  }
}

std::vector<float> read_f32_file(const fs::path& path, std::size_t expected) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw std::runtime_error("missing mel data: " + path.string());
  in.seekg(0, std::ios::end);
  const auto bytes = static_cast<std::size_t>(in.tellg());
  if (bytes != expected * sizeof(float)) {
    throw std::runtime_error("mel data shape mismatch: " + path.string() + " has " +
                             std::to_string(bytes) + " bytes, manifest expects " +
                             std::to_string(expected * sizeof(float)));
  }
  in.seekg(0);
  std::vector<float> out(expected);
  in.read(reinterpret_cast<char*>(out.data()), static_cast<std::streamsize>(bytes));
  if (!in) throw std::runtime_error("short read: " + path.string());
  return out;
}

void write_f32_file(const fs::path& path, const std::vector<double>& values) {
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw std::runtime_error("cannot write: " + path.string());
  std::vector<float> f(values.size());
  for (std::size_t i = 0; i < values.size(); ++i) f[i] = static_cast<float>(values[i]);
  out.write(reinterpret_cast<const char*>(f.data()),
            static_cast<std::streamsize>(f.size() * sizeof(float)));
}

std::string format_double(double v) {
  char buf[40];
  std::snprintf(buf, sizeof(buf), "%.17g", v);
  return buf;
}

}  // namespace

// ---------------------------------------------------------------------------
// Load / write

Corpus load_corpus(const std::string& dir) {
  const fs::path root(dir);
  const fs::path manifest_path = root / "manifest.json";
  std::ifstream mf(manifest_path);
  if (!mf) throw std::runtime_error("missing manifest: " + manifest_path.string());
  json manifest;
  try {
    mf >> manifest;
  } catch (const json::exception& e) {
    throw std::runtime_error("malformed manifest: " + std::string(e.what()));
  }

  Corpus corpus;
  corpus.genre_vocab_size = manifest.value("genre_vocab_size", kGenreVocabSize);

  for (const auto& jt : manifest.at("tracks")) {
    TrackRecord t;
    t.track_id = jt.at("track_id").get<std::int64_t>();
    t.frame_count = jt.at("frame_count").get<std::size_t>();
    t.genre_ids = jt.at("genre_ids").get<std::vector<int>>();
    const std::string mel_path = jt.at("mel_path").get<std::string>();
    const auto raw = read_f32_file(root / mel_path, t.frame_count * kMelBands);
    t.mel = Tensor({t.frame_count, kMelBands});
    for (std::size_t i = 0; i < raw.size(); ++i) t.mel[i] = static_cast<double>(raw[i]);
    corpus.tracks.push_back(std::move(t));
  }
  corpus.rebuild_index();
  if (corpus.id_to_index.size() != corpus.tracks.size()) {
    throw std::runtime_error("manifest contains duplicate track ids");
  }

  const fs::path genres_path = root / "genres.vec";
  std::ifstream gf(genres_path);
  if (!gf) throw std::runtime_error("missing genre table: " + genres_path.string());
  std::map<int, std::vector<double>> table;
  std::string line;
  while (std::getline(gf, line)) {
    if (line.empty()) continue;
    std::istringstream ls(line);
    int gid = 0;
    if (!(ls >> gid)) throw std::runtime_error("malformed genres.vec line: " + line);
    std::vector<double> vec;
    vec.reserve(kGenreEmbedDim);
    double v = 0.0;
    while (ls >> v) vec.push_back(v);
    if (vec.size() != kGenreEmbedDim) {
      throw std::runtime_error("genres.vec: id " + std::to_string(gid) + " has " +
                               std::to_string(vec.size()) + " components, expected 200");
    }
    if (!table.emplace(gid, std::move(vec)).second) {
      throw std::runtime_error("genres.vec: duplicate id " + std::to_string(gid));
    }
  }
  corpus.embedding_table = GenreEmbeddingTable(std::move(table));

  const fs::path playlists_path = root / "playlists.txt";
  std::ifstream pf(playlists_path);
  if (pf) {
    while (std::getline(pf, line)) {
      if (line.empty() || line[0] == '#') continue;
      std::istringstream ls(line);
      Playlist pl;
      if (!(ls >> pl.playlist_id)) throw std::runtime_error("malformed playlist line: " + line);
      std::int64_t tid = 0;
      while (ls >> tid) pl.track_ids.push_back(tid);
      corpus.playlists.push_back(std::move(pl));
    }
  }

  validate_corpus(corpus);
  return corpus;
}

void write_corpus(const Corpus& corpus, const std::string& dir) {
  const fs::path root(dir);
  fs::create_directories(root / "mels");

  json tracks = json::array();
  for (const auto& t : corpus.tracks) {
    const std::string mel_rel = "mels/" + std::to_string(t.track_id) + ".mel";
    write_f32_file(root / mel_rel, t.mel.vec());
    tracks.push_back({{"track_id", t.track_id},
                      {"mel_path", mel_rel},
                      {"frame_count", t.frame_count},
                      {"genre_ids", t.genre_ids}});
  }
  json manifest = {{"format_version", 1},
                   {"genre_vocab_size", corpus.genre_vocab_size},
                   {"tracks", tracks}};
  std::ofstream mf(root / "manifest.json", std::ios::trunc);
  if (!mf) throw std::runtime_error("cannot write manifest in " + dir);
  mf << manifest.dump(2) << "\n";

  std::ofstream pf(root / "playlists.txt", std::ios::trunc);
  for (const auto& pl : corpus.playlists) {
    pf << pl.playlist_id;
    for (std::int64_t tid : pl.track_ids) pf << " " << tid;
    pf << "\n";
  }

  std::ofstream gf(root / "genres.vec", std::ios::trunc);
  for (const auto& [gid, vec] : corpus.embedding_table.vectors()) {
    gf << gid;
    for (double v : vec) gf << " " << format_double(v);
    gf << "\n";
  }
}

// ---------------------------------------------------------------------------
// Stratified split

SplitAssignment stratified_split(const Corpus& corpus, const std::array<double, 3>& ratios,
                                 std::uint64_t seed) {
  double sum = 0.0;
  for (double r : ratios) {
    if (r < 0.0) throw std::invalid_argument("split ratios must be nonnegative");
    sum += r;
  }
  if (std::abs(sum - 1.0) > 1e-9) throw std::invalid_argument("split ratios must sum to 1");
  if (corpus.tracks.empty()) throw std::invalid_argument("cannot split an empty corpus");

  const std::size_t n = corpus.tracks.size();
  Rng rng(Rng::split(seed, "stratified-split"));
  std::vector<std::size_t> order(n);
  for (std::size_t i = 0; i < n; ++i) order[i] = i;
  rng.shuffle(order);
  std::vector<std::size_t> rank(n);
  for (std::size_t i = 0; i < n; ++i) rank[order[i]] = i;

  std::map<int, std::vector<std::size_t>> carriers;
  for (std::size_t i = 0; i < n; ++i) {
    for (int g : corpus.tracks[i].genre_ids) carriers[g].push_back(i);
  }
  for (auto& [g, list] : carriers) {
    std::sort(list.begin(), list.end(), [&](std::size_t a, std::size_t b) { return rank[a] < rank[b]; });
  }

  std::array<double, 3> capacity = {ratios[0] * n, ratios[1] * n, ratios[2] * n};
  std::map<int, std::array<double, 3>> label_desire;
  std::map<int, std::size_t> remaining;
  for (const auto& [g, list] : carriers) {
    const double c = static_cast<double>(list.size());
    label_desire[g] = {ratios[0] * c, ratios[1] * c, ratios[2] * c};
    remaining[g] = list.size();
  }

  std::vector<int> assignment(n, -1);
  while (true) {
    // Rarest label with unassigned carriers; ties go to the smaller label id.
    int best_label = -1;
    std::size_t best_count = std::numeric_limits<std::size_t>::max();
    for (const auto& [g, cnt] : remaining) {
      if (cnt > 0 && cnt < best_count) {
        best_count = cnt;
        best_label = g;
      }
    }
    if (best_label < 0) break;

    for (std::size_t track : carriers[best_label]) {
      if (assignment[track] >= 0) continue;
      auto& desire = label_desire[best_label];
      int pick = 0;
      for (int j = 1; j < 3; ++j) {
        if (desire[j] > desire[pick] + 1e-12) {
          pick = j;
        } else if (std::abs(desire[j] - desire[pick]) <= 1e-12 &&
                   capacity[j] > capacity[pick] + 1e-12) {
          pick = j;
        }
      }
      assignment[track] = pick;
      capacity[pick] -= 1.0;
      for (int g : corpus.tracks[track].genre_ids) {
        label_desire[g][pick] -= 1.0;
        remaining[g] -= 1;
      }
    }
  }

  SplitAssignment split;
  for (std::size_t i = 0; i < n; ++i) {
    const std::int64_t id = corpus.tracks[i].track_id;
    switch (assignment[i]) {
      case 0: split.train.insert(id); break;
      case 1: split.validation.insert(id); break;
      case 2: split.test.insert(id); break;
      default: throw std::logic_error("stratified split left a track unassigned");
    }
  }
  return split;
}

// ---------------------------------------------------------------------------
// Chunk sampling and lookups

namespace {
MelChunk slice_chunk(const TrackRecord& track, std::size_t start) {
  MelChunk chunk;
  chunk.data = Tensor({kChunkFrames, kMelBands});
  chunk.source_track = track.track_id;
  chunk.start_frame = start;
  if (track.frame_count >= kChunkFrames) {
    std::memcpy(chunk.data.data(), track.mel.data() + start * kMelBands,
                kChunkFrames * kMelBands * sizeof(double));
  } else {
    // Cyclic tiling for short tracks.
    for (std::size_t t = 0; t < kChunkFrames; ++t) {
      const std::size_t src = t % track.frame_count;
      std::memcpy(chunk.data.data() + t * kMelBands, track.mel.data() + src * kMelBands,
                  kMelBands * sizeof(double));
    }
  }
  return chunk;
}
}  // namespace

MelChunk sample_chunk(const TrackRecord& track, Rng& rng) {
  if (track.frame_count < 1) throw std::invalid_argument("sample_chunk: empty track");
  if (track.frame_count < kChunkFrames) return slice_chunk(track, 0);
  const std::size_t span = track.frame_count - kChunkFrames + 1;
  return slice_chunk(track, static_cast<std::size_t>(rng.uniform_int(span)));
}

MelChunk center_chunk(const TrackRecord& track) {
  if (track.frame_count < 1) throw std::invalid_argument("center_chunk: empty track");
  if (track.frame_count < kChunkFrames) return slice_chunk(track, 0);
  return slice_chunk(track, (track.frame_count - kChunkFrames) / 2);
}

GenreSequence lookup_genre_sequence(const TrackRecord& track, const GenreEmbeddingTable& table) {
  GenreSequence seq;
  seq.data = Tensor({kMaxGenresPerTrack, kGenreEmbedDim});
  seq.mask.assign(kMaxGenresPerTrack, 0);
  for (std::size_t i = 0; i < track.genre_ids.size(); ++i) {
    const auto& vec = table.vector(track.genre_ids[i]);
    std::memcpy(seq.data.data() + i * kGenreEmbedDim, vec.data(), kGenreEmbedDim * sizeof(double));
    seq.mask[i] = 1;
  }
  return seq;
}

PlaylistMatrix build_playlist_matrix(const Corpus& corpus) {
  std::vector<std::vector<std::uint32_t>> columns(corpus.playlists.size());
  for (std::size_t p = 0; p < corpus.playlists.size(); ++p) {
    for (std::int64_t tid : corpus.playlists[p].track_ids) {
      columns[p].push_back(static_cast<std::uint32_t>(corpus.index_of(tid)));
    }
  }
  return PlaylistMatrix(corpus.tracks.size(), std::move(columns));
}

// ---------------------------------------------------------------------------
// Synthetic corpus

Corpus generate_synthetic_corpus(std::size_t n_tracks, std::size_t n_clusters,
                                 std::size_t n_playlists, double noise_level, std::uint64_t seed) {
  SynthConfig cfg;
  cfg.n_tracks = n_tracks;
  cfg.n_clusters = n_clusters;
  cfg.n_playlists = n_playlists;
  cfg.noise_level = noise_level;
  cfg.seed = seed;
  return generate_synthetic_corpus(cfg);
}

Corpus generate_synthetic_corpus(const SynthConfig& cfg) {
  if (cfg.n_clusters < 1 || cfg.n_clusters > cfg.n_tracks ||
      cfg.n_clusters > static_cast<std::size_t>(kGenreVocabSize)) {
    throw std::invalid_argument("synthetic corpus: need 1 <= n_clusters <= min(n_tracks, 219)");
  }
  if (cfg.noise_level < 0.0) throw std::invalid_argument("synthetic corpus: noise_level must be >= 0");
  if (cfg.playlist_purity < 0.8 || cfg.playlist_purity > 1.0) {
    throw std::invalid_argument("synthetic corpus: playlist purity must be in [0.8, 1]");
  }

  Corpus corpus;
  corpus.genre_vocab_size = kGenreVocabSize;

  // Distinct mel-band bump profile per cluster.
  const double bands = static_cast<double>(kMelBands);
  const double sigma = std::max(1.2, bands / (4.0 * static_cast<double>(cfg.n_clusters)));
  std::vector<std::array<double, kMelBands>> patterns(cfg.n_clusters);
  for (std::size_t c = 0; c < cfg.n_clusters; ++c) {
    const double center = (static_cast<double>(c) + 0.5) * bands / static_cast<double>(cfg.n_clusters);
    for (std::size_t f = 0; f < kMelBands; ++f) {
      const double d = (static_cast<double>(f) - center) / sigma;
      patterns[c][f] = cfg.pattern_base + cfg.pattern_amplitude * std::exp(-0.5 * d * d);
    }
  }

  Rng rng_mel(Rng::split(cfg.seed, "synth-mel"));
  Rng rng_genre(Rng::split(cfg.seed, "synth-genres"));
  Rng rng_playlist(Rng::split(cfg.seed, "synth-playlists"));
  Rng rng_table(Rng::split(cfg.seed, "synth-genre-table"));

  for (std::size_t m = 0; m < cfg.n_tracks; ++m) {
    TrackRecord t;
    t.track_id = static_cast<std::int64_t>(m);
    t.frame_count = cfg.frame_count;
    t.mel = Tensor({cfg.frame_count, kMelBands});
    const std::size_t cluster = m % cfg.n_clusters;
    for (std::size_t fr = 0; fr < cfg.frame_count; ++fr) {
      double* row = t.mel.data() + fr * kMelBands;
      for (std::size_t f = 0; f < kMelBands; ++f) {
        double v = patterns[cluster][f];
        if (cfg.noise_level > 0.0) v += cfg.noise_level * rng_mel.exponential();
        row[f] = v;
      }
    }
    t.genre_ids.push_back(static_cast<int>(cluster) + 1);
    if (static_cast<int>(cfg.n_clusters) < kGenreVocabSize &&
        rng_genre.uniform() < cfg.extra_label_prob) {
      const int extra = static_cast<int>(cfg.n_clusters) + 1 +
                        static_cast<int>(rng_genre.uniform_int(
                            static_cast<std::uint64_t>(kGenreVocabSize) - cfg.n_clusters));
      t.genre_ids.push_back(extra);
    }
    corpus.tracks.push_back(std::move(t));
  }
  corpus.rebuild_index();

  std::vector<std::vector<std::int64_t>> cluster_members(cfg.n_clusters);
  for (std::size_t m = 0; m < cfg.n_tracks; ++m) {
    cluster_members[m % cfg.n_clusters].push_back(static_cast<std::int64_t>(m));
  }

  for (std::size_t p = 0; p < cfg.n_playlists; ++p) {
    Playlist pl;
    pl.playlist_id = static_cast<std::int64_t>(p);
    const std::size_t dominant = p % cfg.n_clusters;
    const std::size_t want = std::min<std::size_t>(5 + rng_playlist.uniform_int(26), cfg.n_tracks);
    std::set<std::int64_t> chosen;
    std::size_t attempts = 0;
    while (chosen.size() < want && attempts < want * 50) {
      ++attempts;
      std::int64_t tid;
      if (rng_playlist.uniform() < cfg.playlist_purity || cfg.n_clusters == 1) {
        const auto& members = cluster_members[dominant];
        tid = members[rng_playlist.uniform_int(members.size())];
      } else {
        tid = static_cast<std::int64_t>(rng_playlist.uniform_int(cfg.n_tracks));
      }
      if (chosen.insert(tid).second) pl.track_ids.push_back(tid);
    }
    corpus.playlists.push_back(std::move(pl));
  }

  // Fixed pseudo-random unit vector per genre id, derived by counter so the
  // table depends only on the seed.
  std::map<int, std::vector<double>> table;
  for (int gid = 1; gid <= kGenreVocabSize; ++gid) {
    std::vector<double> vec(kGenreEmbedDim);
    double norm_sq = 0.0;
    for (double& v : vec) {
      v = rng_table.normal();
      norm_sq += v * v;
    }
    const double inv = 1.0 / std::sqrt(norm_sq);
    for (double& v : vec) v *= inv;
    table.emplace(gid, std::move(vec));
  }
  corpus.embedding_table = GenreEmbeddingTable(std::move(table));

  return corpus;
}

}  // namespace triad
