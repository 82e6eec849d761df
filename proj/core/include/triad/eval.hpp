#pragma once

#include <array>
#include <cstdint>
#include <set>
#include <string>
#include <unordered_map>
#include <vector>

#include "triad/corpus.hpp"
#include "triad/encoders.hpp"

namespace triad::eval {

struct TrackEmbedding {
  std::int64_t track_id = 0;
  std::vector<double> vec;
};

// Eval-mode embeddings of the non-overlapping 256-frame windows of a track
// (trailing remainder dropped; short tracks tile to one window).
std::vector<std::vector<double>> window_embeddings(enc::Model& model, const TrackRecord& track);

// Mean of the window embeddings.
TrackEmbedding extract_track_embedding(enc::Model& model, const TrackRecord& track);

std::unordered_map<std::int64_t, std::vector<double>> compute_all_embeddings(enc::Model& model,
                                                                             const Corpus& corpus);

// Most frequent label; ties go to the smallest label value.
int majority_vote(const std::vector<int>& labels);

struct ProbeConfig {
  std::size_t genre_hidden = 256;
  std::array<std::size_t, 2> tag_hidden = {128, 64};
  std::size_t repeats = 10;
  std::uint64_t seed = 0;
  double learning_rate = 1e-3;
  std::size_t genre_epochs = 150;
  std::size_t tag_max_epochs = 200;
  std::size_t tag_patience = 20;
  double tag_dropout = 0.5;
};

struct GenreEvalResult {
  double mean_accuracy = 0.0;
  double std_accuracy = 0.0;
  std::vector<double> per_repeat;
  std::vector<std::string> warnings;
};

// Genre-classification protocol: per-window probe training with track labels,
// per-window prediction, majority voting per track; repeated with fresh probe
// seeds and averaged.
GenreEvalResult eval_genre_classification(enc::Model& model, const Corpus& corpus,
                                          const std::vector<std::int64_t>& train_ids,
                                          const std::vector<int>& train_labels,
                                          const std::vector<std::int64_t>& test_ids,
                                          const std::vector<int>& test_labels,
                                          const ProbeConfig& cfg);

// Probability that a random positive outscores a random negative; ties half.
double roc_auc(const std::vector<double>& scores, const std::vector<int>& labels);

struct TagCategory {
  std::string name;
  std::vector<int> tags;  // genre-vocabulary ids treated as this category's tags
};

struct TaggingCategoryResult {
  std::string name;
  double mean_auc = 0.0;
  double std_auc = 0.0;
  std::vector<double> per_repeat;
  std::vector<int> excluded_tags;  // no positives (or no negatives) in test
};

std::vector<TaggingCategoryResult> eval_autotagging(enc::Model& model, const Corpus& corpus,
                                                    const std::vector<TagCategory>& categories,
                                                    const SplitAssignment& split,
                                                    const ProbeConfig& cfg);

struct RankedItem {
  std::int64_t track_id = 0;
  double score = 0.0;
};

struct EmbeddingIndex {
  std::vector<TrackEmbedding> items;
};

// Exact top-k by descending cosine similarity; ties by ascending track id.
std::vector<RankedItem> knn_cosine(const std::vector<double>& query, const EmbeddingIndex& index,
                                   std::size_t k);

// Random-projection tree forest over an embedding index. Approximate: queries
// rank the union of the query's leaves exactly, so recall depends on the
// forest size (tested at recall@100 >= 0.95 on 10k-point fixtures).
class RpForest {
 public:
  RpForest(const EmbeddingIndex& index, std::size_t n_trees, std::size_t leaf_size,
           std::uint64_t seed);

  std::vector<RankedItem> query(const std::vector<double>& q, std::size_t k) const;

 private:
  struct Node {
    std::vector<double> plane;
    double threshold = 0.0;
    int left = -1, right = -1;          // node indices; -1 marks a leaf
    std::vector<std::uint32_t> points;  // leaf payload
  };
  const EmbeddingIndex& index_;
  std::vector<std::vector<Node>> trees_;
  std::size_t dim_ = 0;

  int build(std::vector<Node>& tree, std::vector<std::uint32_t> points, std::size_t leaf_size,
            Rng& rng);
};

// Count-then-similarity aggregation of per-seed neighbor lists.
std::vector<std::int64_t> continue_playlist(const std::vector<std::vector<double>>& seed_vecs,
                                            const EmbeddingIndex& candidates,
                                            const std::set<std::int64_t>& exclude, std::size_t k = 100,
                                            std::size_t per_seed = 100);

double ndcg_at_k(const std::vector<std::int64_t>& predicted,
                 const std::set<std::int64_t>& relevant, std::size_t k = 100);
double map_at_k(const std::vector<std::int64_t>& predicted,
                const std::set<std::int64_t>& relevant, std::size_t k = 100);

struct ContinuationResult {
  double mean_ndcg = 0.0;
  double mean_map = 0.0;
  std::size_t evaluated = 0;
  std::size_t skipped_no_seed = 0;
};

// Candidates are the test-split tracks; per qualifying playlist the seeds are
// its non-test tracks and the ground truth its test tracks.
ContinuationResult eval_playlist_continuation(
    const Corpus& corpus, const SplitAssignment& split,
    const std::unordered_map<std::int64_t, std::vector<double>>& embeddings, std::size_t k = 100);

ContinuationResult eval_playlist_continuation(enc::Model& model, const Corpus& corpus,
                                              const SplitAssignment& split, std::size_t k = 100);

// Seeded pseudo-random embeddings, the random baseline of the ordering checks.
std::unordered_map<std::int64_t, std::vector<double>> make_random_embeddings(
    const std::vector<std::int64_t>& ids, std::size_t dim, std::uint64_t seed);

void save_embeddings(const std::vector<TrackEmbedding>& embeddings, const std::string& path);
std::vector<TrackEmbedding> load_embeddings(const std::string& path);

}  // namespace triad::eval
