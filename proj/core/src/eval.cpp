#include "triad/eval.hpp"

#include <algorithm>
#include <cmath>
#include <cstring>
#include <fstream>
#include <limits>
#include <map>
#include <stdexcept>

#include "triad/loss.hpp"
#include "triad/trainer.hpp"

namespace triad::eval {

// ---------------------------------------------------------------------------
// Embedding extraction

std::vector<std::vector<double>> window_embeddings(enc::Model& model, const TrackRecord& track) {
  const auto& cfg = model.cfg;
  std::size_t n_windows = track.frame_count / cfg.audio_frames;
  Tensor batch;
  if (n_windows == 0) {
    // Short track: one tiled window.
    n_windows = 1;
    const MelChunk chunk = center_chunk(track);
    batch = Tensor({1, cfg.audio_frames, cfg.audio_bands}, chunk.data.vec());
  } else {
    batch = Tensor({n_windows, cfg.audio_frames, cfg.audio_bands});
    for (std::size_t w = 0; w < n_windows; ++w) {
      std::memcpy(batch.data() + w * cfg.audio_frames * cfg.audio_bands,
                  track.mel.data() + w * cfg.audio_frames * cfg.audio_bands,
                  cfg.audio_frames * cfg.audio_bands * sizeof(double));
    }
  }
  const Tensor phi = model.audio->forward(batch, nn::Mode::kEval, nullptr);
  std::vector<std::vector<double>> out(n_windows, std::vector<double>(cfg.latent_dim));
  for (std::size_t w = 0; w < n_windows; ++w) {
    std::memcpy(out[w].data(), phi.data() + w * cfg.latent_dim, cfg.latent_dim * sizeof(double));
  }
  return out;
}

TrackEmbedding extract_track_embedding(enc::Model& model, const TrackRecord& track) {
  const auto windows = window_embeddings(model, track);
  TrackEmbedding emb;
  emb.track_id = track.track_id;
  emb.vec.assign(model.cfg.latent_dim, 0.0);
  for (const auto& w : windows) {
    for (std::size_t i = 0; i < emb.vec.size(); ++i) emb.vec[i] += w[i];
  }
  const double inv = 1.0 / static_cast<double>(windows.size());
  for (double& v : emb.vec) v *= inv;
  return emb;
}

std::unordered_map<std::int64_t, std::vector<double>> compute_all_embeddings(enc::Model& model,
                                                                             const Corpus& corpus) {
  std::unordered_map<std::int64_t, std::vector<double>> out;
  out.reserve(corpus.tracks.size());
  for (const auto& track : corpus.tracks) {
    out.emplace(track.track_id, extract_track_embedding(model, track).vec);
  }
  return out;
}

int majority_vote(const std::vector<int>& labels) {
  if (labels.empty()) throw std::invalid_argument("majority_vote: empty label list");
  std::map<int, std::size_t> counts;
  for (int l : labels) ++counts[l];
  int best = labels[0];
  std::size_t best_count = 0;
  for (const auto& [label, count] : counts) {
    if (count > best_count) {  // map iteration is ascending, so ties keep the smaller label
      best = label;
      best_count = count;
    }
  }
  return best;
}

// ---------------------------------------------------------------------------
// Probes

namespace {

double softmax_ce_backward(const Tensor& logits, const std::vector<int>& targets, Tensor* dlogits) {
  const std::size_t n = logits.dim(0), c = logits.dim(1);
  double total = 0.0;
  std::vector<double> probs(c);
  for (std::size_t r = 0; r < n; ++r) {
    const double* row = logits.data() + r * c;
    double maxv = -std::numeric_limits<double>::infinity();
    for (std::size_t j = 0; j < c; ++j) maxv = std::max(maxv, row[j]);
    double denom = 0.0;
    for (std::size_t j = 0; j < c; ++j) {
      probs[j] = std::exp(row[j] - maxv);
      denom += probs[j];
    }
    const int t = targets[r];
    total += std::log(denom) - (row[static_cast<std::size_t>(t)] - maxv);
    if (dlogits) {
      double* drow = dlogits->data() + r * c;
      for (std::size_t j = 0; j < c; ++j) {
        drow[j] = (probs[j] / denom - (static_cast<int>(j) == t ? 1.0 : 0.0)) / static_cast<double>(n);
      }
    }
  }
  return total / static_cast<double>(n);
}

struct GenreProbe {
  nn::Linear l1, l2;
  nn::ReLU relu;

  GenreProbe(std::size_t dim, std::size_t hidden, std::size_t classes, Rng& rng)
      : l1("probe1", dim, hidden, rng), l2("probe2", hidden, classes, rng) {}

  Tensor forward(const Tensor& x, nn::Mode mode) {
    return l2.forward(relu.forward(l1.forward(x, mode), mode), mode);
  }
  void backward(const Tensor& dlogits) { l1.backward(relu.backward(l2.backward(dlogits))); }
  std::vector<nn::Param*> params() {
    std::vector<nn::Param*> out;
    l1.collect(out);
    l2.collect(out);
    return out;
  }
};

struct TagProbe {
  nn::Linear l1, l2, l3;
  nn::BatchNorm bn1, bn2;
  nn::ReLU r1, r2;
  nn::Dropout dp;

  TagProbe(std::size_t dim, std::size_t h1, std::size_t h2, std::size_t tags, double dropout,
           Rng& rng)
      : l1("tag1", dim, h1, rng),
        l2("tag2", h1, h2, rng),
        l3("tag3", h2, tags, rng),
        bn1("tagbn1", h1),
        bn2("tagbn2", h2),
        dp(dropout) {}

  Tensor forward(const Tensor& x, nn::Mode mode, Rng* rng) {
    Tensor h = r1.forward(bn1.forward(l1.forward(x, mode), mode), mode);
    h = r2.forward(bn2.forward(l2.forward(h, mode), mode), mode);
    h = dp.forward(h, mode, rng);
    return l3.forward(h, mode);
  }
  void backward(const Tensor& dlogits) {
    Tensor d = dp.backward(l3.backward(dlogits));
    d = l2.backward(bn2.backward(r2.backward(d)));
    l1.backward(bn1.backward(r1.backward(d)));
  }
  std::vector<nn::Param*> params() {
    std::vector<nn::Param*> out;
    l1.collect(out);
    bn1.collect(out);
    l2.collect(out);
    bn2.collect(out);
    l3.collect(out);
    return out;
  }
  std::vector<Tensor*> buffers() {
    return {&bn1.running_mean(), &bn1.running_var(), &bn2.running_mean(), &bn2.running_var()};
  }
};

double mean_of(const std::vector<double>& v) {
  double s = 0.0;
  for (double x : v) s += x;
  return v.empty() ? 0.0 : s / static_cast<double>(v.size());
}

double std_of(const std::vector<double>& v) {
  if (v.size() < 2) return 0.0;
  const double m = mean_of(v);
  double s = 0.0;
  for (double x : v) s += (x - m) * (x - m);
  return std::sqrt(s / static_cast<double>(v.size() - 1));
}

}  // namespace

GenreEvalResult eval_genre_classification(enc::Model& model, const Corpus& corpus,
                                          const std::vector<std::int64_t>& train_ids,
                                          const std::vector<int>& train_labels,
                                          const std::vector<std::int64_t>& test_ids,
                                          const std::vector<int>& test_labels,
                                          const ProbeConfig& cfg) {
  if (train_ids.size() != train_labels.size() || test_ids.size() != test_labels.size()) {
    throw std::invalid_argument("genre eval: ids and labels must align");
  }
  if (train_ids.empty() || test_ids.empty()) {
    throw std::invalid_argument("genre eval: empty split");
  }

  // Class set over both splits; classes only in test are scored as-is.
  std::set<int> class_set(train_labels.begin(), train_labels.end());
  GenreEvalResult result;
  for (int l : test_labels) {
    if (class_set.insert(l).second) {
      result.warnings.push_back("class " + std::to_string(l) +
                                " present in test but absent in train");
    }
  }
  std::map<int, int> class_index;
  std::vector<int> class_of_index;
  for (int l : class_set) {
    class_index[l] = static_cast<int>(class_of_index.size());
    class_of_index.push_back(l);
  }
  const std::size_t n_classes = class_of_index.size();
  const std::size_t dim = model.cfg.latent_dim;

  // Every window is a training instance carrying its track's label.
  std::vector<std::vector<double>> train_rows;
  std::vector<int> train_targets;
  for (std::size_t i = 0; i < train_ids.size(); ++i) {
    const auto& track = corpus.tracks[corpus.index_of(train_ids[i])];
    for (auto& w : window_embeddings(model, track)) {
      train_rows.push_back(std::move(w));
      train_targets.push_back(class_index.at(train_labels[i]));
    }
  }
  Tensor x_train({train_rows.size(), dim});
  for (std::size_t r = 0; r < train_rows.size(); ++r) {
    std::memcpy(x_train.data() + r * dim, train_rows[r].data(), dim * sizeof(double));
  }

  struct TestTrack {
    Tensor windows;
    int label;
  };
  std::vector<TestTrack> test_tracks;
  for (std::size_t i = 0; i < test_ids.size(); ++i) {
    const auto& track = corpus.tracks[corpus.index_of(test_ids[i])];
    const auto wins = window_embeddings(model, track);
    TestTrack tt;
    tt.windows = Tensor({wins.size(), dim});
    for (std::size_t w = 0; w < wins.size(); ++w) {
      std::memcpy(tt.windows.data() + w * dim, wins[w].data(), dim * sizeof(double));
    }
    tt.label = class_index.at(test_labels[i]);
    test_tracks.push_back(std::move(tt));
  }

  for (std::size_t rep = 0; rep < cfg.repeats; ++rep) {
    Rng rng(Rng::split(cfg.seed, "genre-probe-" + std::to_string(rep)));
    GenreProbe probe(dim, cfg.genre_hidden, n_classes, rng);
    train::Adam opt(probe.params(), cfg.learning_rate);
    for (std::size_t epoch = 0; epoch < cfg.genre_epochs; ++epoch) {
      Tensor logits = probe.forward(x_train, nn::Mode::kTrain);
      Tensor dlogits(logits.shape());
      softmax_ce_backward(logits, train_targets, &dlogits);
      probe.backward(dlogits);
      opt.step();
      opt.zero_grads();
    }
    std::size_t correct = 0;
    for (const auto& tt : test_tracks) {
      const Tensor logits = probe.forward(tt.windows, nn::Mode::kEval);
      std::vector<int> votes;
      for (std::size_t w = 0; w < logits.dim(0); ++w) {
        const double* row = logits.data() + w * n_classes;
        int arg = 0;
        for (std::size_t j = 1; j < n_classes; ++j) {
          if (row[j] > row[static_cast<std::size_t>(arg)]) arg = static_cast<int>(j);
        }
        votes.push_back(arg);
      }
      if (majority_vote(votes) == tt.label) ++correct;
    }
    result.per_repeat.push_back(static_cast<double>(correct) /
                                static_cast<double>(test_tracks.size()));
  }
  result.mean_accuracy = mean_of(result.per_repeat);
  result.std_accuracy = std_of(result.per_repeat);
  return result;
}

// ---------------------------------------------------------------------------
// ROC AUC

double roc_auc(const std::vector<double>& scores, const std::vector<int>& labels) {
  if (scores.size() != labels.size() || scores.empty()) {
    throw std::invalid_argument("roc_auc: scores and labels must align");
  }
  std::size_t n_pos = 0;
  for (int l : labels) {
    if (l != 0 && l != 1) throw std::invalid_argument("roc_auc: labels must be 0/1");
    n_pos += static_cast<std::size_t>(l);
  }
  const std::size_t n_neg = labels.size() - n_pos;
  if (n_pos == 0 || n_neg == 0) throw std::invalid_argument("roc_auc: both classes required");

  std::vector<std::size_t> order(scores.size());
  for (std::size_t i = 0; i < order.size(); ++i) order[i] = i;
  std::sort(order.begin(), order.end(),
            [&](std::size_t a, std::size_t b) { return scores[a] < scores[b]; });

  // Average ranks over tie groups, then the rank-sum statistic.
  double rank_sum_pos = 0.0;
  std::size_t i = 0;
  while (i < order.size()) {
    std::size_t j = i;
    while (j + 1 < order.size() && scores[order[j + 1]] == scores[order[i]]) ++j;
    const double avg_rank = (static_cast<double>(i + 1) + static_cast<double>(j + 1)) / 2.0;
    for (std::size_t t = i; t <= j; ++t) {
      if (labels[order[t]] == 1) rank_sum_pos += avg_rank;
    }
    i = j + 1;
  }
  const double p = static_cast<double>(n_pos);
  return (rank_sum_pos - p * (p + 1.0) / 2.0) / (p * static_cast<double>(n_neg));
}

// ---------------------------------------------------------------------------
// Auto-tagging

std::vector<TaggingCategoryResult> eval_autotagging(enc::Model& model, const Corpus& corpus,
                                                    const std::vector<TagCategory>& categories,
                                                    const SplitAssignment& split,
                                                    const ProbeConfig& cfg) {
  for (const auto& cat : categories) {
    if (cat.tags.size() < 2) {
      throw std::invalid_argument("tagging category '" + cat.name + "' needs >= 2 tags");
    }
  }
  const std::size_t dim = model.cfg.latent_dim;

  const auto embeddings = compute_all_embeddings(model, corpus);
  auto gather = [&](const std::set<std::int64_t>& ids, std::vector<std::int64_t>& order) {
    order.assign(ids.begin(), ids.end());
    Tensor x({order.size(), dim});
    for (std::size_t i = 0; i < order.size(); ++i) {
      std::memcpy(x.data() + i * dim, embeddings.at(order[i]).data(), dim * sizeof(double));
    }
    return x;
  };
  std::vector<std::int64_t> train_order, val_order, test_order;
  const Tensor x_train = gather(split.train, train_order);
  const Tensor x_val = gather(split.validation, val_order);
  const Tensor x_test = gather(split.test, test_order);

  std::vector<TaggingCategoryResult> results;
  for (const auto& cat : categories) {
    const std::size_t n_tags = cat.tags.size();
    auto targets_for = [&](const std::vector<std::int64_t>& order) {
      Tensor t({order.size(), n_tags});
      for (std::size_t i = 0; i < order.size(); ++i) {
        const auto& track = corpus.tracks[corpus.index_of(order[i])];
        for (std::size_t j = 0; j < n_tags; ++j) {
          if (std::find(track.genre_ids.begin(), track.genre_ids.end(), cat.tags[j]) !=
              track.genre_ids.end()) {
            t.at2(i, j) = 1.0;
          }
        }
      }
      return t;
    };
    const Tensor y_train = targets_for(train_order);
    const Tensor y_val = targets_for(val_order);
    const Tensor y_test = targets_for(test_order);

    TaggingCategoryResult res;
    res.name = cat.name;

    // Tags must have both classes in test to give an AUC.
    std::vector<std::size_t> scoreable;
    for (std::size_t j = 0; j < n_tags; ++j) {
      std::size_t pos = 0;
      for (std::size_t i = 0; i < test_order.size(); ++i) {
        pos += static_cast<std::size_t>(y_test.at2(i, j));
      }
      if (pos > 0 && pos < test_order.size()) {
        scoreable.push_back(j);
      } else {
        res.excluded_tags.push_back(cat.tags[j]);
      }
    }
    if (scoreable.empty()) {
      results.push_back(std::move(res));
      continue;
    }

    for (std::size_t rep = 0; rep < cfg.repeats; ++rep) {
      Rng rng(Rng::split(cfg.seed, "tag-probe-" + cat.name + "-" + std::to_string(rep)));
      TagProbe probe(dim, cfg.tag_hidden[0], cfg.tag_hidden[1], n_tags, cfg.tag_dropout, rng);
      train::Adam opt(probe.params(), cfg.learning_rate);

      // Early stopping on validation BCE; keep the best state.
      double best_val = std::numeric_limits<double>::infinity();
      std::vector<Tensor> best_state;
      auto snapshot = [&]() {
        std::vector<Tensor> s;
        for (auto* p : probe.params()) s.push_back(p->value);
        for (auto* b : probe.buffers()) s.push_back(*b);
        return s;
      };
      auto restore = [&](const std::vector<Tensor>& s) {
        std::size_t i = 0;
        for (auto* p : probe.params()) p->value = s[i++];
        for (auto* b : probe.buffers()) *b = s[i++];
      };
      best_state = snapshot();
      std::size_t since_best = 0;
      for (std::size_t epoch = 0; epoch < cfg.tag_max_epochs; ++epoch) {
        Tensor logits = probe.forward(x_train, nn::Mode::kTrain, &rng);
        Tensor dlogits(logits.shape());
        train::bce_with_logits_backward(logits, y_train, dlogits);
        probe.backward(dlogits);
        opt.step();
        opt.zero_grads();

        const Tensor val_logits = probe.forward(x_val, nn::Mode::kEval, nullptr);
        const double val_bce = train::bce_with_logits(val_logits, y_val);
        if (val_bce < best_val) {
          best_val = val_bce;
          best_state = snapshot();
          since_best = 0;
        } else if (++since_best > cfg.tag_patience) {
          break;
        }
      }
      restore(best_state);

      const Tensor test_logits = probe.forward(x_test, nn::Mode::kEval, nullptr);
      double auc_sum = 0.0;
      for (std::size_t j : scoreable) {
        std::vector<double> scores(test_order.size());
        std::vector<int> labels(test_order.size());
        for (std::size_t i = 0; i < test_order.size(); ++i) {
          scores[i] = test_logits.at2(i, j);
          labels[i] = static_cast<int>(y_test.at2(i, j));
        }
        auc_sum += roc_auc(scores, labels);
      }
      res.per_repeat.push_back(auc_sum / static_cast<double>(scoreable.size()));
    }
    res.mean_auc = mean_of(res.per_repeat);
    res.std_auc = std_of(res.per_repeat);
    results.push_back(std::move(res));
  }
  return results;
}

// ---------------------------------------------------------------------------
// Retrieval

std::vector<RankedItem> knn_cosine(const std::vector<double>& query, const EmbeddingIndex& index,
                                   std::size_t k) {
  if (index.items.empty()) throw std::invalid_argument("knn: empty index");
  if (k < 1) throw std::invalid_argument("knn: k must be >= 1");
  double qn = 0.0;
  for (double v : query) qn += v * v;
  if (qn == 0.0) throw std::invalid_argument("knn: zero-norm query");

  std::vector<RankedItem> ranked;
  ranked.reserve(index.items.size());
  for (const auto& item : index.items) {
    ranked.push_back({item.track_id, loss::cosine_sim(query, item.vec)});
  }
  std::sort(ranked.begin(), ranked.end(), [](const RankedItem& a, const RankedItem& b) {
    if (a.score != b.score) return a.score > b.score;
    return a.track_id < b.track_id;
  });
  if (ranked.size() > k) ranked.resize(k);
  return ranked;
}

RpForest::RpForest(const EmbeddingIndex& index, std::size_t n_trees, std::size_t leaf_size,
                   std::uint64_t seed)
    : index_(index) {
  if (index.items.empty()) throw std::invalid_argument("rp forest: empty index");
  dim_ = index.items[0].vec.size();
  std::vector<std::uint32_t> all(index.items.size());
  for (std::size_t i = 0; i < all.size(); ++i) all[i] = static_cast<std::uint32_t>(i);
  for (std::size_t t = 0; t < n_trees; ++t) {
    Rng rng(Rng::split(seed, "rp-tree-" + std::to_string(t)));
    trees_.emplace_back();
    build(trees_.back(), all, leaf_size, rng);
  }
}

int RpForest::build(std::vector<Node>& tree, std::vector<std::uint32_t> points,
                    std::size_t leaf_size, Rng& rng) {
  const int id = static_cast<int>(tree.size());
  tree.emplace_back();
  if (points.size() <= leaf_size) {
    tree[static_cast<std::size_t>(id)].points = std::move(points);
    return id;
  }
  std::vector<double> plane(dim_);
  for (double& v : plane) v = rng.normal();
  std::vector<double> proj(points.size());
  for (std::size_t i = 0; i < points.size(); ++i) {
    const auto& vec = index_.items[points[i]].vec;
    double s = 0.0;
    for (std::size_t d = 0; d < dim_; ++d) s += plane[d] * vec[d];
    proj[i] = s;
  }
  std::vector<double> sorted = proj;
  std::nth_element(sorted.begin(), sorted.begin() + sorted.size() / 2, sorted.end());
  const double threshold = sorted[sorted.size() / 2];

  std::vector<std::uint32_t> left, right;
  for (std::size_t i = 0; i < points.size(); ++i) {
    (proj[i] < threshold ? left : right).push_back(points[i]);
  }
  if (left.empty() || right.empty()) {
    tree[static_cast<std::size_t>(id)].points = std::move(points);
    return id;
  }
  const int l = build(tree, std::move(left), leaf_size, rng);
  const int r = build(tree, std::move(right), leaf_size, rng);
  tree[static_cast<std::size_t>(id)].plane = std::move(plane);
  tree[static_cast<std::size_t>(id)].threshold = threshold;
  tree[static_cast<std::size_t>(id)].left = l;
  tree[static_cast<std::size_t>(id)].right = r;
  return id;
}

std::vector<RankedItem> RpForest::query(const std::vector<double>& q, std::size_t k) const {
  std::vector<std::uint8_t> seen(index_.items.size(), 0);
  std::vector<std::uint32_t> candidates;
  for (const auto& tree : trees_) {
    int node = 0;
    while (tree[static_cast<std::size_t>(node)].left >= 0) {
      const auto& nd = tree[static_cast<std::size_t>(node)];
      double s = 0.0;
      for (std::size_t d = 0; d < dim_; ++d) s += nd.plane[d] * q[d];
      node = s < nd.threshold ? nd.left : nd.right;
    }
    for (std::uint32_t p : tree[static_cast<std::size_t>(node)].points) {
      if (!seen[p]) {
        seen[p] = 1;
        candidates.push_back(p);
      }
    }
  }
  std::vector<RankedItem> ranked;
  ranked.reserve(candidates.size());
  for (std::uint32_t p : candidates) {
    ranked.push_back({index_.items[p].track_id, loss::cosine_sim(q, index_.items[p].vec)});
  }
  std::sort(ranked.begin(), ranked.end(), [](const RankedItem& a, const RankedItem& b) {
    if (a.score != b.score) return a.score > b.score;
    return a.track_id < b.track_id;
  });
  if (ranked.size() > k) ranked.resize(k);
  return ranked;
}

std::vector<std::int64_t> continue_playlist(const std::vector<std::vector<double>>& seed_vecs,
                                            const EmbeddingIndex& candidates,
                                            const std::set<std::int64_t>& exclude, std::size_t k,
                                            std::size_t per_seed) {
  if (seed_vecs.empty()) throw std::invalid_argument("continue_playlist: no seed tracks");

  EmbeddingIndex filtered;
  for (const auto& item : candidates.items) {
    if (exclude.count(item.track_id) == 0) filtered.items.push_back(item);
  }
  if (filtered.items.empty()) throw std::invalid_argument("continue_playlist: no candidates left");

  struct Agg {
    std::size_t count = 0;
    double sum_sim = 0.0;
  };
  std::map<std::int64_t, Agg> agg;
  for (const auto& seed : seed_vecs) {
    for (const auto& item : knn_cosine(seed, filtered, per_seed)) {
      auto& a = agg[item.track_id];
      ++a.count;
      a.sum_sim += item.score;
    }
  }

  std::vector<std::pair<std::int64_t, Agg>> entries(agg.begin(), agg.end());
  std::sort(entries.begin(), entries.end(), [](const auto& a, const auto& b) {
    if (a.second.count != b.second.count) return a.second.count > b.second.count;
    if (a.second.sum_sim != b.second.sum_sim) return a.second.sum_sim > b.second.sum_sim;
    return a.first < b.first;
  });
  std::vector<std::int64_t> out;
  for (const auto& [id, _] : entries) {
    if (out.size() >= k) break;
    out.push_back(id);
  }
  return out;
}

double ndcg_at_k(const std::vector<std::int64_t>& predicted,
                 const std::set<std::int64_t>& relevant, std::size_t k) {
  if (relevant.empty()) throw std::invalid_argument("ndcg: empty relevant set");
  double dcg = 0.0;
  const std::size_t limit = std::min(k, predicted.size());
  for (std::size_t i = 0; i < limit; ++i) {
    if (relevant.count(predicted[i]) > 0) {
      dcg += 1.0 / std::log2(static_cast<double>(i) + 2.0);
    }
  }
  double idcg = 0.0;
  const std::size_t ideal = std::min(relevant.size(), k);
  for (std::size_t i = 0; i < ideal; ++i) idcg += 1.0 / std::log2(static_cast<double>(i) + 2.0);
  return dcg / idcg;
}

double map_at_k(const std::vector<std::int64_t>& predicted,
                const std::set<std::int64_t>& relevant, std::size_t k) {
  if (relevant.empty()) throw std::invalid_argument("map: empty relevant set");
  double ap = 0.0;
  std::size_t hits = 0;
  const std::size_t limit = std::min(k, predicted.size());
  for (std::size_t i = 0; i < limit; ++i) {
    if (relevant.count(predicted[i]) > 0) {
      ++hits;
      ap += static_cast<double>(hits) / static_cast<double>(i + 1);
    }
  }
  return ap / static_cast<double>(relevant.size());
}

ContinuationResult eval_playlist_continuation(
    const Corpus& corpus, const SplitAssignment& split,
    const std::unordered_map<std::int64_t, std::vector<double>>& embeddings, std::size_t k) {
  EmbeddingIndex candidates;
  for (std::int64_t id : split.test) {
    candidates.items.push_back({id, embeddings.at(id)});
  }

  ContinuationResult result;
  double ndcg_sum = 0.0, map_sum = 0.0;
  for (const auto& pl : corpus.playlists) {
    std::set<std::int64_t> truth;
    std::vector<std::vector<double>> seeds;
    std::set<std::int64_t> seed_ids;
    for (std::int64_t tid : pl.track_ids) {
      if (split.in_test(tid)) {
        truth.insert(tid);
      } else {
        seeds.push_back(embeddings.at(tid));
        seed_ids.insert(tid);
      }
    }
    if (truth.empty()) continue;  // not a qualifying playlist
    if (seeds.empty()) {
      ++result.skipped_no_seed;
      continue;
    }
    const auto predicted = continue_playlist(seeds, candidates, seed_ids, k, k);
    ndcg_sum += ndcg_at_k(predicted, truth, k);
    map_sum += map_at_k(predicted, truth, k);
    ++result.evaluated;
  }
  if (result.evaluated == 0) throw std::runtime_error("no qualifying playlists");
  result.mean_ndcg = ndcg_sum / static_cast<double>(result.evaluated);
  result.mean_map = map_sum / static_cast<double>(result.evaluated);
  return result;
}

ContinuationResult eval_playlist_continuation(enc::Model& model, const Corpus& corpus,
                                              const SplitAssignment& split, std::size_t k) {
  return eval_playlist_continuation(corpus, split, compute_all_embeddings(model, corpus), k);
}

std::unordered_map<std::int64_t, std::vector<double>> make_random_embeddings(
    const std::vector<std::int64_t>& ids, std::size_t dim, std::uint64_t seed) {
  std::unordered_map<std::int64_t, std::vector<double>> out;
  const std::uint64_t base = Rng::split(seed, "random-embeddings");
  for (std::int64_t id : ids) {
    Rng rng(base ^ (static_cast<std::uint64_t>(id) * 0x9e3779b97f4a7c15ULL + 0x2545f4914f6cdd1dULL));
    std::vector<double> v(dim);
    for (double& x : v) x = rng.normal();
    out.emplace(id, std::move(v));
  }
  return out;
}

// ---------------------------------------------------------------------------
// Embedding file

namespace {
constexpr char kEmbMagic[4] = {'T', 'E', 'M', 'B'};
}

void save_embeddings(const std::vector<TrackEmbedding>& embeddings, const std::string& path) {
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw std::runtime_error("cannot write embeddings: " + path);
  out.write(kEmbMagic, 4);
  const std::uint64_t version = 1, count = embeddings.size();
  const std::uint64_t dim = embeddings.empty() ? 0 : embeddings[0].vec.size();
  for (std::uint64_t v : {version, count, dim}) {
    unsigned char buf[8];
    for (int i = 0; i < 8; ++i) buf[i] = static_cast<unsigned char>((v >> (8 * i)) & 0xff);
    out.write(reinterpret_cast<const char*>(buf), 8);
  }
  for (const auto& e : embeddings) {
    const auto id = static_cast<std::uint64_t>(e.track_id);
    unsigned char buf[8];
    for (int i = 0; i < 8; ++i) buf[i] = static_cast<unsigned char>((id >> (8 * i)) & 0xff);
    out.write(reinterpret_cast<const char*>(buf), 8);
    std::vector<float> f(e.vec.begin(), e.vec.end());
    out.write(reinterpret_cast<const char*>(f.data()),
              static_cast<std::streamsize>(f.size() * sizeof(float)));
  }
}

std::vector<TrackEmbedding> load_embeddings(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw std::runtime_error("cannot open embeddings: " + path);
  char magic[4];
  in.read(magic, 4);
  if (!in || std::memcmp(magic, kEmbMagic, 4) != 0) {
    throw std::runtime_error("embeddings file: bad magic");
  }
  auto read_u64 = [&in]() {
    unsigned char buf[8];
    in.read(reinterpret_cast<char*>(buf), 8);
    std::uint64_t v = 0;
    for (int i = 0; i < 8; ++i) v |= static_cast<std::uint64_t>(buf[i]) << (8 * i);
    return v;
  };
  if (read_u64() != 1) throw std::runtime_error("embeddings file: unsupported version");
  const std::uint64_t count = read_u64();
  const std::uint64_t dim = read_u64();
  std::vector<TrackEmbedding> out(count);
  for (auto& e : out) {
    e.track_id = static_cast<std::int64_t>(read_u64());
    std::vector<float> f(dim);
    in.read(reinterpret_cast<char*>(f.data()), static_cast<std::streamsize>(dim * sizeof(float)));
    if (!in) throw std::runtime_error("embeddings file: truncated");
    e.vec.assign(f.begin(), f.end());
  }
  return out;
}

}  // namespace triad::eval
