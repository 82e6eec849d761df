#include "triad/loss.hpp"

#include <cmath>
#include <limits>
#include <stdexcept>
#include <vector>

namespace triad::loss {

double cosine_sim(const double* a, const double* b, std::size_t d) {
  double dot = 0.0, na = 0.0, nb = 0.0;
  for (std::size_t i = 0; i < d; ++i) {
    dot += a[i] * b[i];
    na += a[i] * a[i];
    nb += b[i] * b[i];
  }
  if (na == 0.0 || nb == 0.0) throw std::invalid_argument("cosine_sim: zero-norm input");
  return dot / std::sqrt(na * nb);
}

double cosine_sim(const std::vector<double>& a, const std::vector<double>& b) {
  if (a.size() != b.size()) throw std::invalid_argument("cosine_sim: dimension mismatch");
  return cosine_sim(a.data(), b.data(), a.size());
}

namespace {

struct UnitRows {
  std::vector<double> unit;   // row-normalized copies, [n, d]
  std::vector<double> norms;  // row norms
};

UnitRows normalize_rows(const Tensor& t, const char* what) {
  const std::size_t n = t.dim(0), d = t.dim(1);
  UnitRows out;
  out.unit.resize(n * d);
  out.norms.resize(n);
  for (std::size_t r = 0; r < n; ++r) {
    const double* row = t.data() + r * d;
    double sq = 0.0;
    for (std::size_t i = 0; i < d; ++i) sq += row[i] * row[i];
    if (sq == 0.0) {
      throw std::invalid_argument(std::string("ntxent: zero-norm row in ") + what);
    }
    const double norm = std::sqrt(sq);
    out.norms[r] = norm;
    for (std::size_t i = 0; i < d; ++i) out.unit[r * d + i] = row[i] / norm;
  }
  return out;
}

// Shared forward/backward core. When gradients are requested, accumulates
// d(sim)/d(row) terms through the row normalization.
double ntxent_core(const Tensor& a, const Tensor& b, double tau, bool want_grad,
                   double grad_scale, Tensor* da, Tensor* db) {
  if (a.rank() != 2 || b.rank() != 2 || !a.same_shape(b)) {
    throw std::invalid_argument("ntxent: expected matching [M, D] inputs");
  }
  if (tau <= 0.0) throw std::invalid_argument("ntxent: temperature must be positive");
  const std::size_t m = a.dim(0), d = a.dim(1);

  const UnitRows ua = normalize_rows(a, "anchors");
  const UnitRows ub = normalize_rows(b, "pairs");

  // Candidate pool: rows 0..m-1 are a, rows m..2m-1 are b.
  auto cand_unit = [&](std::size_t k) -> const double* {
    return k < m ? ua.unit.data() + k * d : ub.unit.data() + (k - m) * d;
  };

  double total = 0.0;
  std::vector<double> sims(2 * m), probs(2 * m);

  for (std::size_t i = 0; i < m; ++i) {
    const double* anchor = ua.unit.data() + i * d;
    double max_logit = -std::numeric_limits<double>::infinity();
    for (std::size_t k = 0; k < 2 * m; ++k) {
      if (k == i) continue;
      const double* c = cand_unit(k);
      double dot = 0.0;
      for (std::size_t j = 0; j < d; ++j) dot += anchor[j] * c[j];
      sims[k] = dot;
      max_logit = std::max(max_logit, dot / tau);
    }
    double denom = 0.0;
    for (std::size_t k = 0; k < 2 * m; ++k) {
      if (k == i) continue;
      probs[k] = std::exp(sims[k] / tau - max_logit);
      denom += probs[k];
    }
    const double pos_logit = sims[m + i] / tau - max_logit;
    total += std::log(denom) - pos_logit;

    if (!want_grad) continue;
    for (std::size_t k = 0; k < 2 * m; ++k) {
      if (k == i) continue;
      // d(loss_i)/d(sim_ik)
      double g = probs[k] / denom;
      if (k == m + i) g -= 1.0;
      g *= grad_scale / tau;
      if (g == 0.0) continue;

      const double* c = cand_unit(k);
      const double s = sims[k];
      // d(sim)/d(anchor row) and d(sim)/d(candidate row) via unit vectors.
      double* ga = da->data() + i * d;
      const double inv_na = 1.0 / ua.norms[i];
      for (std::size_t j = 0; j < d; ++j) {
        ga[j] += g * (c[j] - s * anchor[j]) * inv_na;
      }
      double* gc = (k < m) ? da->data() + k * d : db->data() + (k - m) * d;
      const double inv_nc = 1.0 / (k < m ? ua.norms[k] : ub.norms[k - m]);
      for (std::size_t j = 0; j < d; ++j) {
        gc[j] += g * (anchor[j] - s * c[j]) * inv_nc;
      }
    }
  }
  return total;
}

}  // namespace

double ntxent_loss(const Tensor& a, const Tensor& b, double tau) {
  return ntxent_core(a, b, tau, false, 0.0, nullptr, nullptr);
}

double ntxent_loss_backward(const Tensor& a, const Tensor& b, double tau, double grad_scale,
                            Tensor& da, Tensor& db) {
  if (!da.same_shape(a) || !db.same_shape(b)) {
    throw std::invalid_argument("ntxent: gradient tensors must match inputs");
  }
  return ntxent_core(a, b, tau, true, grad_scale, &da, &db);
}

LossReport alignment_loss(const Tensor& phi_a, const Tensor& phi_w, const Tensor& phi_cf,
                          double tau, const AlignmentWeights& weights) {
  LossReport report;
  report.a2g = ntxent_loss(phi_a, phi_w, tau) + ntxent_loss(phi_w, phi_a, tau);
  report.a2p = ntxent_loss(phi_a, phi_cf, tau) + ntxent_loss(phi_cf, phi_a, tau);
  report.g2p = ntxent_loss(phi_w, phi_cf, tau) + ntxent_loss(phi_cf, phi_w, tau);
  report.total = weights.a2g * report.a2g + weights.a2p * report.a2p + weights.g2p * report.g2p;
  return report;
}

}  // namespace triad::loss
