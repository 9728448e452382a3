#pragma once

// Straight-line reference implementations of the loss terms. Plain loops over
// doubles, no tape and no shared code with the library path.

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <vector>

namespace mcl::tsupport {

// f[b][n][k], groups[i] = channel list, masks[b][i][j] in {0,1}
using Feat = std::vector<std::vector<std::vector<double>>>;

inline double oracle_g(const Feat& f, std::size_t b, const std::vector<std::size_t>& group,
                       const std::vector<int>& mask, bool average_pool) {
  const std::size_t K = f[b][0].size();
  double total = 0.0;
  for (std::size_t k = 0; k < K; ++k) {
    double pooled = average_pool ? 0.0 : -INFINITY;
    for (std::size_t j = 0; j < group.size(); ++j) {
      const double v = mask[j] * f[b][group[j]][k];
      if (average_pool)
        pooled += v / static_cast<double>(group.size());
      else
        pooled = std::max(pooled, v);
    }
    total += pooled;
  }
  return total / static_cast<double>(K);
}

inline double oracle_dis(const Feat& f, const std::vector<std::size_t>& labels,
                         const std::vector<std::vector<std::size_t>>& groups,
                         const std::vector<std::vector<std::vector<int>>>& masks, bool average_pool = false) {
  double loss = 0.0;
  for (std::size_t b = 0; b < f.size(); ++b) {
    std::vector<double> g;
    for (std::size_t i = 0; i < groups.size(); ++i) g.push_back(oracle_g(f, b, groups[i], masks[b][i], average_pool));
    double z = 0.0;
    for (double v : g) z += std::exp(v);
    loss += -std::log(std::exp(g[labels[b]]) / z);
  }
  return loss / static_cast<double>(f.size());
}

inline double oracle_h(const std::vector<std::vector<double>>& channels) {
  const std::size_t K = channels[0].size();
  std::vector<std::vector<double>> sm;
  for (const auto& c : channels) {
    double z = 0.0;
    for (double v : c) z += std::exp(v);
    std::vector<double> p;
    for (double v : c) p.push_back(std::exp(v) / z);
    sm.push_back(p);
  }
  double h = 0.0;
  for (std::size_t k = 0; k < K; ++k) {
    double m = 0.0;
    for (const auto& p : sm) m = std::max(m, p[k]);
    h += m;
  }
  return h;
}

inline double oracle_div_full(const Feat& f, const std::vector<std::vector<std::size_t>>& groups) {
  double total = 0.0;
  for (const auto& sample : f) {
    double per = 0.0;
    for (const auto& g : groups) {
      std::vector<std::vector<double>> ch;
      for (auto n : g) ch.push_back(sample[n]);
      per += oracle_h(ch);
    }
    total += per / static_cast<double>(groups.size());
  }
  return total / static_cast<double>(f.size());
}

using Mat = std::vector<std::vector<double>>;

// W[i] = rows of the samples of class i
inline double oracle_intra(const std::vector<Mat>& W) {
  double total = 0.0;
  for (const auto& wi : W)
    for (std::size_t k = 0; k < wi[0].size(); ++k) {
      double m = wi[0][k];
      for (const auto& row : wi) m = std::max(m, row[k]);
      total += m;
    }
  return total / static_cast<double>(W.size());
}

inline double oracle_inter(const std::vector<Mat>& W) {
  double total = 0.0;
  for (std::size_t k = 0; k < W[0][0].size(); ++k) {
    double m = W[0][0][k];
    for (const auto& wi : W)
      for (const auto& row : wi) m = std::max(m, row[k]);
    total += m;
  }
  return -total;
}

inline double oracle_ce(const Mat& logits, const std::vector<std::size_t>& labels) {
  double total = 0.0;
  for (std::size_t b = 0; b < logits.size(); ++b) {
    double z = 0.0;
    for (double v : logits[b]) z += std::exp(v);
    total += std::log(z) - logits[b][labels[b]];
  }
  return total / static_cast<double>(logits.size());
}

// sigmoid(A2 relu(A1 x + b1) + b2), matrices row-major as nested vectors
inline std::vector<double> oracle_se(const std::vector<double>& x, const Mat& a1, const std::vector<double>& b1,
                                     const Mat& a2, const std::vector<double>& b2) {
  std::vector<double> h(a1.size());
  for (std::size_t i = 0; i < a1.size(); ++i) {
    double s = b1[i];
    for (std::size_t j = 0; j < x.size(); ++j) s += a1[i][j] * x[j];
    h[i] = std::max(0.0, s);
  }
  std::vector<double> w(a2.size());
  for (std::size_t i = 0; i < a2.size(); ++i) {
    double s = b2[i];
    for (std::size_t j = 0; j < h.size(); ++j) s += a2[i][j] * h[j];
    w[i] = 1.0 / (1.0 + std::exp(-s));
  }
  return w;
}

}  // namespace mcl::tsupport
