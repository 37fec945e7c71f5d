#pragma once

// Independent reference computations used by the unit and acceptance suites.
// Nothing here calls into the code under test beyond reading plain data.

#include <algorithm>
#include <array>
#include <cmath>
#include <map>
#include <set>
#include <tuple>
#include <utility>
#include <vector>

#include "gufu/graph/signal_graph.hpp"
#include "gufu/numerics/params.hpp"
#include "gufu/numerics/tape.hpp"

namespace oracle {

using Vec = std::vector<double>;
using Mat = std::vector<Vec>;

struct GradCheck {
  double max_rel = 0.0;
  std::size_t checked = 0;
};

/// Central differences over every entry of every parameter in `params`.
/// The relative error denominator is max(|analytic|, |numeric|, 1e-6).
template <class Build>
GradCheck grad_check(gufu::ParamSet& params, Build build, double h = 1e-5) {
  params.zero_grad();
  {
    gufu::Tape t;
    gufu::Var loss = build(t);
    t.backward(loss);
  }
  std::vector<gufu::Matrix> analytic;
  for (const auto& e : params.entries()) analytic.push_back(e.grad);
  params.zero_grad();

  auto eval = [&] {
    gufu::Tape t;
    return t.scalar(build(t));
  };
  GradCheck out;
  for (std::size_t k = 0; k < params.entries().size(); ++k) {
    auto values = params.entries()[k].value.values();
    auto grads = analytic[k].values();
    for (std::size_t i = 0; i < values.size(); ++i) {
      const double keep = values[i];
      values[i] = keep + h;
      const double up = eval();
      values[i] = keep - h;
      const double down = eval();
      values[i] = keep;
      const double numeric = (up - down) / (2.0 * h);
      const double denom = std::max({std::abs(grads[i]), std::abs(numeric), 1e-6});
      out.max_rel = std::max(out.max_rel, std::abs(grads[i] - numeric) / denom);
      ++out.checked;
    }
  }
  return out;
}

inline Mat to_mat(const gufu::Matrix& m) {
  Mat out(m.rows(), Vec(m.cols()));
  for (std::size_t i = 0; i < m.rows(); ++i)
    for (std::size_t j = 0; j < m.cols(); ++j) out[i][j] = m(i, j);
  return out;
}

inline Vec vec_times_mat(const Vec& x, const Mat& w) {
  Vec out(w[0].size(), 0.0);
  for (std::size_t i = 0; i < x.size(); ++i)
    for (std::size_t j = 0; j < out.size(); ++j) out[j] += x[i] * w[i][j];
  return out;
}

inline Vec concat(std::initializer_list<Vec> parts) {
  Vec out;
  for (const auto& p : parts) out.insert(out.end(), p.begin(), p.end());
  return out;
}

inline Vec relu(Vec v) {
  for (double& x : v) x = x > 0.0 ? x : 0.0;
  return v;
}

inline Vec unit(Vec v) {
  double s = 0.0;
  for (double x : v) s += x * x;
  if (s == 0.0) return v;
  s = std::sqrt(s);
  for (double& x : v) x /= s;
  return v;
}

/// Plain-loop layered aggregation. `real` and `virt` hold node-index pairs;
/// weights[l] = {W0, W1, W2}. Returns the final node embeddings.
inline Mat reference_aggregate(Mat z, const std::vector<std::pair<int, int>>& real,
                               const std::vector<std::pair<int, int>>& virt,
                               const std::vector<std::array<Mat, 3>>& weights) {
  std::vector<std::pair<int, int>> all = real;
  all.insert(all.end(), virt.begin(), virt.end());
  Mat e;
  for (auto [a, b] : all) {
    Vec m(z[a].size());
    for (std::size_t d = 0; d < m.size(); ++d) m[d] = 0.5 * (z[a][d] + z[b][d]);
    e.push_back(m);
  }
  for (std::size_t l = 0; l < weights.size(); ++l) {
    const bool last = l + 1 == weights.size();
    const auto& [w0, w1, w2] = weights[l];
    Mat next(z.size());
    for (std::size_t v = 0; v < z.size(); ++v) {
      Vec agg(z[v].size(), 0.0);
      int count = 0;
      for (std::size_t k = 0; k < all.size(); ++k) {
        int other = -1;
        if (all[k].first == static_cast<int>(v)) other = all[k].second;
        if (all[k].second == static_cast<int>(v)) other = all[k].first;
        if (other < 0) continue;
        const Vec msg = relu(vec_times_mat(concat({e[k], z[other]}), w0));
        for (std::size_t d = 0; d < agg.size(); ++d) agg[d] += msg[d];
        ++count;
      }
      if (count > 0)
        for (double& x : agg) x /= count;
      Vec h = vec_times_mat(concat({z[v], agg}), w1);
      next[v] = unit(last ? h : relu(h));
    }
    z = next;
    for (std::size_t k = 0; k < real.size(); ++k) {
      Vec h = vec_times_mat(concat({z[real[k].first], e[k], z[real[k].second]}), w2);
      e[k] = unit(last ? h : relu(h));
    }
  }
  return z;
}

struct TrustResult {
  std::map<gufu::NodeId, Vec> g;
  std::map<gufu::NodeId, Vec> f;
  int iterations = 0;
  bool converged = false;
};

/// Goodness/fairness by direct transcription of the update equations, over
/// the graph's real edges (weight / max weight) and virtual edges (weight 1).
inline TrustResult trust_fixed_point(const gufu::SignalGraph& graph,
                                     const std::map<gufu::NodeId, Vec>& init, double eps,
                                     int max_iter) {
  double w_max = 0.0;
  for (const auto& e : graph.edges()) w_max = std::max(w_max, e.weight);
  std::map<gufu::NodeId, std::vector<std::pair<gufu::NodeId, double>>> nb;
  for (const auto& e : graph.edges()) {
    nb[e.sample].push_back({e.ap, e.weight / w_max});
    nb[e.ap].push_back({e.sample, e.weight / w_max});
  }
  for (const auto& e : graph.virtual_edges()) {
    nb[e.a].push_back({e.b, 1.0});
    nb[e.b].push_back({e.a, 1.0});
  }
  TrustResult r;
  r.g = init;
  r.f = init;
  for (int it = 1; it <= max_iter; ++it) {
    auto g2 = r.g;
    for (auto& [v, gv] : g2) {
      if (!nb.contains(v)) continue;
      const auto& n = nb.at(v);
      for (std::size_t i = 0; i < gv.size(); ++i) {
        double s = 0.0;
        for (auto [u, w] : n) s += r.f.at(u)[i] * w;
        gv[i] = s / static_cast<double>(n.size());
      }
    }
    auto f2 = r.f;
    for (auto& [v, fv] : f2) {
      if (!nb.contains(v)) continue;
      const auto& n = nb.at(v);
      for (std::size_t i = 0; i < fv.size(); ++i) {
        double s = 0.0;
        for (auto [u, w] : n) s += std::abs(w - g2.at(u)[i]);
        fv[i] = 1.0 - s / (2.0 * static_cast<double>(n.size()));
      }
    }
    double dg = 0.0, df = 0.0;
    for (const auto& [v, gv] : g2) {
      double a = 0.0, b = 0.0;
      for (std::size_t i = 0; i < gv.size(); ++i) {
        a += std::pow(gv[i] - r.g.at(v)[i], 2);
        b += std::pow(f2.at(v)[i] - r.f.at(v)[i], 2);
      }
      dg += std::sqrt(a);
      df += std::sqrt(b);
    }
    r.g = std::move(g2);
    r.f = std::move(f2);
    r.iterations = it;
    if (dg <= eps && df <= eps) {
      r.converged = true;
      break;
    }
  }
  return r;
}

/// Unordered sample pairs with cosine similarity above sigma, by direct pairwise loop.
inline std::set<std::pair<gufu::NodeId, gufu::NodeId>> brute_force_virtual(
    const gufu::SignalGraph& g, double sigma) {
  std::set<std::pair<gufu::NodeId, gufu::NodeId>> out;
  const auto& s = g.samples();
  for (std::size_t i = 0; i < s.size(); ++i)
    for (std::size_t j = i + 1; j < s.size(); ++j) {
      double dot = 0.0, na = 0.0, nb = 0.0;
      for (std::size_t k = 0; k < s[i].feature.size(); ++k) {
        dot += s[i].feature[k] * s[j].feature[k];
        na += s[i].feature[k] * s[i].feature[k];
        nb += s[j].feature[k] * s[j].feature[k];
      }
      if (na == 0.0 || nb == 0.0) continue;
      if (dot / std::sqrt(na * nb) > sigma)
        out.insert({std::min(s[i].id, s[j].id), std::max(s[i].id, s[j].id)});
    }
  return out;
}

/// (AP s, sample v) with s-u real and u-v virtual, by triple loop over node ids.
inline std::set<std::pair<gufu::NodeId, gufu::NodeId>> brute_force_candidates(
    const gufu::SignalGraph& g) {
  std::set<std::pair<gufu::NodeId, gufu::NodeId>> out;
  auto virt = [&](gufu::NodeId a, gufu::NodeId b) {
    for (const auto& e : g.virtual_edges())
      if ((e.a == a && e.b == b) || (e.a == b && e.b == a)) return true;
    return false;
  };
  for (const auto& s : g.aps())
    for (const auto& u : g.samples())
      for (const auto& v : g.samples())
        if (u.id != v.id && g.has_edge(u.id, s.id) && virt(u.id, v.id)) out.insert({s.id, v.id});
  return out;
}

/// Deterministic pseudo-random value in [-1, 1] for pinned weights.
inline double pinned(std::size_t a, std::size_t b, std::size_t c) {
  return std::sin(0.7 * static_cast<double>(a) + 1.3 * static_cast<double>(b) +
                  0.37 * static_cast<double>(c) + 0.11);
}

}  // namespace oracle
