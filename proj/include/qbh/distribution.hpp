#pragma once

#include <cmath>
#include <cstddef>
#include <numeric>
#include <string>
#include <vector>

#include "qbh/error.hpp"

namespace qbh {

/// A discrete probability table over the contiguous integer support
/// [lo, lo + size).  Values outside the support read as zero.
struct Distribution {
  int lo = 0;
  std::vector<double> p;

  Distribution() = default;
  Distribution(int lo_, std::vector<double> p_) : lo(lo_), p(std::move(p_)) {}
  Distribution(int lo_, int hi_) : lo(lo_), p(static_cast<std::size_t>(hi_ - lo_ + 1), 0.0) {}

  int hi() const { return lo + static_cast<int>(p.size()) - 1; }
  std::size_t size() const { return p.size(); }
  bool contains(int d) const { return d >= lo && d <= hi(); }

  double at(int d) const { return contains(d) ? p[static_cast<std::size_t>(d - lo)] : 0.0; }
  double& ref(int d) { return p.at(static_cast<std::size_t>(d - lo)); }

  double sum() const { return std::accumulate(p.begin(), p.end(), 0.0); }

  void normalize() {
    double s = sum();
    if (!(s > 0.0)) throw Error("cannot normalize an all-zero distribution");
    for (double& v : p) v /= s;
  }

  double max() const {
    double m = 0.0;
    for (double v : p) m = std::max(m, v);
    return m;
  }

  bool operator==(const Distribution&) const = default;
};

// Density of a normal evaluated at each integer of [lo, hi], then normalized
// over that range. The density's constant factor cancels in the normalization.
inline Distribution discrete_normal(int lo, int hi, double mean, double sigma) {
  if (!(sigma > 0.0)) throw Error("discrete_normal: sigma must be positive");
  Distribution d(lo, hi);
  for (int x = lo; x <= hi; ++x) {
    double z = (x - mean) / sigma;
    d.ref(x) = std::exp(-0.5 * z * z);
  }
  d.normalize();
  return d;
}

inline Distribution impulse(int lo, int hi, int at = 0) {
  Distribution d(lo, hi);
  d.ref(at) = 1.0;
  return d;
}

inline Distribution uniform(int lo, int hi) {
  Distribution d(lo, hi);
  for (double& v : d.p) v = 1.0 / static_cast<double>(d.size());
  return d;
}

/// Throws unless every entry is non-negative and the total is within `tol` of 1.
inline void validate_distribution(const Distribution& d, double tol, const std::string& what) {
  if (d.p.empty()) throw Error(what + ": empty distribution");
  for (double v : d.p) {
    if (!(v >= 0.0) || !std::isfinite(v)) throw Error(what + ": negative or non-finite probability");
  }
  if (std::abs(d.sum() - 1.0) > tol) throw Error(what + ": probabilities do not sum to 1");
}

inline double l1_distance(const Distribution& a, const Distribution& b) {
  int lo = std::min(a.lo, b.lo);
  int hi = std::max(a.hi(), b.hi());
  double s = 0.0;
  for (int x = lo; x <= hi; ++x) s += std::abs(a.at(x) - b.at(x));
  return s;
}

inline double mean(const Distribution& d) {
  double m = 0.0;
  for (int x = d.lo; x <= d.hi(); ++x) m += x * d.at(x);
  return m;
}

inline double variance(const Distribution& d) {
  double m = mean(d);
  double v = 0.0;
  for (int x = d.lo; x <= d.hi(); ++x) v += (x - m) * (x - m) * d.at(x);
  return v;
}

}  // namespace qbh
