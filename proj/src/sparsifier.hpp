#pragma once

#include <cstdint>
#include <functional>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include "scoring.hpp"
#include "units.hpp"

namespace stark {

// Units removed per kind at fraction s: round-half-away-from-zero of s * N.
std::size_t removal_count(double s, std::size_t n);

// Removes the round(s * N) lowest-ranked units of every kind in the report.
SparsityMask rank_mask(const ScoreReport& report, double s);

// Uniform sample without replacement of round(s * N) units per kind.
SparsityMask random_mask(std::span<const UnitId> units, double s, std::uint64_t seed);

struct DensityProfile {
  std::vector<double> edges;       // bins + 1
  std::vector<double> raw_mass;    // histogram probability per bin
  std::vector<double> density;     // smoothed, integrates to 1
  std::vector<double> cumulative;  // at each bin's right edge; ends at 1
  std::size_t window = 3;
  bool degenerate = false;  // all scores identical: a single bin

  std::size_t bins() const { return density.size(); }
  double width() const { return edges.size() > 1 ? edges[1] - edges[0] : 0.0; }
  double center(std::size_t b) const { return 0.5 * (edges[b] + edges[b + 1]); }
  // Cumulative density at the center of bin b.
  double cumulative_at_center(std::size_t b) const;
};

// Histogram over [min, max] smoothed by a centred moving average of `window`
// bins (truncated at the ends, then renormalized).
DensityProfile density_profile(std::span<const double> scores, std::size_t bins, std::size_t window = 3);
// Same over an explicit range; scores outside it are clamped into the end bins.
DensityProfile density_profile(std::span<const double> scores, std::size_t bins, std::size_t window,
                               double lo, double hi);

struct AutoEstimate {
  bool fallback = true;  // no usable peak; run the grid instead
  std::string reason;
  double sparsity = 0.0;
  std::size_t peak_bin = 0;
  double peak_center = 0.0;
  double peak_mass = 0.0;  // raw probability mass of the peak bin
};

// Index of the first strict local maximum of the smoothed density. The
// leftmost bin counts if it exceeds its right neighbour. A monotone density
// has no peak.
std::optional<std::size_t> first_peak(const DensityProfile& profile);

// Cumulative density at the first peak's centre, clamped to [lo, hi].
AutoEstimate auto_sparsity(const DensityProfile& profile, double lo, double hi);

struct GridPoint {
  double sparsity = 0.0;
  bool ok = false;
  double metric = 0.0;
  std::string error;
};

struct SearchResult {
  double best_sparsity = 0.0;
  double best_metric = 0.0;
  std::size_t best_index = 0;
  std::vector<GridPoint> table;  // grid order
};

// Evaluates every grid point. Failures are recorded and skipped; ties go to
// the higher sparsity. Throws a stage error when nothing succeeds.
SearchResult search(std::span<const double> grid, const std::function<double(double)>& evaluate);

}  // namespace stark
