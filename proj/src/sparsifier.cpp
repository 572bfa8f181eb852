#include "sparsifier.hpp"

#include <algorithm>
#include <cmath>
#include <map>
#include <numeric>

#include "error.hpp"
#include "rng.hpp"

namespace stark {

namespace {

void check_fraction(double s) {
  if (!(s >= 0.0 && s < 1.0)) fail(ErrorCode::parameter, "sparsity must lie in [0, 1)");
}

MaskKind mask_kind_for(const std::vector<UnitId>& removed, std::span<const UnitId> domain) {
  auto is_param = [](const UnitId& u) { return u.kind == UnitKind::parameter; };
  if (!removed.empty()) return is_param(removed.front()) ? MaskKind::unstructured : MaskKind::structured;
  return !domain.empty() && is_param(domain.front()) ? MaskKind::unstructured : MaskKind::structured;
}

}  // namespace

std::size_t removal_count(double s, std::size_t n) {
  check_fraction(s);
  return static_cast<std::size_t>(std::lround(s * static_cast<double>(n)));
}

SparsityMask rank_mask(const ScoreReport& report, double s) {
  check_fraction(s);
  SparsityMask m;
  m.sparsity = s;
  m.provenance.source = MaskProvenance::Source::ranked;
  m.provenance.lambda = report.lambda;
  std::vector<UnitId> domain;
  for (UnitKind kind : {UnitKind::head, UnitKind::neuron, UnitKind::parameter}) {
    const auto entries = report.of_kind(kind);
    const std::size_t cut = removal_count(s, entries.size());
    for (const ScoreEntry* e : entries) {
      if (e->rank < cut) m.removed.push_back(e->unit);
      if (domain.empty()) domain.push_back(e->unit);
    }
  }
  std::sort(m.removed.begin(), m.removed.end());
  m.kind = mask_kind_for(m.removed, domain);
  return m;
}

SparsityMask random_mask(std::span<const UnitId> units, double s, std::uint64_t seed) {
  check_fraction(s);
  std::map<UnitKind, std::vector<UnitId>> by_kind;
  for (const UnitId& u : units) by_kind[u.kind].push_back(u);
  SparsityMask m;
  m.sparsity = s;
  m.provenance.source = MaskProvenance::Source::random;
  m.provenance.seed = seed;
  Rng rng(seed);
  for (auto& [kind, list] : by_kind) {
    std::sort(list.begin(), list.end());
    const std::size_t k = removal_count(s, list.size());
    // Partial Fisher-Yates: the first k slots are a uniform k-subset.
    for (std::size_t i = 0; i < k; ++i) {
      const std::size_t j = i + static_cast<std::size_t>(rng.below(list.size() - i));
      std::swap(list[i], list[j]);
      m.removed.push_back(list[i]);
    }
  }
  std::sort(m.removed.begin(), m.removed.end());
  m.removed.erase(std::unique(m.removed.begin(), m.removed.end()), m.removed.end());
  m.kind = mask_kind_for(m.removed, units);
  return m;
}

// ---- density ---------------------------------------------------------------------

double DensityProfile::cumulative_at_center(std::size_t b) const {
  const double before = b == 0 ? 0.0 : cumulative[b - 1];
  return before + 0.5 * (cumulative[b] - before);
}

DensityProfile density_profile(std::span<const double> scores, std::size_t bins, std::size_t window) {
  if (scores.empty()) fail(ErrorCode::input, "density of an empty score set");
  const auto [lo, hi] = std::minmax_element(scores.begin(), scores.end());
  return density_profile(scores, bins, window, *lo, *hi);
}

DensityProfile density_profile(std::span<const double> scores, std::size_t bins, std::size_t window,
                               double lo, double hi) {
  if (scores.empty()) fail(ErrorCode::input, "density of an empty score set");
  if (bins < 2) fail(ErrorCode::parameter, "density needs at least 2 bins");
  if (window == 0 || window % 2 == 0) fail(ErrorCode::parameter, "smoothing window must be odd");
  if (!(hi >= lo)) fail(ErrorCode::parameter, "density range is empty");
  DensityProfile p;
  p.window = window;
  if (hi == lo) {
    p.degenerate = true;
    p.edges = {lo, hi};
    p.raw_mass = {1.0};
    p.density = {1.0};
    p.cumulative = {1.0};
    return p;
  }
  const double width = (hi - lo) / static_cast<double>(bins);
  p.edges.resize(bins + 1);
  for (std::size_t b = 0; b <= bins; ++b) p.edges[b] = lo + width * static_cast<double>(b);
  p.edges[bins] = hi;

  const double n = static_cast<double>(scores.size());
  p.raw_mass.assign(bins, 0.0);
  for (double x : scores) {
    double pos = std::floor((x - lo) / width);
    pos = std::clamp(pos, 0.0, static_cast<double>(bins - 1));
    p.raw_mass[static_cast<std::size_t>(pos)] += 1.0 / n;
  }

  const std::size_t half = window / 2;
  p.density.assign(bins, 0.0);
  double total = 0.0;
  for (std::size_t b = 0; b < bins; ++b) {
    const std::size_t from = b >= half ? b - half : 0;
    const std::size_t to = std::min(bins - 1, b + half);
    double s = 0.0;
    for (std::size_t j = from; j <= to; ++j) s += p.raw_mass[j];
    p.density[b] = s / static_cast<double>(to - from + 1);
    total += p.density[b];
  }
  for (double& d : p.density) d /= total * width;

  p.cumulative.assign(bins, 0.0);
  double c = 0.0;
  for (std::size_t b = 0; b < bins; ++b) {
    c += p.density[b] * width;
    p.cumulative[b] = c;
  }
  // Remove accumulated rounding so the last value is exactly 1.
  for (double& v : p.cumulative) v /= c;
  return p;
}

std::optional<std::size_t> first_peak(const DensityProfile& profile) {
  const auto& d = profile.density;
  if (profile.degenerate || d.size() < 2) return std::nullopt;
  const bool nonincreasing = std::is_sorted(d.rbegin(), d.rend());
  const bool nondecreasing = std::is_sorted(d.begin(), d.end());
  if (nonincreasing || nondecreasing) return std::nullopt;
  if (d[0] > d[1]) return 0;
  for (std::size_t b = 1; b + 1 < d.size(); ++b) {
    if (d[b] > d[b - 1] && d[b] > d[b + 1]) return b;
  }
  return std::nullopt;
}

AutoEstimate auto_sparsity(const DensityProfile& profile, double lo, double hi) {
  AutoEstimate est;
  if (profile.degenerate) {
    est.reason = "all scores identical";
    return est;
  }
  const auto peak = first_peak(profile);
  if (!peak) {
    est.reason = "density has no interior peak (monotone or flat)";
    return est;
  }
  est.fallback = false;
  est.peak_bin = *peak;
  est.peak_center = profile.center(*peak);
  est.peak_mass = profile.raw_mass[*peak];
  est.sparsity = std::clamp(profile.cumulative_at_center(*peak), lo, hi);
  return est;
}

// ---- grid search -----------------------------------------------------------------------

SearchResult search(std::span<const double> grid, const std::function<double(double)>& evaluate) {
  if (grid.empty()) fail(ErrorCode::config, "search grid is empty");
  SearchResult r;
  bool any = false;
  for (std::size_t i = 0; i < grid.size(); ++i) {
    const double s = grid[i];
    if (!(s > 0.0 && s < 1.0)) fail(ErrorCode::config, "grid values must lie in (0, 1)");
    GridPoint pt;
    pt.sparsity = s;
    try {
      pt.metric = evaluate(s);
      pt.ok = true;
    } catch (const Error& e) {
      pt.error = e.what();
    }
    if (pt.ok && (!any || pt.metric >= r.best_metric)) {
      any = true;
      r.best_metric = pt.metric;
      r.best_sparsity = s;
      r.best_index = i;
    }
    r.table.push_back(std::move(pt));
  }
  if (!any) fail(ErrorCode::stage, "every grid point failed");
  return r;
}

}  // namespace stark
