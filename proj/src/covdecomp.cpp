#include "rgwsaw/covdecomp.hpp"

#include <algorithm>
#include <charconv>
#include <cmath>
#include <functional>
#include <istream>
#include <limits>
#include <ostream>
#include <sstream>

#include "rgwsaw/format.hpp"

namespace rgwsaw::covdecomp {

Fixed to_fixed(long double v) {
  return static_cast<Fixed>(std::roundl(std::ldexp(v, kFixedFractionBits)));
}

double from_fixed(Fixed f) {
  return static_cast<double>(std::ldexp(static_cast<long double>(f), -kFixedFractionBits));
}

namespace {

constexpr int kKeyBits = 10;

std::uint64_t pack(const Site& canon) {
  std::uint64_t key = 0;
  for (int i = 0; i < canon.dim(); ++i) {
    key = (key << kKeyBits) | static_cast<std::uint64_t>(canon[i]);
  }
  return key;
}

std::uint64_t factorial(int n) {
  std::uint64_t f = 1;
  for (int i = 2; i <= n; ++i) f *= static_cast<std::uint64_t>(i);
  return f;
}

std::uint64_t permutation_count(const Site& canon) {
  std::uint64_t denom = 1;
  int run = 1;
  for (int i = 1; i <= canon.dim(); ++i) {
    if (i < canon.dim() && canon[i] == canon[i - 1]) {
      ++run;
    } else {
      denom *= factorial(run);
      run = 1;
    }
  }
  return factorial(canon.dim()) / denom;
}

// Descending tuples, each entry <= cap, entry sum <= budget.
void enumerate_descending(int d, int cap, long budget, std::vector<Site>& out) {
  std::vector<int> cur(static_cast<std::size_t>(d), 0);
  std::function<void(int, int, long)> rec = [&](int i, int hi, long left) {
    if (i == d) {
      out.emplace_back(std::span<const int>(cur));
      return;
    }
    const int top = static_cast<int>(std::min<long>(hi, left));
    for (int v = 0; v <= top; ++v) {
      cur[static_cast<std::size_t>(i)] = v;
      rec(i + 1, v, left - v);
    }
  };
  rec(0, cap, budget);
}

}  // namespace

Site SymmetricDomain::canonical(const Displacement& x, std::optional<int> side) {
  std::vector<int> a;
  for (int i = 0; i < x.dim(); ++i) {
    int v = x[i];
    if (side) {
      v %= *side;
      if (v < 0) v += *side;
      if (2 * v > *side) v = *side - v;
    }
    a.push_back(std::abs(v));
  }
  std::sort(a.begin(), a.end(), std::greater<>());
  return Site(std::span<const int>(a));
}

std::shared_ptr<const SymmetricDomain> SymmetricDomain::l1_ball(int d, int radius) {
  if (d < 1 || d > kMaxDim) throw std::invalid_argument("dimension out of range");
  if (radius < 0 || radius >= (1 << kKeyBits)) {
    throw std::invalid_argument("ball radius out of range [0, 1023]");
  }
  std::shared_ptr<SymmetricDomain> dom(new SymmetricDomain());
  dom->d_ = d;
  dom->radius_ = radius;
  enumerate_descending(d, radius, radius, dom->reps_);
  std::stable_sort(dom->reps_.begin(), dom->reps_.end(),
                   [](const Site& a, const Site& b) { return a.l1() < b.l1(); });
  for (const Site& s : dom->reps_) {
    int nonzero = 0;
    for (int i = 0; i < d; ++i) nonzero += s[i] != 0;
    dom->orbit_.push_back(permutation_count(s) << nonzero);
  }
  dom->index();
  return dom;
}

std::shared_ptr<const SymmetricDomain> SymmetricDomain::torus_box(int d, int side) {
  if (d < 1 || d > kMaxDim) throw std::invalid_argument("dimension out of range");
  if (side < 2 || side / 2 >= (1 << kKeyBits)) throw std::invalid_argument("torus side out of range");
  std::shared_ptr<SymmetricDomain> dom(new SymmetricDomain());
  dom->d_ = d;
  dom->side_ = side;
  enumerate_descending(d, side / 2, static_cast<long>(d) * (side / 2), dom->reps_);
  std::stable_sort(dom->reps_.begin(), dom->reps_.end(),
                   [](const Site& a, const Site& b) { return a.l1() < b.l1(); });
  for (const Site& s : dom->reps_) {
    int flippable = 0;
    for (int i = 0; i < d; ++i) flippable += s[i] != 0 && 2 * s[i] != side;
    dom->orbit_.push_back(permutation_count(s) << flippable);
  }
  dom->index();
  return dom;
}

void SymmetricDomain::index() {
  for (std::size_t i = 0; i < reps_.size(); ++i) lookup_.emplace(pack(reps_[i]), i);
}

std::optional<std::size_t> SymmetricDomain::find(const Displacement& x) const {
  if (x.dim() != d_) throw std::invalid_argument("displacement dimension mismatch");
  const Site c = canonical(x, side_);
  if (!side_ && c.l1() > radius_) return std::nullopt;
  auto it = lookup_.find(pack(c));
  if (it == lookup_.end()) return std::nullopt;
  return it->second;
}

std::size_t SymmetricDomain::count_within(long l1) const {
  auto it = std::upper_bound(reps_.begin(), reps_.end(), l1,
                             [](long v, const Site& s) { return v < s.l1(); });
  return static_cast<std::size_t>(it - reps_.begin());
}

// ---------------------------------------------------------------------------
// Walk counts

long double WalkCountTable::count(const Displacement& x) const {
  auto i = domain->find(x);
  return i ? counts[*i] : 0.0L;
}

std::optional<unsigned __int128> WalkCountTable::exact_count(const Displacement& x) const {
  if (!exact) return std::nullopt;
  auto i = domain->find(x);
  return i ? exact_counts[*i] : static_cast<unsigned __int128>(0);
}

long double WalkCountTable::total() const {
  long double s = 0.0L;
  for (std::size_t i = 0; i < counts.size(); ++i) {
    s += counts[i] * static_cast<long double>(domain->orbit_size(i));
  }
  return s;
}

WalkCounter::WalkCounter(int d, int n_max, CountOptions opts)
    : d_(d), n_max_(n_max), opts_(opts) {
  if (n_max < 0 || n_max > kMaxWalkSteps) {
    throw std::invalid_argument("walk_counts: n_max must lie in [0, 128]");
  }
  table_.domain = SymmetricDomain::l1_ball(d, n_max);
  const auto& dom = *table_.domain;
  const std::size_t n = dom.size();
  neighbours_.assign(n * 2 * static_cast<std::size_t>(d), -1);
  for (std::size_t i = 0; i < n; ++i) {
    const Site& rep = dom.representative(i);
    for (int axis = 0; axis < d; ++axis) {
      for (int s = 0; s < 2; ++s) {
        Site y = rep;
        y[axis] += s ? -1 : 1;
        if (auto k = dom.find(y)) {
          neighbours_[i * 2 * d + 2 * axis + s] = static_cast<std::int32_t>(*k);
        }
      }
    }
  }
  table_.n = 0;
  table_.exact = true;
  table_.exact_counts.assign(n, 0);
  table_.counts.assign(n, 0.0L);
  table_.exact_counts[0] = 1;  // representative 0 is the origin
  table_.counts[0] = 1.0L;
}

bool WalkCounter::advance() {
  if (table_.n >= n_max_) return false;
  const auto& dom = *table_.domain;
  const std::size_t active = dom.count_within(table_.n + 1);
  const int fan = 2 * d_;
  const int parity = (table_.n + 1) % 2;
  std::vector<long double> next(table_.counts.size(), 0.0L);
  std::vector<unsigned __int128> next_exact;
  bool exact = table_.exact;
  if (exact) next_exact.assign(table_.counts.size(), 0);
  for (std::size_t i = 0; i < active; ++i) {
    if (dom.representative(i).l1() % 2 != parity) continue;
    long double acc = 0.0L;
    unsigned __int128 acc_exact = 0;
    for (int e = 0; e < fan; ++e) {
      const std::int32_t k = neighbours_[i * fan + e];
      if (k < 0) continue;
      acc += table_.counts[static_cast<std::size_t>(k)];
      if (exact && __builtin_add_overflow(acc_exact, table_.exact_counts[static_cast<std::size_t>(k)],
                                          &acc_exact)) {
        if (!opts_.allow_float_fallback) {
          throw OverflowError("walk count J^" + std::to_string(table_.n + 1) +
                              " exceeds 128-bit exact range");
        }
        exact = false;
      }
    }
    next[i] = acc;
    if (exact) next_exact[i] = acc_exact;
  }
  if (exact) {
    // Exact values are authoritative; the long double copy is their rounding.
    for (std::size_t i = 0; i < active; ++i) next[i] = static_cast<long double>(next_exact[i]);
    table_.exact_counts = std::move(next_exact);
  } else {
    table_.exact_counts.clear();
  }
  table_.exact = exact;
  table_.counts = std::move(next);
  ++table_.n;
  return true;
}

std::vector<WalkCountTable> walk_counts(int d, int n_max, CountOptions opts) {
  WalkCounter counter(d, n_max, opts);
  std::vector<WalkCountTable> out;
  out.reserve(static_cast<std::size_t>(n_max) + 1);
  out.push_back(counter.table());
  while (counter.advance()) out.push_back(counter.table());
  return out;
}

// ---------------------------------------------------------------------------
// Tables

double DisplacementTable::at(const Displacement& x) const {
  auto i = domain->find(x);
  return i ? values[*i] : 0.0;
}

std::optional<Fixed> DisplacementTable::exact_at(const Displacement& x) const {
  if (exact.empty()) return std::nullopt;
  auto i = domain->find(x);
  return i ? exact[*i] : Fixed{0};
}

double DisplacementTable::lattice_sum() const {
  double s = 0.0;
  for (std::size_t i = 0; i < values.size(); ++i) {
    s += values[i] * static_cast<double>(domain->orbit_size(i));
  }
  return s;
}

double DisplacementTable::lattice_sum_of_squares() const {
  double s = 0.0;
  for (std::size_t i = 0; i < values.size(); ++i) {
    s += values[i] * values[i] * static_cast<double>(domain->orbit_size(i));
  }
  return s;
}

int range_radius(int L, int j) {
  if (L < 1 || j < 0) throw std::invalid_argument("range_radius: invalid L or j");
  long long p = 1;
  for (int i = 0; i < j; ++i) {
    p *= L;
    if (p > (1LL << 40)) throw std::overflow_error("range_radius: L^j too large");
  }
  return static_cast<int>((p + 1) / 2 - 1);
}

namespace {

double geometric_tail(int d, double mass_sq, int r) {
  if (mass_sq <= 0.0) return std::numeric_limits<double>::infinity();
  const double rho = 2.0 * d / (2.0 * d + mass_sq);
  return std::pow(rho, r + 1) / mass_sq;
}

// Fixed-point block sums of the Neumann series: block b covers n in (bounds[b-1], bounds[b]],
// block 0 covers [0, bounds[0]].
std::vector<DisplacementTable> neumann_blocks(int d, double mass_sq, const std::vector<int>& bounds) {
  if (!(mass_sq >= 0.0)) throw std::invalid_argument("mass_sq must be >= 0");
  const int r_max = bounds.back();
  WalkCounter counter(d, r_max);
  std::vector<DisplacementTable> blocks;
  for (int r : bounds) {
    DisplacementTable t;
    t.domain = SymmetricDomain::l1_ball(d, r);
    t.exact.assign(t.domain->size(), 0);
    blocks.push_back(std::move(t));
  }
  const long double inv = 1.0L / (2.0L * d + static_cast<long double>(mass_sq));
  long double scale = inv;  // (2d+m^2)^{-(n+1)}
  std::size_t b = 0;
  for (int n = 0; n <= r_max; ++n) {
    if (n > 0) {
      counter.advance();
      scale *= inv;
    }
    while (n > bounds[b]) ++b;
    const auto& tab = counter.table();
    auto& blk = blocks[b];
    // Ball domains share the same ordering prefix, so index i refers to the same orbit.
    const std::size_t active = tab.domain->count_within(n);
    for (std::size_t i = 0; i < active; ++i) {
      if (tab.counts[i] == 0.0L) continue;
      blk.exact[i] += to_fixed(tab.counts[i] * scale);
    }
  }
  for (auto& blk : blocks) {
    blk.values.resize(blk.exact.size());
    for (std::size_t i = 0; i < blk.exact.size(); ++i) blk.values[i] = from_fixed(blk.exact[i]);
  }
  return blocks;
}

}  // namespace

TruncatedGreen range_truncated_green(int d, double mass_sq, int r) {
  if (r < 0) throw std::invalid_argument("truncation radius must be >= 0");
  TruncatedGreen g;
  g.d = d;
  g.mass_sq = mass_sq;
  g.r = r;
  g.table = std::move(neumann_blocks(d, mass_sq, {r}).front());
  g.tail_bound = geometric_tail(d, mass_sq, r);
  return g;
}

double CovSlice::at(const Displacement& x) const {
  if (side && !torus_final) {
    return table.at(LatticeSpec::torus(d, *side).displacement(Site::origin(d), x));
  }
  return table.at(x);
}

std::optional<Fixed> CovSlice::exact_at(const Displacement& x) const {
  if (side && !torus_final) {
    return table.exact_at(LatticeSpec::torus(d, *side).displacement(Site::origin(d), x));
  }
  return table.exact_at(x);
}

const CovSlice& Decomposition::slice(int j) const {
  if (j < 1 || j > static_cast<int>(slices.size())) throw std::out_of_range("slice index");
  return slices[static_cast<std::size_t>(j - 1)];
}

double Decomposition::partial_sum(int j, const Displacement& x) const {
  // Summing the fixed-point integers keeps partial sums bit-identical to the truncated Green table.
  Fixed f = 0;
  bool exact = true;
  for (int i = 1; i <= j && exact; ++i) {
    const auto e = slice(i).exact_at(x);
    exact = e.has_value();
    if (exact) f += *e;
  }
  if (exact) return from_fixed(f);
  double s = 0.0;
  for (int i = 1; i <= j; ++i) s += slice(i).at(x);
  return s;
}

void validate_config(const DecompConfig& cfg) {
  if (cfg.L < 3) throw DecompositionError("block side L must be >= 3");
  if (cfg.j_max < 1) throw DecompositionError("j_max must be >= 1");
  if (cfg.d < 1 || cfg.d > kMaxDim) throw DecompositionError("dimension out of range");
  if (!(cfg.mass_sq >= 0.0)) throw DecompositionError("mass_sq must be >= 0");
  if (cfg.torus_N) {
    if (!(cfg.mass_sq > 0.0)) throw DecompositionError("torus mode requires mass_sq > 0");
    if (cfg.j_max != *cfg.torus_N) throw DecompositionError("torus mode requires j_max == N");
  }
  for (int j = 1; j <= cfg.j_max; ++j) {
    if (range_radius(cfg.L, j - 1) >= range_radius(cfg.L, j) && j > 1) {
      throw DecompositionError("degenerate range radii at j=" + std::to_string(j));
    }
  }
}

Decomposition build_decomposition(const DecompConfig& cfg) {
  validate_config(cfg);
  const int j_tables = cfg.torus_N ? cfg.j_max - 1 : cfg.j_max;
  std::vector<int> bounds;
  for (int j = 1; j <= j_tables; ++j) bounds.push_back(range_radius(cfg.L, j));
  if (!bounds.empty() && bounds.back() > kMaxWalkSteps) {
    throw DecompositionError("range radius " + std::to_string(bounds.back()) +
                             " exceeds the table limit of 128 steps");
  }
  Decomposition dec;
  dec.cfg = cfg;
  std::optional<int> side;
  if (cfg.torus_N) {
    long long s = 1;
    for (int i = 0; i < *cfg.torus_N; ++i) s *= cfg.L;
    if (std::pow(static_cast<double>(s), cfg.d) > 1.2e7) {
      throw DecompositionError("torus volume L^{N d} too large for the spectral last slice");
    }
    side = static_cast<int>(s);
  }
  if (!bounds.empty()) {
    auto blocks = neumann_blocks(cfg.d, cfg.mass_sq, bounds);
    for (std::size_t b = 0; b < blocks.size(); ++b) {
      CovSlice sl;
      sl.j = static_cast<int>(b) + 1;
      sl.L = cfg.L;
      sl.d = cfg.d;
      sl.mass_sq = cfg.mass_sq;
      sl.range_radius = bounds[b];
      sl.side = side;
      sl.table = std::move(blocks[b]);
      dec.slices.push_back(std::move(sl));
    }
  }
  if (side) {
    const auto spec = LatticeSpec::torus(cfg.d, *side);
    CovSlice last;
    last.j = cfg.j_max;
    last.L = cfg.L;
    last.d = cfg.d;
    last.mass_sq = cfg.mass_sq;
    last.side = side;
    last.torus_final = true;
    last.range_radius = cfg.d * (*side / 2);
    last.table.domain = SymmetricDomain::torus_box(cfg.d, *side);
    const auto& dom = *last.table.domain;
    std::vector<Displacement> reps(dom.size());
    for (std::size_t i = 0; i < dom.size(); ++i) reps[i] = dom.representative(i);
    last.table.values = torus_green_batch(spec, reps, cfg.mass_sq);
    // r_{N-1} < side/2 so every ball point is its own minimal image.
    for (std::size_t i = 0; i < dom.size(); ++i) {
      last.table.values[i] -= dec.partial_sum(cfg.j_max - 1, reps[i]);
    }
    dec.slices.push_back(std::move(last));
    dec.tail_bound = 0.0;
  } else {
    dec.tail_bound = geometric_tail(cfg.d, cfg.mass_sq, bounds.back());
  }
  return dec;
}

double w1_sum(const std::vector<CovSlice>& slices, int j) {
  if (j < 0 || j > static_cast<int>(slices.size())) throw std::out_of_range("w1_sum: j out of range");
  double s = 0.0;
  for (int i = 0; i < j; ++i) s += slices[static_cast<std::size_t>(i)].table.lattice_sum();
  return s;
}

namespace {

double partial_sum_of_squares(const std::vector<CovSlice>& slices, int j) {
  if (j == 0) return 0.0;
  const CovSlice& top = slices[static_cast<std::size_t>(j - 1)];
  const auto& dom = *top.table.domain;
  double s = 0.0;
  for (std::size_t i = 0; i < dom.size(); ++i) {
    const Site& x = dom.representative(i);
    double w = 0.0;
    for (int k = 0; k < j; ++k) w += slices[static_cast<std::size_t>(k)].table.at(x);
    s += w * w * static_cast<double>(dom.orbit_size(i));
  }
  return s;
}

}  // namespace

double bubble_increment(const std::vector<CovSlice>& slices, int j) {
  if (j < 0 || j + 1 > static_cast<int>(slices.size())) {
    throw std::out_of_range("bubble_increment needs slice j+1");
  }
  return 8.0 * (partial_sum_of_squares(slices, j + 1) - partial_sum_of_squares(slices, j));
}

ValidationReport validate_decomposition(const Decomposition& dec, int convergence_l1_radius) {
  ValidationReport rep;
  auto fail = [&](const std::string& what) {
    if (rep.ok) rep.first_violation = what;
    rep.ok = false;
  };

  // Finite range: every stored orbit satisfies 2|x|_1 < L^j.
  bool range_ok = true;
  for (const CovSlice& sl : dec.slices) {
    if (sl.torus_final) continue;
    const long long Lj = static_cast<long long>(std::llround(std::pow(sl.L, sl.j)));
    const auto& dom = *sl.table.domain;
    for (std::size_t i = 0; i < dom.size(); ++i) {
      if (2 * dom.representative(i).l1() >= Lj && sl.table.values[i] != 0.0) {
        range_ok = false;
        fail("finite_range: slice j=" + std::to_string(sl.j) + " has entry at " +
             dom.representative(i).str());
        break;
      }
    }
  }
  if (range_ok) rep.passed.push_back("finite_range");

  // Symmetry: every orbit member resolves to its stored representative.
  bool sym_ok = true;
  for (const CovSlice& sl : dec.slices) {
    const auto& dom = *sl.table.domain;
    const std::size_t probe = std::min<std::size_t>(dom.size(), 64);
    for (std::size_t i = 0; i < probe && sym_ok; ++i) {
      Site y = dom.representative(i);
      std::reverse(&y[0], &y[0] + y.dim());
      y[0] = -y[0];
      auto k = dom.find(y);
      if (!k || *k != i) {
        sym_ok = false;
        fail("symmetry: slice j=" + std::to_string(sl.j) + " orbit of " +
             dom.representative(i).str() + " not closed");
      }
    }
  }
  if (sym_ok) rep.passed.push_back("symmetry");

  // Telescoping: exact partial sums equal A_{r_J} bit-for-bit.
  bool tele_ok = true;
  for (const CovSlice& sl : dec.slices) {
    if (sl.torus_final || sl.table.exact.empty()) continue;
    const TruncatedGreen a = range_truncated_green(dec.cfg.d, dec.cfg.mass_sq, sl.range_radius);
    const auto& dom = *a.table.domain;
    for (std::size_t i = 0; i < dom.size() && tele_ok; ++i) {
      Fixed s = 0;
      for (int k = 1; k <= sl.j; ++k) {
        const CovSlice& ck = dec.slice(k);
        if (auto idx = ck.table.domain->find(dom.representative(i))) s += ck.table.exact[*idx];
      }
      if (s != a.table.exact[i]) {
        tele_ok = false;
        fail("telescoping: partial sum to j=" + std::to_string(sl.j) + " differs at " +
             dom.representative(i).str());
      }
    }
  }
  if (tele_ok) rep.passed.push_back("telescoping");

  // Convergence to the full Green function.
  const int d = dec.cfg.d;
  if (dec.cfg.torus_N) {
    const CovSlice& last = dec.slices.back();
    const auto spec = LatticeSpec::torus(d, *last.side);
    const auto& dom = *last.table.domain;
    std::vector<Displacement> xs;
    for (std::size_t i = 0; i < dom.size(); ++i) {
      if (dom.representative(i).l1() <= convergence_l1_radius) xs.push_back(dom.representative(i));
    }
    const auto g = torus_green_batch(spec, xs, dec.cfg.mass_sq);
    rep.convergence_budget = 1e-12;
    for (std::size_t i = 0; i < xs.size(); ++i) {
      rep.max_convergence_error = std::max(
          rep.max_convergence_error, std::abs(dec.partial_sum(dec.cfg.j_max, xs[i]) - g[i]));
    }
  } else if (dec.cfg.mass_sq > 0.0 || d >= 3) {
    const auto dom = SymmetricDomain::l1_ball(d, convergence_l1_radius);
    double budget = dec.tail_bound;
    for (std::size_t i = 0; i < dom->size(); ++i) {
      const Site& x = dom->representative(i);
      const GreenValue g = zd_green_detailed(d, x, dec.cfg.mass_sq);
      rep.max_convergence_error =
          std::max(rep.max_convergence_error, std::abs(dec.partial_sum(dec.cfg.j_max, x) - g.value));
      budget = std::max(budget, dec.tail_bound + g.abs_error);
    }
    rep.convergence_budget = budget;
  }
  if (rep.max_convergence_error <= rep.convergence_budget) {
    rep.passed.push_back("convergence");
  } else {
    std::ostringstream os;
    os << "convergence: |sum_j C_j - G| = " << rep.max_convergence_error << " exceeds budget "
       << rep.convergence_budget;
    fail(os.str());
  }

  // Bubble increments are logged, not enforced.
  for (int j = 0; j + 1 < static_cast<int>(dec.slices.size()); ++j) {
    if (dec.slices[static_cast<std::size_t>(j + 1)].torus_final) break;
    if (bubble_increment(dec.slices, j) < 0.0) ++rep.negative_bubble_increments;
  }
  return rep;
}

// ---------------------------------------------------------------------------
// Export / import

void export_slice(std::ostream& os, const CovSlice& slice) {
  os << "# frd d=" << slice.d << " L=" << slice.L << " m2=" << format_double(slice.mass_sq)
     << " j=" << slice.j << " r=" << slice.range_radius;
  if (slice.torus_final) os << " side=" << *slice.side;
  os << '\n';
  const auto& dom = *slice.table.domain;
  std::string line;
  for (std::size_t i = 0; i < dom.size(); ++i) {
    const Site& x = dom.representative(i);
    line.clear();
    for (int k = 0; k < x.dim(); ++k) {
      line += std::to_string(x[k]);
      line += ' ';
    }
    line += format_double(slice.table.values[i]);
    line += '\n';
    os << line;
  }
}

namespace {

template <class T>
T parse_number(const std::string& s, const std::string& what) {
  T v{};
  auto [p, ec] = std::from_chars(s.data(), s.data() + s.size(), v);
  if (ec != std::errc() || p != s.data() + s.size()) {
    throw ImportError("slice import: malformed " + what + " '" + s + "'");
  }
  return v;
}

}  // namespace

CovSlice import_slice(std::istream& is) {
  std::string header;
  if (!std::getline(is, header)) throw ImportError("slice import: empty input");
  std::istringstream hs(header);
  std::string hash, tag;
  hs >> hash >> tag;
  if (hash != "#" || tag != "frd") throw ImportError("slice import: missing '# frd' header");
  std::map<std::string, std::string> kv;
  std::string tok;
  while (hs >> tok) {
    auto eq = tok.find('=');
    if (eq == std::string::npos) throw ImportError("slice import: bad header token '" + tok + "'");
    kv[tok.substr(0, eq)] = tok.substr(eq + 1);
  }
  for (const char* key : {"d", "L", "m2", "j", "r"}) {
    if (!kv.count(key)) throw ImportError(std::string("slice import: header missing ") + key);
  }
  CovSlice sl;
  sl.d = parse_number<int>(kv["d"], "d");
  sl.L = parse_number<int>(kv["L"], "L");
  sl.mass_sq = parse_number<double>(kv["m2"], "m2");
  sl.j = parse_number<int>(kv["j"], "j");
  sl.range_radius = parse_number<int>(kv["r"], "r");
  if (sl.d < 1 || sl.d > kMaxDim || sl.L < 3 || sl.j < 1) {
    throw ImportError("slice import: header values out of range");
  }
  if (kv.count("side")) {
    sl.side = parse_number<int>(kv["side"], "side");
    sl.torus_final = true;
    sl.table.domain = SymmetricDomain::torus_box(sl.d, *sl.side);
  } else {
    if (sl.range_radius != range_radius(sl.L, sl.j)) {
      throw ImportError("slice import: r does not match ceil(L^j/2)-1");
    }
    sl.table.domain = SymmetricDomain::l1_ball(sl.d, sl.range_radius);
  }
  const auto& dom = *sl.table.domain;
  sl.table.values.assign(dom.size(), 0.0);
  std::vector<bool> seen(dom.size(), false);
  std::string line;
  std::size_t lineno = 1;
  while (std::getline(is, line)) {
    ++lineno;
    if (line.empty()) continue;
    std::istringstream ls(line);
    std::vector<std::string> fields;
    while (ls >> tok) fields.push_back(tok);
    if (fields.size() != static_cast<std::size_t>(sl.d) + 1) {
      throw ImportError("slice import: line " + std::to_string(lineno) + " has wrong field count");
    }
    std::vector<int> c;
    for (int k = 0; k < sl.d; ++k) c.push_back(parse_number<int>(fields[k], "coordinate"));
    const Site x{std::span<const int>(c)};
    const double v = parse_number<double>(fields.back(), "value");
    auto idx = dom.find(x);
    if (!idx) {
      if (v == 0.0) continue;
      throw ImportError("slice import: line " + std::to_string(lineno) + " entry at " + x.str() +
                        " lies outside the finite range |x|_1 <= " + std::to_string(sl.range_radius));
    }
    if (seen[*idx]) {
      throw ImportError("slice import: duplicate orbit at line " + std::to_string(lineno));
    }
    seen[*idx] = true;
    sl.table.values[*idx] = v;
  }
  return sl;
}

// ---------------------------------------------------------------------------
// Point series

namespace {

std::vector<long double> log_factorials(int n_max) {
  std::vector<long double> lf(static_cast<std::size_t>(n_max) + 1);
  for (int n = 0; n <= n_max; ++n) lf[n] = std::lgammal(static_cast<long double>(n) + 1.0L);
  return lf;
}

}  // namespace

std::vector<double> walk_probabilities(int d, const Displacement& x, int n_max) {
  if (x.dim() != d) throw std::invalid_argument("displacement dimension mismatch");
  if (n_max < 0) throw std::invalid_argument("n_max must be >= 0");
  const auto lf = log_factorials(n_max);
  const std::size_t N = static_cast<std::size_t>(n_max) + 1;
  const long double ln2 = std::log(2.0L);
  const Site c = SymmetricDomain::canonical(x);

  auto one_dim = [&](int y) {
    std::vector<double> p(N, 0.0);
    for (int k = y; k <= n_max; k += 2) {
      p[k] = static_cast<double>(std::exp(lf[k] - lf[(k + y) / 2] - lf[(k - y) / 2] - k * ln2));
    }
    return p;
  };

  // Dimension m splits off: p^{(m)}_n = sum_k Bin(n, k; 1/m) P1_k(y) p^{(m-1)}_{n-k}.
  std::vector<double> cur = one_dim(c[d - 1]);
  std::vector<double> bin;
  for (int m = 2; m <= d; ++m) {
    const int y = c[d - m];
    const std::vector<double> a = one_dim(y);
    std::vector<double> next(N, 0.0);
    const long double pl = 1.0L / m;
    const long double ql = 1.0L - pl;
    const double ratio_up = static_cast<double>(pl / ql);
    const double ratio_dn = static_cast<double>(ql / pl);
    const long double lp = std::log(pl), lq = std::log(ql);
    for (int n = 0; n <= n_max; ++n) {
      const double mean = static_cast<double>(n) / m;
      const double sd = std::sqrt(n * (1.0 / m) * (1.0 - 1.0 / m));
      const int lo = std::max(0, static_cast<int>(std::floor(mean - 12.0 * sd)) - 2);
      const int hi = std::min(n, static_cast<int>(std::ceil(mean + 12.0 * sd)) + 2);
      const int mode = std::clamp(static_cast<int>(std::lround(mean)), lo, hi);
      bin.assign(static_cast<std::size_t>(hi - lo) + 1, 0.0);
      bin[mode - lo] =
          static_cast<double>(std::exp(lf[n] - lf[mode] - lf[n - mode] + mode * lp + (n - mode) * lq));
      for (int k = mode; k < hi; ++k) {
        bin[k + 1 - lo] = bin[k - lo] * (static_cast<double>(n - k) / (k + 1)) * ratio_up;
      }
      for (int k = mode; k > lo; --k) {
        bin[k - 1 - lo] = bin[k - lo] * (static_cast<double>(k) / (n - k + 1)) * ratio_dn;
      }
      double acc = 0.0;
      for (int k = std::max(lo, y); k <= hi; ++k) {
        const double ak = a[k];
        if (ak == 0.0) continue;
        const double rest = cur[n - k];
        if (rest == 0.0) continue;
        acc += bin[k - lo] * ak * rest;
      }
      next[n] = acc;
    }
    cur = std::move(next);
  }
  return cur;
}

SeriesDecomposition::SeriesDecomposition(int d, int L, double mass_sq)
    : d_(d), L_(L), mass_sq_(mass_sq) {
  if (d < 1 || d > kMaxDim) throw std::invalid_argument("dimension out of range");
  if (L < 3) throw std::invalid_argument("L must be >= 3");
  if (!(mass_sq >= 0.0)) throw std::invalid_argument("mass_sq must be >= 0");
}

const std::vector<double>& SeriesDecomposition::terms(const Displacement& x, int n_max) {
  const Site c = SymmetricDomain::canonical(x);
  std::vector<int> key(c.coords().begin(), c.coords().end());
  auto it = terms_.find(key);
  if (it != terms_.end() && static_cast<int>(it->second.size()) > n_max) return it->second;
  std::vector<double> p = walk_probabilities(d_, c, n_max);
  const double base = 2.0 * d_ + mass_sq_;
  const double rho = 2.0 * d_ / base;
  double w = 1.0 / base;
  for (double& v : p) {
    v *= w;
    w *= rho;
  }
  auto& slot = terms_[key];
  slot = std::move(p);
  return slot;
}

double SeriesDecomposition::slice(int j, const Displacement& x) {
  if (j < 1) throw std::invalid_argument("slice index must be >= 1");
  const int lo = j == 1 ? 0 : radius(j - 1) + 1;
  const int hi = radius(j);
  const auto& t = terms(x, hi);
  double s = 0.0;
  for (int n = lo; n <= hi; ++n) s += t[n];
  return s;
}

double SeriesDecomposition::partial(int j, const Displacement& x) {
  double s = 0.0;
  for (int i = 1; i <= j; ++i) s += slice(i, x);
  return s;
}

double SeriesDecomposition::w1(int j) const {
  if (j <= 0) return 0.0;
  const double base = 2.0 * d_ + mass_sq_;
  const double rho = 2.0 * d_ / base;
  double w = 1.0 / base;
  double s = 0.0;
  for (int n = 0; n <= radius(j); ++n) {
    s += w;
    w *= rho;
  }
  return s;
}

double SeriesDecomposition::bubble(int j) {
  if (j <= 0) return 0.0;
  const int r = radius(j);
  if (static_cast<int>(return_probs_.size()) <= 2 * r) {
    return_probs_ = walk_probabilities(d_, Site::origin(d_), 2 * r);
  }
  const double base = 2.0 * d_ + mass_sq_;
  const double rho = 2.0 * d_ / base;
  double rk = 1.0;
  double s = 0.0;
  for (int k = 0; k <= 2 * r; ++k) {
    s += return_probs_[k] * rk * static_cast<double>(std::min(k, 2 * r - k) + 1);
    rk *= rho;
  }
  return s / (base * base);
}

double SeriesDecomposition::tail_bound(int j) {
  if (mass_sq_ <= 0.0) return std::numeric_limits<double>::infinity();
  const int r = radius(j);
  const int even = 2 * ((r + 1) / 2);
  const auto& t0 = terms(Site::origin(d_), even);
  // t0[n] = p_n(0) rho^n / (2d+m^2); undo the weight to recover p_even(0).
  const double base = 2.0 * d_ + mass_sq_;
  const double rho = 2.0 * d_ / base;
  const double p_even = t0[even] * base / std::pow(rho, even);
  return p_even * std::pow(rho, r + 1) / mass_sq_;
}

double SeriesDecomposition::geometric_tail_bound(int j) const {
  return geometric_tail(d_, mass_sq_, radius(j));
}

}  // namespace rgwsaw::covdecomp
