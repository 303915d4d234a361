#pragma once

#include "rgwsaw/lattice.hpp"

#include <iosfwd>
#include <map>
#include <memory>
#include <optional>
#include <string>
#include <vector>

namespace rgwsaw::covdecomp {

/// Signed 128-bit fixed point, 2^-100 resolution. Sums of these are exact, which makes
/// slice telescoping associative.
using Fixed = __int128;
inline constexpr int kFixedFractionBits = 100;
Fixed to_fixed(long double v);
double from_fixed(Fixed f);

/// One representative per orbit of the hyperoctahedral group (coordinate permutations and sign
/// flips): |x_1| >= |x_2| >= ... >= |x_d| >= 0. Either an l1 ball on Z^d or the full set of
/// minimal-image displacements of a torus.
class SymmetricDomain {
public:
  static std::shared_ptr<const SymmetricDomain> l1_ball(int d, int radius);
  static std::shared_ptr<const SymmetricDomain> torus_box(int d, int side);

  /// Sorted absolute coordinates (minimal image first when `side` is given).
  static Site canonical(const Displacement& x, std::optional<int> side = std::nullopt);

  int dim() const { return d_; }
  /// l1 radius for a ball, -1 for a torus box.
  int radius() const { return radius_; }
  std::optional<int> side() const { return side_; }
  std::size_t size() const { return reps_.size(); }
  const Site& representative(std::size_t i) const { return reps_[i]; }
  /// Number of lattice (or torus) points in the orbit of representative i.
  std::uint64_t orbit_size(std::size_t i) const { return orbit_[i]; }
  std::optional<std::size_t> find(const Displacement& x) const;
  /// Representatives are ordered by l1 norm: the first count_within(n) have |x|_1 <= n.
  std::size_t count_within(long l1) const;

private:
  SymmetricDomain() = default;
  void index();

  int d_ = 0;
  int radius_ = -1;
  std::optional<int> side_;
  std::vector<Site> reps_;
  std::vector<std::uint64_t> orbit_;
  std::map<std::uint64_t, std::size_t> lookup_;
};

class OverflowError : public std::runtime_error {
public:
  using std::runtime_error::runtime_error;
};

/// J^n_{0x}: number of n-step nearest-neighbour walks from 0 to x.
struct WalkCountTable {
  int n = 0;
  std::shared_ptr<const SymmetricDomain> domain;
  bool exact = true;
  std::vector<unsigned __int128> exact_counts;  // empty once the exact range is exhausted
  std::vector<long double> counts;

  long double count(const Displacement& x) const;
  std::optional<unsigned __int128> exact_count(const Displacement& x) const;
  /// Sum over all lattice points, orbit-weighted.
  long double total() const;
};

struct CountOptions {
  bool allow_float_fallback = true;
};

inline constexpr int kMaxWalkSteps = 128;

/// Streams J^0, J^1, ... by repeated application of the adjacency operator on an l1 ball.
class WalkCounter {
public:
  WalkCounter(int d, int n_max, CountOptions opts = {});
  const WalkCountTable& table() const { return table_; }
  int n_max() const { return n_max_; }
  /// Advances to n+1; returns false (and does nothing) once n == n_max.
  bool advance();

private:
  int d_;
  int n_max_;
  CountOptions opts_;
  std::vector<std::int32_t> neighbours_;  // 2d entries per representative, -1 = outside
  WalkCountTable table_;
};

std::vector<WalkCountTable> walk_counts(int d, int n_max, CountOptions opts = {});

/// Displacement -> value table, one entry per orbit. Points outside the domain are zero.
struct DisplacementTable {
  std::shared_ptr<const SymmetricDomain> domain;
  std::vector<double> values;
  std::vector<Fixed> exact;  // empty when no exact representation is available

  double at(const Displacement& x) const;
  std::optional<Fixed> exact_at(const Displacement& x) const;
  double lattice_sum() const;
  double lattice_sum_of_squares() const;
};

/// A_r = sum_{n<=r} J^n / (2d+m^2)^{n+1}, supported on the l1 ball of radius r.
struct TruncatedGreen {
  int d = 0;
  double mass_sq = 0.0;
  int r = 0;
  DisplacementTable table;
  /// (2d/(2d+m^2))^{r+1} / m^2; +inf when m^2 = 0.
  double tail_bound = 0.0;
};

TruncatedGreen range_truncated_green(int d, double mass_sq, int r);

/// ceil(L^j / 2) - 1: largest l1 radius with |x|_1 < L^j / 2.
int range_radius(int L, int j);

struct DecompConfig {
  int L = 4;
  double mass_sq = 0.5;
  int d = 4;
  int j_max = 4;
  /// Torus Lambda_N with side L^N; requires j_max == N.
  std::optional<int> torus_N;
};

struct CovSlice {
  int j = 0;
  int L = 0;
  int d = 0;
  double mass_sq = 0.0;
  int range_radius = 0;
  /// Set for slices that live on a torus; lookups use the minimal image.
  std::optional<int> side;
  /// The special last torus slice C_{N,N}; it has no finite-range guarantee.
  bool torus_final = false;
  DisplacementTable table;

  double at(const Displacement& x) const;
  std::optional<Fixed> exact_at(const Displacement& x) const;
};

struct Decomposition {
  DecompConfig cfg;
  std::vector<CovSlice> slices;  // slices[j-1] is C_j
  /// Series tail of the last partial sum against the full Green function (Z^d mode).
  double tail_bound = 0.0;
  /// The series-truncation slices carry no positive-semidefiniteness guarantee.
  bool positive_semidefinite_certified = false;

  const CovSlice& slice(int j) const;
  double partial_sum(int j, const Displacement& x) const;
};

class DecompositionError : public std::runtime_error {
public:
  using std::runtime_error::runtime_error;
};

void validate_config(const DecompConfig& cfg);
Decomposition build_decomposition(const DecompConfig& cfg);

/// w^{(1)}_j = sum_x sum_{i<=j} C_{i;0,x}.
double w1_sum(const std::vector<CovSlice>& slices, int j);

/// 8 (sum_x w_{j+1;0,x}^2 - sum_x w_{j;0,x}^2), w_j = sum_{i<=j} C_i.
double bubble_increment(const std::vector<CovSlice>& slices, int j);

struct ValidationReport {
  bool ok = true;
  std::vector<std::string> passed;
  std::optional<std::string> first_violation;
  double max_convergence_error = 0.0;
  double convergence_budget = 0.0;
  std::size_t negative_bubble_increments = 0;
};

ValidationReport validate_decomposition(const Decomposition& dec, int convergence_l1_radius = 6);

class ImportError : public std::runtime_error {
public:
  using std::runtime_error::runtime_error;
};

void export_slice(std::ostream& os, const CovSlice& slice);
CovSlice import_slice(std::istream& is);

/// p_n(x) for n = 0..n_max: n-step simple random walk transition probabilities on Z^d.
std::vector<double> walk_probabilities(int d, const Displacement& x, int n_max);

/// Point evaluation of the same decomposition C_j = A_{r_j} - A_{r_{j-1}} at arbitrary scales,
/// without materialising tables. Evaluations are memoised per displacement orbit.
class SeriesDecomposition {
public:
  SeriesDecomposition(int d, int L, double mass_sq);

  int dim() const { return d_; }
  int L() const { return L_; }
  double mass_sq() const { return mass_sq_; }
  int radius(int j) const { return range_radius(L_, j); }

  /// C_{j;0,x}, j >= 1.
  double slice(int j, const Displacement& x);
  /// sum_{i<=j} C_{i;0,x}; zero for j = 0.
  double partial(int j, const Displacement& x);
  /// w^{(1)}_j in closed form: sum_{n<=r_j} (2d)^n / (2d+m^2)^{n+1}.
  double w1(int j) const;
  /// sum_x (sum_{i<=j} C_{i;0,x})^2 via sum_x p_n(x) p_m(x) = p_{n+m}(0).
  double bubble(int j);
  double beta(int j) { return 8.0 * (bubble(j + 1) - bubble(j)); }
  /// Certified bound on |G(x) - partial(j, x)| using p_n(x) <= p_{2 floor(n/2)}(0).
  double tail_bound(int j);
  double geometric_tail_bound(int j) const;

private:
  const std::vector<double>& terms(const Displacement& x, int n_max);

  int d_;
  int L_;
  double mass_sq_;
  std::map<std::vector<int>, std::vector<double>> terms_;
  std::vector<double> return_probs_;
};

}  // namespace rgwsaw::covdecomp
