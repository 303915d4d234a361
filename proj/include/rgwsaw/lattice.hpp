#pragma once

#include <array>
#include <cstdint>
#include <functional>
#include <initializer_list>
#include <optional>
#include <span>
#include <stdexcept>
#include <string>
#include <vector>

namespace rgwsaw {

inline constexpr int kMaxDim = 6;

/// Integer lattice point (or displacement) in dimension 1..kMaxDim.
class Site {
public:
  Site() = default;
  Site(std::initializer_list<int> coords);
  explicit Site(std::span<const int> coords);

  static Site origin(int d);
  static Site unit(int d, int axis, int sign = 1);

  int dim() const { return d_; }
  int operator[](int i) const { return c_[static_cast<std::size_t>(i)]; }
  int& operator[](int i) { return c_[static_cast<std::size_t>(i)]; }
  std::span<const int> coords() const { return {c_.data(), static_cast<std::size_t>(d_)}; }

  bool is_origin() const;
  long l1() const;
  long linf() const;
  double l2() const;

  Site operator-(const Site& o) const;
  Site operator+(const Site& o) const;
  friend bool operator==(const Site& a, const Site& b) {
    return a.d_ == b.d_ && a.c_ == b.c_;
  }

  std::string str() const;

private:
  std::array<int, kMaxDim> c_{};
  int d_ = 0;
};

using Displacement = Site;

enum class Metric { L1, L2, LInf };

/// Z^d or the discrete torus Z^d / side Z^d.
class LatticeSpec {
public:
  static LatticeSpec infinite(int d, Metric metric = Metric::L2);
  static LatticeSpec torus(int d, int side, Metric metric = Metric::L2);

  int dim() const { return d_; }
  bool is_torus() const { return side_.has_value(); }
  int side() const;
  /// Number of sites; torus only.
  std::int64_t volume() const;
  Metric metric() const { return metric_; }

  /// Reduce coordinates into [0, side) on a torus; identity on Z^d.
  Site reduce(const Site& x) const;
  /// b - a, minimal-image convention on a torus.
  Displacement displacement(const Site& a, const Site& b) const;
  /// Length of a displacement in the configured norm.
  double length(const Displacement& x) const;

private:
  LatticeSpec(int d, std::optional<int> side, Metric metric);
  int d_;
  std::optional<int> side_;
  Metric metric_;
};

class QuadratureError : public std::runtime_error {
public:
  using std::runtime_error::runtime_error;
};

using SiteField = std::function<double(const Site&)>;

/// (Delta f)_x = sum over the 2d unit vectors e of (f_{x+e} - f_x).
double laplacian_apply(const LatticeSpec& spec, const SiteField& f, const Site& x);

/// p_t(0, x) for the continuous-time walk with generator Delta on a torus.
double torus_heat_kernel(const LatticeSpec& spec, double t, const Displacement& x);

struct QuadratureOptions {
  double abs_tol = 1e-10;
  double rel_tol = 0.0;
  std::size_t max_intervals = 4000;
};

struct GreenValue {
  double value = 0.0;
  double abs_error = 0.0;  // quadrature error estimate
};

/// (-Delta_{Z^d} + m^2)^{-1}_{0x} via int_0^inf e^{-(2d+m^2)t} prod_i I_{|x_i|}(2t) dt.
/// Throws std::domain_error when m^2 = 0 and d <= 2 (divergent), QuadratureError when
/// the requested tolerance is not reached.
GreenValue zd_green_detailed(int d, const Displacement& x, double mass_sq,
                             const QuadratureOptions& opts = {});
double zd_green(int d, const Displacement& x, double mass_sq,
                const QuadratureOptions& opts = {});

/// (2 pi)^{-2} |x|^{-2}, Euclidean norm, d = 4 only.
double zd_green_asymptote(const Displacement& x);

/// (-Delta_torus + m^2)^{-1}_{ab} as an exact sum over the torus Fourier modes.
double torus_green(const LatticeSpec& spec, const Site& a, const Site& b, double mass_sq);

/// Batch evaluation of torus_green(0, x) for many displacements sharing one mode table.
std::vector<double> torus_green_batch(const LatticeSpec& spec, std::span<const Displacement> xs,
                                      double mass_sq);

}  // namespace rgwsaw
