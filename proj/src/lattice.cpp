#include "rgwsaw/lattice.hpp"

#include <gsl/gsl_errno.h>
#include <gsl/gsl_integration.h>
#include <gsl/gsl_sf_bessel.h>

#include <algorithm>
#include <cmath>
#include <memory>
#include <numbers>
#include <sstream>

namespace rgwsaw {

namespace {

void check_dim(int d) {
  if (d < 1 || d > kMaxDim) {
    throw std::invalid_argument("dimension must lie in [1, " + std::to_string(kMaxDim) + "]");
  }
}

// GSL would otherwise abort() on the first numerical complaint.
struct GslHandlerOff {
  GslHandlerOff() { gsl_set_error_handler_off(); }
};
const GslHandlerOff gsl_handler_off;

}  // namespace

Site::Site(std::initializer_list<int> coords) : Site(std::span<const int>(coords.begin(), coords.size())) {}

Site::Site(std::span<const int> coords) {
  if (coords.empty() || coords.size() > static_cast<std::size_t>(kMaxDim)) {
    throw std::invalid_argument("site dimension must lie in [1, " + std::to_string(kMaxDim) + "]");
  }
  d_ = static_cast<int>(coords.size());
  std::copy(coords.begin(), coords.end(), c_.begin());
}

Site Site::origin(int d) {
  check_dim(d);
  Site s;
  s.d_ = d;
  return s;
}

Site Site::unit(int d, int axis, int sign) {
  Site s = origin(d);
  if (axis < 0 || axis >= d) throw std::invalid_argument("axis out of range");
  s[axis] = sign >= 0 ? 1 : -1;
  return s;
}

bool Site::is_origin() const {
  return std::all_of(c_.begin(), c_.begin() + d_, [](int v) { return v == 0; });
}

long Site::l1() const {
  long s = 0;
  for (int i = 0; i < d_; ++i) s += std::abs(static_cast<long>(c_[i]));
  return s;
}

long Site::linf() const {
  long s = 0;
  for (int i = 0; i < d_; ++i) s = std::max(s, std::abs(static_cast<long>(c_[i])));
  return s;
}

double Site::l2() const {
  double s = 0.0;
  for (int i = 0; i < d_; ++i) s += static_cast<double>(c_[i]) * c_[i];
  return std::sqrt(s);
}

Site Site::operator-(const Site& o) const {
  if (o.d_ != d_) throw std::invalid_argument("dimension mismatch");
  Site r = *this;
  for (int i = 0; i < d_; ++i) r.c_[i] -= o.c_[i];
  return r;
}

Site Site::operator+(const Site& o) const {
  if (o.d_ != d_) throw std::invalid_argument("dimension mismatch");
  Site r = *this;
  for (int i = 0; i < d_; ++i) r.c_[i] += o.c_[i];
  return r;
}

std::string Site::str() const {
  std::ostringstream os;
  os << '(';
  for (int i = 0; i < d_; ++i) os << (i ? "," : "") << c_[i];
  os << ')';
  return os.str();
}

LatticeSpec::LatticeSpec(int d, std::optional<int> side, Metric metric)
    : d_(d), side_(side), metric_(metric) {}

LatticeSpec LatticeSpec::infinite(int d, Metric metric) {
  check_dim(d);
  return LatticeSpec(d, std::nullopt, metric);
}

LatticeSpec LatticeSpec::torus(int d, int side, Metric metric) {
  check_dim(d);
  if (side < 2) throw std::invalid_argument("torus side must be >= 2");
  double vol = std::pow(static_cast<double>(side), d);
  if (vol > 9.0e15) throw std::invalid_argument("torus volume too large");
  return LatticeSpec(d, side, metric);
}

int LatticeSpec::side() const {
  if (!side_) throw std::logic_error("infinite lattice has no side");
  return *side_;
}

std::int64_t LatticeSpec::volume() const {
  std::int64_t v = 1;
  for (int i = 0; i < d_; ++i) v *= side();
  return v;
}

Site LatticeSpec::reduce(const Site& x) const {
  if (x.dim() != d_) throw std::invalid_argument("site dimension mismatch");
  if (!side_) return x;
  Site r = x;
  const int s = *side_;
  for (int i = 0; i < d_; ++i) {
    int v = r[i] % s;
    r[i] = v < 0 ? v + s : v;
  }
  return r;
}

Displacement LatticeSpec::displacement(const Site& a, const Site& b) const {
  Displacement x = b - a;
  if (x.dim() != d_) throw std::invalid_argument("site dimension mismatch");
  if (!side_) return x;
  const int s = *side_;
  x = reduce(x);
  for (int i = 0; i < d_; ++i) {
    if (2 * x[i] > s) x[i] -= s;
  }
  return x;
}

double LatticeSpec::length(const Displacement& x) const {
  switch (metric_) {
    case Metric::L1: return static_cast<double>(x.l1());
    case Metric::LInf: return static_cast<double>(x.linf());
    case Metric::L2: break;
  }
  return x.l2();
}

double laplacian_apply(const LatticeSpec& spec, const SiteField& f, const Site& x) {
  const Site base = spec.reduce(x);
  const double fx = f(base);
  double acc = 0.0;
  for (int i = 0; i < spec.dim(); ++i) {
    for (int sgn : {1, -1}) {
      Site y = base;
      y[i] += sgn;
      acc += f(spec.reduce(y)) - fx;
    }
  }
  return acc;
}

namespace {

// Transition probability of the rate-2 walk on the cycle of length s.
double cycle_heat_kernel(int s, double t, int y) {
  double acc = 0.0;
  for (int k = 0; k < s; ++k) {
    const double theta = 2.0 * std::numbers::pi * k / s;
    acc += std::exp(-2.0 * t * (1.0 - std::cos(theta))) * std::cos(theta * y);
  }
  return acc / s;
}

}  // namespace

double torus_heat_kernel(const LatticeSpec& spec, double t, const Displacement& x) {
  if (!spec.is_torus()) throw std::invalid_argument("torus_heat_kernel requires a torus");
  if (!(t >= 0.0)) throw std::invalid_argument("heat kernel time must be >= 0");
  const Site y = spec.reduce(x);
  if (t == 0.0) return y.is_origin() ? 1.0 : 0.0;
  double p = 1.0;
  for (int i = 0; i < spec.dim(); ++i) p *= cycle_heat_kernel(spec.side(), t, y[i]);
  return p;
}

namespace {

struct BesselIntegrand {
  std::vector<std::pair<int, int>> orders;  // (|x_i|, multiplicity)
  double mass_sq;
};

double bessel_product(double t, void* params) {
  const auto* p = static_cast<const BesselIntegrand*>(params);
  double v = std::exp(-p->mass_sq * t);
  for (const auto& [n, mult] : p->orders) {
    gsl_sf_result r;
    gsl_sf_bessel_In_scaled_e(n, 2.0 * t, &r);  // e^{-2t} I_n(2t); underflow leaves 0
    v *= std::pow(r.val, mult);
    if (v == 0.0) break;
  }
  return v;
}

struct WorkspaceDeleter {
  void operator()(gsl_integration_workspace* w) const { gsl_integration_workspace_free(w); }
};

}  // namespace

GreenValue zd_green_detailed(int d, const Displacement& x, double mass_sq,
                             const QuadratureOptions& opts) {
  check_dim(d);
  if (x.dim() != d) throw std::invalid_argument("displacement dimension mismatch");
  if (!(mass_sq >= 0.0)) throw std::invalid_argument("mass_sq must be >= 0");
  if (mass_sq == 0.0 && d <= 2) {
    throw std::domain_error("massless Green function diverges for d <= 2");
  }
  BesselIntegrand params;
  params.mass_sq = mass_sq;
  {
    std::vector<int> a;
    for (int i = 0; i < d; ++i) a.push_back(std::abs(x[i]));
    std::sort(a.begin(), a.end());
    for (int v : a) {
      if (!params.orders.empty() && params.orders.back().first == v) {
        ++params.orders.back().second;
      } else {
        params.orders.emplace_back(v, 1);
      }
    }
  }
  std::unique_ptr<gsl_integration_workspace, WorkspaceDeleter> ws(
      gsl_integration_workspace_alloc(opts.max_intervals));
  gsl_function fn;
  fn.function = &bessel_product;
  fn.params = &params;
  double result = 0.0;
  double abserr = 0.0;
  const int status = gsl_integration_qagiu(&fn, 0.0, opts.abs_tol, opts.rel_tol,
                                           opts.max_intervals, ws.get(), &result, &abserr);
  const double target = std::max(opts.abs_tol, opts.rel_tol * std::abs(result));
  if (status != GSL_SUCCESS || !(abserr <= target)) {
    std::ostringstream os;
    os << "zd_green quadrature failed at x=" << x.str() << " m2=" << mass_sq << ": "
       << gsl_strerror(status) << " (error estimate " << abserr << ", target " << target << ")";
    throw QuadratureError(os.str());
  }
  return {result, abserr};
}

double zd_green(int d, const Displacement& x, double mass_sq, const QuadratureOptions& opts) {
  return zd_green_detailed(d, x, mass_sq, opts).value;
}

double zd_green_asymptote(const Displacement& x) {
  if (x.dim() != 4) throw std::invalid_argument("asymptote is defined for d = 4");
  if (x.is_origin()) throw std::invalid_argument("asymptote undefined at x = 0");
  const double r2 = x.l2() * x.l2();
  return 1.0 / (4.0 * std::numbers::pi * std::numbers::pi * r2);
}

std::vector<double> torus_green_batch(const LatticeSpec& spec, std::span<const Displacement> xs,
                                      double mass_sq) {
  if (!spec.is_torus()) throw std::invalid_argument("torus_green requires a torus");
  if (!(mass_sq > 0.0)) {
    throw std::invalid_argument("torus Green function requires mass_sq > 0");
  }
  const int d = spec.dim();
  const int s = spec.side();
  std::vector<double> eig(static_cast<std::size_t>(s));
  for (int k = 0; k < s; ++k) eig[k] = 2.0 * (1.0 - std::cos(2.0 * std::numbers::pi * k / s));

  // cos table per query and dimension: cos(2 pi k y / s), y reduced into [0, s).
  const std::size_t nq = xs.size();
  std::vector<double> cosines(nq * d * s);
  for (std::size_t q = 0; q < nq; ++q) {
    const Site y = spec.reduce(xs[q]);
    for (int i = 0; i < d; ++i) {
      for (int k = 0; k < s; ++k) {
        const long phase = (static_cast<long>(k) * y[i]) % s;
        cosines[(q * d + i) * s + k] = std::cos(2.0 * std::numbers::pi * phase / s);
      }
    }
  }

  std::vector<double> acc(nq, 0.0);
  std::vector<double> prod(nq * (d + 1), 1.0);
  std::vector<int> k(d, 0);
  std::vector<double> lam(d + 1, 0.0);
  // Odometer over modes; prod[q*(d+1)+i] holds the product over dims < i.
  std::function<void(int)> rec = [&](int i) {
    if (i == d) {
      const double inv = 1.0 / (mass_sq + lam[d]);
      for (std::size_t q = 0; q < nq; ++q) acc[q] += prod[q * (d + 1) + d] * inv;
      return;
    }
    for (int ki = 0; ki < s; ++ki) {
      lam[i + 1] = lam[i] + eig[ki];
      for (std::size_t q = 0; q < nq; ++q) {
        prod[q * (d + 1) + i + 1] = prod[q * (d + 1) + i] * cosines[(q * d + i) * s + ki];
      }
      rec(i + 1);
    }
  };
  rec(0);
  const double vol = static_cast<double>(spec.volume());
  for (double& v : acc) v /= vol;
  return acc;
}

double torus_green(const LatticeSpec& spec, const Site& a, const Site& b, double mass_sq) {
  const Displacement x = spec.displacement(a, b);
  return torus_green_batch(spec, std::span<const Displacement>(&x, 1), mass_sq).front();
}

}  // namespace rgwsaw
