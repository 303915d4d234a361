#include "rgwsaw/wsaw_mc.hpp"

#include <gsl/gsl_sf_erf.h>

#include <algorithm>
#include <atomic>
#include <cmath>
#include <limits>
#include <numbers>
#include <sstream>
#include <thread>

namespace rgwsaw::mc {

Rng make_rng(std::uint64_t seed, std::uint64_t stream, std::uint64_t block) {
  auto lo = [](std::uint64_t v) { return static_cast<std::uint32_t>(v); };
  auto hi = [](std::uint64_t v) { return static_cast<std::uint32_t>(v >> 32); };
  std::seed_seq seq{lo(seed), hi(seed), lo(stream), hi(stream), lo(block), hi(block)};
  return Rng(seq);
}

namespace {

double uniform01(Rng& rng) { return static_cast<double>(rng() >> 11) * 0x1.0p-53; }

double holding_time(Rng& rng, int d) { return -std::log1p(-uniform01(rng)) / (2.0 * d); }

void step(Site& x, Rng& rng, int d) {
  const auto k = static_cast<int>(rng() % static_cast<std::uint64_t>(2 * d));
  x[k >> 1] += (k & 1) ? -1 : 1;
}

// Local times and I(t) of one path, projected onto `spec`.
class Occupation {
public:
  explicit Occupation(const LatticeSpec& spec) : spec_(spec) {}

  void reset() {
    occ_.clear();
    I_ = 0.0;
  }
  // Site x (unreduced) held for dt.
  void hold(const Site& x, double dt) {
    double& l = occ_[spec_.reduce(x)];
    I_ += dt * (2.0 * l + dt);
    l += dt;
  }
  // I at (current time + dt) if the walk stays at x.
  double peek(const Site& x, double dt) const {
    auto it = occ_.find(spec_.reduce(x));
    const double l = it == occ_.end() ? 0.0 : it->second;
    return I_ + dt * (2.0 * l + dt);
  }
  bool same_site(const Site& x, const Site& b) const { return spec_.reduce(x) == spec_.reduce(b); }

private:
  LatticeSpec spec_;
  absl::flat_hash_map<Site, double> occ_;
  double I_ = 0.0;
};

// Walks from `start` and calls observe(k, x, dt_since_last_jump) at every grid time Ts[k].
template <class Hold, class Observe>
void walk_grid(int d, const Site& start, std::span<const double> Ts, Rng& rng, Hold&& hold,
               Observe&& observe) {
  Site x = start;
  double t = 0.0;
  double next = holding_time(rng, d);
  for (std::size_t k = 0; k < Ts.size(); ++k) {
    while (next <= Ts[k]) {
      hold(x, next - t);
      t = next;
      step(x, rng, d);
      next = t + holding_time(rng, d);
    }
    observe(k, x, Ts[k] - t);
  }
}

void check_samples(std::int64_t n) {
  if (n < 100) throw std::invalid_argument("Monte Carlo estimates need at least 100 samples");
}

std::vector<double> trapezoid_weights(std::span<const double> Ts) {
  std::vector<double> w(Ts.size(), 0.0);
  for (std::size_t k = 0; k + 1 < Ts.size(); ++k) {
    const double h = Ts[k + 1] - Ts[k];
    w[k] += 0.5 * h;
    w[k + 1] += 0.5 * h;
  }
  return w;
}

// Weights of the trapezoid rule on the sub-grid {0, 2, 4, ..., last}, expressed on the full grid.
std::vector<double> coarse_weights(std::span<const double> Ts) {
  std::vector<std::size_t> idx;
  for (std::size_t k = 0; k < Ts.size(); k += 2) idx.push_back(k);
  if (idx.back() != Ts.size() - 1) idx.push_back(Ts.size() - 1);
  std::vector<double> w(Ts.size(), 0.0);
  for (std::size_t i = 0; i + 1 < idx.size(); ++i) {
    const double h = Ts[idx[i + 1]] - Ts[idx[i]];
    w[idx[i]] += 0.5 * h;
    w[idx[i + 1]] += 0.5 * h;
  }
  return w;
}

std::vector<double> prepared_grid(std::span<const double> T_grid) {
  if (T_grid.size() < 2) throw std::invalid_argument("T grid needs at least two points");
  std::vector<double> Ts(T_grid.begin(), T_grid.end());
  if (Ts.front() < 0.0) throw std::invalid_argument("T grid must be nonnegative");
  for (std::size_t k = 1; k < Ts.size(); ++k) {
    if (!(Ts[k] > Ts[k - 1])) throw std::invalid_argument("T grid must be strictly increasing");
  }
  if (Ts.front() > 0.0) Ts.insert(Ts.begin(), 0.0);
  return Ts;
}

}  // namespace

Site Trajectory::at(double t) const {
  if (t < 0.0 || t > T) throw std::out_of_range("trajectory time outside [0, T]");
  const auto it = std::upper_bound(jump_times.begin(), jump_times.end(), t);
  return positions[static_cast<std::size_t>(it - jump_times.begin())];
}

Trajectory sample_trajectory(const LatticeSpec& spec, const Site& start, double T, Rng& rng) {
  if (!(T > 0.0)) throw std::invalid_argument("trajectory horizon must be > 0");
  if (start.dim() != spec.dim()) throw std::invalid_argument("start dimension mismatch");
  const int d = spec.dim();
  Trajectory p;
  p.start = spec.reduce(start);
  p.T = T;
  p.positions.push_back(p.start);
  Site x = p.start;
  double t = holding_time(rng, d);
  while (t <= T) {
    step(x, rng, d);
    x = spec.reduce(x);
    p.jump_times.push_back(t);
    p.positions.push_back(x);
    t += holding_time(rng, d);
  }
  return p;
}

double LocalTimeField::total() const {
  double s = 0.0;
  for (const auto& [x, l] : occupation) s += l;
  return s;
}

double LocalTimeField::at(const Site& x) const {
  auto it = occupation.find(x);
  return it == occupation.end() ? 0.0 : it->second;
}

LocalTimeField local_times(const LatticeSpec& spec, const Trajectory& path) {
  LocalTimeField f;
  double t = 0.0;
  for (std::size_t k = 0; k < path.jump_times.size(); ++k) {
    f.occupation[spec.reduce(path.positions[k])] += path.jump_times[k] - t;
    t = path.jump_times[k];
  }
  f.occupation[spec.reduce(path.positions.back())] += path.T - t;
  return f;
}

double intersection_local_time(const LocalTimeField& field) {
  double s = 0.0;
  for (const auto& [x, l] : field.occupation) {
    if (l < 0.0) throw std::invalid_argument("negative local time");
    s += l * l;
  }
  return s;
}

void RunningStats::add(double x) {
  ++n;
  const double delta = x - mean;
  mean += delta / static_cast<double>(n);
  m2 += delta * (x - mean);
}

void RunningStats::merge(const RunningStats& o) {
  if (o.n == 0) return;
  if (n == 0) {
    *this = o;
    return;
  }
  const double na = static_cast<double>(n), nb = static_cast<double>(o.n);
  const double delta = o.mean - mean;
  const double tot = na + nb;
  mean += delta * nb / tot;
  m2 += o.m2 + delta * delta * na * nb / tot;
  n += o.n;
}

Estimate RunningStats::estimate() const {
  Estimate e;
  e.mean = mean;
  e.n = n;
  if (n >= 2) {
    const double var = m2 / static_cast<double>(n - 1);
    e.std_error = std::sqrt(std::max(0.0, var) / static_cast<double>(n));
  }
  return e;
}

std::vector<RunningStats> run_blocks(std::int64_t n_samples, std::size_t n_outputs,
                                     const SamplerOptions& opts, const SampleFn& sample) {
  if (n_samples < 0) throw std::invalid_argument("negative sample count");
  if (opts.block_size < 1) throw std::invalid_argument("block size must be >= 1");
  const std::int64_t n_blocks = (n_samples + opts.block_size - 1) / opts.block_size;
  std::vector<std::vector<RunningStats>> partial(static_cast<std::size_t>(n_blocks),
                                                 std::vector<RunningStats>(n_outputs));
  std::atomic<std::int64_t> next{0};
  auto worker = [&] {
    std::vector<double> out(n_outputs);
    for (std::int64_t b; (b = next.fetch_add(1)) < n_blocks;) {
      Rng rng = make_rng(opts.seed, opts.stream, static_cast<std::uint64_t>(b));
      const std::int64_t count = std::min(opts.block_size, n_samples - b * opts.block_size);
      auto& stats = partial[static_cast<std::size_t>(b)];
      for (std::int64_t i = 0; i < count; ++i) {
        sample(rng, out);
        for (std::size_t k = 0; k < n_outputs; ++k) stats[k].add(out[k]);
      }
    }
  };
  int threads = opts.threads > 0 ? opts.threads : static_cast<int>(std::thread::hardware_concurrency());
  threads = std::clamp<int>(threads, 1, static_cast<int>(std::max<std::int64_t>(1, n_blocks)));
  if (threads == 1) {
    worker();
  } else {
    std::vector<std::thread> pool;
    for (int i = 0; i < threads; ++i) pool.emplace_back(worker);
    for (auto& t : pool) t.join();
  }
  std::vector<RunningStats> total(n_outputs);
  for (const auto& block : partial) {
    for (std::size_t k = 0; k < n_outputs; ++k) total[k].merge(block[k]);
  }
  return total;
}

std::vector<Estimate> kernel_estimates(const LatticeSpec& spec, const Site& a, const Site& b, double T,
                                       std::span<const double> gs, std::int64_t n_samples,
                                       const SamplerOptions& opts) {
  check_samples(n_samples);
  if (!(T >= 0.0)) throw std::invalid_argument("T must be >= 0");
  for (double g : gs) {
    if (!(g >= 0.0)) throw std::invalid_argument("g must be >= 0");
  }
  std::vector<Estimate> out(gs.size());
  if (T == 0.0) {
    for (auto& e : out) {
      e.mean = spec.reduce(a) == spec.reduce(b) ? 1.0 : 0.0;
      e.n = n_samples;
      e.method = "exact";
    }
    return out;
  }
  const int d = spec.dim();
  const double Ts[1] = {T};
  const std::vector<double> g(gs.begin(), gs.end());
  auto stats = run_blocks(n_samples, g.size(), opts, [&](Rng& rng, std::span<double> o) {
    Occupation occ(spec);
    walk_grid(
        d, a, Ts, rng, [&](const Site& x, double dt) { occ.hold(x, dt); },
        [&](std::size_t, const Site& x, double dt) {
          const bool hit = occ.same_site(x, b);
          const double I = hit ? occ.peek(x, dt) : 0.0;
          for (std::size_t k = 0; k < g.size(); ++k) o[k] = hit ? std::exp(-g[k] * I) : 0.0;
        });
  });
  for (std::size_t k = 0; k < g.size(); ++k) out[k] = stats[k].estimate();
  return out;
}

Estimate kernel_estimate(const LatticeSpec& spec, const Site& a, const Site& b, double T, double g,
                         std::int64_t n_samples, const SamplerOptions& opts) {
  const double gs[1] = {g};
  return kernel_estimates(spec, a, b, T, gs, n_samples, opts).front();
}

std::vector<KernelCell> kernel_scan(const LatticeSpec& spec, const Site& a, std::span<const Site> bs,
                                    std::span<const double> Ts, double g, std::int64_t n_samples,
                                    const SamplerOptions& opts) {
  check_samples(n_samples);
  std::vector<KernelCell> cells;
  const int d = spec.dim();
  for (std::size_t ti = 0; ti < Ts.size(); ++ti) {
    const double T = Ts[ti];
    if (!(T >= 0.0)) throw std::invalid_argument("T must be >= 0");
    if (T == 0.0) {
      for (const Site& b : bs) {
        cells.push_back({T, b, kernel_estimate(spec, a, b, 0.0, g, n_samples, opts)});
      }
      continue;
    }
    SamplerOptions o = opts;
    o.stream = opts.stream * 1000003ULL + ti;
    const double grid[1] = {T};
    auto stats = run_blocks(n_samples, bs.size(), o, [&](Rng& rng, std::span<double> out) {
      Occupation occ(spec);
      walk_grid(
          d, a, grid, rng, [&](const Site& x, double dt) { occ.hold(x, dt); },
          [&](std::size_t, const Site& x, double dt) {
            for (std::size_t k = 0; k < bs.size(); ++k) {
              out[k] = occ.same_site(x, bs[k]) ? (g == 0.0 ? 1.0 : std::exp(-g * occ.peek(x, dt))) : 0.0;
            }
          });
    });
    for (std::size_t k = 0; k < bs.size(); ++k) cells.push_back({T, bs[k], stats[k].estimate()});
  }
  return cells;
}

double tail_budget(double g, double nu, double T_max, double volume) {
  if (!(g >= 0.0) || !(volume > 0.0)) throw std::invalid_argument("tail budget needs g >= 0, |Lambda| > 0");
  const double inf = std::numeric_limits<double>::infinity();
  const double exp_bound = nu > 0.0 ? std::exp(-nu * T_max) / nu : inf;
  if (g == 0.0) return exp_bound;
  // int_{T}^inf e^{-a t^2 - nu t} dt = e^{nu^2/(4a)} sqrt(pi/(4a)) erfc(sqrt(a) T + nu / (2 sqrt(a))).
  const double alpha = g / volume;
  const double sa = std::sqrt(alpha);
  const double log_val = nu * nu / (4.0 * alpha) + 0.5 * std::log(std::numbers::pi / (4.0 * alpha)) +
                         gsl_sf_log_erfc(sa * T_max + nu / (2.0 * sa));
  return std::min(exp_bound, std::exp(log_val));
}

std::vector<double> uniform_grid(double T_max, double h) {
  if (!(T_max > 0.0) || !(h > 0.0)) throw std::invalid_argument("grid needs T_max > 0 and h > 0");
  const auto n = static_cast<std::size_t>(std::llround(T_max / h));
  if (n < 1 || std::abs(static_cast<double>(n) * h - T_max) > 1e-9 * T_max) {
    throw std::invalid_argument("T_max must be a multiple of the grid step");
  }
  std::vector<double> g(n + 1);
  for (std::size_t k = 0; k <= n; ++k) g[k] = T_max * static_cast<double>(k) / static_cast<double>(n);
  return g;
}

namespace {

double quadrature_budget(const RunningStats& diff) {
  const Estimate e = diff.estimate();
  return (std::abs(e.mean) + 3.0 * e.std_error) / 3.0;
}

void require_tail(double tail, double tolerance, double T_max) {
  if (tail > tolerance) {
    std::ostringstream os;
    os << "tail budget " << tail << " beyond T_max=" << T_max << " exceeds tolerance " << tolerance;
    throw TailBudgetError(os.str());
  }
}

}  // namespace

std::vector<TwoPointResult> two_point_side_sweep(int d, std::span<const int> sides, const Site& a,
                                                 const Site& b, double g, double nu,
                                                 std::span<const double> T_grid, std::int64_t n_samples,
                                                 const SamplerOptions& opts, double tail_tolerance) {
  check_samples(n_samples);
  if (!(g >= 0.0)) throw std::invalid_argument("g must be >= 0");
  const std::vector<double> Ts = prepared_grid(T_grid);
  const auto w = trapezoid_weights(Ts);
  const auto wc = coarse_weights(Ts);
  std::vector<double> damp(Ts.size());
  for (std::size_t k = 0; k < Ts.size(); ++k) damp[k] = std::exp(-nu * Ts[k]);

  std::vector<LatticeSpec> specs;
  std::vector<TwoPointResult> res(sides.size());
  for (std::size_t s = 0; s < sides.size(); ++s) {
    specs.push_back(LatticeSpec::torus(d, sides[s]));
    res[s].T_max = Ts.back();
    res[s].grid_points = Ts.size();
    res[s].tail_budget = tail_budget(g, nu, Ts.back(), static_cast<double>(specs.back().volume()));
    require_tail(res[s].tail_budget, tail_tolerance, Ts.back());
  }
  const std::size_t ns = specs.size();
  auto stats = run_blocks(n_samples, 2 * ns, opts, [&](Rng& rng, std::span<double> out) {
    std::vector<Occupation> occ;
    occ.reserve(ns);
    for (const auto& sp : specs) occ.emplace_back(sp);
    std::fill(out.begin(), out.end(), 0.0);
    walk_grid(
        d, a, Ts, rng,
        [&](const Site& x, double dt) {
          for (auto& o : occ) o.hold(x, dt);
        },
        [&](std::size_t k, const Site& x, double dt) {
          for (std::size_t s = 0; s < ns; ++s) {
            if (!occ[s].same_site(x, b)) continue;
            const double v = damp[k] * (g == 0.0 ? 1.0 : std::exp(-g * occ[s].peek(x, dt)));
            out[2 * s] += w[k] * v;
            out[2 * s + 1] += (w[k] - wc[k]) * v;
          }
        });
  });
  for (std::size_t s = 0; s < ns; ++s) {
    res[s].estimate = stats[2 * s].estimate();
    res[s].quadrature_budget = quadrature_budget(stats[2 * s + 1]);
  }
  return res;
}

TwoPointResult two_point_estimate(const LatticeSpec& spec, const Site& a, const Site& b, double g,
                                  double nu, std::span<const double> T_grid, std::int64_t n_samples,
                                  const SamplerOptions& opts, double tail_tolerance) {
  if (!spec.is_torus()) throw std::invalid_argument("two-point estimates run on a torus");
  const int side = spec.side();
  const int sides[1] = {side};
  return two_point_side_sweep(spec.dim(), sides, spec.reduce(a), spec.reduce(b), g, nu, T_grid,
                              n_samples, opts, tail_tolerance)
      .front();
}

double chernoff_displacement_bound(int d, double T, double k) {
  const double mean = 2.0 * d * T;
  if (!(k > mean)) throw std::invalid_argument("Chernoff bound requires k > 2dT");
  if (T == 0.0) return 0.0;
  return std::exp(-mean + k * std::log(mean * std::numbers::e / k));
}

SubadditivityReport subadditivity_check(const LatticeSpec& spec, const Site& a, double S, double T,
                                        double g, std::int64_t n_samples, const SamplerOptions& opts) {
  check_samples(n_samples);
  if (!(S >= 0.0) || !(T > 0.0)) throw std::invalid_argument("subadditivity needs S >= 0, T > 0");
  const int d = spec.dim();
  // Sum over b of c_t(a, b) = E_a e^{-g I(t)}.
  auto total_mass = [&](double t, std::uint64_t stream) {
    Estimate e;
    if (t == 0.0 || g == 0.0) {
      e.mean = 1.0;
      e.n = n_samples;
      e.method = "exact";
      return e;
    }
    SamplerOptions o = opts;
    o.stream = opts.stream * 1000003ULL + stream;
    const double grid[1] = {t};
    auto st = run_blocks(n_samples, 1, o, [&](Rng& rng, std::span<double> out) {
      Occupation occ(spec);
      walk_grid(
          d, a, grid, rng, [&](const Site& x, double dt) { occ.hold(x, dt); },
          [&](std::size_t, const Site& x, double dt) { out[0] = std::exp(-g * occ.peek(x, dt)); });
    });
    return st[0].estimate();
  };
  SubadditivityReport r;
  r.sum_S = total_mass(S, 0);
  r.sum_T = total_mass(T, 1);
  r.sum_ST = total_mass(S + T, 2);
  r.ratio = r.sum_ST.mean / (r.sum_S.mean * r.sum_T.mean);
  const double rel = std::hypot(std::hypot(r.sum_S.std_error / r.sum_S.mean, r.sum_T.std_error / r.sum_T.mean),
                                r.sum_ST.std_error / r.sum_ST.mean);
  r.ratio_std_error = r.ratio * rel;
  r.z_score = r.ratio_std_error > 0.0 ? (r.ratio - 1.0) / r.ratio_std_error : 0.0;
  return r;
}

}  // namespace rgwsaw::mc
