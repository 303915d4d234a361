#pragma once

#include <absl/container/flat_hash_map.h>

#include <cstdint>
#include <functional>
#include <random>
#include <span>
#include <string>
#include <vector>

#include "rgwsaw/lattice.hpp"

namespace rgwsaw {

template <typename H>
H AbslHashValue(H h, const Site& s) {
  return H::combine(H::combine_contiguous(std::move(h), s.coords().data(), s.coords().size()), s.dim());
}

}  // namespace rgwsaw

namespace rgwsaw::mc {

using Rng = std::mt19937_64;

/// Independent stream for (seed, stream, block); the only way generators are created.
Rng make_rng(std::uint64_t seed, std::uint64_t stream, std::uint64_t block);

/// Continuous-time walk with generator Delta: Exp(2d) holding times, uniform neighbour choice.
struct Trajectory {
  Site start;
  double T = 0.0;
  std::vector<double> jump_times;  // strictly increasing, in (0, T]
  std::vector<Site> positions;     // positions[k] is the site after k jumps

  std::size_t jumps() const { return jump_times.size(); }
  Site end() const { return positions.back(); }
  Site at(double t) const;
};

Trajectory sample_trajectory(const LatticeSpec& spec, const Site& start, double T, Rng& rng);

struct LocalTimeField {
  absl::flat_hash_map<Site, double> occupation;
  double total() const;
  double at(const Site& x) const;
};

LocalTimeField local_times(const LatticeSpec& spec, const Trajectory& path);

/// I(T) = sum_x L_{x,T}^2.
double intersection_local_time(const LocalTimeField& field);

struct Estimate {
  double mean = 0.0;
  double std_error = 0.0;
  std::int64_t n = 0;
  std::string method = "plain";
};

/// Welford accumulator; merge() is Chan's pairwise update.
struct RunningStats {
  std::int64_t n = 0;
  double mean = 0.0;
  double m2 = 0.0;

  void add(double x);
  void merge(const RunningStats& o);
  Estimate estimate() const;
};

struct SamplerOptions {
  std::uint64_t seed = 1;
  std::uint64_t stream = 0;
  int threads = 1;
  std::int64_t block_size = 4096;
};

/// Runs `sample(rng, out)` n times, each call filling out.size() == n_outputs values. Samples are
/// assigned to fixed blocks with their own streams, and block statistics are merged in block
/// order, so the result does not depend on the number of threads.
using SampleFn = std::function<void(Rng&, std::span<double>)>;
std::vector<RunningStats> run_blocks(std::int64_t n_samples, std::size_t n_outputs,
                                     const SamplerOptions& opts, const SampleFn& sample);

/// c_T(a, b) = E_a(e^{-g I(T)} 1{X(T) = b}) for several g on the same paths.
std::vector<Estimate> kernel_estimates(const LatticeSpec& spec, const Site& a, const Site& b, double T,
                                       std::span<const double> gs, std::int64_t n_samples,
                                       const SamplerOptions& opts);

Estimate kernel_estimate(const LatticeSpec& spec, const Site& a, const Site& b, double T, double g,
                         std::int64_t n_samples, const SamplerOptions& opts);

struct KernelCell {
  double T = 0.0;
  Site b;
  Estimate estimate;
};

/// Kernel on a (T, b) grid. Each T uses its own stream; displacements share paths.
std::vector<KernelCell> kernel_scan(const LatticeSpec& spec, const Site& a, std::span<const Site> bs,
                                    std::span<const double> Ts, double g, std::int64_t n_samples,
                                    const SamplerOptions& opts);

/// int_{T_max}^inf exp(-g T^2/|Lambda| - nu T) dT, the bound on the neglected part of the T integral.
double tail_budget(double g, double nu, double T_max, double volume);

class TailBudgetError : public std::runtime_error {
public:
  using std::runtime_error::runtime_error;
};

struct TwoPointResult {
  Estimate estimate;
  double quadrature_budget = 0.0;  // Richardson estimate of the trapezoid bias
  double tail_budget = 0.0;
  double T_max = 0.0;
  std::size_t grid_points = 0;
};

/// Uniform grid 0, h, ..., T_max.
std::vector<double> uniform_grid(double T_max, double h);

/// Trapezoid estimate of int_0^{T_max} c_T(a,b) e^{-nu T} dT plus budgets. Throws TailBudgetError when
/// the tail budget exceeds `tail_tolerance` (pass +inf to only report it).
TwoPointResult two_point_estimate(const LatticeSpec& spec, const Site& a, const Site& b, double g,
                                  double nu, std::span<const double> T_grid, std::int64_t n_samples,
                                  const SamplerOptions& opts, double tail_tolerance);

/// Two-point estimates on several torus sides from one coupled family of Z^d paths.
std::vector<TwoPointResult> two_point_side_sweep(int d, std::span<const int> sides, const Site& a,
                                                 const Site& b, double g, double nu,
                                                 std::span<const double> T_grid, std::int64_t n_samples,
                                                 const SamplerOptions& opts, double tail_tolerance);

/// e^{-2dT} (2dTe/k)^k, valid for k > 2dT.
double chernoff_displacement_bound(int d, double T, double k);

struct SubadditivityReport {
  Estimate sum_S, sum_T, sum_ST;
  double ratio = 1.0;  // sum_ST / (sum_S sum_T)
  double ratio_std_error = 0.0;
  double z_score = 0.0;  // (ratio - 1) / ratio_std_error, 0 when both vanish
};

SubadditivityReport subadditivity_check(const LatticeSpec& spec, const Site& a, double S, double T,
                                        double g, std::int64_t n_samples, const SamplerOptions& opts);

}  // namespace rgwsaw::mc
