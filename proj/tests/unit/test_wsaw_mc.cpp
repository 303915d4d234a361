#include "doctest.h"

#include <gsl/gsl_cdf.h>
#include <gsl/gsl_integration.h>

#include <cmath>
#include <numbers>

#include "rgwsaw/lattice.hpp"
#include "rgwsaw/wsaw_mc.hpp"

using namespace rgwsaw;
using namespace rgwsaw::mc;

TEST_CASE("trajectories are reproducible per stream") {
  const auto spec = LatticeSpec::torus(4, 8);
  Rng r1 = make_rng(7, 3, 0), r2 = make_rng(7, 3, 0), r3 = make_rng(7, 4, 0);
  const auto p1 = sample_trajectory(spec, Site::origin(4), 5.0, r1);
  const auto p2 = sample_trajectory(spec, Site::origin(4), 5.0, r2);
  const auto p3 = sample_trajectory(spec, Site::origin(4), 5.0, r3);
  CHECK(p1.jump_times == p2.jump_times);
  CHECK(p1.positions == p2.positions);
  CHECK(p1.jump_times != p3.jump_times);
}

TEST_CASE("trajectory structure") {
  const auto spec = LatticeSpec::torus(4, 8);
  Rng rng = make_rng(1, 0, 0);
  for (int i = 0; i < 200; ++i) {
    const auto p = sample_trajectory(spec, Site{1, 2, 3, 4}, 3.0, rng);
    REQUIRE(p.positions.size() == p.jumps() + 1);
    for (std::size_t k = 0; k < p.jumps(); ++k) {
      if (k > 0) CHECK(p.jump_times[k] > p.jump_times[k - 1]);
      CHECK(p.jump_times[k] <= 3.0);
      CHECK(spec.displacement(p.positions[k], p.positions[k + 1]).l1() == 1);
    }
    CHECK(p.at(0.0) == p.start);
    CHECK(p.at(3.0) == p.end());
  }
  CHECK_THROWS_AS(sample_trajectory(spec, Site::origin(4), 0.0, rng), std::invalid_argument);
}

TEST_CASE("short horizons rarely jump") {
  const auto spec = LatticeSpec::torus(4, 8);
  Rng rng = make_rng(2, 0, 0);
  int still = 0;
  for (int i = 0; i < 1000; ++i) {
    const auto p = sample_trajectory(spec, Site::origin(4), 1e-6, rng);
    if (p.jumps() == 0) {
      ++still;
      CHECK(p.end() == Site::origin(4));
    }
  }
  CHECK(still >= 995);
}

TEST_CASE("jump counts have Poisson mean 2dT") {
  const auto spec = LatticeSpec::torus(4, 8);
  RunningStats st;
  Rng rng = make_rng(3, 0, 0);
  for (int i = 0; i < 100000; ++i) st.add(static_cast<double>(sample_trajectory(spec, Site::origin(4), 1.0, rng).jumps()));
  const Estimate e = st.estimate();
  CHECK(std::abs(e.mean - 8.0) <= 3.0 * e.std_error);
  // Poisson variance equals the mean.
  CHECK(e.std_error * e.std_error * 1e5 == doctest::Approx(8.0).epsilon(0.03));
}

TEST_CASE("two-state chain on the side-2 cycle") {
  const auto spec = LatticeSpec::torus(1, 2);
  for (double t : {0.1, 0.4, 1.0}) {
    const double exact = 0.5 * (1.0 + std::exp(-4.0 * t));
    CHECK(torus_heat_kernel(spec, t, Site{0}) == doctest::Approx(exact).epsilon(1e-14));
    const Estimate e = kernel_estimate(spec, Site{0}, Site{0}, t, 0.0, 40000, {11, 0, 1, 4096});
    CHECK(std::abs(e.mean - exact) <= 3.0 * e.std_error);
  }
}

TEST_CASE("intersection local time: hand cases and floor") {
  const auto spec = LatticeSpec::torus(4, 8);
  Trajectory still;
  still.start = Site::origin(4);
  still.T = 2.5;
  still.positions = {still.start};
  CHECK(intersection_local_time(local_times(spec, still)) == 6.25);
  Trajectory two = still;
  two.T = 2.0;
  two.jump_times = {1.0};
  two.positions = {still.start, Site{1, 0, 0, 0}};
  const auto f = local_times(spec, two);
  CHECK(f.at(Site{1, 0, 0, 0}) == 1.0);
  CHECK(f.at(Site{0, 1, 0, 0}) == 0.0);
  CHECK(intersection_local_time(f) == 2.0);

  Rng rng = make_rng(4, 0, 0);
  const double vol = static_cast<double>(spec.volume());
  for (int i = 0; i < 2000; ++i) {
    const auto p = sample_trajectory(spec, Site::origin(4), 4.0, rng);
    const auto lt = local_times(spec, p);
    const double total = lt.total();
    CHECK(std::abs(total - 4.0) <= 1e-12 * 4.0);
    CHECK(intersection_local_time(lt) >= total * total / vol);
  }
  // A tiny torus gets filled: the floor is nearly attained yet never crossed.
  const auto tiny = LatticeSpec::torus(1, 2);
  for (int i = 0; i < 2000; ++i) {
    const auto lt = local_times(tiny, sample_trajectory(tiny, Site{0}, 50.0, rng));
    const double total = lt.total();
    CHECK(intersection_local_time(lt) >= total * total / 2.0);
  }
}

TEST_CASE("running statistics merge exactly like a single pass") {
  RunningStats all, a, b;
  Rng rng = make_rng(5, 0, 0);
  for (int i = 0; i < 1000; ++i) {
    const double x = std::sin(i) * 3 + (i % 7);
    all.add(x);
    (i < 377 ? a : b).add(x);
  }
  a.merge(b);
  CHECK(a.n == all.n);
  CHECK(a.mean == doctest::Approx(all.mean).epsilon(1e-14));
  CHECK(a.m2 == doctest::Approx(all.m2).epsilon(1e-12));
  RunningStats one;
  one.add(1.0);
  CHECK(one.estimate().std_error == 0.0);
}

TEST_CASE("block runner is independent of thread count") {
  const auto spec = LatticeSpec::torus(4, 8);
  SamplerOptions o1{42, 9, 1, 1000}, o3{42, 9, 3, 1000};
  const auto e1 = kernel_estimate(spec, Site::origin(4), Site{1, 0, 0, 0}, 1.0, 0.3, 10500, o1);
  const auto e3 = kernel_estimate(spec, Site::origin(4), Site{1, 0, 0, 0}, 1.0, 0.3, 10500, o3);
  CHECK(e1.mean == e3.mean);
  CHECK(e1.std_error == e3.std_error);
  CHECK(e1.n == 10500);
}

TEST_CASE("kernel estimates") {
  const auto spec = LatticeSpec::torus(4, 8);
  const Site o = Site::origin(4);
  CHECK(kernel_estimate(spec, o, o, 0.0, 0.5, 100, {}).mean == 1.0);
  CHECK(kernel_estimate(spec, o, Site{1, 0, 0, 0}, 0.0, 0.5, 100, {}).mean == 0.0);
  CHECK_THROWS_AS(kernel_estimate(spec, o, o, 1.0, 0.5, 50, {}), std::invalid_argument);
  CHECK_THROWS_AS(kernel_estimate(spec, o, o, 1.0, -0.1, 500, {}), std::invalid_argument);
  for (const Site& b : {Site{0, 0, 0, 0}, Site{1, 0, 0, 0}, Site{1, 1, 0, 0}}) {
    const double gs[3] = {0.0, 0.2, 1.0};
    const auto e = kernel_estimates(spec, o, b, 0.75, gs, 50000, {8, 1, 1, 4096});
    const double exact = torus_heat_kernel(spec, 0.75, b);
    CHECK(std::abs(e[0].mean - exact) <= 3.0 * e[0].std_error);
    CHECK(e[1].mean <= e[0].mean);
    CHECK(e[2].mean <= e[1].mean);
    CHECK(e[2].mean >= 0.0);
  }
}

TEST_CASE("kernel scan shares paths across displacements") {
  const auto spec = LatticeSpec::torus(4, 8);
  const Site bs[2] = {Site{0, 0, 0, 0}, Site{2, 0, 0, 0}};
  const double Ts[3] = {0.0, 0.5, 2.0};
  const auto cells = kernel_scan(spec, Site::origin(4), bs, Ts, 0.0, 20000, {3, 0, 1, 4096});
  REQUIRE(cells.size() == 6);
  CHECK(cells[0].estimate.mean == 1.0);
  CHECK(cells[1].estimate.mean == 0.0);
  for (const auto& c : cells) {
    const double exact = torus_heat_kernel(spec, c.T, c.b);
    CHECK(std::abs(c.estimate.mean - exact) <= 3.0 * c.estimate.std_error + 1e-15);
  }
}

namespace {

struct TailParams {
  double a, nu;
};

double tail_integrand(double t, void* p) {
  const auto* tp = static_cast<const TailParams*>(p);
  return std::exp(-tp->a * t * t - tp->nu * t);
}

}  // namespace

TEST_CASE("tail budget formula agrees with quadrature") {
  gsl_integration_workspace* ws = gsl_integration_workspace_alloc(1000);
  for (auto [g, nu, Tm, vol] : {std::tuple{0.2, 0.5, 10.0, 256.0}, std::tuple{0.2, -0.05, 30.0, 256.0},
                                std::tuple{1.0, 0.0, 5.0, 16.0}, std::tuple{0.05, 0.1, 20.0, 4096.0}}) {
    TailParams tp{g / vol, nu};
    gsl_function f{&tail_integrand, &tp};
    double res = 0, err = 0;
    gsl_integration_qagiu(&f, Tm, 1e-300, 1e-12, 1000, ws, &res, &err);
    CHECK(tail_budget(g, nu, Tm, vol) == doctest::Approx(res).epsilon(1e-8));
  }
  gsl_integration_workspace_free(ws);
  CHECK(tail_budget(0.0, 0.5, 10.0, 256.0) == doctest::Approx(std::exp(-5.0) / 0.5));
  CHECK(std::isinf(tail_budget(0.0, 0.0, 10.0, 256.0)));
}

TEST_CASE("two-point estimate at g=0 matches the torus green function") {
  const auto spec = LatticeSpec::torus(4, 8);
  const auto grid = uniform_grid(16.0, 0.05);
  for (const Site& b : {Site{0, 0, 0, 0}, Site{1, 0, 0, 0}}) {
    const auto r = two_point_estimate(spec, Site::origin(4), b, 0.0, 0.5, grid, 20000, {21, 0, 1, 2048}, 1e-3);
    const double exact = torus_green(spec, Site::origin(4), b, 0.5);
    CHECK(r.tail_budget == doctest::Approx(2.0 * std::exp(-8.0)));
    CHECK(r.quadrature_budget < 1e-2);
    CHECK(std::abs(r.estimate.mean - exact) <= 3.0 * r.estimate.std_error + r.quadrature_budget + r.tail_budget);
  }
  CHECK_THROWS_AS(two_point_estimate(spec, Site::origin(4), Site::origin(4), 0.0, 0.5, grid, 200, {}, 1e-5),
                  TailBudgetError);
  const double bad[3] = {0.0, 2.0, 1.0};
  CHECK_THROWS_AS(two_point_estimate(spec, Site::origin(4), Site::origin(4), 0.0, 0.5, bad, 200, {}, 1.0),
                  std::invalid_argument);
}

TEST_CASE("two-point: diagonal dominates at short horizons") {
  const auto spec = LatticeSpec::torus(4, 8);
  const auto grid = uniform_grid(0.5, 0.05);
  const double inf = std::numeric_limits<double>::infinity();
  const auto same = two_point_estimate(spec, Site::origin(4), Site::origin(4), 0.2, 0.5, grid, 5000, {1, 0, 1, 1024}, inf);
  const auto off = two_point_estimate(spec, Site::origin(4), Site{1, 0, 0, 0}, 0.2, 0.5, grid, 5000, {1, 0, 1, 1024}, inf);
  CHECK(same.estimate.mean > off.estimate.mean + 3 * (same.estimate.std_error + off.estimate.std_error));
}

TEST_CASE("coupled side sweep") {
  const int sides[3] = {4, 8, 16};
  const auto grid = uniform_grid(12.0, 0.1);
  const auto r = two_point_side_sweep(4, sides, Site::origin(4), Site{1, 0, 0, 0}, 0.2, 0.5, grid, 4000,
                                      {5, 0, 1, 1000}, 1e-2);
  REQUIRE(r.size() == 3);
  for (const auto& x : r) CHECK(x.estimate.mean > 0.0);
  // The single-side entry point reproduces the coupled marginal exactly.
  const auto single = two_point_estimate(LatticeSpec::torus(4, 8), Site::origin(4), Site{1, 0, 0, 0}, 0.2, 0.5,
                                         grid, 4000, {5, 0, 1, 1000}, 1e-2);
  CHECK(single.estimate.mean == r[1].estimate.mean);
}

TEST_CASE("Chernoff displacement bound") {
  CHECK(chernoff_displacement_bound(4, 1.0, 16.0) ==
        doctest::Approx(std::exp(-8.0) * std::pow(8.0 * std::numbers::e / 16.0, 16)).epsilon(1e-13));
  double prev = 1.0;
  for (double k = 20.0; k <= 200.0; k += 20.0) {
    const double v = chernoff_displacement_bound(4, 1.0, k);
    CHECK(v < prev);
    prev = v;
  }
  CHECK(prev < 1e-100);
  CHECK_THROWS_AS(chernoff_displacement_bound(4, 1.0, 8.0), std::invalid_argument);
  CHECK_THROWS_AS(chernoff_displacement_bound(4, 1.0, 5.0), std::invalid_argument);

  const auto spec = LatticeSpec::torus(4, 8);
  Rng rng = make_rng(6, 0, 0);
  std::vector<int> counts(40, 0);
  const int n = 100000;
  for (int i = 0; i < n; ++i) {
    const auto j = sample_trajectory(spec, Site::origin(4), 1.0, rng).jumps();
    for (std::size_t k = 0; k < counts.size() && k <= j; ++k) ++counts[k];
  }
  for (int k = 9; k < 40; ++k) {
    // Jump counts are Poisson(2dT); the bound must dominate the exact tail.
    const double exact = gsl_cdf_poisson_Q(static_cast<unsigned>(k - 1), 8.0);
    CHECK(exact <= chernoff_displacement_bound(4, 1.0, k));
    const double freq = static_cast<double>(counts[k]) / n;
    CHECK(std::abs(freq - exact) <= 4.0 * std::sqrt(exact * (1 - exact) / n) + 1.0 / n);
  }
}

TEST_CASE("subadditivity diagnostics") {
  const auto spec = LatticeSpec::torus(4, 8);
  const auto free = subadditivity_check(spec, Site::origin(4), 1.0, 2.0, 0.0, 1000, {});
  CHECK(free.ratio == 1.0);
  CHECK(free.z_score == 0.0);
  const auto inter = subadditivity_check(spec, Site::origin(4), 1.0, 2.0, 0.3, 40000, {9, 0, 1, 4096});
  CHECK(inter.ratio <= 1.0 + 3.0 * inter.ratio_std_error);
  CHECK(inter.sum_ST.mean < inter.sum_T.mean);
  const auto zero_s = subadditivity_check(spec, Site::origin(4), 0.0, 1.0, 0.3, 40000, {9, 0, 1, 4096});
  CHECK(zero_s.sum_S.mean == 1.0);
  CHECK(std::abs(zero_s.z_score) <= 3.0);
}
