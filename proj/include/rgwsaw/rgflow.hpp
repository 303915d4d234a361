#pragma once

#include <cstdint>
#include <iosfwd>
#include <memory>
#include <optional>
#include <span>
#include <stdexcept>
#include <vector>

#include "json.hpp"
#include "rgwsaw/covdecomp.hpp"
#include "rgwsaw/lattice.hpp"

namespace rgwsaw::rgflow {

/// Scales that may be infinite (mass scale at m^2 = 0, coalescence scale with a zero observable).
using Scale = std::optional<int>;

std::string scale_str(Scale s);

/// Smallest j >= 0 with L^{2j} m^2 >= 1; nullopt when m^2 = 0.
Scale mass_scale(int L, double mass_sq);

/// floor(log_L(2|a-b|)) with the Euclidean norm; nullopt if either initial coupling vanishes.
Scale coalescence_scale(int L, const Site& a, const Site& b, double lambda_a0 = 1.0,
                        double lambda_b0 = 1.0);

class TrustRegionError : public std::runtime_error {
public:
  using std::runtime_error::runtime_error;
};

/// gbar_{j+1} = gbar_j - beta_j gbar_j^2, j = 0..betas.size()-1. Throws TrustRegionError when a
/// value leaves (0, 2 g0).
std::vector<double> gbar_flow(double g0, std::span<const double> betas);

/// Massless gbar frozen after the mass scale.
double gtilde(std::span<const double> gbar_massless, int j, Scale j_m);

/// Diagnostic surrogate min(1, 2^{-(j-j_m)_+}); identically 1 at m^2 = 0.
double chi(int j, Scale j_m);

struct BulkPoint {
  double g = 0.0;
  double nu = 0.0;
  double z = 0.0;
};

struct FlowState {
  int j = 0;
  double gbar = 0.0;
  double gtilde = 0.0;
  BulkPoint bulk;
  double lambda_a = 1.0;
  double lambda_b = 1.0;
  double q_a = 0.0;
  double q_b = 0.0;
  double delta_q = 0.0;
  /// Remainders injected by the step that produced this state.
  double v_lambda = 0.0;
  double v_q = 0.0;
};

struct RemainderSample {
  double v_lambda = 0.0;
  double v_q = 0.0;
};

/// Covariance values of the next slice that the step needs: C_{j+1;0,0} and C_{j+1;a,b}.
struct SliceValues {
  double at_origin = 0.0;
  double at_ab = 0.0;
};

struct StepRules {
  Scale j_ab;
  bool freeze_lambda = false;   // lambda held at its initial value
  bool remainder_a = true;      // v_lambda applies to lambda_a (lambda_{a,0} = 1)
  bool remainder_b = true;
};

/// One scale of the perturbative observable flow; `next_bulk` supplies (g, nu, z) at scale j+1.
FlowState observable_step(const FlowState& s, const BulkPoint& next_bulk, const SliceValues& c_next,
                          double w1_j, double w1_next, const RemainderSample& r,
                          const StepRules& rules);

FlowState observable_step(const FlowState& s, const BulkPoint& next_bulk,
                          const covdecomp::CovSlice& c_next, const Displacement& ab, double w1_j,
                          double w1_next, const RemainderSample& r, const StepRules& rules);

enum class BulkPolicy { FrozenZero, GbarOnly, File };
enum class RemainderPolicy { Zero, BoundedRandom };

BulkPolicy parse_bulk_policy(const std::string& s);
RemainderPolicy parse_remainder_policy(const std::string& s);
std::string to_string(BulkPolicy p);
std::string to_string(RemainderPolicy p);

struct FlowConfig {
  int L = 4;
  int d = 4;
  double mass_sq = 0.01;
  double g0 = 0.05;
  Site a = Site::origin(4);
  Site b = Site{8, 0, 0, 0};
  int j_max = 6;
  double lambda_a0 = 1.0;
  double lambda_b0 = 1.0;
  bool freeze_lambda = false;
  BulkPolicy bulk = BulkPolicy::FrozenZero;
  std::vector<BulkPoint> bulk_trajectory;  // used by BulkPolicy::File, indexed by j
  std::optional<std::vector<double>> betas;  // overrides the bubble surrogate
  RemainderPolicy remainder = RemainderPolicy::Zero;
  std::uint64_t seed = 1;
  double K = 0.025330295910584444;  // (2 pi)^{-2}
  double trust_delta = 0.1;
};

/// Memoised covariance evaluations shared between flows with the same (d, L, m^2).
class FlowEngine {
public:
  FlowEngine(int d, int L, double mass_sq);
  int d() const { return d_; }
  int L() const { return L_; }
  double mass_sq() const { return mass_sq_; }
  covdecomp::SeriesDecomposition& massive() { return massive_; }
  /// Surrogate beta_j at the engine's mass (j = 0..n-1).
  std::vector<double> betas(int n);
  std::vector<double> massless_betas(int n);
  /// G(0) at the engine's mass, for the gbar-only bulk policy.
  double green_origin();

private:
  int d_, L_;
  double mass_sq_;
  covdecomp::SeriesDecomposition massive_;
  covdecomp::SeriesDecomposition massless_;
  std::vector<double> betas_, massless_betas_;
  std::optional<double> green_origin_;
};

/// Uniform[-1, 1] draw for (seed, scale, tag), independent of every other draw.
double remainder_uniform(std::uint64_t seed, int j, int tag);

/// K chi_j gtilde_j^2 U  (j < j_ab - 1, where it can still move lambda)
/// K |a-b|^{-2} chi_j 4^{-(j-j_ab)} gtilde_j U'  (j >= j_ab)
RemainderSample draw_remainder(const FlowConfig& cfg, int j, Scale j_ab, Scale j_m, double gtilde_j);

struct FlowResult {
  FlowConfig cfg;
  std::vector<FlowState> states;  // j = 0..j_max
  std::vector<double> gbar;
  std::vector<double> gbar_massless;
  Scale j_ab;
  Scale j_m;
  /// max_j |lambda_j - (1 + nu_j w_j)^{-1}(lambda_0 + sum_k vcheck_k)| over j < j_ab.
  double closed_form_error = 0.0;
};

class FlowIdentityError : public std::logic_error {
public:
  using std::logic_error::logic_error;
};

FlowResult run_flow(const FlowConfig& cfg, FlowEngine* engine = nullptr);

struct QInfinity {
  double q_infinity = 0.0;
  double green_ab = 0.0;
  double ratio = 0.0;
  double error_budget = 0.0;
  double lambda_product = 1.0;
  double remainder_sum = 0.0;
  double gbar_jab = 0.0;
  /// Second route: q_{j_max} plus remainders beyond j_max, and its certified series tail.
  double q_series = 0.0;
  double series_tail_bound = 0.0;
};

/// lambda_{a,j_ab-1} lambda_{b,j_ab-1} G(a-b) + sum_{i >= j_ab} v_{q,i}. At m^2 = 0 the series
/// route is not summable; a truncation budget must then be supplied explicitly.
QInfinity q_infinity(const FlowResult& flow, FlowEngine& engine,
                     std::optional<double> massless_budget = std::nullopt);

inline constexpr const char* kFlowCsvHeader =
    "j,gbar,gtilde,nu,z,lambda_a,lambda_b,q_a,q_b,delta_q,v_lambda,v_q";

void write_flow_csv(std::ostream& os, const FlowResult& flow);
nlohmann::json flow_summary(const FlowResult& flow, const QInfinity& q);

}  // namespace rgwsaw::rgflow
