#include "rgwsaw/rgflow.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <ostream>
#include <random>
#include <sstream>

#include "rgwsaw/format.hpp"

namespace rgwsaw::rgflow {

std::string scale_str(Scale s) { return s ? std::to_string(*s) : "inf"; }

Scale mass_scale(int L, double mass_sq) {
  if (!(mass_sq >= 0.0)) throw std::invalid_argument("mass_sq must be >= 0");
  if (L < 2) throw std::invalid_argument("L must be >= 2");
  if (mass_sq == 0.0) return std::nullopt;
  long double p = 1.0L;  // L^{2j}
  for (int j = 0;; ++j) {
    if (p * mass_sq >= 1.0L) return j;
    p *= static_cast<long double>(L) * L;
  }
}

Scale coalescence_scale(int L, const Site& a, const Site& b, double lambda_a0, double lambda_b0) {
  if (a.dim() != b.dim()) throw std::invalid_argument("site dimension mismatch");
  if (a == b) throw std::invalid_argument("coalescence scale requires a != b");
  if (L < 2) throw std::invalid_argument("L must be >= 2");
  if (lambda_a0 == 0.0 || lambda_b0 == 0.0) return std::nullopt;
  // Largest j with L^j <= 2|a-b|, compared in squares to stay in integers: L^{2j} <= 4|a-b|^2.
  const Displacement x = b - a;
  unsigned __int128 four_r2 = 0;
  for (int i = 0; i < x.dim(); ++i) four_r2 += static_cast<unsigned __int128>(4LL * x[i] * x[i]);
  int j = 0;
  unsigned __int128 p = static_cast<unsigned __int128>(L) * L;
  while (p <= four_r2) {
    ++j;
    p *= static_cast<unsigned __int128>(L) * L;
  }
  return j;
}

std::vector<double> gbar_flow(double g0, std::span<const double> betas) {
  if (!(g0 > 0.0)) throw TrustRegionError("gbar flow requires g0 > 0");
  std::vector<double> g{g0};
  for (std::size_t j = 0; j < betas.size(); ++j) {
    const double next = g.back() - betas[j] * g.back() * g.back();
    if (!(next > 0.0 && next < 2.0 * g0)) {
      std::ostringstream os;
      os << "gbar left the trust region (0, 2 g0) at j=" << j + 1 << ": gbar=" << next
         << " (beta_" << j << "=" << betas[j] << ")";
      throw TrustRegionError(os.str());
    }
    g.push_back(next);
  }
  return g;
}

double gtilde(std::span<const double> gbar_massless, int j, Scale j_m) {
  const int k = j_m ? std::min(j, *j_m) : j;
  if (k < 0 || k >= static_cast<int>(gbar_massless.size())) {
    throw std::out_of_range("gtilde: scale beyond the massless gbar sequence");
  }
  return gbar_massless[static_cast<std::size_t>(k)];
}

double chi(int j, Scale j_m) {
  if (!j_m) return 1.0;
  return std::min(1.0, std::ldexp(1.0, -std::max(0, j - *j_m)));
}

FlowState observable_step(const FlowState& s, const BulkPoint& next_bulk, const SliceValues& c_next,
                          double w1_j, double w1_next, const RemainderSample& r,
                          const StepRules& rules) {
  FlowState n = s;
  n.j = s.j + 1;
  n.bulk = next_bulk;
  n.v_lambda = r.v_lambda;
  n.v_q = r.v_q;
  const bool moving = !rules.freeze_lambda && (!rules.j_ab || s.j + 1 < *rules.j_ab);
  if (moving) {
    const double nu_plus = s.bulk.nu + 2.0 * s.bulk.g * c_next.at_origin;
    const double delta = nu_plus * w1_next - s.bulk.nu * w1_j;
    n.lambda_a = (1.0 - delta) * s.lambda_a + (rules.remainder_a ? r.v_lambda : 0.0);
    n.lambda_b = (1.0 - delta) * s.lambda_b + (rules.remainder_b ? r.v_lambda : 0.0);
  }
  const double dq_a = s.lambda_a * s.lambda_b * c_next.at_ab + r.v_q;
  const double dq_b = s.lambda_a * s.lambda_b * c_next.at_ab + r.v_q;
  n.q_a = s.q_a + dq_a;
  n.q_b = s.q_b + dq_b;
  n.delta_q = 0.5 * (dq_a + dq_b);
  return n;
}

FlowState observable_step(const FlowState& s, const BulkPoint& next_bulk,
                          const covdecomp::CovSlice& c_next, const Displacement& ab, double w1_j,
                          double w1_next, const RemainderSample& r, const StepRules& rules) {
  if (c_next.j != s.j + 1) throw std::invalid_argument("observable_step needs the scale-(j+1) slice");
  const SliceValues v{c_next.at(Site::origin(ab.dim())), c_next.at(ab)};
  return observable_step(s, next_bulk, v, w1_j, w1_next, r, rules);
}

BulkPolicy parse_bulk_policy(const std::string& s) {
  if (s == "frozen-zero") return BulkPolicy::FrozenZero;
  if (s == "gbar-only") return BulkPolicy::GbarOnly;
  if (s == "file") return BulkPolicy::File;
  throw std::invalid_argument("unknown bulk policy '" + s + "'");
}

RemainderPolicy parse_remainder_policy(const std::string& s) {
  if (s == "zero") return RemainderPolicy::Zero;
  if (s == "bounded-random") return RemainderPolicy::BoundedRandom;
  throw std::invalid_argument("unknown remainder policy '" + s + "'");
}

std::string to_string(BulkPolicy p) {
  switch (p) {
    case BulkPolicy::FrozenZero: return "frozen-zero";
    case BulkPolicy::GbarOnly: return "gbar-only";
    case BulkPolicy::File: return "file";
  }
  return "?";
}

std::string to_string(RemainderPolicy p) {
  return p == RemainderPolicy::Zero ? "zero" : "bounded-random";
}

FlowEngine::FlowEngine(int d, int L, double mass_sq)
    : d_(d), L_(L), mass_sq_(mass_sq), massive_(d, L, mass_sq), massless_(d, L, 0.0) {}

std::vector<double> FlowEngine::betas(int n) {
  while (static_cast<int>(betas_.size()) < n) {
    betas_.push_back(massive_.beta(static_cast<int>(betas_.size())));
  }
  return {betas_.begin(), betas_.begin() + n};
}

std::vector<double> FlowEngine::massless_betas(int n) {
  while (static_cast<int>(massless_betas_.size()) < n) {
    massless_betas_.push_back(massless_.beta(static_cast<int>(massless_betas_.size())));
  }
  return {massless_betas_.begin(), massless_betas_.begin() + n};
}

double FlowEngine::green_origin() {
  if (!green_origin_) green_origin_ = zd_green(d_, Site::origin(d_), mass_sq_);
  return *green_origin_;
}

double remainder_uniform(std::uint64_t seed, int j, int tag) {
  std::seed_seq seq{static_cast<std::uint32_t>(seed), static_cast<std::uint32_t>(seed >> 32),
                    static_cast<std::uint32_t>(j), static_cast<std::uint32_t>(tag), 0x5eedu};
  std::mt19937_64 gen(seq);
  const double u = static_cast<double>(gen() >> 11) * 0x1.0p-53;  // [0, 1)
  return 2.0 * u - 1.0;
}

RemainderSample draw_remainder(const FlowConfig& cfg, int j, Scale j_ab, Scale j_m, double gtilde_j) {
  RemainderSample r;
  const double c = chi(j, j_m);
  if (!j_ab || j < *j_ab - 1) {
    r.v_lambda = cfg.K * c * gtilde_j * gtilde_j * remainder_uniform(cfg.seed, j, 0);
  }
  if (j_ab && j >= *j_ab) {
    const double r2 = (cfg.b - cfg.a).l2() * (cfg.b - cfg.a).l2();
    r.v_q = cfg.K / r2 * c * std::ldexp(1.0, -2 * (j - *j_ab)) * gtilde_j *
            remainder_uniform(cfg.seed, j, 1);
  }
  return r;
}

namespace {

void validate(const FlowConfig& cfg) {
  if (cfg.L < 3) throw std::invalid_argument("flow requires L >= 3");
  if (cfg.a.dim() != cfg.d || cfg.b.dim() != cfg.d) {
    throw std::invalid_argument("observable points must have dimension d");
  }
  if (cfg.a == cfg.b) throw std::invalid_argument("observable points must differ");
  if (cfg.j_max < 1) throw std::invalid_argument("j_max must be >= 1");
  if (!(cfg.mass_sq >= 0.0)) throw std::invalid_argument("mass_sq must be >= 0");
  if (!(cfg.g0 > 0.0 && cfg.g0 < cfg.trust_delta)) {
    std::ostringstream os;
    os << "g0=" << cfg.g0 << " outside the trust region (0, " << cfg.trust_delta << ")";
    throw TrustRegionError(os.str());
  }
  for (double l : {cfg.lambda_a0, cfg.lambda_b0}) {
    if (l != 0.0 && l != 1.0) throw std::invalid_argument("initial observable couplings must be 0 or 1");
  }
  if (cfg.bulk == BulkPolicy::File &&
      static_cast<int>(cfg.bulk_trajectory.size()) < cfg.j_max + 1) {
    throw std::invalid_argument("bulk trajectory file must cover scales 0..j_max");
  }
  if (cfg.betas && static_cast<int>(cfg.betas->size()) < cfg.j_max) {
    throw std::invalid_argument("beta override must cover scales 0..j_max-1");
  }
}

}  // namespace

FlowResult run_flow(const FlowConfig& cfg, FlowEngine* engine) {
  validate(cfg);
  std::unique_ptr<FlowEngine> own;
  if (!engine) {
    own = std::make_unique<FlowEngine>(cfg.d, cfg.L, cfg.mass_sq);
    engine = own.get();
  }
  if (engine->d() != cfg.d || engine->L() != cfg.L || engine->mass_sq() != cfg.mass_sq) {
    throw std::invalid_argument("flow engine does not match the configuration");
  }
  auto& series = engine->massive();

  FlowResult res;
  res.cfg = cfg;
  const std::vector<double> betas =
      cfg.betas ? std::vector<double>(cfg.betas->begin(), cfg.betas->begin() + cfg.j_max)
                : engine->betas(cfg.j_max);
  res.gbar = gbar_flow(cfg.g0, betas);
  res.gbar_massless = gbar_flow(cfg.g0, engine->massless_betas(cfg.j_max));
  res.j_ab = coalescence_scale(cfg.L, cfg.a, cfg.b, cfg.lambda_a0, cfg.lambda_b0);
  res.j_m = mass_scale(cfg.L, cfg.mass_sq);

  const Site origin = Site::origin(cfg.d);
  const Displacement ab = cfg.b - cfg.a;
  auto bulk_at = [&](int j) -> BulkPoint {
    switch (cfg.bulk) {
      case BulkPolicy::FrozenZero: return {res.gbar[j], 0.0, 0.0};
      case BulkPolicy::GbarOnly:
        // First-order critical trajectory: nu_j = -2 gbar_j sum_{i>j} C_{i;0,0}.
        return {res.gbar[j], -2.0 * res.gbar[j] * (engine->green_origin() - series.partial(j, origin)),
                0.0};
      case BulkPolicy::File: return cfg.bulk_trajectory[static_cast<std::size_t>(j)];
    }
    return {};
  };

  StepRules rules;
  rules.j_ab = res.j_ab;
  rules.freeze_lambda = cfg.freeze_lambda;
  rules.remainder_a = cfg.lambda_a0 != 0.0;
  rules.remainder_b = cfg.lambda_b0 != 0.0;

  FlowState s;
  s.j = 0;
  s.bulk = bulk_at(0);
  s.lambda_a = cfg.lambda_a0;
  s.lambda_b = cfg.lambda_b0;
  s.gbar = res.gbar[0];
  s.gtilde = gtilde(res.gbar_massless, 0, res.j_m);
  res.states.push_back(s);

  // Check variables lambda^check_j = lambda_j (1 + nu_j w_j); w_0 = 0.
  double check_a = cfg.lambda_a0;
  double check_b = cfg.lambda_b0;
  for (int j = 0; j < cfg.j_max; ++j) {
    const SliceValues c{series.slice(j + 1, origin), series.slice(j + 1, ab)};
    const double w_j = series.w1(j);
    const double w_next = series.w1(j + 1);
    const RemainderSample r = cfg.remainder == RemainderPolicy::BoundedRandom
                                  ? draw_remainder(cfg, j, res.j_ab, res.j_m, s.gtilde)
                                  : RemainderSample{};
    const BulkPoint nb = bulk_at(j + 1);
    FlowState n = observable_step(s, nb, c, w_j, w_next, r, rules);
    n.gbar = res.gbar[j + 1];
    n.gtilde = gtilde(res.gbar_massless, j + 1, res.j_m);

    const bool moving = !cfg.freeze_lambda && (!res.j_ab || j + 1 < *res.j_ab);
    if (moving) {
      const double nu_plus = s.bulk.nu + 2.0 * s.bulk.g * c.at_origin;
      const double delta = nu_plus * w_next - s.bulk.nu * w_j;
      const double nw = nb.nu * w_next;
      auto vcheck = [&](double lambda, bool remainder) {
        const double v = remainder ? r.v_lambda : 0.0;
        return (nb.nu - nu_plus) * lambda * w_next + v * (1.0 + nw) - delta * lambda * nw;
      };
      check_a += vcheck(s.lambda_a, rules.remainder_a);
      check_b += vcheck(s.lambda_b, rules.remainder_b);
      res.closed_form_error = std::max({res.closed_form_error,
                                        std::abs(check_a / (1.0 + nw) - n.lambda_a),
                                        std::abs(check_b / (1.0 + nw) - n.lambda_b)});
    }
    res.states.push_back(n);
    s = n;
  }
  if (!(res.closed_form_error <= 1e-12)) {
    std::ostringstream os;
    os << "closed-form lambda disagrees with the iterated flow by " << res.closed_form_error;
    throw FlowIdentityError(os.str());
  }
  for (const FlowState& st : res.states) {
    if (!std::isfinite(st.lambda_a) || !std::isfinite(st.q_a)) {
      throw std::runtime_error("flow produced non-finite couplings");
    }
  }
  return res;
}

QInfinity q_infinity(const FlowResult& flow, FlowEngine& engine, std::optional<double> massless_budget) {
  const FlowConfig& cfg = flow.cfg;
  if (cfg.mass_sq == 0.0 && !massless_budget) {
    throw std::domain_error("q_infinity at m^2 = 0: slice tail is not summable without a truncation budget");
  }
  QInfinity q;
  const Displacement ab = cfg.b - cfg.a;
  QuadratureOptions tight;
  tight.abs_tol = 1e-300;
  tight.rel_tol = 1e-12;
  const GreenValue g = zd_green_detailed(cfg.d, ab, cfg.mass_sq, tight);
  q.green_ab = g.value;

  const int j_last = static_cast<int>(flow.states.size()) - 1;
  if (flow.j_ab) {
    if (*flow.j_ab > j_last) throw std::invalid_argument("q_infinity needs j_max >= j_ab");
    const FlowState& pre = flow.states[static_cast<std::size_t>(std::max(0, *flow.j_ab - 1))];
    q.lambda_product = pre.lambda_a * pre.lambda_b;
    q.gbar_jab = flow.gbar[static_cast<std::size_t>(*flow.j_ab)];
    for (int i = *flow.j_ab; i < j_last; ++i) q.remainder_sum += flow.states[i + 1].v_q;
  } else {
    q.lambda_product = 0.0;
    q.gbar_jab = flow.gbar.back();
  }
  q.q_infinity = q.lambda_product * q.green_ab + q.remainder_sum;
  q.ratio = q.q_infinity / q.green_ab;
  q.error_budget = std::abs(q.lambda_product) * g.abs_error + massless_budget.value_or(0.0);

  const FlowState& last = flow.states.back();
  q.q_series = 0.5 * (last.q_a + last.q_b);
  q.series_tail_bound =
      massless_budget ? *massless_budget
                      : std::abs(q.lambda_product) * engine.massive().tail_bound(j_last);
  return q;
}

void write_flow_csv(std::ostream& os, const FlowResult& flow) {
  os << kFlowCsvHeader << '\n';
  for (const FlowState& s : flow.states) {
    os << s.j << ',' << format_double(s.gbar) << ',' << format_double(s.gtilde) << ','
       << format_double(s.bulk.nu) << ',' << format_double(s.bulk.z) << ','
       << format_double(s.lambda_a) << ',' << format_double(s.lambda_b) << ','
       << format_double(s.q_a) << ',' << format_double(s.q_b) << ',' << format_double(s.delta_q)
       << ',' << format_double(s.v_lambda) << ',' << format_double(s.v_q) << '\n';
  }
}

nlohmann::json flow_summary(const FlowResult& flow, const QInfinity& q) {
  nlohmann::json j;
  auto scale = [](Scale s) -> nlohmann::json {
    if (s) return *s;
    return "inf";
  };
  j["q_infinity"] = q.q_infinity;
  j["green_ab"] = q.green_ab;
  j["ratio"] = q.ratio;
  j["error_budget"] = q.error_budget;
  j["j_ab"] = scale(flow.j_ab);
  j["j_m"] = scale(flow.j_m);
  j["lambda_product"] = q.lambda_product;
  j["remainder_sum"] = q.remainder_sum;
  j["gbar_jab"] = q.gbar_jab;
  j["q_series"] = q.q_series;
  j["series_tail_bound"] = q.series_tail_bound;
  j["closed_form_error"] = flow.closed_form_error;
  j["separation"] = (flow.cfg.b - flow.cfg.a).l2();
  j["positive_semidefinite_certified"] = false;
  return j;
}

}  // namespace rgwsaw::rgflow
