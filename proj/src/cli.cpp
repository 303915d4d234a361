#include "rgwsaw/cli.hpp"

#include <CLI11.hpp>
#include <gsl/gsl_version.h>
#include <openssl/evp.h>
#include <openssl/opensslv.h>

#include <algorithm>
#include <charconv>
#include <cmath>
#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <functional>
#include <limits>
#include <numbers>
#include <optional>
#include <sstream>
#include <vector>

#include "json.hpp"
#include "rgwsaw/covdecomp.hpp"
#include "rgwsaw/format.hpp"
#include "rgwsaw/lattice.hpp"
#include "rgwsaw/rgflow.hpp"
#include "rgwsaw/wsaw_mc.hpp"

#ifndef RGWSAW_VERSION
#define RGWSAW_VERSION "unknown"
#endif
#ifndef RGWSAW_ABSL_VERSION
#define RGWSAW_ABSL_VERSION "unknown"
#endif

namespace rgwsaw::cli {

namespace fs = std::filesystem;
using nlohmann::json;

namespace {

class UsageError : public std::runtime_error {
public:
  using std::runtime_error::runtime_error;
};

// A violated mathematical invariant; becomes the manifest's violation record.
class Violation : public std::runtime_error {
public:
  Violation(std::string inv, const std::string& detail, json extra = nullptr)
      : std::runtime_error(detail), invariant(std::move(inv)), data(std::move(extra)) {}
  std::string invariant;
  json data;
};

constexpr double kAsymptoteConst = 0.025330295910584444;  // (2 pi)^{-2}

std::string_view trim(std::string_view s) {
  const auto ws = " \t\r\n";
  const auto b = s.find_first_not_of(ws);
  if (b == std::string_view::npos) return {};
  return s.substr(b, s.find_last_not_of(ws) - b + 1);
}

std::vector<std::string> split(std::string_view s, char sep) {
  std::vector<std::string> out;
  if (trim(s).empty()) return out;
  std::size_t pos = 0;
  while (true) {
    const auto next = s.find(sep, pos);
    out.emplace_back(trim(s.substr(pos, next == std::string_view::npos ? std::string_view::npos : next - pos)));
    if (next == std::string_view::npos) break;
    pos = next + 1;
  }
  return out;
}

template <typename T>
T parse_number(std::string_view text, const std::string& what) {
  const auto s = trim(text);
  T v{};
  const auto [p, ec] = std::from_chars(s.data(), s.data() + s.size(), v);
  if (s.empty() || ec != std::errc() || p != s.data() + s.size()) {
    throw UsageError(what + ": cannot parse '" + std::string(s) + "'");
  }
  return v;
}

bool parse_bool(std::string_view text, const std::string& what) {
  const auto s = trim(text);
  if (s == "true" || s == "1" || s == "yes" || s == "on") return true;
  if (s == "false" || s == "0" || s == "no" || s == "off") return false;
  throw UsageError(what + ": expected a boolean, got '" + std::string(s) + "'");
}

Site parse_site(const std::string& text, int d, const std::string& what) {
  const auto parts = split(text, ',');
  if (static_cast<int>(parts.size()) != d) {
    throw UsageError(what + ": expected " + std::to_string(d) + " comma-separated coordinates, got '" + text + "'");
  }
  std::vector<int> c;
  for (const auto& p : parts) c.push_back(parse_number<int>(p, what));
  return Site{std::span<const int>(c)};
}

std::vector<Site> parse_sites(const std::string& text, int d, const std::string& what) {
  std::vector<Site> out;
  for (const auto& s : split(text, ';')) out.push_back(parse_site(s, d, what));
  return out;
}

template <typename T>
std::vector<T> parse_list(const std::string& text, const std::string& what) {
  std::vector<T> out;
  for (const auto& s : split(text, ',')) out.push_back(parse_number<T>(s, what));
  return out;
}

Site scaled(const Site& x, int k) {
  Site y = x;
  for (int i = 0; i < x.dim(); ++i) y[i] = x[i] * k;
  return y;
}

std::string fmt(double v) { return format_double(v); }

std::string site_csv(const Site& x) {
  std::string s;
  for (int i = 0; i < x.dim(); ++i) s += (i ? "," : "") + std::to_string(x[i]);
  return s;
}

json scale_json(rgflow::Scale s) { return s ? json(*s) : json("inf"); }

json estimate_json(const mc::Estimate& e) {
  return {{"mean", e.mean}, {"stderr", e.std_error}, {"n", e.n}, {"method", e.method}};
}

// --- settings ---------------------------------------------------------------------------------

struct Param {
  std::string key;
  std::string def;
  std::string help;
  bool is_switch = false;
};

std::string flag_name(std::string key) {
  std::replace(key.begin(), key.end(), '_', '-');
  return "--" + key;
}

class Settings {
public:
  std::map<std::string, std::string> values;
  std::map<std::string, std::string> sources;

  const std::string& str(const std::string& k) const {
    const auto it = values.find(k);
    if (it == values.end()) throw std::logic_error("unregistered setting " + k);
    return it->second;
  }
  std::optional<std::string> opt(const std::string& k) const {
    const auto& v = str(k);
    if (trim(v).empty()) return std::nullopt;
    return v;
  }
  int integer(const std::string& k) const { return parse_number<int>(str(k), k); }
  std::int64_t int64(const std::string& k) const { return parse_number<std::int64_t>(str(k), k); }
  std::uint64_t uint64(const std::string& k) const { return parse_number<std::uint64_t>(str(k), k); }
  double real(const std::string& k) const { return parse_number<double>(str(k), k); }
  bool boolean(const std::string& k) const { return parse_bool(str(k), k); }
};

struct Context {
  Settings s;
  fs::path out_dir;
  json inputs = json::object();
  json outputs = json::object();
  json derived = json::object();

  std::string read_input(const std::string& path) {
    std::ifstream f(path, std::ios::binary);
    if (!f) throw UsageError("cannot read input '" + path + "'");
    std::ostringstream os;
    os << f.rdbuf();
    inputs[path] = sha256_hex(os.str());
    return os.str();
  }

  void write_output(const std::string& name, const std::string& bytes) {
    const fs::path p = out_dir / name;
    fs::create_directories(p.parent_path());
    std::ofstream f(p, std::ios::binary | std::ios::trunc);
    f << bytes;
    if (!f) throw std::runtime_error("cannot write '" + p.string() + "'");
    outputs[name] = sha256_hex(bytes);
  }

  void write_json(const std::string& name, const json& j) { write_output(name, j.dump(2) + "\n"); }
};

struct Command {
  std::string name;
  std::string help;
  std::vector<Param> params;
  std::function<void(Context&)> run;
};

// --- CSV reading for report -------------------------------------------------------------------

struct Csv {
  std::string what;
  std::vector<std::string> header;
  std::vector<std::vector<std::string>> rows;

  std::size_t col(const std::string& name) const {
    const auto it = std::find(header.begin(), header.end(), name);
    if (it == header.end()) throw UsageError(what + ": missing column '" + name + "'");
    return static_cast<std::size_t>(it - header.begin());
  }
  double real(std::size_t row, const std::string& name) const {
    return parse_number<double>(rows[row][col(name)], what + ":" + name);
  }
};

Csv parse_csv(const std::string& text, const std::string& what) {
  Csv csv{what, {}, {}};
  std::istringstream is(text);
  std::string line;
  if (!std::getline(is, line)) throw UsageError(what + ": empty file");
  csv.header = split(line, ',');
  while (std::getline(is, line)) {
    if (trim(line).empty()) continue;
    auto row = split(line, ',');
    if (row.size() != csv.header.size()) {
      throw UsageError(what + ": row " + std::to_string(csv.rows.size() + 1) + " has " +
                       std::to_string(row.size()) + " fields, header has " + std::to_string(csv.header.size()));
    }
    csv.rows.push_back(std::move(row));
  }
  return csv;
}

// --- green ------------------------------------------------------------------------------------

void cmd_green(Context& c) {
  const int d = c.s.integer("d");
  if (d != 4) throw UsageError("green: the x1..x4 columns and the |x|^-2 asymptote need d = 4");
  const double m2 = c.s.real("mass_sq");
  if (!(m2 >= 0.0)) throw UsageError("green: mass_sq must be >= 0");
  const Site dir = parse_site(c.s.str("direction"), d, "direction");
  if (dir.is_origin()) throw UsageError("green: direction must be nonzero");
  const int r_min = c.s.integer("r_min"), r_max = c.s.integer("r_max");
  if (r_min < 0 || r_max < r_min) throw UsageError("green: need 0 <= r_min <= r_max");
  if (r_min == 0) throw UsageError("green: x = 0 has no asymptote value; use r_min >= 1");
  const QuadratureOptions q{c.s.real("abs_tol"), c.s.real("rel_tol"), 4000};

  std::ostringstream os;
  os << "x1,x2,x3,x4,green,asymptote,ratio\n";
  double max_err = 0.0;
  for (int k = r_min; k <= r_max; ++k) {
    const Site x = scaled(dir, k);
    const GreenValue g = zd_green_detailed(d, x, m2, q);
    const double as = zd_green_asymptote(x);
    max_err = std::max(max_err, g.abs_error);
    os << site_csv(x) << ',' << fmt(g.value) << ',' << fmt(as) << ',' << fmt(g.value / as) << '\n';
  }
  c.write_output("green.csv", os.str());
  c.derived["points"] = r_max - r_min + 1;
  c.derived["max_quadrature_error"] = max_err;
}

// --- frd --------------------------------------------------------------------------------------

std::string invariant_name(const std::string& what) { return what.substr(0, what.find(':')); }

void frd_import(Context& c, const std::string& path) {
  const std::string text = c.read_input(path);
  std::istringstream is(text);
  covdecomp::CovSlice sl;
  try {
    sl = covdecomp::import_slice(is);
  } catch (const covdecomp::ImportError& e) {
    throw Violation("import", e.what(), {{"file", path}});
  }
  std::ostringstream back;
  covdecomp::export_slice(back, sl);
  json j{{"file", path},
         {"j", sl.j},
         {"L", sl.L},
         {"d", sl.d},
         {"mass_sq", sl.mass_sq},
         {"range_radius", sl.range_radius},
         {"side", sl.side ? json(*sl.side) : json(nullptr)},
         {"orbits", sl.table.domain->size()},
         {"round_trip_identical", back.str() == text}};
  c.write_json("import.json", j);
}

void cmd_frd(Context& c) {
  if (auto path = c.s.opt("import")) return frd_import(c, *path);

  covdecomp::DecompConfig cfg;
  cfg.L = c.s.integer("L");
  cfg.d = c.s.integer("d");
  cfg.mass_sq = c.s.real("mass_sq");
  cfg.j_max = c.s.integer("j_max");
  if (const int n = c.s.integer("torus_n"); n > 0) cfg.torus_N = n;
  try {
    covdecomp::validate_config(cfg);
  } catch (const covdecomp::DecompositionError& e) {
    throw UsageError(std::string("frd: ") + e.what());
  }
  const auto dec = covdecomp::build_decomposition(cfg);
  const auto rep = covdecomp::validate_decomposition(dec, c.s.integer("convergence_radius"));

  json slices = json::array();
  std::optional<std::string> round_trip_failure;
  for (const auto& sl : dec.slices) {
    slices.push_back({{"j", sl.j},
                      {"range_radius", sl.range_radius},
                      {"orbits", sl.table.domain->size()},
                      {"torus_final", sl.torus_final},
                      {"lattice_sum", sl.table.lattice_sum()},
                      {"lattice_sum_of_squares", sl.table.lattice_sum_of_squares()}});
    if (!c.s.boolean("export")) continue;
    std::ostringstream os;
    covdecomp::export_slice(os, sl);
    c.write_output("slices/C_" + std::to_string(sl.j) + ".frd", os.str());
    std::istringstream is(os.str());
    const auto back = covdecomp::import_slice(is);
    std::ostringstream again;
    covdecomp::export_slice(again, back);
    if (!round_trip_failure && (again.str() != os.str() || back.table.values != sl.table.values)) {
      round_trip_failure = "slice j=" + std::to_string(sl.j) + " changed on export/import";
    }
  }
  json v{{"ok", rep.ok && !round_trip_failure},
         {"passed", rep.passed},
         {"first_violation", rep.first_violation ? json(*rep.first_violation) : json(nullptr)},
         {"max_convergence_error", rep.max_convergence_error},
         {"convergence_budget", rep.convergence_budget},
         {"negative_bubble_increments", rep.negative_bubble_increments},
         {"tail_bound", dec.tail_bound},
         {"positive_semidefinite_certified", dec.positive_semidefinite_certified},
         {"slices", slices}};
  c.write_json("validation.json", v);
  c.derived["validation_ok"] = v["ok"];
  if (rep.first_violation) throw Violation(invariant_name(*rep.first_violation), *rep.first_violation);
  if (round_trip_failure) throw Violation("round_trip", *round_trip_failure);
}

// --- flow -------------------------------------------------------------------------------------

rgflow::FlowConfig flow_config(Context& c) {
  rgflow::FlowConfig cfg;
  cfg.L = c.s.integer("L");
  cfg.d = c.s.integer("d");
  cfg.mass_sq = c.s.real("mass_sq");
  cfg.g0 = c.s.real("g0");
  cfg.a = parse_site(c.s.str("a"), cfg.d, "a");
  cfg.b = parse_site(c.s.str("b"), cfg.d, "b");
  cfg.j_max = c.s.integer("j_max");
  cfg.lambda_a0 = c.s.real("lambda_a0");
  cfg.lambda_b0 = c.s.real("lambda_b0");
  cfg.freeze_lambda = c.s.boolean("freeze_lambda");
  cfg.bulk = rgflow::parse_bulk_policy(c.s.str("bulk"));
  cfg.remainder = rgflow::parse_remainder_policy(c.s.str("remainder"));
  cfg.seed = c.s.uint64("seed");
  cfg.K = c.s.real("remainder_k");
  cfg.trust_delta = c.s.real("trust_delta");
  if (auto b = c.s.opt("betas")) cfg.betas = parse_list<double>(*b, "betas");
  if (cfg.bulk == rgflow::BulkPolicy::File) {
    const auto path = c.s.opt("bulk_file");
    if (!path) throw UsageError("flow: bulk = file needs bulk_file");
    const Csv csv = parse_csv(c.read_input(*path), *path);
    for (std::size_t r = 0; r < csv.rows.size(); ++r) {
      if (csv.real(r, "j") != static_cast<double>(r)) throw UsageError(*path + ": rows must list j = 0, 1, 2, ...");
      cfg.bulk_trajectory.push_back({csv.real(r, "g"), csv.real(r, "nu"), csv.real(r, "z")});
    }
  }
  return cfg;
}

std::optional<double> massless_budget(const Context& c) {
  if (auto v = c.s.opt("massless_budget")) return parse_number<double>(*v, "massless_budget");
  return std::nullopt;
}

void check_zero_remainder(const rgflow::FlowConfig& cfg, const rgflow::QInfinity& q, double separation) {
  if (cfg.remainder != rgflow::RemainderPolicy::Zero) return;
  const double err = std::abs(q.ratio - q.lambda_product);
  const double allowed = q.error_budget / std::abs(q.green_ab);
  if (!(err <= allowed)) {
    throw Violation("zero_remainder_identity",
                    "|ratio - lambda_a lambda_b| = " + fmt(err) + " exceeds budget " + fmt(allowed),
                    {{"separation", separation}, {"error", err}, {"allowed", allowed}});
  }
}

void cmd_flow(Context& c) {
  const rgflow::FlowConfig cfg = flow_config(c);
  rgflow::FlowEngine engine(cfg.d, cfg.L, cfg.mass_sq);
  const auto budget = massless_budget(c);
  const auto sweep = c.s.opt("sweep");

  if (!sweep) {
    const auto res = rgflow::run_flow(cfg, &engine);
    const auto q = rgflow::q_infinity(res, engine, budget);
    std::ostringstream csv;
    rgflow::write_flow_csv(csv, res);
    c.write_output("flow.csv", csv.str());
    c.write_json("summary.json", rgflow::flow_summary(res, q));
    c.derived["j_ab"] = scale_json(res.j_ab);
    c.derived["j_m"] = scale_json(res.j_m);
    check_zero_remainder(cfg, q, (cfg.b - cfg.a).l2());
    return;
  }

  const auto seps = parse_list<int>(*sweep, "sweep");
  const int draws = c.s.integer("draws");
  if (draws < 1) throw UsageError("flow: draws must be >= 1");
  std::ostringstream os;
  os << "separation,log_separation,seed,j_ab,gbar_jab,lambda_product,remainder_sum,q_infinity,green_ab,"
        "asymptote,ratio,error_budget\n";
  json rows = json::array();
  json j_abs = json::object();
  for (int s : seps) {
    if (s < 2) throw UsageError("flow: sweep separations must be >= 2");
    rgflow::FlowConfig k = cfg;
    k.b = cfg.a + scaled(Site::unit(cfg.d, 0), s);
    for (int t = 0; t < draws; ++t) {
      k.seed = cfg.seed + static_cast<std::uint64_t>(t);
      const auto res = rgflow::run_flow(k, &engine);
      const auto q = rgflow::q_infinity(res, engine, budget);
      const double as = cfg.d == 4 ? kAsymptoteConst / (static_cast<double>(s) * s)
                                   : std::numeric_limits<double>::quiet_NaN();
      os << s << ',' << fmt(std::log(static_cast<double>(s))) << ',' << k.seed << ',' << rgflow::scale_str(res.j_ab)
         << ',' << fmt(q.gbar_jab) << ',' << fmt(q.lambda_product) << ',' << fmt(q.remainder_sum) << ','
         << fmt(q.q_infinity) << ',' << fmt(q.green_ab) << ',' << fmt(as) << ',' << fmt(q.ratio) << ','
         << fmt(q.error_budget) << '\n';
      rows.push_back(rgflow::flow_summary(res, q));
      j_abs[std::to_string(s)] = scale_json(res.j_ab);
      check_zero_remainder(k, q, s);
    }
  }
  c.write_output("sweep.csv", os.str());
  c.write_json("summary.json", {{"sweep", rows}});
  c.derived["j_ab"] = j_abs;
  c.derived["j_m"] = scale_json(rgflow::mass_scale(cfg.L, cfg.mass_sq));
}

// --- simulate ---------------------------------------------------------------------------------

std::vector<Site> default_kernel_displacements(int d) {
  if (d == 4) return {Site{0, 0, 0, 0}, Site{1, 0, 0, 0}, Site{1, 1, 0, 0}, Site{2, 0, 0, 0}, Site{1, 1, 1, 1}};
  return {Site::origin(d), Site::unit(d, 0)};
}

void cmd_simulate(Context& c) {
  const int d = c.s.integer("d");
  const int side = c.s.integer("side");
  const auto spec = LatticeSpec::torus(d, side);
  const double g = c.s.real("g"), nu = c.s.real("nu");
  const Site a = parse_site(c.s.str("a"), d, "a");
  const Site b = parse_site(c.s.str("b"), d, "b");
  const double tmax = c.s.real("tmax"), h = c.s.real("grid");
  const std::int64_t samples = c.s.int64("samples");
  const std::int64_t kernel_samples = c.s.opt("kernel_samples") ? c.s.int64("kernel_samples") : samples;
  const bool allow_tail = c.s.boolean("allow_tail");
  const double tolerance = c.s.real("tail_tolerance");
  const double effective_tol = allow_tail ? std::numeric_limits<double>::infinity() : tolerance;
  const auto Ts = parse_list<double>(c.s.str("kernel_t"), "kernel_t");
  mc::SamplerOptions base{c.s.uint64("seed"), 0, c.s.integer("threads"), c.s.int64("block_size")};
  const auto grid = mc::uniform_grid(tmax, h);
  json summary = json::object();
  std::optional<Violation> violation;

  auto tail_violation = [&](const mc::TailBudgetError& e, double volume) {
    return Violation("tail_budget", e.what(),
                     {{"tail_budget", mc::tail_budget(g, nu, tmax, volume)}, {"tolerance", tolerance}, {"T_max", tmax}});
  };

  // Kernel scan at the requested endpoint.
  {
    auto o = base;
    o.stream = 1;
    const Site bs[1] = {spec.reduce(b)};
    const auto cells = mc::kernel_scan(spec, a, bs, Ts, g, kernel_samples, o);
    std::ostringstream os;
    os << "T,mean,stderr,n\n";
    for (const auto& cell : cells) {
      os << fmt(cell.T) << ',' << fmt(cell.estimate.mean) << ',' << fmt(cell.estimate.std_error) << ','
         << cell.estimate.n << '\n';
    }
    c.write_output("kernel.csv", os.str());
  }

  // Two-point function on the grid.
  const double volume = static_cast<double>(spec.volume());
  mc::TwoPointResult tp;
  try {
    auto o = base;
    o.stream = 2;
    tp = mc::two_point_estimate(spec, a, spec.reduce(b), g, nu, grid, samples, o, effective_tol);
  } catch (const mc::TailBudgetError& e) {
    throw tail_violation(e, volume);
  }
  json tpj = estimate_json(tp.estimate);
  tpj["quadrature_budget"] = tp.quadrature_budget;
  tpj["tail_budget"] = tp.tail_budget;
  tpj["tail_within_tolerance"] = tp.tail_budget <= tolerance;
  tpj["T_max"] = tp.T_max;
  tpj["grid_points"] = tp.grid_points;
  if (g == 0.0 && nu > 0.0) {
    const double exact = torus_green(spec, a, spec.reduce(b), nu);
    const double allowed = 3.0 * tp.estimate.std_error + tp.quadrature_budget + tp.tail_budget;
    tpj["oracle"] = exact;
    tpj["deviation"] = tp.estimate.mean - exact;
    tpj["allowed"] = allowed;
    tpj["within_budget"] = std::abs(tp.estimate.mean - exact) <= allowed;
  }
  summary["two_point"] = tpj;

  if (c.s.boolean("validate")) {
    if (g != 0.0) throw UsageError("simulate: validate compares against the free walk and needs g = 0");
    auto xs = c.s.opt("kernel_b") ? parse_sites(c.s.str("kernel_b"), d, "kernel_b") : default_kernel_displacements(d);
    std::vector<Site> ends;
    for (const auto& x : xs) ends.push_back(spec.reduce(a + x));
    auto o = base;
    o.stream = 4;
    const auto cells = mc::kernel_scan(spec, a, ends, Ts, 0.0, kernel_samples, o);
    std::ostringstream os;
    os << "T";
    for (int i = 0; i < d; ++i) os << ",x" << i + 1;
    os << ",mean,stderr,n,exact,within_3sigma\n";
    std::size_t within = 0;
    for (std::size_t k = 0; k < cells.size(); ++k) {
      const auto& cell = cells[k];
      const Site& x = xs[k % xs.size()];
      const double exact = torus_heat_kernel(spec, cell.T, x);
      const bool ok = std::abs(cell.estimate.mean - exact) <= 3.0 * cell.estimate.std_error + 1e-14;
      within += ok;
      os << fmt(cell.T) << ',' << site_csv(x) << ',' << fmt(cell.estimate.mean) << ','
         << fmt(cell.estimate.std_error) << ',' << cell.estimate.n << ',' << fmt(exact) << ','
         << (ok ? "true" : "false") << '\n';
    }
    c.write_output("kernel_grid.csv", os.str());
    const std::size_t allowed_misses = cells.size() / 25;
    const bool two_point_ok = tpj.value("within_budget", false);
    const bool pass = cells.size() - within <= allowed_misses && two_point_ok;
    summary["validation"] = {{"cells", cells.size()},
                             {"within_3sigma", within},
                             {"allowed_misses", allowed_misses},
                             {"two_point_within_budget", two_point_ok},
                             {"pass", pass}};
    if (!pass) {
      violation.emplace("g0_validation",
                        std::to_string(within) + "/" + std::to_string(cells.size()) +
                            " kernel cells within 3 sigma, two-point within budget: " +
                            (two_point_ok ? "yes" : "no"),
                        summary["validation"]);
    }
  }

  if (auto sl = c.s.opt("sides")) {
    const auto sides = parse_list<int>(*sl, "sides");
    std::vector<mc::TwoPointResult> res;
    try {
      auto o = base;
      o.stream = 3;
      res = mc::two_point_side_sweep(d, sides, a, b, g, nu, grid, samples, o, effective_tol);
    } catch (const mc::TailBudgetError& e) {
      const int smallest = *std::min_element(sides.begin(), sides.end());
      throw tail_violation(e, std::pow(static_cast<double>(smallest), d));
    }
    std::ostringstream os;
    os << "side,mean,stderr,n,quadrature_budget,tail_budget\n";
    json table = json::array();
    for (std::size_t i = 0; i < res.size(); ++i) {
      os << sides[i] << ',' << fmt(res[i].estimate.mean) << ',' << fmt(res[i].estimate.std_error) << ','
         << res[i].estimate.n << ',' << fmt(res[i].quadrature_budget) << ',' << fmt(res[i].tail_budget) << '\n';
      table.push_back({{"side", sides[i]}, {"estimate", estimate_json(res[i].estimate)}});
    }
    json pairs = json::array();
    for (std::size_t i = 0; i < res.size(); ++i) {
      for (std::size_t j = i + 1; j < res.size(); ++j) {
        const double diff = res[j].estimate.mean - res[i].estimate.mean;
        const double pooled = std::hypot(res[i].estimate.std_error, res[j].estimate.std_error);
        pairs.push_back({{"sides", {sides[i], sides[j]}},
                         {"difference", diff},
                         {"pooled_stderr", pooled},
                         {"compatible_3sigma", std::abs(diff) <= 3.0 * pooled}});
      }
    }
    c.write_output("side_sweep.csv", os.str());
    summary["side_sweep"] = {{"sides", table}, {"pairs", pairs}};
  }

  c.write_json("summary.json", summary);
  if (violation) throw *violation;
}

// --- report -----------------------------------------------------------------------------------

void report_single(Context& c, const std::string& path, bool identity) {
  json s;
  try {
    s = json::parse(c.read_input(path));
  } catch (const json::parse_error& e) {
    throw UsageError(path + ": " + e.what());
  }
  auto need = [&](const char* key) {
    if (!s.contains(key) || !s[key].is_number()) throw UsageError(path + ": missing numeric key '" + key + "'");
    return s[key].get<double>();
  };
  const double q = need("q_infinity"), gab = need("green_ab"), sep = need("separation");
  const double as = kAsymptoteConst / (sep * sep);
  c.write_output("report.csv", "q_infinity,green_ab,asymptote\n" + fmt(q) + ',' + fmt(gab) + ',' + fmt(as) + '\n');
  json r{{"mode", identity ? "identity" : "single"},
         {"separation", sep},
         {"q_infinity", q},
         {"green_ab", gab},
         {"asymptote", as},
         {"ratio", q / gab}};
  if (identity) {
    const double budget = need("error_budget");
    r["identity_error"] = std::abs(q - gab);
    r["error_budget"] = budget;
    c.write_json("report.json", r);
    if (!(std::abs(q - gab) <= budget)) {
      throw Violation("identity", "|q_infinity - green_ab| = " + fmt(std::abs(q - gab)) + " exceeds " + fmt(budget));
    }
    return;
  }
  c.write_json("report.json", r);
}

void report_sweep(Context& c, const std::string& path, bool identity) {
  const Csv csv = parse_csv(c.read_input(path), path);
  for (const char* col : {"separation", "seed", "q_infinity", "green_ab", "asymptote", "ratio", "error_budget",
                          "gbar_jab"}) {
    csv.col(col);
  }
  const std::size_t n = csv.rows.size();
  if (n == 0) throw UsageError(path + ": no rows");
  std::vector<double> sep(n), dev(n), x(n);
  double sxy = 0.0, sxx = 0.0, k_env = 0.0;
  std::optional<std::string> identity_failure;
  std::map<double, std::vector<double>> by_sep;
  for (std::size_t r = 0; r < n; ++r) {
    sep[r] = csv.real(r, "separation");
    if (!(sep[r] > 1.0)) throw UsageError(path + ": separation must exceed 1 for the 1/log fit");
    dev[r] = csv.real(r, "ratio") - 1.0;
    x[r] = 1.0 / std::log(sep[r]);
    sxy += x[r] * dev[r];
    sxx += x[r] * x[r];
    k_env = std::max(k_env, std::abs(dev[r]) / csv.real(r, "gbar_jab"));
    by_sep[sep[r]].push_back(std::abs(dev[r]));
    const double err = std::abs(csv.real(r, "q_infinity") - csv.real(r, "green_ab"));
    if (identity && !identity_failure && !(err <= csv.real(r, "error_budget"))) {
      identity_failure = "row " + std::to_string(r + 1) + ": |q_infinity - green_ab| = " + fmt(err) + " exceeds " +
                         fmt(csv.real(r, "error_budget"));
    }
  }
  const double K = sxy / sxx;
  std::ostringstream os;
  os << "separation,seed,q_infinity,green_ab,asymptote,ratio,deviation,inv_log_separation,fitted,residual\n";
  double ss = 0.0;
  for (std::size_t r = 0; r < n; ++r) {
    const double fit = K * x[r];
    ss += (dev[r] - fit) * (dev[r] - fit);
    const auto& row = csv.rows[r];
    os << row[csv.col("separation")] << ',' << row[csv.col("seed")] << ',' << row[csv.col("q_infinity")] << ','
       << row[csv.col("green_ab")] << ',' << row[csv.col("asymptote")] << ',' << row[csv.col("ratio")] << ','
       << fmt(dev[r]) << ',' << fmt(x[r]) << ',' << fmt(fit) << ',' << fmt(dev[r] - fit) << '\n';
  }
  json medians = json::array();
  bool decreasing = true;
  double prev = std::numeric_limits<double>::infinity();
  for (auto& [s, v] : by_sep) {
    std::sort(v.begin(), v.end());
    const std::size_t m = v.size();
    const double med = m % 2 ? v[m / 2] : 0.5 * (v[m / 2 - 1] + v[m / 2]);
    decreasing = decreasing && med < prev;
    prev = med;
    medians.push_back({{"separation", s}, {"median_abs_deviation", med}, {"draws", m}});
  }
  c.write_output("report.csv", os.str());
  json r{{"mode", identity ? "identity" : "sweep"},
         {"points", n},
         {"K_fit", K},
         {"residual_rms", std::sqrt(ss / static_cast<double>(n))},
         {"K_envelope", k_env},
         {"medians", medians},
         {"median_decreasing", decreasing}};
  c.write_json("report.json", r);
  if (identity_failure) throw Violation("identity", *identity_failure);
}

void cmd_report(Context& c) {
  const auto sweep = c.s.opt("sweep"), single = c.s.opt("summary");
  if (bool(sweep) == bool(single)) throw UsageError("report: give exactly one of --sweep or --summary");
  const bool identity = c.s.boolean("identity");
  if (sweep) return report_sweep(c, *sweep, identity);
  report_single(c, *single, identity);
}

// --- command table ----------------------------------------------------------------------------

std::vector<Command> commands() {
  const Param seed{"seed", "1", "RNG seed (flag > config > RGWSAW_SEED > 1)"};
  return {
      {"green",
       "Free Green function sweep along a direction, with the (2pi)^-2 |x|^-2 asymptote",
       {{"d", "4", "dimension"},
        {"mass_sq", "0", "mass squared"},
        {"direction", "1,0,0,0", "sweep direction"},
        {"r_min", "1", "first multiple of direction"},
        {"r_max", "20", "last multiple of direction"},
        {"abs_tol", "1e-14", "quadrature absolute tolerance"},
        {"rel_tol", "1e-10", "quadrature relative tolerance"}},
       cmd_green},
      {"frd",
       "Build, validate and export the finite-range decomposition",
       {{"L", "4", "block side"},
        {"d", "4", "dimension"},
        {"mass_sq", "0.5", "mass squared"},
        {"j_max", "4", "number of slices"},
        {"torus_n", "0", "torus of side L^N when > 0 (requires j_max = N)"},
        {"convergence_radius", "6", "l1 radius of the convergence check"},
        {"export", "true", "write slices/C_j.frd"},
        {"import", "", "import a slice file instead of building"}},
       cmd_frd},
      {"flow",
       "Observable flow, q_infinity and its comparison with the Green function",
       {{"L", "4", "block side"},
        {"d", "4", "dimension"},
        {"mass_sq", "0.01", "mass squared"},
        {"g0", "0.05", "initial coupling"},
        {"a", "0,0,0,0", "first observable point"},
        {"b", "8,0,0,0", "second observable point"},
        {"j_max", "6", "last scale"},
        {"lambda_a0", "1", "initial lambda at a"},
        {"lambda_b0", "1", "initial lambda at b"},
        {"freeze_lambda", "false", "hold lambda at its initial value", true},
        {"bulk", "frozen-zero", "bulk policy: frozen-zero | gbar-only | file"},
        {"bulk_file", "", "CSV with columns j,g,nu,z for bulk = file"},
        {"betas", "", "comma-separated beta_j overriding the bubble surrogate"},
        {"remainder", "zero", "remainder policy: zero | bounded-random"},
        {"remainder_k", "0.025330295910584444", "remainder amplitude K"},
        {"trust_delta", "0.1", "trust-region margin"},
        {"sweep", "", "comma-separated separations along e1 (writes sweep.csv)"},
        {"draws", "1", "seeds per separation in sweep mode (seed, seed+1, ...)"},
        {"massless_budget", "", "truncation budget required when mass_sq = 0"},
        seed},
       cmd_flow},
      {"simulate",
       "Monte Carlo kernel scans and two-point estimates on the torus",
       {{"side", "8", "torus side"},
        {"d", "4", "dimension"},
        {"g", "0", "self-interaction strength"},
        {"nu", "0.5", "two-point parameter"},
        {"a", "0,0,0,0", "start site"},
        {"b", "1,0,0,0", "end site"},
        {"tmax", "20", "upper limit of the T integral"},
        {"grid", "0.05", "trapezoid step on [0, tmax]"},
        {"samples", "10000", "paths per estimate"},
        {"kernel_t", "0.25,0.5,1,2,4", "horizons of the kernel scan"},
        {"kernel_b", "", "';'-separated displacements from a for the validation grid"},
        {"kernel_samples", "", "paths per kernel cell (default: samples)"},
        {"sides", "", "comma-separated torus sides for a coupled side sweep"},
        {"validate", "false", "compare g = 0 results with the spectral oracle", true},
        {"tail_tolerance", "1e-3", "largest admissible tail budget"},
        {"allow_tail", "false", "report tail violations instead of failing", true},
        {"threads", "1", "worker threads (results do not depend on it)"},
        {"block_size", "4096", "paths per RNG block"},
        seed},
       cmd_simulate},
      {"report",
       "Headline comparison table from flow outputs",
       {{"sweep", "", "sweep.csv from flow --sweep"},
        {"summary", "", "summary.json from a single flow run"},
        {"identity", "false", "check q_infinity = green_ab within the error budget", true}},
       cmd_report},
  };
}

json versions() {
  return {{"rgwsaw", RGWSAW_VERSION},
          {"gsl", GSL_VERSION},
          {"abseil", RGWSAW_ABSL_VERSION},
          {"openssl", OPENSSL_VERSION_TEXT},
          {"cli11", CLI11_VERSION},
          {"nlohmann_json", std::to_string(NLOHMANN_JSON_VERSION_MAJOR) + "." +
                                std::to_string(NLOHMANN_JSON_VERSION_MINOR) + "." +
                                std::to_string(NLOHMANN_JSON_VERSION_PATCH)},
          {"compiler", __VERSION__}};
}

}  // namespace

std::map<std::string, std::string> parse_config(const std::string& text) {
  std::map<std::string, std::string> out;
  std::istringstream is(text);
  std::string line;
  for (int n = 1; std::getline(is, line); ++n) {
    const auto body = trim(std::string_view(line).substr(0, line.find('#')));
    if (body.empty()) continue;
    const auto eq = body.find('=');
    if (eq == std::string_view::npos) throw std::invalid_argument("config line " + std::to_string(n) + ": expected key = value");
    std::string key(trim(body.substr(0, eq)));
    if (key.empty()) throw std::invalid_argument("config line " + std::to_string(n) + ": empty key");
    std::replace(key.begin(), key.end(), '-', '_');
    if (!out.emplace(key, std::string(trim(body.substr(eq + 1)))).second) {
      throw std::invalid_argument("config line " + std::to_string(n) + ": duplicate key '" + key + "'");
    }
  }
  return out;
}

std::string sha256_hex(const std::string& bytes) {
  unsigned char md[EVP_MAX_MD_SIZE];
  unsigned int len = 0;
  if (EVP_Digest(bytes.data(), bytes.size(), md, &len, EVP_sha256(), nullptr) != 1) {
    throw std::runtime_error("SHA-256 digest failed");
  }
  static constexpr char hex[] = "0123456789abcdef";
  std::string s;
  for (unsigned i = 0; i < len; ++i) {
    s += hex[md[i] >> 4];
    s += hex[md[i] & 15];
  }
  return s;
}

int run_cli(int argc, const char* const* argv, std::ostream& out, std::ostream& err) {
  const auto table = commands();
  struct Bound {
    const Command* cmd = nullptr;
    CLI::App* app = nullptr;
    std::string config;
    std::string out_dir = ".";
    std::map<std::string, std::string> values;
    std::map<std::string, bool> switches;
    std::map<std::string, CLI::Option*> options;
  };
  CLI::App app{"Weakly self-avoiding walk and free-field toolkit", "rgwsaw"};
  app.require_subcommand(1);
  std::vector<std::unique_ptr<Bound>> bound;
  for (const auto& cmd : table) {
    auto b = std::make_unique<Bound>();
    b->cmd = &cmd;
    b->app = app.add_subcommand(cmd.name, cmd.help);
    b->app->add_option("--config", b->config, "plain key = value config file");
    b->app->add_option("--out", b->out_dir, "output directory")->capture_default_str();
    for (const auto& p : cmd.params) {
      const std::string help = p.help + (p.def.empty() ? "" : " [" + p.def + "]");
      b->options[p.key] = p.is_switch ? b->app->add_flag(flag_name(p.key), b->switches[p.key], help)
                                      : b->app->add_option(flag_name(p.key), b->values[p.key], help)
                                            ->multi_option_policy(CLI::MultiOptionPolicy::TakeLast);
    }
    bound.push_back(std::move(b));
  }
  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    return app.exit(e, out, err);
  }
  const auto it = std::find_if(bound.begin(), bound.end(), [](const auto& b) { return b->app->parsed(); });
  Bound& b = **it;

  Context ctx;
  ctx.out_dir = b.out_dir;
  int code = kExitOk;
  json violation = nullptr, error = nullptr;
  auto record = [&](const std::string& inv, const std::string& detail, json data = nullptr) {
    code = kExitViolation;
    violation = {{"invariant", inv}, {"detail", detail}, {"data", std::move(data)}};
    err << "violation: " << inv << ": " << detail << '\n';
  };
  try {
    std::map<std::string, std::string> conf;
    if (!b.config.empty()) conf = parse_config(ctx.read_input(b.config));
    for (const auto& [k, v] : conf) {
      if (!b.options.count(k)) throw UsageError("config: unknown key '" + k + "' for " + b.cmd->name);
    }
    for (const auto& p : b.cmd->params) {
      std::string value = p.def, source = "default";
      if (b.options[p.key]->count() > 0) {
        value = p.is_switch ? "true" : b.values[p.key];
        source = "flag";
      } else if (conf.count(p.key)) {
        value = conf[p.key];
        source = "config";
      } else if (p.key == "seed") {
        if (const char* env = std::getenv("RGWSAW_SEED"); env && *env) {
          value = env;
          source = "env";
        }
      }
      ctx.s.values[p.key] = value;
      ctx.s.sources[p.key] = source;
    }
    b.cmd->run(ctx);
  } catch (const Violation& v) {
    record(v.invariant, v.what(), v.data);
  } catch (const rgflow::TrustRegionError& e) {
    record("trust_region", e.what());
  } catch (const rgflow::FlowIdentityError& e) {
    record("flow_identity", e.what());
  } catch (const QuadratureError& e) {
    record("quadrature", e.what());
  } catch (const std::exception& e) {
    code = kExitUsage;
    error = e.what();
    err << "error: " << e.what() << '\n';
  }

  json manifest{{"command", b.cmd->name},
                {"config", ctx.s.values},
                {"sources", ctx.s.sources},
                {"inputs", ctx.inputs},
                {"outputs", ctx.outputs},
                {"derived", ctx.derived},
                {"versions", versions()},
                {"status", code == kExitOk ? "ok" : code == kExitViolation ? "violation" : "error"},
                {"exit_code", code},
                {"violation", violation},
                {"error", error}};
  try {
    fs::create_directories(ctx.out_dir);
    std::ofstream f(ctx.out_dir / "manifest.json", std::ios::binary | std::ios::trunc);
    f << manifest.dump(2) << '\n';
    if (!f) throw std::runtime_error("cannot write manifest.json");
  } catch (const std::exception& e) {
    err << "error: " << e.what() << '\n';
    return code == kExitOk ? kExitUsage : code;
  }
  if (code == kExitOk) out << (ctx.out_dir / "manifest.json").string() << '\n';
  return code;
}

}  // namespace rgwsaw::cli
