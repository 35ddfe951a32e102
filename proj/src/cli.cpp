#include "energy_attn/cli.hpp"

#include <algorithm>
#include <chrono>
#include <cmath>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <functional>
#include <iostream>
#include <sstream>
#include <stdexcept>

#include <CLI11.hpp>
#include <json.hpp>

#include "energy_attn/attention.hpp"
#include "energy_attn/descent.hpp"
#include "energy_attn/energy.hpp"
#include "energy_attn/equivalence.hpp"
#include "energy_attn/loopsim.hpp"
#include "energy_attn/numkit.hpp"

namespace energy_attn {

std::string to_string(BenchVariant variant) {
  switch (variant) {
    case BenchVariant::mha: return "mha";
    case BenchVariant::mha2nd: return "mha2nd";
    case BenchVariant::mha2nd1st: return "mha2nd1st";
    case BenchVariant::light: return "light";
  }
  return "?";
}

BenchVariant parse_bench_variant(const std::string& name) {
  for (BenchVariant v : {BenchVariant::mha, BenchVariant::mha2nd, BenchVariant::mha2nd1st,
                         BenchVariant::light}) {
    if (to_string(v) == name) return v;
  }
  throw error("unknown bench variant: " + name);
}

std::vector<BenchRow> run_bench(const BenchConfig& c) {
  if (c.reps == 0) throw error("bench: reps must be >= 1");
  if (c.tokens.empty()) throw error("bench: empty tokens list");
  if (c.heads == 0 || c.dim % c.heads != 0) throw dimension_error("bench: H must divide d");

  Rng rng(c.seed);
  const bool dot_scores = c.variant == BenchVariant::mha || c.variant == BenchVariant::light;
  const AttentionParams params =
      random_params(rng, c.dim, c.heads, dot_scores ? ScoreKind::dot : ScoreKind::distance);
  const Preconditioner pre = precompute(params);
  const Vector z = rng.normal_vector(c.dim);

  auto call = [&](const Matrix& tokens) {
    switch (c.variant) {
      case BenchVariant::mha: return mha(params, z, tokens);
      case BenchVariant::mha2nd: return mha2nd_exact(params, pre, z, tokens);
      case BenchVariant::mha2nd1st: return mha2nd1st(params, pre, z, tokens);
      case BenchVariant::light: return light_mha2nd1st(params, z, tokens);
    }
    return z;
  };

  std::vector<BenchRow> rows;
  volatile double sink = 0.0;
  for (std::size_t n : c.tokens) {
    if (n == 0) throw error("bench: token counts must be >= 1");
    const Matrix tokens = rng.normal_matrix(c.dim, n);
    for (std::size_t w = 0; w < c.warmup; ++w) sink = sink + call(tokens)[0];
    std::vector<double> ns(c.reps);
    for (std::size_t r = 0; r < c.reps; ++r) {
      const auto t0 = std::chrono::steady_clock::now();
      const Vector out = call(tokens);
      const auto t1 = std::chrono::steady_clock::now();
      sink = sink + out[0];
      ns[r] = std::chrono::duration<double, std::nano>(t1 - t0).count();
    }
    std::sort(ns.begin(), ns.end());
    const std::size_t m = ns.size() / 2;
    const double median = ns.size() % 2 ? ns[m] : 0.5 * (ns[m - 1] + ns[m]);
    rows.push_back({n, median});
  }
  return rows;
}

double loglog_slope(const std::vector<BenchRow>& rows) {
  if (rows.size() < 2) throw error("slope needs at least two token counts");
  double mx = 0.0, my = 0.0;
  for (const BenchRow& r : rows) {
    mx += std::log(static_cast<double>(r.tokens));
    my += std::log(r.median_ns);
  }
  mx /= static_cast<double>(rows.size());
  my /= static_cast<double>(rows.size());
  double sxy = 0.0, sxx = 0.0;
  for (const BenchRow& r : rows) {
    const double dx = std::log(static_cast<double>(r.tokens)) - mx;
    sxy += dx * (std::log(r.median_ns) - my);
    sxx += dx * dx;
  }
  if (sxx == 0.0) throw error("slope needs at least two distinct token counts");
  return sxy / sxx;
}

void write_atomic(const std::string& path, const std::string& content) {
  namespace fs = std::filesystem;
  const fs::path target(path);
  fs::path tmp = target;
  tmp += ".tmp";
  {
    std::ofstream f(tmp, std::ios::binary | std::ios::trunc);
    if (!f) throw error("cannot open " + tmp.string() + " for writing");
    f << content;
    f.flush();
    if (!f) throw error("write failed: " + tmp.string());
  }
  std::error_code ec;
  fs::rename(tmp, target, ec);
  if (ec) {
    fs::remove(tmp);
    throw error("cannot rename to " + path + ": " + ec.message());
  }
}

namespace {

using json = nlohmann::ordered_json;

struct UsageError : std::runtime_error {
  using std::runtime_error::runtime_error;
};

// Registers options on a subcommand and remembers the bound variables, so the
// parsed values can be embedded in the output and replayed.
class Flags {
 public:
  explicit Flags(CLI::App* app) : app_(app) {}

  template <class T>
  CLI::Option* option(const std::string& name, T& var, const std::string& help) {
    CLI::Option* opt = app_->add_option("--" + name, var, help)->capture_default_str();
    dumps_.push_back([name, &var](json& j) { j[name] = var; });
    return opt;
  }

  template <class T>
  CLI::Option* list(const std::string& name, std::vector<T>& var, const std::string& help) {
    CLI::Option* opt =
        app_->add_option("--" + name, var, help)->delimiter(',')->capture_default_str();
    dumps_.push_back([name, &var](json& j) { j[name] = var; });
    return opt;
  }

  CLI::Option* flag(const std::string& name, bool& var, const std::string& help) {
    CLI::Option* opt = app_->add_flag("--" + name, var, help);
    dumps_.push_back([name, &var](json& j) { j[name] = var; });
    return opt;
  }

  CLI::Option* positional(const std::string& name, std::string& var, const std::string& help) {
    CLI::Option* opt = app_->add_option(name, var, help)->required();
    dumps_.push_back([name, &var](json& j) { j[name] = var; });
    return opt;
  }

  json config(const std::string& command) const {
    json j;
    j["command"] = command;
    for (const auto& dump : dumps_) dump(j);
    return j;
  }

 private:
  CLI::App* app_;
  std::vector<std::function<void(json&)>> dumps_;
};

struct Output {
  std::string out;
  std::string format = "csv";
};

void add_output_flags(CLI::App* app, Flags& flags, Output& o, const std::string& default_format) {
  o.format = default_format;
  // --out is left out of the embedded config so a replay never clobbers the original.
  app->add_option("--out", o.out, "output file (stdout when absent)");
  flags.option("format", o.format, "output format")->check(CLI::IsMember({"csv", "json"}));
}

std::string format_number(double v) {
  char buf[32];
  std::snprintf(buf, sizeof buf, "%.17g", v);
  return buf;
}

std::string csv_cell(const json& v) {
  if (v.is_null()) return "";
  if (v.is_string()) return v.get<std::string>();
  if (v.is_boolean()) return v.get<bool>() ? "true" : "false";
  if (v.is_number_unsigned()) return std::to_string(v.get<std::uint64_t>());
  if (v.is_number_integer()) return std::to_string(v.get<std::int64_t>());
  if (v.is_number_float()) return format_number(v.get<double>());
  return v.dump();
}

struct Table {
  std::vector<std::pair<std::string, json>> meta;
  std::vector<std::string> columns;
  std::vector<json> rows;
};

std::string render(const json& config, std::uint64_t seed, const Table& t, const std::string& format) {
  const std::string command = config.at("command").get<std::string>();
  if (format == "json") {
    json j;
    j["schema_version"] = kSchemaVersion;
    j["command"] = command;
    j["config"] = config;
    j["seed"] = seed;
    json meta = json::object();
    for (const auto& [k, v] : t.meta) meta[k] = v;
    j["meta"] = meta;
    j["columns"] = t.columns;
    j["rows"] = t.rows;
    return j.dump(2) + "\n";
  }
  std::ostringstream s;
  s << "# schema_version=" << kSchemaVersion << "\n";
  s << "# command=" << command << "\n";
  s << "# seed=" << seed << "\n";
  s << "# config=" << config.dump() << "\n";
  for (const auto& [k, v] : t.meta) s << "# " << k << "=" << csv_cell(v) << "\n";
  for (std::size_t i = 0; i < t.columns.size(); ++i) s << (i ? "," : "") << t.columns[i];
  s << "\n";
  for (const json& row : t.rows) {
    for (std::size_t i = 0; i < row.size(); ++i) s << (i ? "," : "") << csv_cell(row[i]);
    s << "\n";
  }
  return s.str();
}

std::string render_reports(const json& config, std::uint64_t seed,
                           const std::vector<VerificationReport>& reports,
                           const std::string& format) {
  if (format == "json") {
    json j;
    j["schema_version"] = kSchemaVersion;
    j["command"] = config.at("command");
    j["config"] = config;
    j["seed"] = seed;
    j["results"] = json::array();
    for (const VerificationReport& r : reports) {
      json row;
      row["claim"] = r.claim;
      row["instances"] = r.instances;
      // NaN has no JSON encoding; it shows up as null.
      row["max_abs_error"] = std::isnan(r.max_abs_error) ? json() : json(r.max_abs_error);
      row["threshold"] = r.threshold;
      row["pass"] = r.pass;
      j["results"].push_back(row);
    }
    return j.dump(2) + "\n";
  }
  Table t;
  t.columns = {"claim", "instances", "max_abs_error", "threshold", "pass"};
  for (const VerificationReport& r : reports) {
    t.rows.push_back(json::array({r.claim, r.instances, r.max_abs_error, r.threshold, r.pass}));
  }
  return render(config, seed, t, format);
}

void emit(const Output& o, const std::string& content, std::ostream& out) {
  if (o.out.empty()) {
    out << content;
  } else {
    write_atomic(o.out, content);
  }
}

void require_positive(std::size_t v, const std::string& name) {
  if (v < 1) throw UsageError(name + " must be ≥ 1");
}

// ---------------------------------------------------------------------------
// verify

struct VerifyArgs {
  std::string which;
  std::uint64_t seed = 0;
  std::size_t dim = 8;
  std::size_t tokens = 16;
  std::size_t heads = 2;
  double rho = 1.0;
  double temp = 1.0;
  double lr = 0.1;
  std::size_t instances = 100;
  double witness_temp = 0.1;
  bool break_tying = false;
  Output output;
};

int run_verify(const VerifyArgs& a, const json& config, std::ostream& out, std::ostream& err) {
  require_positive(a.instances, "instances");
  require_positive(a.dim, "dim");
  require_positive(a.tokens, "tokens");
  require_positive(a.heads, "heads");
  if (a.dim % a.heads != 0) throw UsageError("heads must divide dim");

  SweepConfig sweep;
  sweep.seed = a.seed;
  sweep.instances = a.instances;
  sweep.instance.dim = a.dim;
  sweep.instance.tokens = a.tokens;
  sweep.instance.heads = a.heads;
  sweep.instance.rho = a.rho;
  sweep.instance.eta = a.lr;
  sweep.instance.temperature = a.temp;
  sweep.instance.break_tying = a.break_tying;

  std::vector<VerificationReport> reports;
  auto append = [&](std::vector<VerificationReport> more) {
    for (VerificationReport& r : more) reports.push_back(std::move(r));
  };
  const bool all = a.which == "all";
  if (all || a.which == "thm1") reports.push_back(verify_theorem1(sweep));
  if (all || a.which == "thm2") {
    reports.push_back(verify_theorem2(sweep));
    SweepConfig gated = sweep;
    gated.instance.gated = true;
    reports.push_back(verify_theorem2(gated));
  }
  if (all || a.which == "thm3") append(verify_theorem3(sweep));
  if (all || a.which == "lemma1") append(verify_lemma1_suite(sweep));
  if (all || a.which == "lemma2") append(verify_lemma2_suite(sweep, a.witness_temp));
  if (all || a.which == "newton") append(verify_newton_taylor(sweep));

  bool pass = true;
  for (const VerificationReport& r : reports) {
    if (!r.pass) {
      pass = false;
      err << "FAIL " << r.claim << " max_abs_error=" << format_number(r.max_abs_error)
          << " threshold=" << format_number(r.threshold);
      if (r.witness) err << " witness_seed=" << *r.witness;
      err << "\n";
    }
  }
  emit(a.output, render_reports(config, a.seed, reports, a.output.format), out);
  return pass ? 0 : 1;
}

// ---------------------------------------------------------------------------
// descend / compare

struct DescentArgs {
  std::string energy = "elastic";
  std::string optimizer = "vanilla";
  std::vector<std::string> optimizers{"vanilla", "momentum", "nag"};
  std::size_t dim = 16;
  std::size_t tokens = 64;
  std::size_t heads = 1;
  double temp = 1.0;
  double lr = 0.01;
  double beta = 0.9;
  std::size_t steps = 100;
  double tol = 1e-8;
  std::uint64_t seed = 0;
  std::size_t seeds = 1;
  Output output;
};

void add_descent_flags(CLI::App* app, Flags& f, DescentArgs& a) {
  f.option("energy", a.energy, "energy family")
      ->check(CLI::IsMember({"elastic", "inner", "square-sum"}));
  f.option("dim", a.dim, "embedding dimension d");
  f.option("tokens", a.tokens, "context size N");
  f.option("heads", a.heads, "number of heads H");
  f.option("temp", a.temp, "temperature T");
  f.option("lr", a.lr, "step size");
  f.option("beta", a.beta, "momentum coefficient");
  f.option("steps", a.steps, "iteration budget");
  f.option("tol", a.tol, "gradient-norm tolerance");
  f.option("seed", a.seed, "instance seed");
  add_output_flags(app, f, a.output, "csv");
}

const std::vector<std::string> kOptimizerNames{"vanilla",        "momentum",    "nag", "nag-literal",
                                               "newton-exact", "newton-taylor1"};

OptimizerKind make_optimizer(const std::string& name, double lr, double beta) {
  if (name == "vanilla") return Vanilla{lr};
  if (name == "momentum") return Momentum{lr, beta};
  if (name == "nag") return Nag{lr, beta, Lookahead::scaled};
  if (name == "nag-literal") return Nag{lr, beta, Lookahead::literal};
  if (name == "newton-exact") return NewtonSubspace{lr, NewtonMode::exact, 0.0};
  if (name == "newton-taylor1") return NewtonSubspace{lr, NewtonMode::taylor1, 0.0};
  throw UsageError("unknown optimizer: " + name);
}

EnergyFamily parse_family(const std::string& name) {
  if (name == "elastic") return EnergyFamily::elastic;
  if (name == "inner") return EnergyFamily::inner;
  return EnergyFamily::square_sum;
}

void check_descent_args(const DescentArgs& a) {
  require_positive(a.dim, "dim");
  require_positive(a.tokens, "tokens");
  require_positive(a.heads, "heads");
  if (a.dim % a.heads != 0) throw UsageError("heads must divide dim");
  if (a.energy == "square-sum" && a.heads != 1) throw UsageError("square-sum energy needs --heads 1");
  if (!(a.temp > 0.0)) throw UsageError("temp must be positive");
  if (!(a.tol >= 0.0)) throw UsageError("tol must be non-negative");
}

int run_descend(const DescentArgs& a, const json& config, std::ostream& out) {
  check_descent_args(a);
  const OptimizerKind opt = make_optimizer(a.optimizer, a.lr, a.beta);
  validate_optimizer(opt);
  Rng rng(a.seed);
  const DescentInstance inst =
      make_descent_instance(rng, parse_family(a.energy), a.dim, a.tokens, a.heads, a.temp);
  DescentOptions options;
  options.max_iters = a.steps;
  options.tol = a.tol;
  options.seed = a.seed;
  const DescentTrace trace = descend(inst.spec, opt, inst.z0, inst.tokens, options);

  Table t;
  t.meta = {{"spec", trace.spec_summary},
            {"optimizer", trace.optimizer},
            {"stop_reason", to_string(trace.stop)},
            {"iterations", trace.iterations()}};
  t.columns = {"step", "energy", "grad_norm"};
  for (const DescentStep& s : trace.steps) t.rows.push_back(json::array({s.k, s.energy, s.grad_norm}));
  emit(a.output, render(config, a.seed, t, a.output.format), out);
  return 0;
}

int run_compare(const DescentArgs& a, const json& config, std::ostream& out) {
  check_descent_args(a);
  require_positive(a.seeds, "seeds");
  if (a.optimizers.empty()) throw UsageError("optimizers must not be empty");
  std::vector<OptimizerKind> opts;
  for (const std::string& name : a.optimizers) {
    opts.push_back(make_optimizer(name, a.lr, a.beta));
    validate_optimizer(opts.back());
  }
  const EnergyFamily family = parse_family(a.energy);
  const auto results = parallel_map(a.seeds, [&](std::size_t s) {
    Rng rng(a.seed + s);
    const DescentInstance inst = make_descent_instance(rng, family, a.dim, a.tokens, a.heads, a.temp);
    return compare_optimizers(inst.spec, inst.z0, inst.tokens, opts, a.steps, a.tol);
  });

  Table t;
  t.columns = {"seed", "optimizer", "iters_to_tol", "final_energy"};
  std::size_t ordered = 0;
  const auto has = [&](const char* n) {
    return std::find(a.optimizers.begin(), a.optimizers.end(), n) != a.optimizers.end();
  };
  const bool ordering = has("vanilla") && has("momentum") && has("nag");
  for (std::size_t s = 0; s < results.size(); ++s) {
    std::size_t iters[3] = {0, 0, 0};
    for (const ComparisonRow& r : results[s]) {
      const json iters_cell = r.iters_to_tol ? json(*r.iters_to_tol) : json("NA");
      t.rows.push_back(json::array({a.seed + s, r.optimizer, iters_cell, r.final_energy}));
      const std::size_t it = r.iters_to_tol.value_or(static_cast<std::size_t>(-1));
      if (r.optimizer == "vanilla") iters[0] = it;
      if (r.optimizer == "momentum") iters[1] = it;
      if (r.optimizer == "nag") iters[2] = it;
    }
    if (ordering && iters[2] <= iters[1] && iters[1] <= iters[0]) ++ordered;
  }
  if (ordering) {
    t.meta.push_back({"ordered_seeds", ordered});
    t.meta.push_back({"ordering_fraction",
                      static_cast<double>(ordered) / static_cast<double>(a.seeds)});
  }
  emit(a.output, render(config, a.seed, t, a.output.format), out);
  return 0;
}

// ---------------------------------------------------------------------------
// loop

struct LoopArgs {
  std::string mode = "forward";
  std::string energy = "inner";
  std::size_t iters = 1;
  bool causal = false;
  std::size_t dim = 8;
  std::size_t tokens = 16;
  std::size_t classes = 2;
  std::size_t per_class = 50;
  std::size_t sample_tokens = 4;
  double rho = 1.0;
  double spread = 0.5;
  std::size_t epochs = 50;
  double lr = 0.1;
  double temp = 1.0;
  std::uint64_t seed = 0;
  Output output;
};

int run_loop(const LoopArgs& a, const json& config, std::ostream& out) {
  require_positive(a.dim, "dim");
  require_positive(a.tokens, "tokens");
  require_positive(a.classes, "classes");
  require_positive(a.per_class, "per-class");
  require_positive(a.sample_tokens, "sample-tokens");
  if (!(a.temp > 0.0)) throw UsageError("temp must be positive");

  Rng rng(a.seed);
  const Matrix w0 = rng.normal_matrix(a.dim, a.dim, 1.0 / std::sqrt(static_cast<double>(a.dim)));
  const EnergySpec spec = a.energy == "elastic" ? make_spec(Elastic{w0}, Helmholtz{a.temp})
                                                : make_spec(InnerProduct{w0}, Helmholtz{a.temp});
  LoopConfig lc;
  lc.iterations = a.iters;
  lc.eta = a.lr;
  lc.causal = a.causal;
  lc.spec = spec;

  Table t;
  if (a.mode == "forward") {
    Matrix h0(a.dim, a.tokens);
    for (std::size_t i = 0; i < a.tokens; ++i) h0.set_column(i, sample_hypersphere(rng, a.dim, a.rho));
    const LoopTrace trace = loop_forward(lc, h0);
    t.meta = {{"spec", spec.summary()}, {"stop_reason", trace.stop_reason}};
    t.columns = {"iteration", "objective"};
    for (std::size_t k = 0; k < trace.objectives.size(); ++k) {
      t.rows.push_back(json::array({k, trace.objectives[k]}));
    }
  } else {
    ClusterConfig cc;
    cc.dim = a.dim;
    cc.classes = a.classes;
    cc.per_class = a.per_class;
    cc.rho = a.rho;
    cc.spread = a.spread;
    cc.tokens = a.mode == "train-alg1" ? a.sample_tokens : 1;
    const std::vector<Sample> data = two_cluster_dataset(rng, cc);
    const Matrix e0 = rng.normal_matrix(a.dim, a.classes, 0.01);
    LoopTrace trace;
    if (a.mode == "train-alg1") {
      AlternatingConfig ac;
      ac.spec = spec;
      ac.e = e0;
      ac.eta = a.lr;
      ac.epochs = a.epochs;
      trace = alternating_optimize(ac, data);
    } else {
      // One sequence: every sample contributes one token and its label.
      Matrix h0(a.dim, data.size());
      std::vector<Vector> labels;
      for (std::size_t i = 0; i < data.size(); ++i) {
        h0.set_column(i, data[i].tokens.column(0));
        labels.push_back(data[i].label);
      }
      trace = loop_train(lc, h0, labels, e0, a.epochs);
    }
    t.meta = {{"spec", spec.summary()}, {"stop_reason", trace.stop_reason}};
    t.columns = {"epoch", "ce", "objective"};
    for (std::size_t k = 0; k < trace.ce.size(); ++k) {
      t.rows.push_back(json::array({k, trace.ce[k], trace.objectives[k]}));
    }
  }
  emit(a.output, render(config, a.seed, t, a.output.format), out);
  return 0;
}

// ---------------------------------------------------------------------------
// bench

struct BenchArgs {
  std::string variant = "mha2nd1st";
  std::size_t dim = 256;
  std::size_t heads = 4;
  std::vector<std::size_t> tokens_list{256, 512, 1024, 2048, 4096};
  std::size_t reps = 20;
  std::uint64_t seed = 0;
  Output output;
};

int run_bench_cmd(const BenchArgs& a, const json& config, std::ostream& out) {
  require_positive(a.reps, "reps");
  require_positive(a.dim, "dim");
  require_positive(a.heads, "heads");
  if (a.dim % a.heads != 0) throw UsageError("heads must divide dim");
  if (a.tokens_list.empty()) throw UsageError("tokens-list must not be empty");
  for (std::size_t n : a.tokens_list) require_positive(n, "tokens");

  BenchConfig bc;
  bc.variant = parse_bench_variant(a.variant);
  bc.dim = a.dim;
  bc.heads = a.heads;
  bc.tokens = a.tokens_list;
  bc.reps = a.reps;
  bc.seed = a.seed;
  const std::vector<BenchRow> rows = run_bench(bc);

  Table t;
  t.columns = {"variant", "N", "d", "H", "median_ns", "per-token_ns"};
  for (const BenchRow& r : rows) {
    t.rows.push_back(json::array({a.variant, r.tokens, a.dim, a.heads, r.median_ns, r.per_token_ns()}));
  }
  std::vector<std::size_t> distinct = a.tokens_list;
  std::sort(distinct.begin(), distinct.end());
  if (std::unique(distinct.begin(), distinct.end()) - distinct.begin() >= 2) {
    t.rows.push_back(json::array({a.variant, "slope", a.dim, a.heads, loglog_slope(rows), nullptr}));
  }
  emit(a.output, render(config, a.seed, t, a.output.format), out);
  return 0;
}

// ---------------------------------------------------------------------------
// spectrum

struct SpectrumArgs {
  std::size_t dim = 8;
  std::size_t tokens = 16;
  std::size_t heads = 2;
  double temp = 1.0;
  double rho = 1.0;
  bool upper = false;
  std::uint64_t seed = 0;
  Output output;
};

int run_spectrum(const SpectrumArgs& a, const json& config, std::ostream& out) {
  require_positive(a.dim, "dim");
  require_positive(a.tokens, "tokens");
  require_positive(a.heads, "heads");
  if (a.dim % a.heads != 0) throw UsageError("heads must divide dim");

  InstanceConfig ic;
  ic.dim = a.dim;
  ic.tokens = a.tokens;
  ic.heads = a.heads;
  ic.temperature = a.temp;
  ic.rho = a.rho;
  Rng rng(a.seed);
  const Lemma2Instance inst = make_lemma2_instance(rng, ic);
  const EnergySpec spec = a.upper ? upper_bound_spec(inst.spec) : inst.spec;
  const HessianSplit split = hessian_split(spec, inst.z, inst.tokens);
  const Vector full = sym_eigvals(split.psd_part + split.nsd_part);
  const Vector psd = sym_eigvals(split.psd_part);
  const Vector nsd = sym_eigvals(split.nsd_part);

  Table t;
  t.meta = {{"spec", spec.summary()}};
  t.columns = {"index", "full", "psd", "nsd"};
  for (std::size_t i = 0; i < full.dim(); ++i) t.rows.push_back(json::array({i, full[i], psd[i], nsd[i]}));
  emit(a.output, render(config, a.seed, t, a.output.format), out);
  return 0;
}

// ---------------------------------------------------------------------------
// replay

std::vector<std::string> config_to_args(const json& config) {
  std::vector<std::string> args{config.at("command").get<std::string>()};
  for (const auto& [key, value] : config.items()) {
    if (key == "command") continue;
    if (key == "which") {
      args.insert(args.begin() + 1, value.get<std::string>());
    } else if (value.is_boolean()) {
      if (value.get<bool>()) args.push_back("--" + key);
    } else if (value.is_array()) {
      std::string joined;
      for (const json& v : value) joined += (joined.empty() ? "" : ",") + csv_cell(v);
      args.push_back("--" + key);
      args.push_back(joined);
    } else {
      args.push_back("--" + key);
      args.push_back(value.is_string() ? value.get<std::string>() : value.dump());
    }
  }
  return args;
}

json embedded_config(const std::string& content) {
  const auto first = content.find_first_not_of(" \t\r\n");
  if (first != std::string::npos && content[first] == '{') return json::parse(content).at("config");
  std::istringstream in(content);
  std::string line;
  const std::string key = "# config=";
  while (std::getline(in, line)) {
    if (line.rfind(key, 0) == 0) return json::parse(line.substr(key.size()));
  }
  throw UsageError("no embedded config found");
}

// Bench timings never repeat, so only the identifying columns are compared.
std::string strip_timings(const std::string& content, const std::string& format) {
  if (format == "json") {
    json j = json::parse(content);
    for (json& row : j["rows"]) {
      row[4] = nullptr;
      row[5] = nullptr;
    }
    return j.dump();
  }
  std::istringstream in(content);
  std::ostringstream s;
  std::string line;
  while (std::getline(in, line)) {
    if (!line.empty() && line[0] != '#') {
      std::size_t pos = 0;
      for (int field = 0; field < 4 && pos != std::string::npos; ++field) {
        pos = line.find(',', pos);
        if (pos != std::string::npos) ++pos;
      }
      if (pos != std::string::npos) line = line.substr(0, pos);
    }
    s << line << "\n";
  }
  return s.str();
}

int run_replay(const std::string& path, std::ostream& out, std::ostream& err) {
  std::ifstream f(path, std::ios::binary);
  if (!f) throw UsageError("cannot read " + path);
  std::stringstream buf;
  buf << f.rdbuf();
  const std::string original = buf.str();
  const json config = embedded_config(original);
  const std::string command = config.at("command").get<std::string>();
  if (command == "replay") throw UsageError("cannot replay a replay");

  std::ostringstream rerun, rerun_err;
  const int code = run_cli(config_to_args(config), rerun, rerun_err);
  if (code == 2) {
    err << rerun_err.str();
    return 2;
  }
  std::string a = original, b = rerun.str();
  if (command == "bench") {
    const std::string format = config.value("format", "csv");
    a = strip_timings(a, format);
    b = strip_timings(b, format);
  }
  if (a == b) {
    out << "replay: identical\n";
    return 0;
  }
  std::istringstream sa(a), sb(b);
  std::string la, lb;
  std::size_t line = 1;
  while (std::getline(sa, la) && std::getline(sb, lb) && la == lb) ++line;
  out << "replay: mismatch at line " << line << "\n";
  return 1;
}

}  // namespace

int run_cli(const std::vector<std::string>& args, std::ostream& out, std::ostream& err) {
  CLI::App app{"Energy-based attention: equivalence checks, descent runs and benchmarks",
               "energy-attn"};
  app.require_subcommand(1);
  app.set_help_all_flag("--help-all", "expand help for all subcommands");

  VerifyArgs va;
  CLI::App* verify = app.add_subcommand("verify", "check the attention/energy identities");
  Flags vf(verify);
  vf.positional("which", va.which, "claim group")
      ->check(CLI::IsMember({"thm1", "thm2", "thm3", "lemma1", "lemma2", "newton", "all"}));
  vf.option("seed", va.seed, "base seed");
  vf.option("dim", va.dim, "embedding dimension d");
  vf.option("tokens", va.tokens, "context size N");
  vf.option("heads", va.heads, "number of heads H");
  vf.option("rho", va.rho, "norm radius");
  vf.option("temp", va.temp, "temperature T");
  vf.option("lr", va.lr, "step size eta");
  vf.option("instances", va.instances, "random instances per claim");
  vf.option("witness-temp", va.witness_temp, "temperature of the indefinite-Hessian search");
  vf.flag("break-tying", va.break_tying, "")->group("");
  add_output_flags(verify, vf, va.output, "json");

  DescentArgs da;
  CLI::App* descend_cmd = app.add_subcommand("descend", "run one optimizer on a random energy");
  Flags df(descend_cmd);
  df.option("optimizer", da.optimizer, "optimizer")->check(CLI::IsMember(kOptimizerNames));
  add_descent_flags(descend_cmd, df, da);

  DescentArgs ca;
  CLI::App* compare = app.add_subcommand("compare", "iterations to tolerance per optimizer");
  Flags cf(compare);
  cf.list("optimizers", ca.optimizers, "comma-separated optimizers")
      ->check(CLI::IsMember(kOptimizerNames));
  cf.option("seeds", ca.seeds, "number of consecutive seeds");
  add_descent_flags(compare, cf, ca);

  LoopArgs la;
  CLI::App* loop = app.add_subcommand("loop", "loop-transformer forward and training");
  Flags lf(loop);
  lf.option("mode", la.mode, "run mode")->check(CLI::IsMember({"forward", "train-alg1", "train-alg3"}));
  lf.option("energy", la.energy, "pair energy")->check(CLI::IsMember({"elastic", "inner"}));
  lf.option("iters", la.iters, "loop iterations K");
  lf.flag("causal", la.causal, "attend to the prefix only");
  lf.option("dim", la.dim, "embedding dimension d");
  lf.option("tokens", la.tokens, "sequence length (forward)");
  lf.option("classes", la.classes, "number of classes");
  lf.option("per-class", la.per_class, "samples per class");
  lf.option("sample-tokens", la.sample_tokens, "tokens per sample (train-alg1)");
  lf.option("rho", la.rho, "token norm");
  lf.option("spread", la.spread, "cluster noise");
  lf.option("epochs", la.epochs, "training epochs");
  lf.option("lr", la.lr, "step size");
  lf.option("temp", la.temp, "temperature T");
  lf.option("seed", la.seed, "seed");
  add_output_flags(loop, lf, la.output, "csv");

  BenchArgs ba;
  CLI::App* bench = app.add_subcommand("bench", "median forward time against N");
  Flags bf(bench);
  bf.option("variant", ba.variant, "attention variant")
      ->check(CLI::IsMember({"mha", "mha2nd", "mha2nd1st", "light"}));
  bf.option("dim", ba.dim, "embedding dimension d");
  bf.option("heads", ba.heads, "number of heads H");
  bf.list("tokens-list", ba.tokens_list, "comma-separated N values");
  bf.option("reps", ba.reps, "timed repetitions");
  bf.option("seed", ba.seed, "seed");
  add_output_flags(bench, bf, ba.output, "csv");

  SpectrumArgs sa;
  CLI::App* spectrum = app.add_subcommand("spectrum", "Hessian eigenvalues of one instance");
  Flags sf(spectrum);
  sf.option("dim", sa.dim, "embedding dimension d");
  sf.option("tokens", sa.tokens, "context size N");
  sf.option("heads", sa.heads, "number of heads H");
  sf.option("temp", sa.temp, "temperature T");
  sf.option("rho", sa.rho, "norm radius");
  sf.flag("upper", sa.upper, "use the inner-product upper bound");
  sf.option("seed", sa.seed, "seed");
  add_output_flags(spectrum, sf, sa.output, "csv");

  std::string replay_path;
  CLI::App* replay = app.add_subcommand("replay", "re-run an output file's embedded config and diff");
  replay->add_option("file", replay_path, "CSV or JSON output")->required();

  std::vector<const char*> argv{"energy-attn"};
  for (const std::string& a : args) argv.push_back(a.c_str());
  try {
    app.parse(static_cast<int>(argv.size()), argv.data());
  } catch (const CLI::CallForHelp& e) {
    return app.exit(e, out, err);
  } catch (const CLI::CallForAllHelp& e) {
    return app.exit(e, out, err);
  } catch (const CLI::ParseError& e) {
    app.exit(e, out, err);
    return 2;
  }

  try {
    if (verify->parsed()) return run_verify(va, vf.config("verify"), out, err);
    if (descend_cmd->parsed()) return run_descend(da, df.config("descend"), out);
    if (compare->parsed()) return run_compare(ca, cf.config("compare"), out);
    if (loop->parsed()) return run_loop(la, lf.config("loop"), out);
    if (bench->parsed()) return run_bench_cmd(ba, bf.config("bench"), out);
    if (spectrum->parsed()) return run_spectrum(sa, sf.config("spectrum"), out);
    if (replay->parsed()) return run_replay(replay_path, out, err);
  } catch (const UsageError& e) {
    err << "error: " << e.what() << "\n" << "run with --help for usage\n";
    return 2;
  } catch (const error& e) {
    err << "error: " << e.what() << "\n";
    return 2;
  } catch (const nlohmann::json::exception& e) {
    err << "error: " << e.what() << "\n";
    return 2;
  }
  return 2;
}

int run_cli(int argc, const char* const* argv, std::ostream& out, std::ostream& err) {
  std::vector<std::string> args;
  for (int i = 1; i < argc; ++i) args.emplace_back(argv[i]);
  return run_cli(args, out, err);
}

}  // namespace energy_attn
