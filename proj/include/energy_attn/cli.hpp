#pragma once

// Command-line front end and the timing harness behind `bench`.
//
// Exit codes: 0 success, 1 verification failure (or replay mismatch),
// 2 usage error.

#include <cstdint>
#include <iosfwd>
#include <string>
#include <vector>

namespace energy_attn {

inline constexpr int kSchemaVersion = 1;

enum class BenchVariant { mha, mha2nd, mha2nd1st, light };

std::string to_string(BenchVariant variant);
BenchVariant parse_bench_variant(const std::string& name);

struct BenchConfig {
  BenchVariant variant = BenchVariant::mha2nd1st;
  std::size_t dim = 256;
  std::size_t heads = 4;
  std::vector<std::size_t> tokens{256, 512, 1024, 2048, 4096};
  std::size_t reps = 20;
  std::size_t warmup = 3;
  std::uint64_t seed = 0;
};

struct BenchRow {
  std::size_t tokens = 0;
  double median_ns = 0.0;
  double per_token_ns() const { return median_ns / static_cast<double>(tokens); }
};

// Median wall time per forward call on random distance-score parameters,
// steady clock, after `warmup` untimed calls.
std::vector<BenchRow> run_bench(const BenchConfig& config);

// Least-squares slope of log(median_ns) against log(N). Needs two distinct N.
double loglog_slope(const std::vector<BenchRow>& rows);

// Writes to `path` through a temporary file in the same directory and a rename.
void write_atomic(const std::string& path, const std::string& content);

int run_cli(int argc, const char* const* argv, std::ostream& out, std::ostream& err);
int run_cli(const std::vector<std::string>& args, std::ostream& out, std::ostream& err);

}  // namespace energy_attn
