#pragma once

#include <algorithm>
#include <chrono>
#include <cmath>
#include <cstdint>
#include <sstream>
#include <string>
#include <vector>

#include "vphype/backbone.hpp"
#include "vphype/flops.hpp"
#include "vphype/ops.hpp"

namespace vphype {

struct BenchRow {
  std::string mixer;  // "scan" | "attention"
  std::int64_t length = 0;
  std::uint64_t flops = 0;
  std::uint64_t median_ns = 0;
  double slope = 0.0;  // log-log slope of median time vs length, per mixer
};

struct BenchSpec {
  std::int64_t dims = 32;
  std::vector<std::int64_t> lengths{256, 512, 1024, 2048, 4096};
  std::int64_t repeats = 5;
  std::int64_t d_state = 16;

  void validate() const {
    if (dims < 1) throw ConfigError("bench dims must be >= 1");
    if (repeats < 1) throw ConfigError("bench repeats must be >= 1");
    if (lengths.size() < 4) throw ConfigError("bench needs at least 4 lengths");
    for (std::size_t i = 1; i < lengths.size(); ++i) {
      if (lengths[i] <= lengths[i - 1]) throw ConfigError("bench lengths must be ascending");
    }
    if (lengths.back() < 16 * lengths.front()) {
      throw ConfigError("bench lengths must span at least 16x");
    }
  }
};

namespace detail {

inline double fit_loglog_slope(const std::vector<std::int64_t>& xs,
                               const std::vector<std::uint64_t>& ys) {
  double n = static_cast<double>(xs.size());
  double sx = 0, sy = 0, sxx = 0, sxy = 0;
  for (std::size_t i = 0; i < xs.size(); ++i) {
    double lx = std::log(static_cast<double>(xs[i]));
    double ly = std::log(std::max<double>(1.0, static_cast<double>(ys[i])));
    sx += lx;
    sy += ly;
    sxx += lx * lx;
    sxy += lx * ly;
  }
  return (n * sxy - sx * sy) / (n * sxx - sx * sx);
}

template <typename F>
std::uint64_t median_wall_ns(F&& fn, std::int64_t repeats) {
  std::vector<std::uint64_t> times;
  times.reserve(static_cast<std::size_t>(repeats));
  fn();  // warmup
  for (std::int64_t r = 0; r < repeats; ++r) {
    auto t0 = std::chrono::steady_clock::now();
    fn();
    auto t1 = std::chrono::steady_clock::now();
    times.push_back(static_cast<std::uint64_t>(
        std::chrono::duration_cast<std::chrono::nanoseconds>(t1 - t0).count()));
  }
  std::sort(times.begin(), times.end());
  return times[times.size() / 2];
}

}  // namespace detail

// Times the bare selective-scan operator against full (single-window)
// attention over a length sweep. Attention is deliberately un-windowed so the
// quadratic regime is actually exercised; fixed-window attention would be
// linear in token count.
inline std::vector<BenchRow> run_mixer_bench(const BenchSpec& spec) {
  spec.validate();
  NoGradGuard ng;
  Rng rng(12345);
  std::vector<BenchRow> rows;

  std::vector<std::int64_t> scan_lengths, attn_lengths;
  std::vector<std::uint64_t> scan_times, attn_times;

  for (std::int64_t L : spec.lengths) {
    Tensor u = Tensor::randn({1, spec.dims, L}, rng);
    Tensor delta = Tensor::randn({1, spec.dims, L}, rng);
    for (auto& v : delta.mutable_data()) v = 0.1 + std::abs(v);
    Tensor a = Tensor::randn({spec.dims, spec.d_state}, rng);
    for (auto& v : a.mutable_data()) v = -std::abs(v) - 0.05;
    Tensor b = Tensor::randn({1, spec.d_state, L}, rng);
    Tensor c = Tensor::randn({1, spec.d_state, L}, rng);
    Tensor skip = Tensor::randn({spec.dims}, rng);

    flops::reset();
    selective_scan(u, delta, a, b, c, skip);
    std::uint64_t scan_flops = flops::count();
    std::uint64_t scan_ns = detail::median_wall_ns(
        [&] { selective_scan(u, delta, a, b, c, skip); }, spec.repeats);
    rows.push_back({"scan", L, scan_flops, scan_ns, 0.0});
    scan_lengths.push_back(L);
    scan_times.push_back(scan_ns);
  }

  Rng attn_init(999);
  AttentionMixer attn(spec.dims, /*heads=*/1, /*qk_norm=*/true, attn_init);
  for (std::int64_t L : spec.lengths) {
    Tensor s = Tensor::randn({1, L, spec.dims}, rng);
    flops::reset();
    attn.forward(s);
    std::uint64_t attn_flops = flops::count();
    std::uint64_t attn_ns = detail::median_wall_ns([&] { attn.forward(s); }, spec.repeats);
    rows.push_back({"attention", L, attn_flops, attn_ns, 0.0});
    attn_lengths.push_back(L);
    attn_times.push_back(attn_ns);
  }

  double scan_slope = detail::fit_loglog_slope(scan_lengths, scan_times);
  double attn_slope = detail::fit_loglog_slope(attn_lengths, attn_times);
  for (auto& row : rows) row.slope = row.mixer == "scan" ? scan_slope : attn_slope;
  return rows;
}

inline std::string bench_csv(const std::vector<BenchRow>& rows) {
  std::ostringstream os;
  os << "mixer,L,flops,median_ns,slope\n";
  for (const auto& r : rows) {
    os << r.mixer << ',' << r.length << ',' << r.flops << ',' << r.median_ns << ',' << r.slope
       << '\n';
  }
  return os.str();
}

}  // namespace vphype
