#pragma once

// soft_bench command line. Exit codes: 0 success, 1 numerical failure,
// 2 usage error.

#include <fstream>
#include <ostream>
#include <sstream>
#include <string>
#include <vector>

#include "CLI11.hpp"
#include "soft/bench.hpp"

namespace soft::bench {

inline constexpr int kExitOk = 0;
inline constexpr int kExitNumerical = 1;
inline constexpr int kExitUsage = 2;

// "784,1568" -> {784, 1568}. An empty string gives an empty list.
inline std::vector<std::size_t> parse_list(const std::string& text, const char* flag) {
  std::vector<std::size_t> out;
  std::stringstream ss(text);
  std::string item;
  while (std::getline(ss, item, ',')) {
    if (item.empty()) continue;
    std::size_t used = 0;
    unsigned long long v = 0;
    try {
      v = std::stoull(item, &used);
    } catch (const std::exception&) {
      throw UsageError(std::string(flag) + ": not a number: '" + item + "'");
    }
    if (used != item.size() || item[0] == '-') throw UsageError(std::string(flag) + ": not a count: '" + item + "'");
    out.push_back(static_cast<std::size_t>(v));
  }
  return out;
}

inline int bench_main(int argc, const char* const* argv, std::ostream& out, std::ostream& err) {
  CLI::App app{"SOFT attention benchmarks and experiments"};
  std::string mode = "scale", n_text, m_text, normalized = "true", sampling;
  BenchSpec spec;
  std::size_t epochs = 0;
  app.add_option("--mode", mode, "scale|pinv_trace|spectra|norm_growth|train|ablate_sampling|ablate_bottleneck");
  auto* n_opt = app.add_option("--n", n_text, "comma-separated token counts, strictly increasing");
  auto* m_opt = app.add_option("--m", m_text, "comma-separated bottleneck sizes");
  app.add_option("--repeats", spec.repeats, "timing repeats (>= 3) or trials");
  app.add_option("--seed", spec.seed);
  app.add_option("--out", spec.out, "CSV path (default stdout)");
  app.add_option("--normalized", normalized, "SOFT++ normalization")->check(CLI::IsMember({"true", "false"}));
  auto* s_opt = app.add_option("--sampling", sampling)->check(CLI::IsMember({"conv", "pool", "random", "biased"}));
  app.add_option("--iters", spec.iters, "Newton iterations T");
  auto* e_opt = app.add_option("--epochs", epochs, "training epochs");
  app.add_option("--samples", spec.samples, "toy task size");
  app.add_option("--dim", spec.d, "token width for scale, pinv_trace and spectra");
  app.add_option("--exact-guard", spec.exact_guard, "largest n for exact attention");
  app.add_flag("--parallel", spec.parallel, "run ablation configurations concurrently");
  try {
    app.parse(argc, argv);
  } catch (const CLI::CallForHelp& e) {
    out << app.help();
    return kExitOk;
  } catch (const CLI::ParseError& e) {
    err << "usage error: " << e.what() << '\n' << app.help();
    return kExitUsage;
  }
  try {
    spec.mode = parse_mode(mode);
    if (n_opt->count()) spec.n_values = parse_list(n_text, "--n");
    if (m_opt->count()) spec.m_values = parse_list(m_text, "--m");
    if (s_opt->count()) spec.sampling = parse_sampling(sampling);
    if (e_opt->count()) spec.epochs = epochs;
    spec.normalized = normalized == "true";
    resolve(spec);
    if (spec.out.empty()) {
      run(spec, out);
    } else {
      std::ofstream f(spec.out);
      if (!f) throw UsageError("cannot open " + spec.out);
      run(spec, f);
    }
  } catch (const UsageError& e) {
    err << "usage error: " << e.what() << '\n';
    return kExitUsage;
  } catch (const ConfigError& e) {
    err << "usage error: " << e.what() << '\n';
    return kExitUsage;
  } catch (const DivergenceError& e) {
    err << "numerical failure: " << e.what() << "\n  pinv trace:";
    for (double r : e.trace()) err << ' ' << r;
    err << '\n';
    return kExitNumerical;
  } catch (const Error& e) {
    err << "numerical failure: " << e.what() << '\n';
    return kExitNumerical;
  }
  return kExitOk;
}

}  // namespace soft::bench
