#pragma once

// Benchmark and experiment drivers. Each mode writes one CSV: a '#' line with
// the JSON form of the spec, a header row, then data rows.

#include <algorithm>
#include <chrono>
#include <cstdint>
#include <future>
#include <optional>
#include <ostream>
#include <sstream>
#include <string>
#include <vector>

#include "json.hpp"
#include "soft/dense_attention.hpp"
#include "soft/fit.hpp"
#include "soft/model.hpp"
#include "soft/nystrom_soft.hpp"
#include "soft/pinv_newton.hpp"
#include "soft/random.hpp"
#include "soft/spectral.hpp"

namespace soft::bench {

enum class Mode { scale, pinv_trace, spectra, norm_growth, train, ablate_sampling, ablate_bottleneck };

inline const char* to_string(Mode m) {
  switch (m) {
    case Mode::scale: return "scale";
    case Mode::pinv_trace: return "pinv_trace";
    case Mode::spectra: return "spectra";
    case Mode::norm_growth: return "norm_growth";
    case Mode::train: return "train";
    case Mode::ablate_sampling: return "ablate_sampling";
    case Mode::ablate_bottleneck: return "ablate_bottleneck";
  }
  return "?";
}

inline Mode parse_mode(const std::string& s) {
  for (Mode m : {Mode::scale, Mode::pinv_trace, Mode::spectra, Mode::norm_growth, Mode::train,
                 Mode::ablate_sampling, Mode::ablate_bottleneck})
    if (s == to_string(m)) return m;
  throw UsageError("unknown mode '" + s + "'");
}

inline bool is_timing(Mode m) { return m == Mode::scale; }

// Unset optionals take per-mode defaults in resolve().
struct BenchSpec {
  Mode mode = Mode::scale;
  std::optional<std::vector<std::size_t>> n_values;
  std::optional<std::vector<std::size_t>> m_values;
  std::size_t repeats = 3;
  std::uint64_t seed = 0;
  std::string out;  // empty: caller's stream
  bool normalized = true;
  std::optional<SamplingKind> sampling;
  int iters = 20;
  std::optional<std::size_t> epochs;
  std::size_t samples = 256;
  std::size_t d = 32;                 // token width for scale / pinv_trace / spectra
  std::size_t exact_guard = 3136;     // largest n for exact attention in scale mode
  bool parallel = false;              // ablation runs only
};

inline BenchSpec resolve(BenchSpec s) {
  using V = std::vector<std::size_t>;
  if (s.n_values && s.n_values->empty()) throw UsageError("--n: empty list");
  if (s.m_values && s.m_values->empty()) throw UsageError("--m: empty list");
  if (!s.n_values) {
    if (s.mode == Mode::scale) s.n_values = V{784, 1568, 2352, 3136, 3920, 4704, 5488, 6272};
    else s.n_values = V{64};
  }
  if (!s.m_values) {
    switch (s.mode) {
      case Mode::norm_growth: s.m_values = V{8, 16, 32, 64, 128}; break;
      case Mode::ablate_bottleneck: s.m_values = V{36, 49, 64, 81}; break;
      case Mode::ablate_sampling:
      case Mode::train: s.m_values = V{16}; break;
      default: s.m_values = V{49};
    }
  }
  if (!s.sampling) {
    switch (s.mode) {
      case Mode::train: s.sampling = SamplingKind::convolution; break;
      case Mode::ablate_bottleneck: s.sampling = SamplingKind::random; break;
      default: s.sampling = SamplingKind::average_pool;
    }
  }
  if (!s.epochs) s.epochs = s.mode == Mode::train ? 50 : 10;

  if (is_timing(s.mode) && s.repeats < 3) throw UsageError("--repeats must be >= 3 for timing modes");
  if (s.repeats < 1) throw UsageError("--repeats must be >= 1");
  for (std::size_t i = 0; i < s.n_values->size(); ++i) {
    if ((*s.n_values)[i] == 0) throw UsageError("--n values must be >= 1");
    if (i > 0 && (*s.n_values)[i] <= (*s.n_values)[i - 1]) throw UsageError("--n values must be strictly increasing");
  }
  for (auto m : *s.m_values)
    if (m == 0) throw UsageError("--m values must be >= 1");
  if (s.iters < 1) throw UsageError("--iters must be >= 1");
  if (s.d == 0) throw UsageError("token width must be >= 1");
  if (s.mode == Mode::ablate_bottleneck && (*s.sampling == SamplingKind::convolution ||
                                            *s.sampling == SamplingKind::average_pool))
    throw UsageError("ablate_bottleneck needs random or biased sampling to hit every m exactly");
  return s;
}

inline nlohmann::json to_json(const BenchSpec& s) {
  nlohmann::json j;
  j["mode"] = to_string(s.mode);
  j["n_values"] = s.n_values ? nlohmann::json(*s.n_values) : nlohmann::json(nullptr);
  j["m_values"] = s.m_values ? nlohmann::json(*s.m_values) : nlohmann::json(nullptr);
  j["repeats"] = s.repeats;
  j["seed"] = s.seed;
  j["out"] = s.out;
  j["normalized"] = s.normalized;
  j["sampling"] = s.sampling ? to_string(*s.sampling) : "default";
  j["iters"] = s.iters;
  j["epochs"] = s.epochs ? nlohmann::json(*s.epochs) : nlohmann::json(nullptr);
  j["samples"] = s.samples;
  j["d"] = s.d;
  j["exact_guard"] = s.exact_guard;
  j["parallel"] = s.parallel;
  return j;
}

// ---- scale ----

struct ScaleLayout {
  Grid grid;
  SamplingMethod method;
};

// n = 28·w tokens go on a 28-row grid; anything else on a single row. Windows
// are sized so the bottleneck stays near m.
inline ScaleLayout scale_layout(std::size_t n, std::size_t m, SamplingKind kind, std::uint64_t seed) {
  ScaleLayout l;
  if (kind == SamplingKind::random || kind == SamplingKind::biased_first_m) {
    l.grid = {1, n};
    l.method = kind == SamplingKind::random ? SamplingMethod::random(std::min(m, n), seed)
                                            : SamplingMethod::biased(std::min(m, n));
    return l;
  }
  std::size_t side = 1;
  while ((side + 1) * (side + 1) <= m) ++side;
  if (n % 28 == 0 && side <= 28) {
    l.grid = {28, n / 28};
    l.method = {kind, (28 + side - 1) / side, (n / 28 + side - 1) / side, 0, 0};
  } else {
    l.grid = {1, n};
    l.method = {kind, 1, (n + m - 1) / m, 0, 0};
  }
  return l;
}

template <class F>
double median_seconds(std::size_t repeats, F&& f) {
  f();  // warm-up, discarded
  std::vector<double> t;
  for (std::size_t r = 0; r < repeats; ++r) {
    auto t0 = std::chrono::steady_clock::now();
    f();
    t.push_back(std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count());
  }
  std::nth_element(t.begin(), t.begin() + static_cast<long>(t.size() / 2), t.end());
  return t[t.size() / 2];
}

struct ScalePoint {
  std::string method;
  std::size_t n = 0, m = 0;
  double seconds = 0.0;
  std::size_t peak_elements = 0;
};

struct ScaleSlope {
  std::string method;
  double time_slope = 0.0, element_slope = 0.0;
};

struct ScaleReport {
  std::vector<ScalePoint> points;
  std::vector<ScaleSlope> slopes;
};

inline ScaleReport scale_benchmark(const BenchSpec& s) {
  ScaleReport rep;
  const std::size_t m = s.m_values->front();
  for (std::size_t n : *s.n_values) {
    Rng rng(derive_seed(s.seed, n));
    Matrix q = gaussian_matrix(n, s.d, rng, 0.5), v = gaussian_matrix(n, s.d, rng);
    ScaleLayout lay = scale_layout(n, m, *s.sampling, s.seed);
    AttentionConfig cfg;
    cfg.d_e = s.d;
    cfg.sampling = lay.method;
    cfg.m = lay.method.output_count(lay.grid);
    cfg.pinv.max_iterations = s.iters;
    cfg.normalized = s.normalized;
    ConvSamplerWeights conv;
    if (lay.method.kind == SamplingKind::convolution) {
      const std::size_t taps = lay.method.kernel_h * lay.method.kernel_w;
      conv.weight = gaussian_matrix(taps * s.d, s.d, rng, 1.0 / std::sqrt(double(taps * s.d)));
      conv.bias = Matrix(1, s.d);
    }
    std::size_t peak = 0;
    const double secs = median_seconds(s.repeats, [&] {
      peak = soft_attention(q, v, cfg, lay.grid, &conv).diag.peak_elements;
    });
    rep.points.push_back({"soft", n, cfg.m, secs, peak});
    if (n <= s.exact_guard) {
      std::size_t epeak = 0;
      const double esecs = median_seconds(s.repeats, [&] {
        PeakScope scope;
        exact_gaussian_attention(q, q, v);
        epeak = scope.peak_above_baseline();
      });
      rep.points.push_back({"exact", n, n, esecs, epeak});
    }
  }
  for (const char* method : {"soft", "exact"}) {
    std::vector<double> ns, ts, es;
    for (const auto& p : rep.points)
      if (p.method == method) {
        ns.push_back(double(p.n));
        ts.push_back(p.seconds);
        es.push_back(double(p.peak_elements));
      }
    if (ns.size() >= 2) rep.slopes.push_back({method, loglog_slope(ns, ts), loglog_slope(ns, es)});
  }
  return rep;
}

// ---- toy-task runs shared by train and the ablations ----

struct ToyRun {
  SamplingKind sampling;
  std::size_t m = 0;
  TrainHistory history;
};

inline ToyRun toy_run(const BenchSpec& s, SamplingKind kind, std::size_t m, Grid grid, ResidualNorm norm) {
  ToyTaskConfig tc;
  tc.grid = grid;
  tc.samples = s.samples;
  tc.seed = s.seed;
  ClassifierConfig cc;
  cc.block.grid = grid;
  cc.block.sampling = kind;
  cc.block.normalized = s.normalized;
  cc.block.pinv.max_iterations = s.iters;
  cc.block.pinv.residual_norm = norm;
  if (kind == SamplingKind::random || kind == SamplingKind::biased_first_m) {
    cc.block.m = m;
  } else {
    std::size_t k = 1;
    while (SamplingMethod::pool(k).output_count(grid) > m) ++k;
    cc.block.kernel = k;
  }
  auto task = make_toy_task(tc);
  ToyClassifier model(cc, derive_seed(s.seed, 7));
  TrainConfig trc;
  trc.epochs = *s.epochs;
  trc.seed = s.seed;
  ToyRun r{kind, cc.block.attention_config().m, train_toy(model, task, trc)};
  return r;
}

inline std::vector<ToyRun> run_all(const BenchSpec& s, const std::vector<std::pair<SamplingKind, std::size_t>>& jobs,
                                   Grid grid) {
  std::vector<ToyRun> out;
  if (s.parallel) {
    std::vector<std::future<ToyRun>> fut;
    for (auto [kind, m] : jobs)
      fut.push_back(std::async(std::launch::async, [&s, kind, m, grid] {
        return toy_run(s, kind, m, grid, ResidualNorm::one_norm);
      }));
    for (auto& f : fut) out.push_back(f.get());  // collected in job order
  } else {
    for (auto [kind, m] : jobs) out.push_back(toy_run(s, kind, m, grid, ResidualNorm::one_norm));
  }
  return out;
}

inline void write_ablation(std::ostream& os, const std::vector<ToyRun>& runs) {
  os << "sampling,m,epochs,final_loss,final_accuracy,mean_pinv_residual\n";
  for (const auto& r : runs) {
    const auto& last = r.history.epochs.back();
    double resid = 0.0;
    for (std::size_t e = 1; e < r.history.epochs.size(); ++e) resid += r.history.epochs[e].mean_pinv_residual;
    if (r.history.epochs.size() > 1) resid /= double(r.history.epochs.size() - 1);
    os << to_string(r.sampling) << ',' << r.m << ',' << last.epoch << ',' << last.loss << ',' << last.accuracy
       << ',' << resid << '\n';
  }
}

// ---- dispatcher ----

inline void run(const BenchSpec& raw, std::ostream& os) {
  const BenchSpec s = resolve(raw);
  os << "# " << to_json(s).dump() << '\n';
  os.precision(12);
  switch (s.mode) {
    case Mode::scale: {
      auto rep = scale_benchmark(s);
      os << "row,method,n,m,median_seconds,peak_elements\n";
      for (const auto& p : rep.points)
        os << "point," << p.method << ',' << p.n << ',' << p.m << ',' << p.seconds << ',' << p.peak_elements << '\n';
      for (const auto& sl : rep.slopes)
        os << "slope," << sl.method << ",,," << sl.time_slope << ',' << sl.element_slope << '\n';
      break;
    }
    case Mode::pinv_trace: {
      os << "m,instance,iteration,residual\n";
      PinvConfig pc;
      pc.max_iterations = s.iters;
      pc.early_stop_tol = 0.0;
      for (std::size_t m : *s.m_values)
        for (std::size_t i = 0; i < s.repeats; ++i) {
          Rng rng(derive_seed(s.seed, m * 1000 + i));
          Matrix a = gaussian_gram(gaussian_matrix(m, s.d, rng, 0.75), s.d).values;
          auto r = newton_pinv(a, pc);
          for (std::size_t k = 0; k < r.trace.size(); ++k)
            os << m << ',' << i << ',' << k << ',' << r.trace[k] << '\n';
        }
      break;
    }
    case Mode::spectra: {
      os << "kind,n,index,value\n";
      for (std::size_t n : *s.n_values) {
        Rng rng(derive_seed(s.seed, n));
        Matrix q = gaussian_matrix(n, s.d, rng, 0.5);
        Matrix a = gaussian_gram(q, s.d).values;
        SvdPinv sp = svd_pinv_detailed(a);
        std::vector<double> deg = row_sums(a);
        for (double& x : deg) x = 1.0 / std::sqrt(std::max(x, kDegreeFloor));
        Matrix normalized = scale_cols(scale_rows(sp.pinv, deg), deg);
        std::vector<SpectrumReport> reps{softmax_spectrum(q), eigen_spectrum(a, true, MatrixKind::gaussian_gram),
                                         eigen_spectrum(sp.pinv, true, MatrixKind::pinv_raw),
                                         eigen_spectrum(normalized, true, MatrixKind::pinv_normalized)};
        const char* names[] = {"softmax_attn", "gaussian_gram", "pinv_raw", "pinv_normalized"};
        for (std::size_t r = 0; r < reps.size(); ++r)
          for (std::size_t i = 0; i < reps[r].eigenvalues.size(); ++i)
            os << names[r] << ',' << n << ',' << i << ',' << reps[r].eigenvalues[i] << '\n';
      }
      break;
    }
    case Mode::norm_growth: {
      auto t = norm_growth_experiment(*s.m_values, s.repeats, s.seed);
      write_norm_growth_csv(os, t);
      os << "exponent,mean," << t.raw_exponent << ',' << t.normalized_exponent << '\n';
      break;
    }
    case Mode::train: {
      auto r = toy_run(s, *s.sampling, s.m_values->front(), Grid{8, 8}, ResidualNorm::spectral);
      r.history.write_csv(os);
      break;
    }
    case Mode::ablate_sampling: {
      std::vector<std::pair<SamplingKind, std::size_t>> jobs;
      for (auto k : {SamplingKind::convolution, SamplingKind::random, SamplingKind::biased_first_m,
                     SamplingKind::average_pool})
        jobs.emplace_back(k, s.m_values->front());
      write_ablation(os, run_all(s, jobs, Grid{8, 8}));
      break;
    }
    case Mode::ablate_bottleneck: {
      const Grid grid{10, 10};
      std::vector<std::pair<SamplingKind, std::size_t>> jobs;
      for (auto m : *s.m_values) {
        if (m > grid.tokens()) throw UsageError("ablate_bottleneck: m exceeds the 100-token grid");
        jobs.emplace_back(*s.sampling, m);
      }
      write_ablation(os, run_all(s, jobs, grid));
      break;
    }
  }
}

}  // namespace soft::bench
