#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <functional>
#include <iomanip>
#include <limits>
#include <numeric>
#include <sstream>
#include <string>
#include <utility>
#include <vector>

#include "rng.hpp"
#include "tensor.hpp"

namespace zsg::ad {

struct GradCheckOptions {
  double tolerance = 1e-5;
  double step = 1e-3;
  // Fourth-order five-point central stencil; false selects the plain
  // two-point central difference.
  bool five_point = true;
  // Each probe evaluates the stencil at step, step/10, ... (this many
  // refinements). The first estimate that agrees with the next finer one to
  // within tolerance / 2 is used; stencils crossing a branch are skipped. The
  // analytic gradient plays no part in the choice.
  int step_refinements = 3;
  // Relative error is |analytic - numeric| / max(|analytic|, |numeric|, floor).
  double magnitude_floor = 1e-6;
  // 0 probes every element; otherwise a seeded sample of this many per input.
  std::size_t max_probes_per_input = 0;
  std::uint64_t seed = 0;
  // Probes whose stencil evaluations take different branches of a piecewise
  // op are excluded; more than this fraction excluded fails the check.
  double max_excluded_fraction = 0.1;
};

struct GradCheckEntry {
  std::string name;
  std::size_t probes = 0;
  std::size_t excluded = 0;
  double max_rel_error = 0;
  double max_abs_error = 0;
  bool passed = true;
};

struct GradCheckReport {
  std::vector<GradCheckEntry> entries;
  double tolerance = 0;
  bool passed = true;

  double max_rel_error() const {
    double m = 0;
    for (const auto& e : entries) m = std::max(m, e.max_rel_error);
    return m;
  }

  std::string summary() const {
    std::ostringstream os;
    os << std::scientific << std::setprecision(3);
    for (const auto& e : entries) {
      os << (e.passed ? "ok   " : "FAIL ") << e.name << " probes=" << e.probes << " excluded=" << e.excluded
         << " max_rel=" << e.max_rel_error << " max_abs=" << e.max_abs_error << "\n";
    }
    return os.str();
  }
};

/// Compares reverse-mode gradients of the scalar returned by `f` against
/// central finite differences for every named input. `f` must build its
/// result from the given input tensors (captured by reference or handle) and
/// be deterministic.
template <class T>
GradCheckReport grad_check(const std::function<Tensor<T>(Tape<T>&)>& f,
                           std::vector<std::pair<std::string, Tensor<T>>> inputs,
                           const GradCheckOptions& opt = {}) {
  for (auto& [name, t] : inputs) {
    t.set_requires_grad(true);
    t.zero_grad();
  }
  {
    Tape<T> tape;
    auto loss = f(tape);
    tape.backward(loss);
  }
  auto evaluate = [&](std::vector<unsigned char>& branches) {
    Tape<T> tape(false);
    tape.enable_branch_log(true);
    const double v = static_cast<double>(f(tape).item());
    branches = tape.branches();
    return v;
  };

  GradCheckReport report;
  report.tolerance = opt.tolerance;
  Rng rng(opt.seed);
  std::size_t total_probes = 0, total_excluded = 0;
  for (auto& [name, t] : inputs) {
    GradCheckEntry e;
    e.name = name;
    const std::vector<T> analytic(t.grad().begin(), t.grad().end());
    std::vector<std::size_t> idx(t.size());
    std::iota(idx.begin(), idx.end(), 0);
    if (opt.max_probes_per_input && idx.size() > opt.max_probes_per_input) {
      rng.shuffle(idx);
      idx.resize(opt.max_probes_per_input);
      std::sort(idx.begin(), idx.end());
    }
    std::vector<unsigned char> ref_branches, branches;
    for (std::size_t i : idx) {
      const T saved = t[i];
      auto at = [&](double offset, bool first) {
        t[i] = saved + static_cast<T>(offset);
        const double v = evaluate(first ? ref_branches : branches);
        return std::pair{v, first || branches == ref_branches};
      };
      std::vector<double> estimates;
      double h = opt.step;
      for (int attempt = 0; attempt <= opt.step_refinements; ++attempt, h /= 10.0) {
        bool same = true;
        auto eval = [&](double offset, bool first = false) {
          auto [v, ok] = at(offset, first);
          same = same && ok;
          return v;
        };
        double est, fmax;
        if (opt.five_point) {
          const double p1 = eval(h, true), m1 = eval(-h), p2 = eval(2 * h), m2 = eval(-2 * h);
          est = (8.0 * (p1 - m1) - (p2 - m2)) / (12.0 * h);
          fmax = std::max({std::abs(p1), std::abs(m1), std::abs(p2), std::abs(m2)});
        } else {
          const double p1 = eval(h, true), m1 = eval(-h);
          est = (p1 - m1) / (2.0 * h);
          fmax = std::max(std::abs(p1), std::abs(m1));
        }
        if (!same) continue;
        if (!estimates.empty()) {
          // Agreement up to tolerance plus the rounding noise of the finer stencil.
          const double prev = estimates.back();
          const double scale = std::max({std::abs(prev), std::abs(est), opt.magnitude_floor});
          const double noise = 4.0 * std::numeric_limits<T>::epsilon() * fmax / h;
          if (std::abs(prev - est) <= 0.5 * opt.tolerance * scale + noise) break;
        }
        estimates.push_back(est);
      }
      t[i] = saved;
      ++e.probes;
      if (estimates.empty()) {
        ++e.excluded;
        continue;
      }
      const double numeric = estimates.back();
      const double a = static_cast<double>(analytic[i]);
      const double abs_err = std::abs(a - numeric);
      const double rel = abs_err / std::max({std::abs(a), std::abs(numeric), opt.magnitude_floor});
      e.max_abs_error = std::max(e.max_abs_error, abs_err);
      e.max_rel_error = std::max(e.max_rel_error, rel);
    }
    e.passed = e.max_rel_error <= opt.tolerance && (e.probes == 0 || e.excluded < e.probes);
    total_probes += e.probes;
    total_excluded += e.excluded;
    report.passed = report.passed && e.passed;
    report.entries.push_back(e);
  }
  if (total_probes && static_cast<double>(total_excluded) > opt.max_excluded_fraction * total_probes)
    report.passed = false;
  return report;
}

}  // namespace zsg::ad
