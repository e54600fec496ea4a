#pragma once

// Grid sweeps over the number of latent factors and the prior precision,
// with empirical-Bayes model selection by best ELBO. The joint strategy
// fits every (p, w^{-1}) pair; the two-step strategy first selects p with
// single-community fits (the PPCA view of the model) and then sweeps the
// prior precision at the chosen p.

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <limits>
#include <optional>
#include <stdexcept>
#include <string>
#include <vector>

#include "edgeless/format.hpp"
#include "edgeless/inference.hpp"
#include "edgeless/model.hpp"

namespace edgeless {

enum class SweepStrategy { kJoint, kTwoStep };

inline std::string to_string(SweepStrategy s) {
  return s == SweepStrategy::kJoint ? "joint" : "two_step";
}

inline SweepStrategy sweep_strategy_from_string(const std::string& s) {
  if (s == "joint") return SweepStrategy::kJoint;
  if (s == "two_step") return SweepStrategy::kTwoStep;
  throw std::invalid_argument("unknown sweep strategy: " + s);
}

struct SweepSpec {
  std::vector<int> p_grid;
  std::vector<double> w_inverse_grid;
  SweepStrategy strategy = SweepStrategy::kJoint;
  int restarts = 50;

  void validate() const {
    if (p_grid.empty()) throw std::invalid_argument("p_grid must be non-empty");
    if (w_inverse_grid.empty()) throw std::invalid_argument("w_inverse_grid must be non-empty");
    for (int p : p_grid)
      if (p < 1) throw std::invalid_argument("p_grid entries must be >= 1");
    for (double w : w_inverse_grid)
      if (!(w > 0.0)) throw std::invalid_argument("w_inverse_grid entries must be positive");
    if (restarts < 1) throw std::invalid_argument("restarts must be >= 1");
  }
};

// Log-spaced helper for prior-precision grids.
inline std::vector<double> log_spaced(double lo, double hi, int count) {
  if (!(lo > 0.0) || !(hi > lo) || count < 2)
    throw std::invalid_argument("log_spaced requires 0 < lo < hi and count >= 2");
  std::vector<double> out(count);
  const double step = (std::log(hi) - std::log(lo)) / (count - 1);
  for (int i = 0; i < count; ++i) out[i] = std::exp(std::log(lo) + i * step);
  return out;
}

struct SweepCell {
  int p = 0;
  double w_inverse = 0.0;
  std::string stage = "joint";  // joint | p_select | w_select
  bool ok = false;
  double elbo = -std::numeric_limits<double>::infinity();
  int k_hat = 0;
  int k_hat_min = 0;  // spread of K-hat across the cell's restarts
  int k_hat_max = 0;
  double wall_clock_seconds = 0.0;
  std::string error;
};

struct SweepResult {
  std::vector<SweepCell> cells;
  int best_cell = -1;  // index into cells, argmax ELBO among selectable cells
  std::optional<FitResult> best_fit;
};

namespace detail {
inline SweepCell run_cell(const Dataset& data, Hyperparameters hyper, FitConfig config,
                          int p, double w_inverse, const std::string& stage, int cell_index,
                          int jobs, std::optional<FitResult>* fit_out) {
  SweepCell cell;
  cell.p = p;
  cell.w_inverse = w_inverse;
  cell.stage = stage;
  hyper.p = p;
  hyper.prior_precision = w_inverse;
  config.seed = Rng::derive(config.seed, 0x9d5ull + static_cast<std::uint64_t>(cell_index)).next_u64();
  try {
    FitResult fit_result = fit(data, hyper, config, jobs);
    cell.ok = true;
    cell.elbo = fit_result.elbo();
    cell.k_hat = fit_result.k_hat;
    cell.k_hat_min = std::numeric_limits<int>::max();
    cell.k_hat_max = 0;
    for (int k : fit_result.restart_k_hats) {
      if (k < 0) continue;  // failed restart
      cell.k_hat_min = std::min(cell.k_hat_min, k);
      cell.k_hat_max = std::max(cell.k_hat_max, k);
    }
    if (cell.k_hat_min == std::numeric_limits<int>::max()) cell.k_hat_min = cell.k_hat;
    cell.wall_clock_seconds = fit_result.wall_clock_seconds;
    if (fit_out) *fit_out = std::move(fit_result);
  } catch (const std::exception& e) {
    cell.ok = false;
    cell.error = e.what();
  }
  return cell;
}
}  // namespace detail

inline SweepResult run_sweep(const Dataset& data, const Hyperparameters& base_hyper,
                             const FitConfig& base_config, const SweepSpec& spec, int jobs = 0) {
  spec.validate();
  FitConfig config = base_config;
  config.n_restarts = spec.restarts;

  SweepResult result;
  int cell_index = 0;

  auto consider = [&](SweepCell cell, std::optional<FitResult> fit_result) {
    if (cell.ok && cell.stage != "p_select") {
      if (result.best_cell < 0 || cell.elbo > result.cells[result.best_cell].elbo) {
        result.best_cell = static_cast<int>(result.cells.size());
        result.best_fit = std::move(fit_result);
      }
    }
    result.cells.push_back(std::move(cell));
  };

  if (spec.strategy == SweepStrategy::kJoint) {
    for (int p : spec.p_grid) {
      for (double w : spec.w_inverse_grid) {
        std::optional<FitResult> cell_fit;
        SweepCell cell = detail::run_cell(data, base_hyper, config, p, w, "joint",
                                          cell_index++, jobs, &cell_fit);
        consider(std::move(cell), std::move(cell_fit));
      }
    }
  } else {
    // Stage one: pick p with single-community fits at a mid-grid precision.
    double log_mid = 0.0;
    for (double w : spec.w_inverse_grid) log_mid += std::log(w);
    const double w_mid = std::exp(log_mid / spec.w_inverse_grid.size());
    int best_p = spec.p_grid.front();
    double best_p_elbo = -std::numeric_limits<double>::infinity();
    for (int p : spec.p_grid) {
      Hyperparameters h = base_hyper;
      h.k_max = 1;
      SweepCell cell =
          detail::run_cell(data, h, config, p, w_mid, "p_select", cell_index++, jobs, nullptr);
      if (cell.ok && cell.elbo > best_p_elbo) {
        best_p_elbo = cell.elbo;
        best_p = cell.p;
      }
      consider(std::move(cell), std::nullopt);
    }
    // Stage two: sweep the prior precision at the selected p.
    for (double w : spec.w_inverse_grid) {
      std::optional<FitResult> cell_fit;
      SweepCell cell = detail::run_cell(data, base_hyper, config, best_p, w, "w_select",
                                        cell_index++, jobs, &cell_fit);
      consider(std::move(cell), std::move(cell_fit));
    }
  }

  bool any_ok = false;
  for (const auto& cell : result.cells) any_ok = any_ok || cell.ok;
  if (!any_ok) throw std::runtime_error("every sweep cell failed");
  return result;
}

inline std::string sweep_to_csv(const SweepResult& result) {
  std::string out =
      "p,w_inverse,stage,ok,elbo,k_hat,k_hat_min,k_hat_max,wall_clock_seconds,best\n";
  for (std::size_t c = 0; c < result.cells.size(); ++c) {
    const auto& cell = result.cells[c];
    out += std::to_string(cell.p) + ",";
    out += format_double(cell.w_inverse) + ",";
    out += cell.stage + ",";
    out += (cell.ok ? "1" : "0");
    out += ",";
    out += cell.ok ? format_double(cell.elbo) : std::string();
    out += "," + std::to_string(cell.k_hat) + "," + std::to_string(cell.k_hat_min) + "," +
           std::to_string(cell.k_hat_max) + ",";
    out += format_double(cell.wall_clock_seconds);
    out += ",";
    out += static_cast<int>(c) == result.best_cell ? "1" : "0";
    out += "\n";
  }
  return out;
}

}  // namespace edgeless
