#pragma once

// CSV ingestion with optional preprocessing (log-returns, standardization,
// transposition), deterministic CSV/JSON writers, posterior serialization,
// input digests and run manifests. All numeric output uses shortest
// round-trip formatting so reruns are byte-identical.

#include <cmath>
#include <cstdint>
#include <stdexcept>
#include <string>
#include <vector>

#include "json.hpp"

#include "edgeless/evaluation.hpp"
#include "edgeless/format.hpp"
#include "edgeless/inference.hpp"
#include "edgeless/model.hpp"
#include "edgeless/synthesis.hpp"

namespace edgeless {

using json = nlohmann::json;

inline constexpr const char* kVersion = "0.1.0";

// ---------------------------------------------------------------------------
// CSV

inline std::vector<std::vector<std::string>> read_csv_table(const std::string& path) {
  const std::string contents = read_file(path);
  std::vector<std::vector<std::string>> rows;
  std::vector<std::string> row;
  std::string cell;
  for (std::size_t i = 0; i <= contents.size(); ++i) {
    const char c = i < contents.size() ? contents[i] : '\n';
    if (c == ',') {
      row.push_back(cell);
      cell.clear();
    } else if (c == '\n') {
      if (!cell.empty() || !row.empty()) {
        row.push_back(cell);
        cell.clear();
        rows.push_back(std::move(row));
        row.clear();
      }
    } else if (c != '\r') {
      cell.push_back(c);
    }
  }
  return rows;
}

struct IngestOptions {
  bool log_returns = false;
  bool standardize = false;
  bool transpose = false;
};

inline Dataset transpose(const Dataset& data) {
  Dataset out;
  out.values = data.values.transpose();
  out.mask = data.mask.transpose();
  out.series_ids = data.timestamps;
  out.timestamps = data.series_ids;
  if (out.series_ids.empty()) {
    out.series_ids.resize(out.values.cols());
    for (int i = 0; i < out.values.cols(); ++i) out.series_ids[i] = "s" + std::to_string(i + 1);
  }
  return out;
}

// r_t = log v_t - log v_{t-1} per series; a missing price masks both
// adjacent returns. Reduces T by one.
inline Dataset log_returns(const Dataset& data) {
  const int t = data.time_steps();
  const int n = data.series_count();
  if (t < 2) throw std::invalid_argument("log returns require at least two time steps");
  Dataset out;
  out.values.resize(t - 1, n);
  out.mask.resize(t - 1, n);
  out.series_ids = data.series_ids;
  if (!data.timestamps.empty())
    out.timestamps.assign(data.timestamps.begin() + 1, data.timestamps.end());
  for (int i = 0; i < n; ++i) {
    for (int r = 0; r < t; ++r) {
      if (!data.mask(r, i)) continue;
      if (!(data.values(r, i) > 0.0))
        throw std::invalid_argument("non-positive price in series " +
                                    (i < static_cast<int>(data.series_ids.size())
                                         ? data.series_ids[i]
                                         : std::to_string(i + 1)) +
                                    "; log returns undefined");
    }
    for (int r = 0; r + 1 < t; ++r) {
      if (data.mask(r, i) && data.mask(r + 1, i)) {
        out.mask(r, i) = true;
        out.values(r, i) = std::log(data.values(r + 1, i)) - std::log(data.values(r, i));
      } else {
        out.mask(r, i) = false;
        out.values(r, i) = std::numeric_limits<double>::quiet_NaN();
      }
    }
  }
  return out;
}

// Per-series (value - mean) / std over observed cells, population std.
inline Dataset standardize(const Dataset& data) {
  Dataset out = data;
  for (int i = 0; i < data.series_count(); ++i) {
    double sum = 0.0;
    int count = 0;
    for (int r = 0; r < data.time_steps(); ++r)
      if (data.mask(r, i)) {
        sum += data.values(r, i);
        ++count;
      }
    if (count == 0) throw std::invalid_argument("series with no observed entries");
    const double mean = sum / count;
    double ss = 0.0;
    for (int r = 0; r < data.time_steps(); ++r)
      if (data.mask(r, i)) ss += (data.values(r, i) - mean) * (data.values(r, i) - mean);
    const double sd = std::sqrt(ss / count);
    if (!(sd > 0.0))
      throw std::invalid_argument("series " +
                                  (i < static_cast<int>(data.series_ids.size())
                                       ? data.series_ids[i]
                                       : std::to_string(i + 1)) +
                                  " has zero variance; cannot standardize");
    for (int r = 0; r < data.time_steps(); ++r)
      if (out.mask(r, i)) out.values(r, i) = (data.values(r, i) - mean) / sd;
  }
  return out;
}

inline Dataset parse_dataset(const std::vector<std::vector<std::string>>& rows,
                             const std::string& origin) {
  if (rows.size() < 2 || rows.front().size() < 2)
    throw std::invalid_argument(origin + ": need a header row plus at least one data row");
  const std::size_t width = rows.front().size();
  Dataset data;
  data.series_ids.assign(rows.front().begin() + 1, rows.front().end());
  const int t = static_cast<int>(rows.size()) - 1;
  const int n = static_cast<int>(width) - 1;
  data.values.resize(t, n);
  data.mask.resize(t, n);
  data.timestamps.resize(t);
  for (int r = 0; r < t; ++r) {
    const auto& row = rows[r + 1];
    if (row.size() != width)
      throw std::invalid_argument(origin + ": row " + std::to_string(r + 2) + " has " +
                                  std::to_string(row.size()) + " cells, expected " +
                                  std::to_string(width));
    data.timestamps[r] = row[0];
    for (int i = 0; i < n; ++i) {
      const std::string& cell = row[i + 1];
      if (cell.empty()) {
        data.mask(r, i) = false;
        data.values(r, i) = std::numeric_limits<double>::quiet_NaN();
        continue;
      }
      double value = 0.0;
      const auto res = std::from_chars(cell.data(), cell.data() + cell.size(), value);
      if (res.ec != std::errc{} || res.ptr != cell.data() + cell.size())
        throw std::invalid_argument(origin + ": non-numeric cell '" + cell + "' at row " +
                                    std::to_string(r + 2) + ", series " + data.series_ids[i]);
      data.mask(r, i) = true;
      data.values(r, i) = value;
    }
  }
  return data;
}

inline Dataset ingest(const std::string& path, const IngestOptions& options = {}) {
  Dataset data = parse_dataset(read_csv_table(path), path);
  if (options.transpose) data = transpose(data);
  if (options.log_returns) data = log_returns(data);
  if (options.standardize) data = standardize(data);
  return data;
}

inline std::string dataset_to_csv(const Dataset& data) {
  std::string out = "timestamp";
  for (const auto& id : data.series_ids) out += "," + id;
  out += "\n";
  for (int r = 0; r < data.time_steps(); ++r) {
    out += r < static_cast<int>(data.timestamps.size()) ? data.timestamps[r]
                                                        : "t" + std::to_string(r + 1);
    for (int i = 0; i < data.series_count(); ++i) {
      out += ",";
      if (data.mask(r, i)) out += format_double(data.values(r, i));
    }
    out += "\n";
  }
  return out;
}

inline void write_dataset_csv(const Dataset& data, const std::string& path) {
  write_file(path, dataset_to_csv(data));
}

// ---------------------------------------------------------------------------
// JSON helpers for Eigen types

inline json matrix_to_json(const MatrixXd& m) {
  json rows = json::array();
  for (int r = 0; r < m.rows(); ++r) {
    json row = json::array();
    for (int c = 0; c < m.cols(); ++c) row.push_back(m(r, c));
    rows.push_back(std::move(row));
  }
  return rows;
}

inline MatrixXd matrix_from_json(const json& j) {
  if (!j.is_array() || j.empty()) throw std::invalid_argument("expected a non-empty matrix");
  const int rows = static_cast<int>(j.size());
  const int cols = static_cast<int>(j.at(0).size());
  MatrixXd m(rows, cols);
  for (int r = 0; r < rows; ++r) {
    if (static_cast<int>(j.at(r).size()) != cols)
      throw std::invalid_argument("ragged matrix in JSON");
    for (int c = 0; c < cols; ++c) m(r, c) = j.at(r).at(c).get<double>();
  }
  return m;
}

inline json vector_to_json(const VectorXd& v) {
  json out = json::array();
  for (int i = 0; i < v.size(); ++i) out.push_back(v[i]);
  return out;
}

inline VectorXd vector_from_json(const json& j) {
  VectorXd v(static_cast<int>(j.size()));
  for (int i = 0; i < v.size(); ++i) v[i] = j.at(i).get<double>();
  return v;
}

// ---------------------------------------------------------------------------
// Config serialization; keys mirror the field names exactly.

inline json to_json(const Hyperparameters& h) {
  return json{{"p", h.p},
              {"k_max", h.k_max},
              {"prior_precision", h.prior_precision},
              {"ard_a", h.ard_a},
              {"ard_b", h.ard_b},
              {"noise_alpha", h.noise_alpha},
              {"noise_beta", h.noise_beta},
              {"dirichlet_gamma", h.dirichlet_gamma}};
}

inline Hyperparameters hyperparameters_from_json(const json& j) {
  Hyperparameters h;
  h.p = j.at("p").get<int>();
  h.k_max = j.at("k_max").get<int>();
  h.prior_precision = j.at("prior_precision").get<double>();
  h.ard_a = j.value("ard_a", h.ard_a);
  h.ard_b = j.value("ard_b", h.ard_b);
  h.noise_alpha = j.value("noise_alpha", h.noise_alpha);
  h.noise_beta = j.value("noise_beta", h.noise_beta);
  h.dirichlet_gamma = j.value("dirichlet_gamma", h.dirichlet_gamma);
  h.validate();
  return h;
}

inline json to_json(const FitConfig& c) {
  return json{{"max_sweeps", c.max_sweeps},   {"elbo_rel_tol", c.elbo_rel_tol},
              {"n_restarts", c.n_restarts},   {"kmeans_runs", c.kmeans_runs},
              {"seed", c.seed},               {"update_order", c.update_order},
              {"known_k_mode", c.known_k_mode}};
}

inline FitConfig fit_config_from_json(const json& j) {
  FitConfig c;
  c.max_sweeps = j.value("max_sweeps", c.max_sweeps);
  c.elbo_rel_tol = j.value("elbo_rel_tol", c.elbo_rel_tol);
  c.n_restarts = j.value("n_restarts", c.n_restarts);
  c.kmeans_runs = j.value("kmeans_runs", c.kmeans_runs);
  c.seed = j.value("seed", c.seed);
  if (j.contains("update_order")) c.update_order = j.at("update_order").get<std::vector<std::string>>();
  c.known_k_mode = j.value("known_k_mode", c.known_k_mode);
  c.validate();
  return c;
}

inline json to_json(const GeneratorConfig& g) {
  json j{{"n", g.n},
         {"T", g.T},
         {"p", g.p},
         {"K", g.K},
         {"community_layout", to_string(g.community_layout)},
         {"mean_variance", g.mean_variance},
         {"wishart_nu", g.wishart_nu},
         {"within_precision", g.within_precision},
         {"noise_gamma", json::array({g.noise_shape, g.noise_rate})},
         {"balanced_sizes", g.balanced_sizes},
         {"sierpinski_scale", g.sierpinski_scale},
         {"seed", g.seed}};
  if (g.size_distribution.size() > 0) j["size_distribution"] = vector_to_json(g.size_distribution);
  if (g.explicit_means.size() > 0) j["explicit_means"] = matrix_to_json(g.explicit_means);
  return j;
}

inline GeneratorConfig generator_config_from_json(const json& j) {
  GeneratorConfig g;
  g.n = j.at("n").get<int>();
  g.T = j.at("T").get<int>();
  g.p = j.value("p", g.p);
  g.K = j.value("K", g.K);
  g.community_layout = community_layout_from_string(j.value("community_layout", "gaussian_means"));
  g.mean_variance = j.value("mean_variance", g.mean_variance);
  g.wishart_nu = j.value("wishart_nu", g.wishart_nu);
  g.within_precision = j.value("within_precision", g.within_precision);
  if (j.contains("noise_gamma")) {
    g.noise_shape = j.at("noise_gamma").at(0).get<double>();
    g.noise_rate = j.at("noise_gamma").at(1).get<double>();
  }
  if (j.contains("size_distribution")) g.size_distribution = vector_from_json(j.at("size_distribution"));
  g.balanced_sizes = j.value("balanced_sizes", g.balanced_sizes);
  if (j.contains("explicit_means")) g.explicit_means = matrix_from_json(j.at("explicit_means"));
  g.sierpinski_scale = j.value("sierpinski_scale", g.sierpinski_scale);
  g.seed = j.value("seed", g.seed);
  g.validate();
  return g;
}

// ---------------------------------------------------------------------------
// Posterior serialization (bit-exact round trip)

inline json to_json(const PosteriorState& s) {
  json j;
  auto gaussians = [](const std::vector<MvNormalParams>& fs) {
    json mean = json::array(), prec = json::array();
    for (const auto& f : fs) {
      mean.push_back(vector_to_json(f.mean));
      prec.push_back(matrix_to_json(f.precision));
    }
    return json{{"mean", std::move(mean)}, {"precision", std::move(prec)}};
  };
  j["q_factors"] = gaussians(s.q_factors);
  j["q_loadings"] = gaussians(s.q_loadings);
  j["q_centers"] = gaussians(s.q_centers);
  json noise_shape = json::array(), noise_rate = json::array();
  for (const auto& g : s.q_noise) {
    noise_shape.push_back(g.shape);
    noise_rate.push_back(g.rate);
  }
  j["q_noise"] = json{{"shape", std::move(noise_shape)}, {"rate", std::move(noise_rate)}};
  json spread_shape = json::array(), spread_scale = json::array();
  for (const auto& w : s.q_spreads) {
    spread_shape.push_back(w.shape);
    spread_scale.push_back(matrix_to_json(w.scale));
  }
  j["q_spreads"] = json{{"shape", std::move(spread_shape)}, {"scale", std::move(spread_scale)}};
  j["responsibilities"] = matrix_to_json(s.responsibilities);
  j["q_sizes"] = json{{"concentration", vector_to_json(s.q_sizes.concentration)}};
  j["q_ard"] = json{{"shape", matrix_to_json(s.q_ard.shape)}, {"rate", matrix_to_json(s.q_ard.rate)}};
  return j;
}

inline PosteriorState posterior_state_from_json(const json& j) {
  PosteriorState s;
  auto gaussians = [](const json& g) {
    std::vector<MvNormalParams> fs;
    const auto& mean = g.at("mean");
    const auto& prec = g.at("precision");
    for (std::size_t i = 0; i < mean.size(); ++i)
      fs.push_back({vector_from_json(mean.at(i)), matrix_from_json(prec.at(i))});
    return fs;
  };
  s.q_factors = gaussians(j.at("q_factors"));
  s.q_loadings = gaussians(j.at("q_loadings"));
  s.q_centers = gaussians(j.at("q_centers"));
  const auto& noise = j.at("q_noise");
  for (std::size_t i = 0; i < noise.at("shape").size(); ++i)
    s.q_noise.push_back({noise.at("shape").at(i).get<double>(), noise.at("rate").at(i).get<double>()});
  const auto& spreads = j.at("q_spreads");
  for (std::size_t i = 0; i < spreads.at("shape").size(); ++i)
    s.q_spreads.push_back(
        {spreads.at("shape").at(i).get<double>(), matrix_from_json(spreads.at("scale").at(i))});
  s.responsibilities = matrix_from_json(j.at("responsibilities"));
  s.q_sizes.concentration = vector_from_json(j.at("q_sizes").at("concentration"));
  s.q_ard.shape = matrix_from_json(j.at("q_ard").at("shape"));
  s.q_ard.rate = matrix_from_json(j.at("q_ard").at("rate"));
  return s;
}

// ---------------------------------------------------------------------------
// Result files

inline std::string labels_to_csv(const std::vector<std::string>& series_ids,
                                 const std::vector<int>& labels) {
  std::string out = "series_id,label\n";
  for (std::size_t i = 0; i < labels.size(); ++i) {
    out += (i < series_ids.size() ? series_ids[i] : "s" + std::to_string(i + 1)) + "," +
           std::to_string(labels[i]) + "\n";
  }
  return out;
}

inline std::vector<std::pair<std::string, int>> labels_from_csv(const std::string& path) {
  const auto rows = read_csv_table(path);
  if (rows.empty() || rows.front().size() != 2)
    throw std::invalid_argument(path + ": expected a series_id,label table");
  std::vector<std::pair<std::string, int>> out;
  for (std::size_t r = 1; r < rows.size(); ++r)
    out.emplace_back(rows[r].at(0), std::stoi(rows[r].at(1)));
  return out;
}

inline std::string elbo_trace_to_csv(const std::vector<double>& trace) {
  std::string out = "sweep,elbo\n";
  for (std::size_t s = 0; s < trace.size(); ++s)
    out += std::to_string(s + 1) + "," + format_double(trace[s]) + "\n";
  return out;
}

inline json truth_to_json(const SyntheticInstance& inst, const GeneratorConfig& config) {
  json j;
  j["config"] = to_json(config);
  j["labels"] = inst.true_labels;
  j["K"] = inst.true_k;
  j["true_loadings"] = matrix_to_json(inst.true_loadings);
  j["true_centers"] = matrix_to_json(inst.true_centers);
  json precisions = json::array();
  for (const auto& m : inst.true_precisions) precisions.push_back(matrix_to_json(m));
  j["true_precisions"] = std::move(precisions);
  j["true_factors"] = matrix_to_json(inst.true_factors);
  j["true_noise_precision"] = vector_to_json(inst.true_noise_precision);
  return j;
}

inline json to_json(const EvaluationReport& r) {
  json folds = json::array();
  for (const auto& f : r.folds) {
    folds.push_back(json{{"fold", f.fold},
                         {"held_out_cells", f.held_out_cells},
                         {"rmse_loadings", f.rmse_loadings},
                         {"rmse_community_mean", f.rmse_community_mean},
                         {"rmse_global_mean", f.rmse_global_mean}});
  }
  return json{{"nmi", r.nmi},
              {"k_hat_error", r.k_hat_error},
              {"rmse_loadings_prediction", r.rmse_loadings_prediction},
              {"rmse_community_mean_prediction", r.rmse_community_mean_prediction},
              {"rmse_global_mean_prediction", r.rmse_global_mean_prediction},
              {"folds", std::move(folds)}};
}

// ---------------------------------------------------------------------------
// Run manifest

struct StageClock {
  std::vector<std::pair<std::string, double>> stages;

  void add(const std::string& name, double seconds) { stages.emplace_back(name, seconds); }
};

inline json manifest_json(const std::string& command, const json& config_snapshot,
                          const std::vector<std::pair<std::string, std::string>>& input_digests,
                          std::uint64_t seed, const StageClock& clock) {
  json inputs = json::object();
  for (const auto& [path, digest] : input_digests) inputs[path] = digest;
  json stages = json::object();
  for (const auto& [name, seconds] : clock.stages) stages[name] = seconds;
  return json{{"command", command},          {"version", kVersion},
              {"seed", seed},                {"config", config_snapshot},
              {"inputs", std::move(inputs)}, {"wall_clock_seconds", std::move(stages)}};
}

}  // namespace edgeless
