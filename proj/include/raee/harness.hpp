#pragma once

// Evaluation drivers and the command implementations behind the `raee` CLI.
//
// Reports come in two forms: `records` writes one JSON object per line with
// full-precision numbers, `table` writes an aligned human-readable table with
// four decimals. Apart from wall_time_ms every field is a deterministic
// function of the inputs.

#include <algorithm>
#include <chrono>
#include <cmath>
#include <cstdint>
#include <iomanip>
#include <map>
#include <numeric>
#include <ostream>
#include <sstream>
#include <string>
#include <vector>

#include <json.hpp>

#include "raee/collector.hpp"
#include "raee/error.hpp"
#include "raee/exitdb.hpp"
#include "raee/knn_index.hpp"
#include "raee/policy.hpp"
#include "raee/sim_backbone.hpp"

namespace raee {

struct MetricsReport {
  std::string method;  // raee, entropy or full
  std::size_t n = 0;
  std::size_t num_layers = 0;
  double accuracy = 0.0;
  double avg_exit_layer = 0.0;
  double layers_saved_fraction = 0.0;
  double avg_layers_executed = 0.0;
  double fallback_fraction = 0.0;
  double correct_ratio = 0.0;
  std::vector<double> exit_histogram;  // index l-1 holds layer l
  double wall_time_ms = 0.0;
  std::map<std::string, std::string> config_echo;
};

struct AblationRow {
  std::string knob_name;  // k, tau or db_fraction
  double knob_value = 0.0;
  MetricsReport metrics;
};

// Throws an invariant error when the histogram does not sum to one or its
// expectation disagrees with avg_exit_layer.
inline void check_report(const MetricsReport& r) {
  if (r.exit_histogram.size() != r.num_layers) throw invariant_error("histogram length != m");
  const double total = std::accumulate(r.exit_histogram.begin(), r.exit_histogram.end(), 0.0);
  double expectation = 0.0;
  for (std::size_t l = 0; l < r.exit_histogram.size(); ++l) {
    expectation += static_cast<double>(l + 1) * r.exit_histogram[l];
  }
  if (std::abs(total - 1.0) > 1e-9) throw invariant_error("exit histogram does not sum to 1");
  if (std::abs(expectation - r.avg_exit_layer) > 1e-9) {
    throw invariant_error("exit histogram expectation != avg_exit_layer");
  }
  if (r.avg_exit_layer < 1.0 || r.avg_exit_layer > static_cast<double>(r.num_layers)) {
    throw invariant_error("avg_exit_layer outside [1, m]");
  }
}

namespace detail {

// Accumulates per-example outcomes in example order.
class ReportBuilder {
 public:
  ReportBuilder(std::string method, std::size_t num_layers)
      : method_(std::move(method)), counts_(num_layers, 0), start_(std::chrono::steady_clock::now()) {}

  void add(bool correct, std::size_t exit_layer, std::size_t layers_executed, bool fallback) {
    ++n_;
    if (correct) ++correct_;
    ++counts_[exit_layer - 1];
    layer_sum_ += exit_layer;
    executed_sum_ += layers_executed;
    if (fallback) ++fallbacks_;
  }

  MetricsReport finish(double correct_ratio, std::map<std::string, std::string> echo) const {
    MetricsReport r;
    r.method = method_;
    r.n = n_;
    r.num_layers = counts_.size();
    const double n = static_cast<double>(std::max<std::size_t>(n_, 1));
    r.accuracy = static_cast<double>(correct_) / n;
    r.avg_exit_layer = static_cast<double>(layer_sum_) / n;
    r.layers_saved_fraction = 1.0 - r.avg_exit_layer / static_cast<double>(r.num_layers);
    r.avg_layers_executed = static_cast<double>(executed_sum_) / n;
    r.fallback_fraction = static_cast<double>(fallbacks_) / n;
    r.correct_ratio = correct_ratio;
    r.exit_histogram.resize(counts_.size());
    for (std::size_t l = 0; l < counts_.size(); ++l) {
      r.exit_histogram[l] = static_cast<double>(counts_[l]) / n;
    }
    r.wall_time_ms = std::chrono::duration<double, std::milli>(std::chrono::steady_clock::now() - start_).count();
    r.config_echo = std::move(echo);
    return r;
  }

 private:
  std::string method_;
  std::vector<std::size_t> counts_;
  std::chrono::steady_clock::time_point start_;
  std::size_t n_ = 0;
  std::size_t correct_ = 0;
  std::size_t layer_sum_ = 0;
  std::size_t executed_sum_ = 0;
  std::size_t fallbacks_ = 0;
};

inline std::string format_double(double v) {
  std::ostringstream ss;
  ss.precision(17);
  ss << v;
  return ss.str();
}

}  // namespace detail

inline std::map<std::string, std::string> echo_config(const PolicyConfig& cfg) {
  return {
      {"k", std::to_string(cfg.k)},
      {"tau", detail::format_double(cfg.tau)},
      {"epsilon", detail::format_double(cfg.epsilon)},
      {"metric", std::string(metric_name(cfg.metric))},
      {"fallback_layer", cfg.fallback_layer ? std::to_string(*cfg.fallback_layer) : "final"},
  };
}

template <LayeredPredictor P>
MetricsReport evaluate_raee(const P& p, const ExitDatabase& db, const FlatIndex& index,
                            std::span<const LabeledExample> eval, const PolicyConfig& cfg,
                            const EmbeddingSource& source, double correct_ratio) {
  detail::ReportBuilder b("raee", p.num_layers());
  for (const LabeledExample& ex : eval) {
    const InferenceResult r = infer_with_exit(p, index, db, ex.view(), cfg, source);
    b.add(r.predicted_class == ex.label, r.decision.layer, r.layers_executed, r.decision.fallback_used);
  }
  auto echo = echo_config(cfg);
  echo["db_entries"] = std::to_string(db.size());
  echo["embedding_source"] = describe(source);
  MetricsReport report = b.finish(correct_ratio, std::move(echo));
  check_report(report);
  return report;
}

template <LayeredPredictor P>
MetricsReport evaluate_full(const P& p, std::span<const LabeledExample> eval, double correct_ratio) {
  detail::ReportBuilder b("full", p.num_layers());
  for (const LabeledExample& ex : eval) {
    b.add(full_model_predict(p, ex.view()) == ex.label, p.num_layers(), p.num_layers(), false);
  }
  MetricsReport report = b.finish(correct_ratio, {});
  check_report(report);
  return report;
}

template <LayeredPredictor P>
MetricsReport evaluate_entropy(const P& p, std::span<const LabeledExample> eval, double threshold,
                               double correct_ratio) {
  detail::ReportBuilder b("entropy", p.num_layers());
  for (const LabeledExample& ex : eval) {
    const BaselineResult r = entropy_exit_baseline(p, ex.view(), threshold);
    b.add(r.predicted_class == ex.label, r.exit_layer, r.exit_layer, false);
  }
  MetricsReport report = b.finish(correct_ratio, {{"entropy_threshold", detail::format_double(threshold)}});
  check_report(report);
  return report;
}

// Seeded uniform sample of round(fraction * n) entries (at least one),
// without replacement, kept in original entry order and renumbered.
inline ExitDatabase sample_database(const ExitDatabase& db, double fraction, std::uint64_t seed) {
  if (!(fraction > 0.0 && fraction <= 1.0)) {
    throw usage_error("db_fraction must be in (0, 1], got " + detail::format_double(fraction));
  }
  const std::size_t n = db.size();
  const auto keep = std::clamp<std::size_t>(
      static_cast<std::size_t>(std::llround(fraction * static_cast<double>(n))), 1, n);
  std::vector<std::size_t> ids(n);
  std::iota(ids.begin(), ids.end(), 0);
  // Partial Fisher-Yates driven by the counter hash, so the sample does not
  // depend on the standard library's shuffle implementation.
  for (std::size_t i = 0; i < keep; ++i) {
    const std::uint64_t r = detail::counter_hash({seed, 0x5a4d504cULL, i});
    const std::size_t j = i + static_cast<std::size_t>(r % (n - i));
    std::swap(ids[i], ids[j]);
  }
  ids.resize(keep);
  std::sort(ids.begin(), ids.end());

  ExitDatabase out(db.dim(), db.num_layers(), db.metadata());
  for (std::size_t id : ids) out.add_entry(db.key(id), db.profile(id).records);
  return out;
}

inline std::vector<double> parse_knob_values(const std::string& knob, std::string_view text) {
  if (knob != "k" && knob != "tau" && knob != "db_fraction") {
    throw usage_error("unknown ablation knob \"" + knob + "\" (expected k, tau or db_fraction)");
  }
  std::vector<double> values;
  try {
    values = detail::parse_list<double>(text, knob);
  } catch (const Error& e) {
    throw usage_error(std::string("--values: ") + e.what());
  }
  for (double v : values) {
    if (knob == "k" && (v < 1 || v != std::floor(v))) throw usage_error("k values must be integers >= 1");
    if (knob == "tau" && v < 0) throw usage_error("tau values must be >= 0");
    if (knob == "db_fraction" && !(v > 0 && v <= 1)) throw usage_error("db_fraction values must be in (0, 1]");
  }
  return values;
}

template <LayeredPredictor P>
std::vector<AblationRow> ablate(const P& p, const ExitDatabase& db, std::span<const LabeledExample> eval,
                                const PolicyConfig& base, const EmbeddingSource& source,
                                const std::string& knob, std::span<const double> values,
                                std::uint64_t seed) {
  if (values.empty()) throw usage_error("ablation needs at least one value");
  const double ratio = oracle_exit_metrics(p, eval).report.ratio;
  const FlatIndex full_index(db.keys(), base.metric);

  std::vector<AblationRow> rows;
  for (double v : values) {
    PolicyConfig cfg = base;
    AblationRow row{knob, v, {}};
    if (knob == "k") {
      if (v < 1 || v != std::floor(v)) throw usage_error("k values must be integers >= 1");
      cfg.k = static_cast<std::size_t>(v);
      row.metrics = evaluate_raee(p, db, full_index, eval, cfg, source, ratio);
    } else if (knob == "tau") {
      cfg.tau = v;
      row.metrics = evaluate_raee(p, db, full_index, eval, cfg, source, ratio);
    } else if (knob == "db_fraction") {
      const ExitDatabase sub = sample_database(db, v, seed);
      const FlatIndex index(sub.keys(), cfg.metric);
      row.metrics = evaluate_raee(p, sub, index, eval, cfg, source, ratio);
      row.metrics.config_echo["db_fraction"] = detail::format_double(v);
      row.metrics.config_echo["sample_seed"] = std::to_string(seed);
    } else {
      throw usage_error("unknown ablation knob \"" + knob + "\"");
    }
    rows.push_back(std::move(row));
  }
  return rows;
}

// ---------------------------------------------------------------------------
// Report output

enum class ReportFormat { kTable, kRecords };

inline ReportFormat parse_format(std::string_view s) {
  if (s == "table") return ReportFormat::kTable;
  if (s == "records") return ReportFormat::kRecords;
  throw usage_error("unknown format \"" + std::string(s) + "\" (expected table or records)");
}

inline nlohmann::ordered_json to_json(const MetricsReport& r) {
  nlohmann::ordered_json j;
  j["record"] = "metrics";
  j["method"] = r.method;
  j["n"] = r.n;
  j["num_layers"] = r.num_layers;
  j["accuracy"] = r.accuracy;
  j["avg_exit_layer"] = r.avg_exit_layer;
  j["layers_saved_fraction"] = r.layers_saved_fraction;
  j["avg_layers_executed"] = r.avg_layers_executed;
  j["fallback_fraction"] = r.fallback_fraction;
  j["correct_ratio"] = r.correct_ratio;
  j["exit_histogram"] = r.exit_histogram;
  j["config"] = r.config_echo;
  j["wall_time_ms"] = r.wall_time_ms;
  return j;
}

inline nlohmann::ordered_json to_json(const AblationRow& row) {
  nlohmann::ordered_json j = to_json(row.metrics);
  j["record"] = "ablation";
  j["knob"] = row.knob_name;
  j["value"] = row.knob_value;
  return j;
}

namespace detail {

inline std::string fixed4(double v) {
  std::ostringstream ss;
  ss << std::fixed << std::setprecision(4) << v;
  return ss.str();
}

inline void write_table(std::ostream& out, const std::vector<std::string>& header,
                        const std::vector<std::vector<std::string>>& rows) {
  std::vector<std::size_t> width(header.size());
  for (std::size_t c = 0; c < header.size(); ++c) {
    width[c] = header[c].size();
    for (const auto& row : rows) width[c] = std::max(width[c], row[c].size());
  }
  auto line = [&](const std::vector<std::string>& cells) {
    for (std::size_t c = 0; c < cells.size(); ++c) {
      out << (c ? " | " : "") << std::setw(static_cast<int>(width[c])) << cells[c];
    }
    out << "\n";
  };
  line(header);
  for (std::size_t c = 0; c < header.size(); ++c) {
    out << (c ? "-+-" : "") << std::string(width[c], '-');
  }
  out << "\n";
  for (const auto& row : rows) line(row);
}

}  // namespace detail

inline void write_reports(std::ostream& out, const std::vector<MetricsReport>& reports, ReportFormat fmt) {
  if (fmt == ReportFormat::kRecords) {
    for (const auto& r : reports) out << to_json(r).dump() << "\n";
    return;
  }
  std::vector<std::vector<std::string>> rows;
  for (const auto& r : reports) {
    rows.push_back({r.method, std::to_string(r.n), detail::fixed4(r.accuracy), detail::fixed4(r.avg_exit_layer),
                    detail::fixed4(r.layers_saved_fraction), detail::fixed4(r.correct_ratio),
                    detail::fixed4(r.wall_time_ms)});
  }
  detail::write_table(out, {"method", "n", "accuracy", "avg_exit_layer", "layers_saved", "correct_ratio", "wall_ms"},
                      rows);
  for (const auto& r : reports) {
    out << "\nexit histogram (" << r.method << ")\n";
    std::vector<std::vector<std::string>> hist;
    for (std::size_t l = 0; l < r.exit_histogram.size(); ++l) {
      hist.push_back({std::to_string(l + 1), detail::fixed4(r.exit_histogram[l])});
    }
    detail::write_table(out, {"layer", "proportion"}, hist);
  }
}

inline void write_ablation(std::ostream& out, const std::vector<AblationRow>& rows, ReportFormat fmt) {
  if (fmt == ReportFormat::kRecords) {
    for (const auto& r : rows) out << to_json(r).dump() << "\n";
    return;
  }
  std::vector<std::vector<std::string>> cells;
  for (const auto& r : rows) {
    std::ostringstream v;
    v << r.knob_value;
    cells.push_back({v.str(), detail::fixed4(r.metrics.accuracy), detail::fixed4(r.metrics.avg_exit_layer),
                     detail::fixed4(r.metrics.layers_saved_fraction), r.metrics.config_echo.at("db_entries")});
  }
  const std::string knob = rows.empty() ? "value" : rows.front().knob_name;
  detail::write_table(out, {knob, "accuracy", "avg_exit_layer", "layers_saved", "db_entries"}, cells);
}

inline void write_stats(std::ostream& out, const DatabaseStats& s) {
  out << "entries: " << s.n_entries << "\n"
      << "mean_profile_len: " << detail::fixed4(s.mean_profile_len) << "\n"
      << "empty_profile_fraction: " << detail::fixed4(s.empty_profile_fraction) << "\n"
      << "per_layer_counts:";
  for (std::size_t c : s.per_layer_counts) out << " " << c;
  out << "\n";
}

// ---------------------------------------------------------------------------
// Commands. Each returns the process exit code: 0 success, 1 usage error,
// 2 data/format error, 3 internal invariant violation.

template <class F>
int run_command(std::ostream& err, F&& body) {
  try {
    body();
    return 0;
  } catch (const Error& e) {
    err << "error: " << e.what() << "\n";
    return static_cast<int>(e.kind());
  } catch (const std::exception& e) {
    err << "internal error: " << e.what() << "\n";
    return static_cast<int>(ErrorKind::kInvariant);
  }
}

inline constexpr char kSpecMetadataKey[] = "model_spec";

struct BuildOptions {
  std::string spec_path;
  std::string dataset_path;
  std::string out_path;
  std::string embedding_source = "backbone:0";
};

inline void check_dataset_matches(const Dataset& ds, const SyntheticModelSpec& spec, const std::string& path) {
  if (ds.feature_dim != spec.feature_dim || ds.num_classes != spec.num_classes) {
    throw data_error(path + ": dataset (feature_dim " + std::to_string(ds.feature_dim) + ", classes " +
                     std::to_string(ds.num_classes) + ") does not match model spec (feature_dim " +
                     std::to_string(spec.feature_dim) + ", classes " + std::to_string(spec.num_classes) + ")");
  }
}

inline int cmd_build(const BuildOptions& opt, std::ostream& out, std::ostream& err) {
  return run_command(err, [&] {
    const SyntheticModelSpec spec = load_model_spec(opt.spec_path);
    const Dataset ds = load_dataset(opt.dataset_path);
    check_dataset_matches(ds, spec, opt.dataset_path);
    const EmbeddingSource source = parse_embedding_source(opt.embedding_source);
    const SyntheticPredictor predictor(spec);
    const ExitDatabase db = build_database(predictor, ds.examples, source,
                                           {{kSpecMetadataKey, format_model_spec(spec)},
                                            {"num_classes", std::to_string(spec.num_classes)}});
    save_database(db, opt.out_path);
    out << "wrote " << opt.out_path << "\n";
    write_stats(out, stats(db));
  });
}

struct EvalOptions {
  std::string db_path;
  std::string dataset_path;
  std::string spec_path;  // empty: use the spec stored in the database
  PolicyConfig cfg;
  std::string baseline = "none";  // none, entropy, full
  double entropy_threshold = 0.1;
  ReportFormat format = ReportFormat::kTable;
};

struct EvalContext {
  ExitDatabase db;
  Dataset eval;
  SyntheticPredictor predictor;
  EmbeddingSource source;
};

// Loads and cross-checks everything an evaluation needs before any inference.
inline EvalContext load_eval_context(const std::string& db_path, const std::string& dataset_path,
                                     const std::string& spec_path) {
  ExitDatabase db = load_database(db_path);
  SyntheticModelSpec spec;
  if (!spec_path.empty()) {
    spec = load_model_spec(spec_path);
  } else {
    const auto it = db.metadata().find(kSpecMetadataKey);
    if (it == db.metadata().end()) {
      throw usage_error(db_path + ": database carries no model spec; pass --spec");
    }
    spec = parse_model_spec(it->second, db_path + ":model_spec");
  }
  Dataset eval = load_dataset(dataset_path);
  check_dataset_matches(eval, spec, dataset_path);
  if (db.num_layers() != spec.m) {
    throw data_error(db_path + ": database has " + std::to_string(db.num_layers()) + " layers, model has " +
                     std::to_string(spec.m));
  }
  EmbeddingSource source = BackboneLayer{0};
  if (const auto it = db.metadata().find("embedding_source"); it != db.metadata().end()) {
    source = parse_embedding_source(it->second);
  }
  const std::size_t expected_dim =
      std::get<BackboneLayer>(source).layer == 0 ? spec.feature_dim : spec.num_classes;
  if (db.dim() != expected_dim) {
    throw data_error(db_path + ": key dim " + std::to_string(db.dim()) + " does not match embedding source " +
                     describe(source));
  }
  if (eval.examples.empty()) throw data_error(dataset_path + ": empty dataset");
  return {std::move(db), std::move(eval), SyntheticPredictor(std::move(spec)), std::move(source)};
}

inline std::vector<MetricsReport> run_eval(const EvalContext& ctx, const EvalOptions& opt) {
  opt.cfg.validate();
  opt.cfg.resolve_fallback(ctx.db.num_layers());
  const double ratio = oracle_exit_metrics(ctx.predictor, ctx.eval.examples).report.ratio;
  const FlatIndex index(ctx.db.keys(), opt.cfg.metric);
  std::vector<MetricsReport> reports;
  reports.push_back(evaluate_raee(ctx.predictor, ctx.db, index, ctx.eval.examples, opt.cfg, ctx.source, ratio));
  if (opt.baseline == "full") {
    reports.push_back(evaluate_full(ctx.predictor, ctx.eval.examples, ratio));
  } else if (opt.baseline == "entropy") {
    reports.push_back(evaluate_entropy(ctx.predictor, ctx.eval.examples, opt.entropy_threshold, ratio));
  } else if (opt.baseline != "none") {
    throw usage_error("unknown baseline \"" + opt.baseline + "\" (expected none, entropy or full)");
  }
  return reports;
}

inline int cmd_eval(const EvalOptions& opt, std::ostream& out, std::ostream& err) {
  return run_command(err, [&] {
    const EvalContext ctx = load_eval_context(opt.db_path, opt.dataset_path, opt.spec_path);
    write_reports(out, run_eval(ctx, opt), opt.format);
  });
}

struct AblateOptions {
  std::string db_path;
  std::string dataset_path;
  std::string spec_path;
  PolicyConfig cfg;
  std::string knob;
  std::string values;  // comma list
  std::uint64_t seed = 0;
  ReportFormat format = ReportFormat::kTable;
};

inline int cmd_ablate(const AblateOptions& opt, std::ostream& out, std::ostream& err) {
  return run_command(err, [&] {
    const std::vector<double> values = parse_knob_values(opt.knob, opt.values);
    opt.cfg.validate();
    const EvalContext ctx = load_eval_context(opt.db_path, opt.dataset_path, opt.spec_path);
    opt.cfg.resolve_fallback(ctx.db.num_layers());
    const auto rows = ablate(ctx.predictor, ctx.db, ctx.eval.examples, opt.cfg, ctx.source, opt.knob, values,
                             opt.seed);
    write_ablation(out, rows, opt.format);
  });
}

struct SimgenOptions {
  std::string spec_path;
  std::size_t n_train = 0;
  std::size_t n_eval = 0;
  std::uint64_t seed = 0;
  std::string out_prefix;
};

inline std::string train_path(const std::string& prefix) { return prefix + ".train.ds"; }
inline std::string eval_path(const std::string& prefix) { return prefix + ".eval.ds"; }

// Train examples take ids [0, n_train) under `seed`; eval examples take ids
// [n_train, n_train + n_eval) under a seed derived from it.
inline int cmd_simgen(const SimgenOptions& opt, std::ostream& out, std::ostream& err) {
  return run_command(err, [&] {
    if (opt.n_train < 1) throw usage_error("n_train must be >= 1");
    if (opt.n_eval < 1) throw usage_error("n_eval must be >= 1");
    const SyntheticModelSpec spec = load_model_spec(opt.spec_path);
    const std::uint64_t eval_seed = detail::counter_hash({opt.seed, 0x6576616cULL});
    const Dataset train = make_dataset_file(spec, make_clustered_dataset(spec, opt.n_train, opt.seed));
    const Dataset eval = make_dataset_file(
        spec, make_clustered_dataset(spec, opt.n_eval, eval_seed, static_cast<std::uint32_t>(opt.n_train)));
    save_dataset(train, train_path(opt.out_prefix));
    save_dataset(eval, eval_path(opt.out_prefix));
    out << "wrote " << train_path(opt.out_prefix) << " (" << opt.n_train << " examples)\n"
        << "wrote " << eval_path(opt.out_prefix) << " (" << opt.n_eval << " examples)\n";
  });
}

}  // namespace raee
