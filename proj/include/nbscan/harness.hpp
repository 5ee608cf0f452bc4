#pragma once

#include <filesystem>
#include <map>
#include <optional>
#include <set>
#include <string>
#include <vector>

#include <json.hpp>

#include "nbscan/attacks.hpp"
#include "nbscan/defenses.hpp"
#include "nbscan/scanner.hpp"
#include "nbscan/zoo.hpp"

namespace nbscan::harness {

// ---------------------------------------------------------------------------
// Transferability
// ---------------------------------------------------------------------------

/// A stored trigger with the scan settings it was built under.  ASR on any
/// model is measured on draw_samples(pool, config), the split a scan uses.
struct TriggerRef {
    std::string name;
    std::shared_ptr<const TriggerFunction> trigger;
    scanner::ScanConfig config;
    std::vector<std::string> source_models;
};

struct NamedModel {
    std::string name;
    ClassifierHandle model;
};

struct TransferMatrix {
    std::vector<std::string> triggers;
    std::vector<std::string> models;
    std::vector<std::vector<double>> asr;      // triggers x models
    std::vector<std::vector<bool>> source;     // true where the model built the trigger
    /// Mean ASR over cells whose model is not a source of the trigger; NaN when none.
    double cross_model_mean = 0.0;
    double source_mean = 0.0;

    nlohmann::json to_json() const;
};

/// Throws ArgumentError when a model was trained on a different dataset or
/// image shape than `pool`.
TransferMatrix transfer_matrix(const std::vector<TriggerRef>& triggers, const std::vector<NamedModel>& models,
                               const Dataset& pool);

// ---------------------------------------------------------------------------
// Report aggregation
// ---------------------------------------------------------------------------

/// Field names of the published scan report, in document order.
const std::vector<std::string>& scan_report_fields();
/// Throws ArgumentError unless `j` has exactly the published fields with the right types.
void validate_scan_json(const nlohmann::json& j);

struct ReportRow {
    std::string model;
    nlohmann::json scan;  // published scan report
};

enum class ReportFormat { json, csv, plots };
ReportFormat parse_report_format(std::string_view text);

/// Every `*.json` scan report under `dir` (details files excluded), sorted
/// by path.  The model name is the report's parent directory.
std::vector<ReportRow> collect_reports(const std::filesystem::path& dir);

/// Aggregate over the rows: `aggregate.json` (schema header, rows without
/// wall time, one summary row per scanner class, per-model summary),
/// `reports.csv` + `summary.csv`, and SVG bar/box plots.  Returns the paths
/// written.  Identical inputs give identical bytes.
std::vector<std::filesystem::path> emit_report(const std::vector<ReportRow>& rows, const std::filesystem::path& dir,
                                               const std::set<ReportFormat>& formats);

nlohmann::json aggregate_json(const std::vector<ReportRow>& rows);

// plots.cpp
struct BarSeries {
    std::string label;
    double value;
};
/// Static SVG bar chart; values are drawn on a [0, 1] axis.
std::string bar_chart_svg(const std::string& title, const std::vector<BarSeries>& bars);
/// Static SVG box plot, one box per group (min, quartiles, max).
std::string box_plot_svg(const std::string& title, const std::vector<std::pair<std::string, std::vector<double>>>& groups);
/// Heat map of a trigger x model matrix.
std::string matrix_svg(const std::string& title, const TransferMatrix& matrix);

// ---------------------------------------------------------------------------
// Plans
// ---------------------------------------------------------------------------

enum class StageKind { train, poison, scan, harden, defend, transfer };
std::string to_string(StageKind kind);
StageKind parse_stage_kind(std::string_view text);

struct DatasetConfig {
    std::string id = "synthetic-shapes-10";
    std::filesystem::path directory;
    zoo::ShapesOptions shapes;

    nlohmann::json to_json() const;
    static DatasetConfig from_json(const nlohmann::json& j);
};

struct Stage {
    StageKind kind;
    nlohmann::json config;  // stage body as written in the plan
};

/// A declarative experiment.  The file form is JSON with // and /* */
/// comments allowed:
///
///   { "seed": 7, "out": "runs/demo", "workers": 1,
///     "dataset": {"id": "synthetic-shapes-10"},
///     "stages": [ {"stage": "train", "models": [{"id": "a", "architecture": "plain"}]},
///                 {"stage": "scan", "models": ["a"], "classes": ["GenL0-patch"], "targets": [0]} ] }
///
/// See README.md for every stage's keys.
struct ExperimentPlan {
    uint64_t seed = 0;
    std::filesystem::path out;
    int workers = 1;
    DatasetConfig dataset;
    std::vector<Stage> stages;

    /// Throws ConfigurationError on unknown stages or keys, bad values, or a
    /// model reference that neither an earlier stage nor `out/models` provides.
    void validate() const;
    nlohmann::json to_json() const;
    static ExperimentPlan from_json(const nlohmann::json& j);
    /// Reads a plan file; comments are stripped.  Throws ConfigurationError on parse errors.
    static ExperimentPlan load(const std::filesystem::path& path);
};

struct StageOutcome {
    std::string stage;
    std::string key;       // content hash the checkpoint records
    bool skipped = false;  // already complete
    bool ok = true;
    std::string diagnostics;
    std::vector<std::filesystem::path> artifacts;
};

struct PlanResult {
    int status = 0;  // 0 success, 3 stage failure
    std::vector<StageOutcome> stages;
    std::optional<size_t> failed_stage;
};

inline constexpr int kExitOk = 0;
inline constexpr int kExitValidation = 2;
inline constexpr int kExitStageFailure = 3;

/// Runs the stages in order under `plan.out`.  Each completed stage is
/// recorded in `checkpoint.json` under a key over its config, the plan seed
/// and the bytes of the models it reads, so reruns skip finished work and a
/// failed stage leaves earlier artifacts in place.  Validation errors throw.
PlanResult run_plan(const ExperimentPlan& plan);

/// Layout of a run directory.
struct RunLayout {
    std::filesystem::path root;
    std::filesystem::path models() const { return root / "models"; }
    std::filesystem::path model(const std::string& id) const { return models() / id; }
    std::filesystem::path encoder() const { return models() / "encoder"; }
    std::filesystem::path bounds() const { return root / "bounds.json"; }
    std::filesystem::path scans() const { return root / "scans"; }
    std::filesystem::path defenses() const { return root / "defenses"; }
    std::filesystem::path transfer() const { return root / "transfer"; }
    std::filesystem::path reports() const { return root / "reports"; }
    std::filesystem::path checkpoint() const { return root / "checkpoint.json"; }
};

/// Reads JSON allowing comments; throws ConfigurationError with the path on failure.
nlohmann::json read_json_file(const std::filesystem::path& path);
/// Writes `j` with a two-space indent and a trailing newline.
void write_json_file(const std::filesystem::path& path, const nlohmann::json& j);

}  // namespace nbscan::harness
