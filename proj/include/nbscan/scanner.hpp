#pragma once

#include <chrono>
#include <filesystem>
#include <memory>
#include <optional>
#include <string>
#include <vector>

#include <json.hpp>

#include "nbscan/attacks.hpp"
#include "nbscan/core.hpp"
#include "nbscan/losses.hpp"
#include "nbscan/triggers.hpp"

namespace nbscan::scanner {

enum class ScannerClass {
    genl0_patch,
    genl0_dynamic,
    genl0_inputaware,
    genl0_composite,
    genl2,
    genlinf,
    featurel2,
    freeb,
};

std::string to_string(ScannerClass cls);
ScannerClass parse_scanner_class(std::string_view text);
std::vector<ScannerClass> all_scanner_classes();
/// True for the classes whose trigger parameters are networks (generators or the latent conv).
bool uses_generator(ScannerClass cls);

enum class ScanMode { universal, label_specific };
std::string to_string(ScanMode mode);
ScanMode parse_scan_mode(std::string_view text);

/// Image shape, injected-reference bounds and sample-count defaults of one
/// dataset scale.
struct DatasetProfile {
    std::string name = "cifar";
    std::vector<int64_t> image_shape{3, 32, 32};
    attacks::ReferenceBounds bounds;
    std::string encoder_id;
    int64_t constant_samples = 100;
    int64_t generator_samples = 500;

    int64_t pixels() const { return image_shape[1] * image_shape[2]; }
    nlohmann::json to_json() const;
    static DatasetProfile from_json(const nlohmann::json& j);

    static DatasetProfile cifar(const attacks::ReferenceBounds& bounds, std::string encoder_id);
    static DatasetProfile imagenet(const attacks::ReferenceBounds& bounds, std::string encoder_id);
};

struct ScanConfig {
    ScannerClass scanner_class = ScannerClass::genl0_patch;
    ScanMode mode = ScanMode::universal;
    int64_t target = 0;
    std::optional<int64_t> victim;
    int64_t sample_count = 100;
    int64_t steps = 1000;
    double learning_rate = 0.1;
    uint64_t seed = 0;
    RegulationSpec spec;
    ObjectiveConfig objective;
    /// Perturbation-space encoder of the pervasive classes (GenL2, FeatureL2).
    std::string encoder_id;

    int64_t batch_size = 64;
    int64_t eval_every = 10;
    double eval_fraction = 0.2;
    int64_t generator_hidden = 16;
    int64_t generator_layers = 3;
    int64_t pretrain_steps = 200;    // input-aware mask diversity pre-training
    int64_t donor_candidates = 2;    // composite: donor/side pairs optimised after screening

    /// Throws ConfigurationError on inconsistent settings.
    void validate() const;
    nlohmann::json to_json() const;
    static ScanConfig from_json(const nlohmann::json& j);
};

/// Fully populated config for a scanner class on a dataset profile.
ScanConfig preset(ScannerClass cls, const DatasetProfile& profile, int64_t target = 0,
                  ScanMode mode = ScanMode::universal, std::optional<int64_t> victim = std::nullopt);

struct ScanReport {
    ScanConfig config;
    BackdoorVerdict verdict;
    std::optional<double> exact_l0;
    int64_t steps_run = 0;
    double wall_seconds = 0.0;
    std::string trigger_path;
    bool failed = false;
    std::string diagnostics;

    std::vector<double> loss_trace;
    std::vector<double> surrogate_trace;  // differentiable batch distance per step
    std::vector<double> exact_trace;      // reported batch distance per step
    struct Evaluation {
        int64_t step;
        double asr;
        double distance;
    };
    std::vector<Evaluation> evaluations;  // held-out checks, in step order
    int64_t best_step = -1;
    /// Highest held-out ASR among evaluations whose distance is within the
    /// bound (the step-0 trigger included), whatever its validity.
    double in_budget_asr = 0.0;

    std::shared_ptr<const TriggerFunction> trigger;

    /// The published report document (fixed field set).
    nlohmann::json to_json() const;
    /// Traces, config echo and status for debugging.
    nlohmann::json details_json() const;
};

struct SplitSamples {
    Dataset optimise;
    Dataset evaluate;
};

/// Eligible samples for the config's mode, truncated to `sample_count` and
/// split by `eval_fraction` with the config seed.  Deterministic.
SplitSamples evaluation_split(const Dataset& samples, const ScanConfig& config);

/// Runs the bounded optimisation on `samples`.  Universal mode optimises
/// over every non-target sample, label-specific mode over the victim class.
/// Composite scans draw donor images from all of `samples`, target class
/// included.  Never throws for a divergent loss: the report is marked failed.
ScanReport invert_trigger(const ClassifierHandle& model, const Dataset& samples, const ScanConfig& config);

/// Measures a stored trigger the way invert_trigger reports it.
double reported_asr(const ClassifierHandle& model, const TriggerFunction& trigger, const Dataset& samples,
                    const ScanConfig& config);

/// Writes the trigger archive and report JSON (`<stem>.nbt`, `<stem>.json`,
/// `<stem>.details.json`) and records the archive path in the report.
void save_scan(ScanReport& report, const std::filesystem::path& dir, const std::string& stem);
std::string report_stem(const ScanConfig& config);

struct LabelPlan {
    std::vector<int64_t> targets;                       // universal
    std::vector<std::pair<int64_t, int64_t>> pairs;     // label-specific (target, victim)

    nlohmann::json to_json() const;
    static LabelPlan from_json(const nlohmann::json& j);
};

/// Random targets (universal) or target/victim pairs drawn with `seed`.
LabelPlan draw_label_plan(ScanMode mode, int64_t num_classes, uint64_t seed, int64_t count);

/// Composite scans: extra donor images drawn per class.
inline constexpr int64_t kCompositeDonors = 16;

/// Draws the scan samples for one config from a pool: `sample_count`
/// images from all classes (universal) or from the victim class
/// (label-specific).  Composite scans also get kCompositeDonors per class.
Dataset draw_samples(const Dataset& pool, const ScanConfig& config);

struct CampaignOptions {
    DatasetProfile profile;
    Dataset pool;                          // where scan samples are drawn from
    std::filesystem::path out_dir;         // empty: triggers are not written
    int workers = 1;
    std::optional<int64_t> steps;          // overrides the preset step counts
    std::optional<int64_t> generator_steps;
    std::optional<int64_t> sample_count;
};

/// One scan per (class, target[, victim]).  Reports come back ordered by
/// class, then target, then victim, whatever the worker count.
std::vector<ScanReport> run_campaign(const ClassifierHandle& model, ScanMode mode, const LabelPlan& plan,
                                     const std::vector<ScannerClass>& classes, uint64_t seed,
                                     const CampaignOptions& options);

}  // namespace nbscan::scanner
