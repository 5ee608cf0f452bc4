#pragma once

#include <map>
#include <optional>
#include <string>
#include <vector>

#include <json.hpp>

#include "nbscan/core.hpp"
#include "nbscan/scanner.hpp"
#include "nbscan/zoo.hpp"

namespace nbscan::defenses {

// ---------------------------------------------------------------------------
// STRIP
// ---------------------------------------------------------------------------

struct StripOptions {
    int64_t overlays = 64;
    double blend = 0.5;  // weight of the input in each superposition
};

/// Mean softmax entropy of `input` (C x H x W) superimposed with
/// `options.overlays` images drawn from `clean_pool` by `seed`.
double strip_entropy(const ClassifierHandle& model, const torch::Tensor& input, const Dataset& clean_pool,
                     uint64_t seed, const StripOptions& options = {});

/// strip_entropy for every row of an N x C x H x W batch.  All rows share
/// the same overlay draw, so row i equals strip_entropy(batch[i]).
torch::Tensor strip_entropies(const ClassifierHandle& model, const torch::Tensor& batch, const Dataset& clean_pool,
                              uint64_t seed, const StripOptions& options = {});

inline constexpr int64_t kStripMinSamples = 100;

struct StripResult {
    double far = 0.0;
    double frr = 0.0;         // requested rate
    double threshold = 0.0;   // frr-quantile of the clean entropies
    torch::Tensor clean_entropy;
    torch::Tensor attack_entropy;
};

/// Fraction of attack inputs whose entropy exceeds the frr-quantile of the
/// clean entropies.  Both sets need kStripMinSamples rows.
StripResult strip_far(const ClassifierHandle& model, const torch::Tensor& clean_set, const torch::Tensor& attack_set,
                      const Dataset& overlay_pool, double frr = 0.01, uint64_t seed = 0,
                      const StripOptions& options = {});

// ---------------------------------------------------------------------------
// Activation clustering
// ---------------------------------------------------------------------------

struct KMeansResult {
    torch::Tensor assignment;  // N, int64
    torch::Tensor centroids;   // k x D
    double inertia = 0.0;
};

/// Lloyd iterations from k-means++ seeds; the restart with the lowest
/// inertia wins.  Points are N x D.
KMeansResult kmeans(const torch::Tensor& points, int64_t k, int64_t restarts, uint64_t seed,
                    int64_t max_iterations = 100);

/// Mean silhouette over all points (Euclidean).  Points in singleton
/// clusters score 0.  Returns 0 when fewer than two clusters are populated.
double silhouette(const torch::Tensor& points, const torch::Tensor& assignment);

struct ClusteringResult {
    std::map<int64_t, double> silhouette_by_label;
    std::vector<std::string> notices;  // skipped labels
};

inline constexpr int64_t kClusteringMinSamples = 4;

/// Two-means on last-hidden-layer activations of each label's samples.
ClusteringResult activation_clustering(const ClassifierHandle& model, const Dataset& per_label_samples,
                                       uint64_t seed, int64_t restarts = 10);

// ---------------------------------------------------------------------------
// Fine-pruning
// ---------------------------------------------------------------------------

struct FinePruneConfig {
    zoo::TrainConfig finetune{.batch_size = 64, .epochs = 2, .learning_rate = 5e-4};
    double max_accuracy_drop = 0.02;
};

struct FinePruneResult {
    std::optional<ClassifierHandle> model;
    double accuracy_before = 0.0;
    double accuracy_after = 0.0;
    double fraction = 0.0;              // fraction actually pruned
    std::vector<int64_t> pruned;        // channel indices, lowest activation first
    bool ok = false;
    std::string diagnostics;
};

/// Masks the lowest-activating channels of the last convolutional block
/// (ranked on `clean_set`), then fine-tunes on `clean_set`.  When the guard
/// on `evaluation` accuracy fails, the fraction is halved down to a single
/// channel before giving up.
FinePruneResult fine_prune(const ClassifierHandle& model, const Dataset& clean_set, const Dataset& evaluation,
                           double prune_fraction, const FinePruneConfig& config, uint64_t seed);

// ---------------------------------------------------------------------------
// Hardening
// ---------------------------------------------------------------------------

struct HardenConfig {
    scanner::ScannerClass preset = scanner::ScannerClass::genl0_patch;
    int64_t rounds = 2;
    std::vector<int64_t> targets;          // empty: every class
    std::optional<int64_t> scan_steps;     // overrides the preset step count
    std::optional<int64_t> sample_count;
    zoo::TrainConfig train{.batch_size = 64, .epochs = 6, .learning_rate = 1e-3};  // long enough for the cosine tail
    double max_accuracy_drop = 0.02;

    void validate() const;
    nlohmann::json to_json() const;
    static HardenConfig from_json(const nlohmann::json& j);
};

struct HardenResult {
    std::optional<ClassifierHandle> model;  // never violates the guard
    double accuracy_before = 0.0;
    double accuracy_after = 0.0;
    int64_t rounds_completed = 0;
    std::optional<int64_t> failed_round;
    bool ok = false;
    std::string diagnostics;
    std::vector<scanner::ScanReport> scans;
};

/// Each round inverts one trigger per target on the current model, then
/// fine-tunes on the clean training set plus an equal number of stamped,
/// correctly labelled copies.  A round that breaks the accuracy guard on
/// `data.test` ends hardening with the previous round's model.
HardenResult harden(const ClassifierHandle& model, const zoo::DatasetSplits& data,
                    const scanner::DatasetProfile& profile, const HardenConfig& config, uint64_t seed);

// ---------------------------------------------------------------------------
// Reports
// ---------------------------------------------------------------------------

struct DefenseReport {
    std::string defense;           // strip | activation-clustering | fine-prune | harden
    std::string model_provenance;
    std::string trigger_source;    // "injected" or a scanner class name
    std::optional<double> far;
    std::optional<double> frr;
    std::map<int64_t, double> silhouette_by_label;
    std::optional<double> asr_before;
    std::optional<double> asr_after;
    std::optional<double> acc_before;
    std::optional<double> acc_after;
    uint64_t seed = 0;
    nlohmann::json config;         // echo, kept out of the published document

    /// Throws ArgumentError when a rate lies outside [0, 1].
    void validate() const;
    /// The published document (fixed field set, nulls for unset metrics).
    nlohmann::json to_json() const;
    static DefenseReport from_json(const nlohmann::json& j);
};

}  // namespace nbscan::defenses
