#pragma once

#include <filesystem>
#include <random>
#include <string>
#include <vector>

#include <json.hpp>

#include "nbscan/core.hpp"
#include "nbscan/triggers.hpp"
#include "nbscan/zoo.hpp"

namespace nbscan::attacks {

enum class AttackKind { patch, dynamic, inputaware_lite, composite, warp, blend, reflection, sig, filter };

std::string to_string(AttackKind kind);
AttackKind parse_attack_kind(std::string_view text);
std::vector<AttackKind> all_attack_kinds();

inline constexpr double kMaxPoisonRate = 0.10;
inline constexpr double kMaxBlendAlpha = 0.2;

/// Scalar knobs of an injected attack.  Grid assets (patterns, warp field,
/// reflection image) are regenerated from `asset_seed`, so the JSON form of a
/// recipe is a short human-readable block.
struct RecipeOptions {
    double area_fraction = 0.046;   // patch/dynamic/inputaware-lite trigger area
    double alpha = 0.2;             // blend
    double reflection_alpha = 0.15; // reflection
    double sig_amplitude = 20.0 / 255.0;
    double sig_frequency = 8.0;     // cycles across the image width
    double warp_max_displacement = 0.5;  // pixels
    int64_t warp_control_points = 4;
    double filter_strength = 0.6;   // blend between identity and a sepia matrix
    int64_t donor_class = -1;       // composite; -1 picks (target + 1) mod K
    int64_t anchor_grid = 3;        // dynamic: anchors per axis
};

struct PoisonRecipe {
    AttackKind kind = AttackKind::patch;
    int64_t target = 0;
    double poison_rate = 0.1;
    uint64_t asset_seed = 0;
    RecipeOptions options;

    // Derived assets, populated by make_recipe / from_json.
    std::vector<int64_t> image_shape;  // C, H, W
    torch::Tensor mask;          // H x W, patch: the stamped region
    torch::Tensor pattern;       // C x h x w (patch-like) or C x H x W (blend/reflection)
    int64_t patch_height = 0;
    int64_t patch_width = 0;
    torch::Tensor warp_field;    // H x W x 2 displacement in pixels (x, y)
    torch::Tensor filter_matrix; // 3 x 3
    torch::Tensor filter_offset; // 3
    torch::Tensor donor_pool;    // P x C x H x W, composite
    int64_t donor_class = -1;

    /// Throws ArgumentError when an asset exceeds the kind's magnitude limit.
    void validate() const;
    nlohmann::json to_json() const;
};

/// Builds a recipe with its assets for images of `image_shape` (C, H, W).
/// Composite recipes still need donor images: see attach_donors.
PoisonRecipe make_recipe(AttackKind kind, int64_t target, double poison_rate, uint64_t asset_seed,
                         std::vector<int64_t> image_shape, const RecipeOptions& options = {});
PoisonRecipe recipe_from_json(const nlohmann::json& j);

/// Composite only: fills the donor pool with images of the donor class.
void attach_donors(PoisonRecipe& recipe, const Dataset& data, int64_t pool_size = 64);

/// Stamps one clean image.  `rng` only drives the input-specific kinds
/// (dynamic placement, composite donor choice).
ImageSample stamp(const PoisonRecipe& recipe, const ImageSample& image, std::mt19937_64& rng);

/// Stamps every row of a batch; row i uses an rng seeded from (seed, i).
torch::Tensor stamp_batch(const PoisonRecipe& recipe, const torch::Tensor& images, uint64_t seed);

/// Same stamping as a TriggerFunction (fixed seed), for ASR and distance
/// measurements.  Patch, blend and reflection come back as constant
/// LocalizedTriggers; other kinds wrap stamp_batch.
std::unique_ptr<TriggerFunction> as_trigger(const PoisonRecipe& recipe, uint64_t seed = 0);

struct PoisonedData {
    Dataset data;
    std::vector<int64_t> poison_index;  // sorted positions that were stamped
};

/// Stamps round(rate * N) non-target samples chosen by `seed` and relabels
/// them to the target.
PoisonedData make_poisoned_dataset(const Dataset& data, const PoisonRecipe& recipe, uint64_t seed);

struct BackdoorTrainResult {
    std::optional<ClassifierHandle> model;
    double clean_accuracy = 0.0;
    double injected_asr = 0.0;
    bool ok = false;
    std::string diagnostics;
};

struct BackdoorTrainOptions {
    double asr_target = 0.95;
    double max_accuracy_drop = 0.03;
    /// Accuracy of a clean-trained twin; the drop check is skipped when unset.
    std::optional<double> reference_accuracy;
};

/// Poisons `data.train`, trains, and measures clean accuracy and injected ASR
/// on freshly stamped non-target test samples.
BackdoorTrainResult train_backdoored_model(const zoo::DatasetSplits& data, const PoisonRecipe& recipe,
                                           const std::string& architecture,
                                           const zoo::TrainConfig& config, uint64_t seed,
                                           const BackdoorTrainOptions& options = {});

/// Injected-attack sizes that serve as validity bounds for natural triggers.
struct ReferenceBounds {
    double l0_fraction = 0.06;      // Class I, fraction of spatial positions
    double composite_fraction = 0.5;
    double warp_l2 = 0.0;           // Class II, mean per-sample pixel L2 of the warp
    double warp_l2_max = 0.0;
    double linf = kMaxBlendAlpha;   // Class III
    double feature_l2 = 0.0;        // Class IV, mean encoder-space L2 of the filter
    double frequency_l1 = 0.0;      // mean frequency L1 of the filter

    nlohmann::json to_json() const;
    static ReferenceBounds from_json(const nlohmann::json& j);
};

/// Measures warp and filter recipes on `reference` (built with `seed`).
ReferenceBounds calibrate_reference_bounds(const Dataset& reference, const zoo::EncoderPair& encoder,
                                           uint64_t seed);

/// Exports clean / stamped / difference PNGs for the first `count` samples.
void export_examples(const PoisonRecipe& recipe, const Dataset& data, const std::filesystem::path& dir,
                     int64_t count = 4, uint64_t seed = 0);

}  // namespace nbscan::attacks
