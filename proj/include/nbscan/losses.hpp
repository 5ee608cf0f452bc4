#pragma once

#include <optional>

#include "nbscan/core.hpp"
#include "nbscan/triggers.hpp"

namespace nbscan {

/// Steepness of the L0 surrogate sigmoid(t * (m - 0.5)).
inline constexpr double kL0Temperature = 50.0;

/// Weighting of the regulation term.  The bound-loss scale k and power b
/// live on the RegulationSpec.
struct ObjectiveConfig {
    double lambda = 1e-3;
    double asr_floor = kDefaultAsrFloor;

    void validate() const;
};

/// k * (distance / bound)^b.  Throws ConfigurationError for a zero bound.
torch::Tensor bound_loss(const torch::Tensor& distance, const RegulationSpec& spec);
double bound_loss(double distance, const RegulationSpec& spec);

struct RegulationDistance {
    /// Batch mean, differentiable.  For L0 this is the steep-sigmoid surrogate.
    torch::Tensor value;
    /// Batch mean as reported: the exact nonzero count for L0, otherwise the
    /// same number as `value`.
    double exact = 0.0;
    torch::Tensor per_sample;  // N, differentiable
};

/// Batch-mean distance between each trigger output and its reference in the
/// spec's regulation space.  Values are averaged per sample in sorted order,
/// so the result does not depend on batch order.
///
/// pixel L0 / Linf    mask count / mask maximum (localized triggers only)
/// pixel L1 / L2      norm of the pre-clamp change
/// feature L1 / L2    norm of the change in encoder space
/// frequency L1       mean |DFT change| / sqrt(H*W) over all coefficients
///
/// `encoder` overrides the registry lookup of `spec.encoder_id`.
RegulationDistance regulation_distance(const TriggerFunction& trigger, const torch::Tensor& batch,
                                       const RegulationSpec& spec,
                                       const zoo::EncoderPair* encoder = nullptr);

/// Mean cross-entropy of the triggered batch against `target`.
torch::Tensor exploitation_loss(const ClassifierHandle& model, const TriggerFunction& trigger,
                                const torch::Tensor& batch, int64_t target);

struct ObjectiveTerms {
    torch::Tensor total;
    torch::Tensor exploitation;
    torch::Tensor regulation;  // bound loss, before lambda
    RegulationDistance distance;
};

ObjectiveTerms total_objective(const ClassifierHandle& model, const TriggerFunction& trigger,
                               const torch::Tensor& batch, int64_t target,
                               const RegulationSpec& spec, const ObjectiveConfig& config,
                               const zoo::EncoderPair* encoder = nullptr);

/// Adaptive regulation weight: multiply by `factor` after `patience`
/// consecutive steps at or above the ASR floor, divide after `patience`
/// consecutive steps below it, clamp to [min, max].
class LambdaController {
public:
    explicit LambdaController(double initial = 1e-3, double asr_floor = kDefaultAsrFloor,
                              double factor = 1.5, int patience = 5, double min = 1e-5,
                              double max = 1e2);

    double update(double batch_asr);
    double value() const { return lambda_; }

private:
    double lambda_;
    double asr_floor_;
    double factor_;
    int patience_;
    double min_;
    double max_;
    int above_ = 0;
    int below_ = 0;
};

}  // namespace nbscan
