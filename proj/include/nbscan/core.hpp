#pragma once

#include <cstdint>
#include <functional>
#include <optional>
#include <string>
#include <string_view>
#include <vector>

#include <torch/torch.h>

#include "nbscan/errors.hpp"

namespace nbscan {

// ---------------------------------------------------------------------------
// Regulation spaces and metrics
// ---------------------------------------------------------------------------

enum class RegulationSpace { pixel, feature, frequency };
enum class Metric { l0, l1, l2, linf };
enum class Projection { identity, encoder, dft };

std::string to_string(RegulationSpace space);
std::string to_string(Metric metric);
std::string to_string(Projection projection);
RegulationSpace parse_space(std::string_view text);
Metric parse_metric(std::string_view text);
Projection parse_projection(std::string_view text);

/// Where a trigger's change is measured and how large it may be.
///
/// `bound` is expressed in the metric's own units: a pixel count for L0, a
/// per-sample norm for L1/L2, a value fraction for Linf.  The bound loss is
/// `loss_scale * (distance / bound) ^ loss_power`.
struct RegulationSpec {
    RegulationSpace space = RegulationSpace::pixel;
    Metric metric = Metric::l0;
    double bound = 0.0;
    Projection projection = Projection::identity;
    std::string encoder_id;  // only for Projection::encoder
    double loss_scale = 1.0;
    double loss_power = 2.0;

    /// Throws ConfigurationError when the space/projection pairing or the
    /// loss parameters are inconsistent.  A zero bound is allowed here; the
    /// bound loss rejects it separately.
    void validate() const;
};

// ---------------------------------------------------------------------------
// Data
// ---------------------------------------------------------------------------

/// One image with its label.  Pixels are C x H x W floats in [0, 1].
struct ImageSample {
    torch::Tensor pixels;
    int64_t label = 0;
};

/// A batch of labelled images: `images` is N x C x H x W, `labels` is N (int64).
struct Dataset {
    torch::Tensor images;
    torch::Tensor labels;
    int64_t num_classes = 0;
    std::string id;

    int64_t size() const { return images.defined() ? images.size(0) : 0; }
    bool empty() const { return size() == 0; }
    int64_t channels() const { return images.size(1); }
    int64_t height() const { return images.size(2); }
    int64_t width() const { return images.size(3); }

    ImageSample sample(int64_t index) const;
    Dataset subset(const std::vector<int64_t>& indices) const;
    Dataset subset(const torch::Tensor& indices) const;
    /// Samples whose label equals `label`.
    Dataset of_class(int64_t label) const;
    /// Samples whose label differs from `label`.
    Dataset excluding_class(int64_t label) const;
    static Dataset concat(const Dataset& a, const Dataset& b);

    /// Checks the ImageSample invariants for every row.
    void validate() const;
};

// ---------------------------------------------------------------------------
// Classifiers
// ---------------------------------------------------------------------------

/// Common shape for every zoo architecture: a convolutional body ending in a
/// block whose channels can be masked out, global average pooling, and a
/// linear head.  The pooled vector is the last hidden layer.
class Classifier : public torch::nn::Module {
public:
    Classifier(int64_t feature_channels, int64_t num_classes);

    /// Output of the last convolutional block, with the channel mask applied.
    torch::Tensor features(const torch::Tensor& x);
    /// Pooled last-hidden-layer activations, N x feature_channels.
    torch::Tensor hidden(const torch::Tensor& x);
    torch::Tensor forward(const torch::Tensor& x);

    int64_t num_classes() const { return num_classes_; }
    int64_t feature_channels() const { return feature_channels_; }
    /// 1 keeps a channel of the last block, 0 prunes it.
    torch::Tensor& channel_mask() { return channel_mask_; }
    const torch::Tensor& channel_mask() const { return channel_mask_; }

    virtual std::string architecture() const = 0;

protected:
    virtual torch::Tensor body(const torch::Tensor& x) = 0;

private:
    int64_t feature_channels_;
    int64_t num_classes_;
    torch::Tensor channel_mask_;
    torch::nn::Linear head_{nullptr};
};

/// Provenance and bookkeeping carried with every model.
struct ModelMeta {
    std::string architecture;
    std::string dataset;
    double accuracy = 0.0;
    uint64_t seed = 0;
    /// "clean", "poisoned:<kind>", "hardened:<preset>", "pruned:<fraction>", or
    /// compositions joined with '+'.
    std::string provenance = "clean";
    std::string training_config;  // JSON echo
};

/// A classifier plus its metadata.  Prediction never mutates the network;
/// the network is kept in evaluation mode outside training routines.
struct ClassifierHandle {
    std::shared_ptr<Classifier> net;
    ModelMeta meta;

    int64_t num_classes() const { return net->num_classes(); }
    /// Logits for an N x C x H x W batch, computed in chunks without autograd.
    torch::Tensor logits(const torch::Tensor& batch) const;
    torch::Tensor predict_labels(const torch::Tensor& batch) const;
};

// ---------------------------------------------------------------------------
// Operational backdoor definitions
// ---------------------------------------------------------------------------

inline constexpr double kL0Tolerance = 1e-12;
inline constexpr double kDefaultAccuracyFloor = 0.80;
inline constexpr double kDefaultAsrFloor = 0.80;

/// Batch transformation applied to N x C x H x W inputs.
using Transform = std::function<torch::Tensor(const torch::Tensor&)>;

/// Distance between two equally shaped grids under `metric`.
double metric_distance(const torch::Tensor& z0, const torch::Tensor& z1, Metric metric);

/// Fraction of samples whose argmax logit equals the label.
double evaluate_accuracy(const ClassifierHandle& model, const Dataset& data);

inline bool functionality_ok(double accuracy, double floor = kDefaultAccuracyFloor) {
    return accuracy >= floor;
}

/// Samples eligible for an ASR measurement: the victim class minus samples
/// already labelled `target`, or every non-target sample in universal mode.
Dataset eligible_samples(const Dataset& data, int64_t target, std::optional<int64_t> victim);

/// Fraction of eligible samples mapped to `target` after applying `trigger`.
double attack_success_rate(const ClassifierHandle& model, const Transform& trigger,
                           const Dataset& data, int64_t target,
                           std::optional<int64_t> victim = std::nullopt);

struct BackdoorVerdict {
    double asr = 0.0;
    double regulation_distance = 0.0;
    double bound = 0.0;
    bool valid = false;
    int64_t target = 0;
    std::optional<int64_t> victim;
    std::string trigger_ref;
};

/// True iff distance <= reference_bound and asr >= asr_floor (both inclusive).
bool validate_verdict(const BackdoorVerdict& verdict, double reference_bound,
                      double asr_floor = kDefaultAsrFloor);

/// CPU generator seeded deterministically; pass to torch random factories.
at::Generator make_generator(uint64_t seed);

}  // namespace nbscan
