#include "nbscan/core.hpp"

#include <ATen/CPUGeneratorImpl.h>

#include <cmath>
#include <sstream>

namespace nbscan {

std::string to_string(RegulationSpace space) {
    switch (space) {
    case RegulationSpace::pixel: return "pixel";
    case RegulationSpace::feature: return "feature";
    case RegulationSpace::frequency: return "frequency";
    }
    return "?";
}

std::string to_string(Metric metric) {
    switch (metric) {
    case Metric::l0: return "L0";
    case Metric::l1: return "L1";
    case Metric::l2: return "L2";
    case Metric::linf: return "Linf";
    }
    return "?";
}

std::string to_string(Projection projection) {
    switch (projection) {
    case Projection::identity: return "identity";
    case Projection::encoder: return "encoder";
    case Projection::dft: return "dft";
    }
    return "?";
}

RegulationSpace parse_space(std::string_view text) {
    if (text == "pixel") return RegulationSpace::pixel;
    if (text == "feature") return RegulationSpace::feature;
    if (text == "frequency") return RegulationSpace::frequency;
    throw ConfigurationError("unknown regulation space '" + std::string(text) + "'");
}

Metric parse_metric(std::string_view text) {
    if (text == "L0" || text == "l0") return Metric::l0;
    if (text == "L1" || text == "l1") return Metric::l1;
    if (text == "L2" || text == "l2") return Metric::l2;
    if (text == "Linf" || text == "linf") return Metric::linf;
    throw ConfigurationError("unknown metric '" + std::string(text) + "'");
}

Projection parse_projection(std::string_view text) {
    if (text == "identity") return Projection::identity;
    if (text == "encoder") return Projection::encoder;
    if (text == "dft") return Projection::dft;
    throw ConfigurationError("unknown projection '" + std::string(text) + "'");
}

void RegulationSpec::validate() const {
    if (space == RegulationSpace::feature &&
        (projection != Projection::encoder || encoder_id.empty()))
        throw ConfigurationError("feature regulation space requires a named encoder projection");
    if (space == RegulationSpace::frequency && projection != Projection::dft)
        throw ConfigurationError("frequency regulation space requires the dft projection");
    if (space == RegulationSpace::pixel && projection != Projection::identity)
        throw ConfigurationError("pixel regulation space uses the identity projection");
    if (!std::isfinite(bound) || bound < 0.0)
        throw ConfigurationError("regulation bound must be finite and non-negative");
    if (!(loss_scale > 0.0)) throw ConfigurationError("loss scale k must be positive");
    if (!(loss_power > 1.0)) throw ConfigurationError("loss power b must exceed 1");
}

// ---------------------------------------------------------------------------

ImageSample Dataset::sample(int64_t index) const {
    if (index < 0 || index >= size()) throw ArgumentError("sample index out of range");
    return {images[index], labels[index].item<int64_t>()};
}

Dataset Dataset::subset(const std::vector<int64_t>& indices) const {
    return subset(torch::tensor(indices, torch::kLong));
}

Dataset Dataset::subset(const torch::Tensor& indices) const {
    Dataset out;
    out.images = images.index_select(0, indices);
    out.labels = labels.index_select(0, indices);
    out.num_classes = num_classes;
    out.id = id;
    return out;
}

Dataset Dataset::of_class(int64_t label) const {
    return subset(torch::nonzero(labels == label).flatten());
}

Dataset Dataset::excluding_class(int64_t label) const {
    return subset(torch::nonzero(labels != label).flatten());
}

Dataset Dataset::concat(const Dataset& a, const Dataset& b) {
    if (a.empty()) return b;
    if (b.empty()) return a;
    Dataset out;
    out.images = torch::cat({a.images, b.images});
    out.labels = torch::cat({a.labels, b.labels});
    out.num_classes = std::max(a.num_classes, b.num_classes);
    out.id = a.id;
    return out;
}

void Dataset::validate() const {
    if (empty()) return;
    if (images.dim() != 4 || images.size(1) <= 0 || images.size(2) <= 0 || images.size(3) <= 0)
        throw ArgumentError("images must be a non-empty N x C x H x W grid");
    if (labels.dim() != 1 || labels.size(0) != images.size(0))
        throw ArgumentError("labels must have one entry per image");
    if (images.min().item<double>() < 0.0 || images.max().item<double>() > 1.0)
        throw ArgumentError("pixel values must lie in [0, 1]");
    if (labels.min().item<int64_t>() < 0 || labels.max().item<int64_t>() >= num_classes)
        throw ArgumentError("labels must lie in [0, num_classes)");
}

// ---------------------------------------------------------------------------

Classifier::Classifier(int64_t feature_channels, int64_t num_classes)
    : feature_channels_(feature_channels), num_classes_(num_classes) {
    channel_mask_ = register_buffer("channel_mask", torch::ones({feature_channels}));
    head_ = register_module("head", torch::nn::Linear(feature_channels, num_classes));
}

torch::Tensor Classifier::features(const torch::Tensor& x) {
    return body(x) * channel_mask_.to(x.dtype()).view({1, -1, 1, 1});
}

torch::Tensor Classifier::hidden(const torch::Tensor& x) {
    return features(x).mean({2, 3});
}

torch::Tensor Classifier::forward(const torch::Tensor& x) {
    return head_->forward(hidden(x));
}

torch::Tensor ClassifierHandle::logits(const torch::Tensor& batch) const {
    torch::NoGradGuard no_grad;
    constexpr int64_t kChunk = 256;
    const auto dtype = net->parameters().front().scalar_type();
    std::vector<torch::Tensor> parts;
    for (int64_t start = 0; start < batch.size(0); start += kChunk) {
        const auto stop = std::min(batch.size(0), start + kChunk);
        parts.push_back(net->forward(batch.slice(0, start, stop).to(dtype)));
    }
    if (parts.empty()) return torch::empty({0, num_classes()});
    return torch::cat(parts);
}

torch::Tensor ClassifierHandle::predict_labels(const torch::Tensor& batch) const {
    return logits(batch).argmax(1);
}

// ---------------------------------------------------------------------------

double metric_distance(const torch::Tensor& z0, const torch::Tensor& z1, Metric metric) {
    if (z0.sizes() != z1.sizes()) {
        std::ostringstream msg;
        msg << "metric_distance: shape mismatch " << z0.sizes() << " vs " << z1.sizes();
        throw ArgumentError(msg.str());
    }
    const auto diff = (z0.to(torch::kDouble) - z1.to(torch::kDouble)).abs().flatten();
    if (diff.numel() == 0) return 0.0;
    switch (metric) {
    case Metric::l0: return (diff > kL0Tolerance).sum().item<double>();
    case Metric::l1: return diff.sum().item<double>();
    case Metric::l2: return diff.pow(2).sum().sqrt().item<double>();
    case Metric::linf: return diff.max().item<double>();
    }
    return 0.0;
}

double evaluate_accuracy(const ClassifierHandle& model, const Dataset& data) {
    if (data.empty()) throw ArgumentError("evaluate_accuracy: empty dataset");
    const auto predicted = model.predict_labels(data.images);
    return (predicted == data.labels).sum().item<double>() / static_cast<double>(data.size());
}

Dataset eligible_samples(const Dataset& data, int64_t target, std::optional<int64_t> victim) {
    auto keep = data.labels != target;
    if (victim) keep = keep & (data.labels == *victim);
    return data.subset(torch::nonzero(keep).flatten());
}

double attack_success_rate(const ClassifierHandle& model, const Transform& trigger,
                           const Dataset& data, int64_t target, std::optional<int64_t> victim) {
    const auto eligible = eligible_samples(data, target, victim);
    if (eligible.empty()) throw ArgumentError("attack_success_rate: no eligible samples");
    torch::Tensor stamped;
    {
        torch::NoGradGuard no_grad;
        stamped = trigger(eligible.images);
    }
    const auto predicted = model.predict_labels(stamped);
    return (predicted == target).sum().item<double>() / static_cast<double>(eligible.size());
}

bool validate_verdict(const BackdoorVerdict& verdict, double reference_bound, double asr_floor) {
    return verdict.regulation_distance <= reference_bound && verdict.asr >= asr_floor;
}

at::Generator make_generator(uint64_t seed) {
    return at::make_generator<at::CPUGeneratorImpl>(seed);
}

}  // namespace nbscan
