#include "nbscan/losses.hpp"

#include <cmath>

namespace nbscan {

void ObjectiveConfig::validate() const {
    if (!(lambda >= 0.0) || !std::isfinite(lambda)) throw ConfigurationError("lambda must be >= 0");
    if (asr_floor < 0.0 || asr_floor > 1.0) throw ConfigurationError("asr_floor must lie in [0, 1]");
}

torch::Tensor bound_loss(const torch::Tensor& distance, const RegulationSpec& spec) {
    if (spec.bound == 0.0) throw ConfigurationError("bound loss needs a nonzero bound");
    return spec.loss_scale * (distance / spec.bound).pow(spec.loss_power);
}

double bound_loss(double distance, const RegulationSpec& spec) {
    if (spec.bound == 0.0) throw ConfigurationError("bound loss needs a nonzero bound");
    return spec.loss_scale * std::pow(distance / spec.bound, spec.loss_power);
}

namespace {

// sqrt with a zero (not NaN) gradient at the origin.
torch::Tensor safe_sqrt(const torch::Tensor& squared) {
    return squared.clamp_min(1e-30).sqrt() * (squared > 0).to(squared.dtype());
}

torch::Tensor norm_per_sample(const torch::Tensor& diff, Metric metric) {
    const auto flat = diff.flatten(1);
    switch (metric) {
    case Metric::l1: return flat.abs().sum(1);
    case Metric::l2: return safe_sqrt(flat.pow(2).sum(1));
    case Metric::linf: return flat.abs().amax(1);
    case Metric::l0: return (flat.abs() > kL0Tolerance).to(flat.dtype()).sum(1);
    }
    return {};
}

torch::Tensor sorted_mean(const torch::Tensor& per_sample) {
    return std::get<0>(torch::sort(per_sample)).sum() / static_cast<double>(per_sample.size(0));
}

double sorted_mean_exact(const torch::Tensor& per_sample) {
    const auto sorted = std::get<0>(torch::sort(per_sample.detach().to(torch::kDouble))).contiguous();
    const auto* data = sorted.data_ptr<double>();
    double total = 0.0;
    for (int64_t i = 0; i < sorted.numel(); ++i) total += data[i];
    return total / static_cast<double>(sorted.numel());
}

[[noreturn]] void unsupported(const TriggerFunction& trigger, const RegulationSpec& spec) {
    throw UnsupportedCombination(to_string(spec.space) + " " + to_string(spec.metric) +
                                 " regulation is not defined for " + to_string(trigger.kind()) +
                                 " triggers");
}

zoo::EncoderPair resolve_encoder(const RegulationSpec& spec, const zoo::EncoderPair* encoder) {
    if (encoder) return *encoder;
    if (spec.encoder_id.empty())
        throw ConfigurationError("feature-space regulation needs an encoder");
    return zoo::find_encoder(spec.encoder_id);
}

}  // namespace

RegulationDistance regulation_distance(const TriggerFunction& trigger, const torch::Tensor& batch,
                                       const RegulationSpec& spec, const zoo::EncoderPair* encoder) {
    if (batch.size(0) == 0) throw ArgumentError("regulation_distance: empty batch");
    RegulationDistance out;
    torch::Tensor exact_per_sample;

    switch (spec.space) {
    case RegulationSpace::pixel: {
        if (spec.metric == Metric::l0 || spec.metric == Metric::linf) {
            const auto* localized = dynamic_cast<const LocalizedTrigger*>(&trigger);
            if (!localized) unsupported(trigger, spec);
            const auto emitted = localized->mask_pattern(batch);
            const auto mask = emitted.mask.flatten(1);
            if (spec.metric == Metric::l0) {
                // Binary masks: the surrogate sees the soft values so it keeps a gradient.
                out.per_sample = torch::sigmoid(kL0Temperature * (emitted.soft.flatten(1) - 0.5)).sum(1);
                exact_per_sample = (mask.detach().abs() > kL0Tolerance).to(mask.dtype()).sum(1);
            } else {
                out.per_sample = mask.amax(1);
            }
        } else {
            const auto diff = trigger.apply_unclamped(batch) - trigger.reference(batch);
            out.per_sample = norm_per_sample(diff, spec.metric);
        }
        break;
    }
    case RegulationSpace::feature: {
        if (spec.metric != Metric::l2 && spec.metric != Metric::l1) unsupported(trigger, spec);
        const auto pair = resolve_encoder(spec, encoder);
        const auto triggered = pair.net->encode(trigger.apply(batch));
        torch::Tensor reference;
        {
            torch::NoGradGuard no_grad;
            reference = pair.net->encode(trigger.reference(batch));
        }
        out.per_sample = norm_per_sample(triggered - reference, spec.metric);
        break;
    }
    case RegulationSpace::frequency: {
        if (spec.metric != Metric::l1) unsupported(trigger, spec);
        torch::Tensor change;
        if (const auto* freq = dynamic_cast<const FrequencyTrigger*>(&trigger))
            change = freq->spectral_change(batch);
        else
            change = torch::fft::fft2(trigger.apply_unclamped(batch) - trigger.reference(batch));
        const double scale = std::sqrt(static_cast<double>(batch.size(2) * batch.size(3)));
        out.per_sample = change.abs().flatten(1).mean(1) / scale;
        break;
    }
    }

    out.value = sorted_mean(out.per_sample);
    out.exact = sorted_mean_exact(exact_per_sample.defined() ? exact_per_sample : out.per_sample);
    return out;
}

torch::Tensor exploitation_loss(const ClassifierHandle& model, const TriggerFunction& trigger,
                                const torch::Tensor& batch, int64_t target) {
    if (batch.size(0) == 0) throw ArgumentError("exploitation_loss: empty batch");
    const auto logits = model.net->forward(trigger.apply(batch));
    const auto targets = torch::full({batch.size(0)}, target, torch::kLong);
    return torch::nn::functional::cross_entropy(logits, targets);
}

ObjectiveTerms total_objective(const ClassifierHandle& model, const TriggerFunction& trigger,
                               const torch::Tensor& batch, int64_t target,
                               const RegulationSpec& spec, const ObjectiveConfig& config,
                               const zoo::EncoderPair* encoder) {
    ObjectiveTerms terms;
    terms.exploitation = exploitation_loss(model, trigger, batch, target);
    terms.distance = regulation_distance(trigger, batch, spec, encoder);
    terms.regulation = bound_loss(terms.distance.value, spec);
    terms.total = terms.exploitation + config.lambda * terms.regulation;
    return terms;
}

LambdaController::LambdaController(double initial, double asr_floor, double factor, int patience,
                                   double min, double max)
    : lambda_(initial), asr_floor_(asr_floor), factor_(factor), patience_(patience), min_(min),
      max_(max) {}

double LambdaController::update(double batch_asr) {
    if (batch_asr >= asr_floor_) {
        below_ = 0;
        if (++above_ >= patience_) {
            lambda_ = std::min(max_, lambda_ * factor_);
            above_ = 0;
        }
    } else {
        above_ = 0;
        if (++below_ >= patience_) {
            lambda_ = std::max(min_, lambda_ / factor_);
            below_ = 0;
        }
    }
    return lambda_;
}

}  // namespace nbscan
