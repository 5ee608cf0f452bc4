#include "nbscan/triggers.hpp"

#include <sstream>

namespace nbscan {

std::string to_string(TriggerKind kind) {
    switch (kind) {
    case TriggerKind::localized: return "localized";
    case TriggerKind::pervasive: return "pervasive";
    case TriggerKind::frequency: return "frequency";
    }
    return "?";
}

ImageSample TriggerFunction::apply(const ImageSample& sample) const {
    return {apply(sample.pixels.unsqueeze(0)).squeeze(0), sample.label};
}

Transform TriggerFunction::as_transform() const {
    return [this](const torch::Tensor& x) { return apply(x); };
}

namespace {

torch::Tensor trainable(const torch::Tensor& t) {
    return t.detach().clone().requires_grad_(true);
}

void copy_parameters(torch::nn::Module& from, torch::nn::Module& to) {
    torch::NoGradGuard no_grad;
    auto src = from.named_parameters();
    auto dst = to.named_parameters();
    for (auto& item : dst) item.value().copy_(src[item.key()]);
}

std::string shape_string(const torch::Tensor& t) {
    std::ostringstream out;
    out << t.sizes();
    return out.str();
}

}  // namespace

// ---------------------------------------------------------------------------
// Generators
// ---------------------------------------------------------------------------

ConvGenerator::ConvGenerator(int64_t in_channels, int64_t out_channels, int64_t hidden, int64_t layers,
                             bool coords)
    : in_channels_(in_channels), out_channels_(out_channels), hidden_(hidden), layers_(layers), coords_(coords) {
    if (layers < 1 || layers > 4) throw ConfigurationError("generators use 1 to 4 layers");
    convs_ = register_module("convs", torch::nn::ModuleList());
    for (int64_t i = 0; i < layers; ++i) {
        const auto in = i == 0 ? in_channels + (coords ? 2 : 0) : hidden;
        const auto out = i + 1 == layers ? out_channels : hidden;
        convs_->push_back(torch::nn::Conv2d(torch::nn::Conv2dOptions(in, out, 3).padding(1)));
    }
}

torch::Tensor ConvGenerator::forward(const torch::Tensor& x) {
    auto h = x;
    if (coords_) {
        const auto opts = x.options();
        const auto rows = torch::linspace(-1.0, 1.0, x.size(2), opts).view({1, 1, -1, 1}).expand({x.size(0), 1, x.size(2), x.size(3)});
        const auto cols = torch::linspace(-1.0, 1.0, x.size(3), opts).view({1, 1, 1, -1}).expand({x.size(0), 1, x.size(2), x.size(3)});
        h = torch::cat({x, rows, cols}, 1);
    }
    for (size_t i = 0; i < convs_->size(); ++i) {
        h = convs_[i]->as<torch::nn::Conv2d>()->forward(h);
        if (i + 1 < convs_->size()) h = torch::relu(h);
    }
    return h;
}

nlohmann::json ConvGenerator::config() const {
    return {{"type", "conv"},
            {"in_channels", in_channels_},
            {"out_channels", out_channels_},
            {"hidden", hidden_},
            {"layers", layers_},
            {"coords", coords_}};
}

namespace {
std::mutex& generator_mutex() {
    static std::mutex m;
    return m;
}
}  // namespace

std::shared_ptr<ConvGenerator> make_conv_generator(int64_t in_channels, int64_t out_channels,
                                                   uint64_t seed, int64_t hidden, int64_t layers,
                                                   torch::Dtype dtype, bool coords) {
    std::shared_ptr<ConvGenerator> net;
    {
        std::lock_guard lock(generator_mutex());
        torch::manual_seed(seed);
        net = std::make_shared<ConvGenerator>(in_channels, out_channels, hidden, layers, coords);
    }
    net->to(dtype);
    return net;
}

namespace {

std::shared_ptr<Generator> restore_generator(const nlohmann::json& config) {
    if (config.value("type", "") != "conv")
        throw ConfigurationError("unsupported generator type in trigger archive");
    return std::make_shared<ConvGenerator>(config.at("in_channels"), config.at("out_channels"),
                                           config.at("hidden"), config.at("layers"), config.value("coords", false));
}

std::shared_ptr<Generator> clone_generator(const std::shared_ptr<Generator>& net) {
    auto copy = restore_generator(net->config());
    copy->to(net->parameters().front().scalar_type());
    copy_parameters(*net, *copy);
    return copy;
}

}  // namespace

// ---------------------------------------------------------------------------
// LocalizedTrigger
// ---------------------------------------------------------------------------

LocalizedTrigger::LocalizedTrigger(MaskSource mask, PatternSource pattern, MaskMode mode)
    : mask_(std::move(mask)), pattern_(std::move(pattern)), mode_(mode) {}

LocalizedTrigger LocalizedTrigger::constant(const torch::Tensor& mask, const torch::Tensor& pattern) {
    if (mask.dim() != 2 || pattern.dim() != 3)
        throw ArgumentError("constant trigger expects an H x W mask and a C x H x W pattern");
    if (mask.size(0) != pattern.size(1) || mask.size(1) != pattern.size(2))
        throw ArgumentError("mask and pattern spatial shapes differ");
    return LocalizedTrigger(FixedMask{mask.detach().clone().unsqueeze(0).unsqueeze(0)},
                            FixedPattern{pattern.detach().clone().unsqueeze(0)});
}

LocalizedTrigger LocalizedTrigger::from_logits(const torch::Tensor& mask_logits,
                                               const torch::Tensor& pattern_logits, MaskMode mode) {
    if (mask_logits.dim() != 2 || pattern_logits.dim() != 3)
        throw ArgumentError("logit trigger expects an H x W mask and a C x H x W pattern");
    return LocalizedTrigger(LogitMask{trainable(mask_logits.unsqueeze(0).unsqueeze(0))},
                            LogitPattern{trainable(pattern_logits.unsqueeze(0))}, mode);
}

bool LocalizedTrigger::input_dependent() const {
    return std::holds_alternative<GeneratedMask>(mask_) ||
           std::holds_alternative<GeneratedPattern>(pattern_);
}

MaskAndPattern LocalizedTrigger::mask_pattern(const torch::Tensor& x) const {
    const auto n = x.size(0);
    const auto c = x.size(1);
    const auto h = x.size(2);
    const auto w = x.size(3);

    // Raw mask scores before squashing.  Fixed masks are already values.
    const bool fixed = std::holds_alternative<FixedMask>(mask_);
    torch::Tensor mask = std::visit(
        [&](const auto& src) -> torch::Tensor {
            using T = std::decay_t<decltype(src)>;
            if constexpr (std::is_same_v<T, FixedMask>) return src.values.to(x.dtype());
            else if constexpr (std::is_same_v<T, LogitMask>) return src.logits;
            else return src.net->forward(x);
        },
        mask_);
    if (mask.dim() != 4 || mask.size(1) != 1 || mask.size(2) != h || mask.size(3) != w ||
        (mask.size(0) != 1 && mask.size(0) != n))
        throw ContractError("mask source produced shape " + shape_string(mask) +
                            " for input " + shape_string(x));
    torch::Tensor soft;
    if (fixed) {
        soft = mask;
    } else if (mode_ == MaskMode::binary) {
        // Soft values stay within 0.1 of the threshold so the L0 surrogate
        // keeps a gradient; the emitted mask is the sign of the score.
        soft = 0.5 + kBinarySoftRange * torch::tanh(mask);
        const auto hard = (mask >= 0.0).to(mask.dtype());
        mask = soft + (hard - soft).detach();
    } else {
        mask = torch::sigmoid(mask);
        soft = mask;
    }

    torch::Tensor pattern = std::visit(
        [&](const auto& src) -> torch::Tensor {
            using T = std::decay_t<decltype(src)>;
            if constexpr (std::is_same_v<T, FixedPattern>) return src.values.to(x.dtype());
            else if constexpr (std::is_same_v<T, LogitPattern>) return torch::sigmoid(src.logits);
            else if constexpr (std::is_same_v<T, GeneratedPattern>)
                return torch::sigmoid(src.net->forward(x));
            else {
                const auto weights = torch::softmax(src.weight_logits, 0);
                return (weights.view({-1, 1, 1, 1}) * src.pool.to(weights.dtype())).sum(0, true);
            }
        },
        pattern_);
    if (pattern.dim() != 4 || pattern.size(1) != c || pattern.size(2) != h || pattern.size(3) != w ||
        (pattern.size(0) != 1 && pattern.size(0) != n))
        throw ContractError("pattern source produced shape " + shape_string(pattern) +
                            " for input " + shape_string(x));

    return {mask.expand({n, 1, h, w}), pattern.expand({n, c, h, w}), soft.expand({n, 1, h, w})};
}

torch::Tensor LocalizedTrigger::apply_unclamped(const torch::Tensor& x) const {
    const auto emitted = mask_pattern(x);
    const auto& mask = emitted.mask;
    const auto& pattern = emitted.pattern;
    return (1.0 - mask) * x + mask * pattern;
}

std::vector<torch::Tensor> LocalizedTrigger::parameters() const {
    std::vector<torch::Tensor> out;
    std::visit(
        [&](const auto& src) {
            using T = std::decay_t<decltype(src)>;
            if constexpr (std::is_same_v<T, LogitMask>) out.push_back(src.logits);
            else if constexpr (std::is_same_v<T, GeneratedMask>)
                for (auto& p : src.net->parameters()) out.push_back(p);
        },
        mask_);
    std::visit(
        [&](const auto& src) {
            using T = std::decay_t<decltype(src)>;
            if constexpr (std::is_same_v<T, LogitPattern>) out.push_back(src.logits);
            else if constexpr (std::is_same_v<T, GeneratedPattern>)
                for (auto& p : src.net->parameters()) out.push_back(p);
            else if constexpr (std::is_same_v<T, DonorPattern>) out.push_back(src.weight_logits);
        },
        pattern_);
    return out;
}

std::unique_ptr<TriggerFunction> LocalizedTrigger::clone() const {
    MaskSource mask = std::visit(
        [](const auto& src) -> MaskSource {
            using T = std::decay_t<decltype(src)>;
            if constexpr (std::is_same_v<T, FixedMask>) return FixedMask{src.values.detach().clone()};
            else if constexpr (std::is_same_v<T, LogitMask>) return LogitMask{trainable(src.logits)};
            else return GeneratedMask{clone_generator(src.net)};
        },
        mask_);
    PatternSource pattern = std::visit(
        [](const auto& src) -> PatternSource {
            using T = std::decay_t<decltype(src)>;
            if constexpr (std::is_same_v<T, FixedPattern>)
                return FixedPattern{src.values.detach().clone()};
            else if constexpr (std::is_same_v<T, LogitPattern>)
                return LogitPattern{trainable(src.logits)};
            else if constexpr (std::is_same_v<T, GeneratedPattern>)
                return GeneratedPattern{clone_generator(src.net)};
            else
                return DonorPattern{src.pool, trainable(src.weight_logits), src.donor_class};
        },
        pattern_);
    return std::make_unique<LocalizedTrigger>(std::move(mask), std::move(pattern), mode_);
}

nlohmann::json LocalizedTrigger::describe(TensorMap& tensors) const {
    nlohmann::json j;
    j["mask_mode"] = mode_ == MaskMode::binary ? "binary" : "smooth";
    std::visit(
        [&](const auto& src) {
            using T = std::decay_t<decltype(src)>;
            if constexpr (std::is_same_v<T, FixedMask>) {
                j["mask"] = {{"source", "fixed"}};
                tensors["mask.values"] = src.values;
            } else if constexpr (std::is_same_v<T, LogitMask>) {
                j["mask"] = {{"source", "logits"}};
                tensors["mask.logits"] = src.logits;
            } else {
                j["mask"] = {{"source", "generator"}, {"config", src.net->config()}};
                for (const auto& p : src.net->named_parameters()) tensors["mask.net." + p.key()] = p.value();
            }
        },
        mask_);
    std::visit(
        [&](const auto& src) {
            using T = std::decay_t<decltype(src)>;
            if constexpr (std::is_same_v<T, FixedPattern>) {
                j["pattern"] = {{"source", "fixed"}};
                tensors["pattern.values"] = src.values;
            } else if constexpr (std::is_same_v<T, LogitPattern>) {
                j["pattern"] = {{"source", "logits"}};
                tensors["pattern.logits"] = src.logits;
            } else if constexpr (std::is_same_v<T, GeneratedPattern>) {
                j["pattern"] = {{"source", "generator"}, {"config", src.net->config()}};
                for (const auto& p : src.net->named_parameters())
                    tensors["pattern.net." + p.key()] = p.value();
            } else {
                j["pattern"] = {{"source", "donor"}, {"donor_class", src.donor_class}};
                tensors["pattern.pool"] = src.pool;
                tensors["pattern.weight_logits"] = src.weight_logits;
            }
        },
        pattern_);
    return j;
}

// ---------------------------------------------------------------------------
// PervasiveTrigger
// ---------------------------------------------------------------------------

torch::Tensor PervasiveTrigger::identity_kernel(int64_t channels, torch::Dtype dtype) {
    auto kernel = torch::zeros({channels, channels, 3, 3}, torch::TensorOptions().dtype(dtype));
    for (int64_t c = 0; c < channels; ++c) kernel[c][c][1][1] = 1.0;
    return kernel;
}

PervasiveTrigger::PervasiveTrigger(const std::string& encoder_id, uint64_t seed, double noise_sigma)
    : pair_(zoo::find_encoder(encoder_id)) {
    const auto channels = pair_.net->latent_channels();
    const auto dtype = pair_.net->parameters().front().scalar_type();
    auto generator = make_generator(seed);
    auto noise = torch::randn({channels, channels, 3, 3}, generator,
                              torch::TensorOptions().dtype(dtype)) * noise_sigma;
    weight_ = trainable(identity_kernel(channels, dtype) + noise);
    bias_ = trainable(torch::zeros({channels}, torch::TensorOptions().dtype(dtype)));
}

PervasiveTrigger::PervasiveTrigger(zoo::EncoderPair pair, torch::Tensor weight, torch::Tensor bias)
    : pair_(std::move(pair)), weight_(trainable(weight)), bias_(trainable(bias)) {
    if (!pair_.net) throw ConfigurationError("pervasive trigger needs an encoder pair");
    const auto channels = pair_.net->latent_channels();
    if (weight_.sizes() != torch::IntArrayRef({channels, channels, 3, 3}) ||
        bias_.sizes() != torch::IntArrayRef({channels}))
        throw ArgumentError("pervasive transform must be a " + std::to_string(channels) + "->" +
                            std::to_string(channels) + " 3x3 convolution");
}

torch::Tensor PervasiveTrigger::encode(const torch::Tensor& x) const { return pair_.net->encode(x); }
torch::Tensor PervasiveTrigger::decode(const torch::Tensor& z) const { return pair_.net->decode(z); }

torch::Tensor PervasiveTrigger::apply_latent(const torch::Tensor& latent) const {
    namespace F = torch::nn::functional;
    return decode(F::conv2d(latent, weight_, F::Conv2dFuncOptions().bias(bias_).padding(1)));
}

torch::Tensor PervasiveTrigger::apply_unclamped(const torch::Tensor& x) const {
    return apply_latent(encode(x));
}

torch::Tensor PervasiveTrigger::reference(const torch::Tensor& x) const {
    return decode(encode(x));
}

std::unique_ptr<TriggerFunction> PervasiveTrigger::clone() const {
    return std::make_unique<PervasiveTrigger>(pair_, weight_, bias_);
}

nlohmann::json PervasiveTrigger::describe(TensorMap& tensors) const {
    tensors["conv.weight"] = weight_;
    tensors["conv.bias"] = bias_;
    return {{"encoder_id", pair_.id}};
}

// ---------------------------------------------------------------------------
// Frequency
// ---------------------------------------------------------------------------

torch::Tensor dft(const torch::Tensor& grid, DftDirection direction) {
    if (grid.dim() < 2) throw ArgumentError("dft expects at least a 2-D grid");
    if (!torch::isfinite(grid).all().item<bool>()) throw ArgumentError("dft input is not finite");
    if (direction == DftDirection::forward) {
        if (grid.is_complex()) throw ArgumentError("forward dft expects a real grid");
        return torch::fft::fft2(grid);
    }
    if (!grid.is_complex()) throw ArgumentError("inverse dft expects a complex grid");
    return torch::fft::ifft2(grid);
}

FrequencyTrigger::FrequencyTrigger(torch::Tensor mask_logits, torch::Tensor pattern_real,
                                   torch::Tensor pattern_imag)
    : mask_logits_(trainable(mask_logits)),
      pattern_real_(trainable(pattern_real)),
      pattern_imag_(trainable(pattern_imag)) {
    if (mask_logits_.sizes() != pattern_real_.sizes() || pattern_real_.sizes() != pattern_imag_.sizes())
        throw ArgumentError("frequency mask and pattern planes must share a shape");
}

FrequencyTrigger FrequencyTrigger::with_mask(const torch::Tensor& mask, const torch::Tensor& pattern_real,
                                             const torch::Tensor& pattern_imag) {
    if (mask.sizes() != pattern_real.sizes() || pattern_real.sizes() != pattern_imag.sizes())
        throw ArgumentError("frequency mask and pattern planes must share a shape");
    FrequencyTrigger t;
    t.fixed_mask_ = mask.detach().clone();
    t.pattern_real_ = trainable(pattern_real);
    t.pattern_imag_ = trainable(pattern_imag);
    return t;
}

torch::Tensor FrequencyTrigger::mask() const {
    return fixed_mask_.defined() ? fixed_mask_ : torch::sigmoid(mask_logits_);
}

std::vector<torch::Tensor> FrequencyTrigger::parameters() const {
    if (fixed_mask_.defined()) return {pattern_real_, pattern_imag_};
    return {mask_logits_, pattern_real_, pattern_imag_};
}

namespace {

void check_frequency_shape(const torch::Tensor& x, const torch::Tensor& mask) {
    const auto grid = mask.dim() == 4 ? mask.sizes().slice(1) : mask.sizes();
    if (x.dim() != 4 || x.sizes().slice(1) != grid)
        throw ArgumentError("frequency trigger grids " + shape_string(mask) +
                            " do not match input " + shape_string(x));
}

}  // namespace

torch::Tensor FrequencyTrigger::spectral_change(const torch::Tensor& x) const {
    const auto m = mask();
    check_frequency_shape(x, m);
    const auto spectrum = torch::fft::fft2(x);
    const auto delta = torch::complex(pattern_real_, pattern_imag_);
    return m * (delta - spectrum);
}

torch::Tensor FrequencyTrigger::apply_unclamped(const torch::Tensor& x) const {
    const auto m = mask();
    check_frequency_shape(x, m);
    const auto spectrum = torch::fft::fft2(x);
    const auto delta = torch::complex(pattern_real_, pattern_imag_);
    return torch::real(torch::fft::ifft2((1.0 - m) * spectrum + m * delta));
}

std::unique_ptr<TriggerFunction> FrequencyTrigger::clone() const {
    if (fixed_mask_.defined())
        return std::make_unique<FrequencyTrigger>(with_mask(fixed_mask_, pattern_real_, pattern_imag_));
    return std::make_unique<FrequencyTrigger>(mask_logits_, pattern_real_, pattern_imag_);
}

nlohmann::json FrequencyTrigger::describe(TensorMap& tensors) const {
    if (fixed_mask_.defined()) tensors["mask.values"] = fixed_mask_;
    else tensors["mask.logits"] = mask_logits_;
    tensors["pattern.real"] = pattern_real_;
    tensors["pattern.imag"] = pattern_imag_;
    return {{"mask", fixed_mask_.defined() ? "fixed" : "logits"}};
}

}  // namespace nbscan
