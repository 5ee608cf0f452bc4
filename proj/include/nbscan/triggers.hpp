#pragma once

#include <filesystem>
#include <map>
#include <memory>
#include <string>
#include <variant>
#include <vector>

#include <json.hpp>

#include "nbscan/core.hpp"
#include "nbscan/zoo.hpp"

namespace nbscan {

enum class TriggerKind { localized, pervasive, frequency };
std::string to_string(TriggerKind kind);

using TensorMap = std::map<std::string, torch::Tensor>;

/// Base for the three trigger templates.  Inputs and outputs are
/// N x C x H x W batches.  `apply` clamps to [0, 1]; `apply_unclamped` is the
/// composition before clamping and is what pixel regulation distances use.
class TriggerFunction {
public:
    virtual ~TriggerFunction() = default;

    virtual TriggerKind kind() const = 0;
    virtual torch::Tensor apply_unclamped(const torch::Tensor& x) const = 0;
    /// What the trigger's change is measured against.  Localized and
    /// frequency triggers use `x`; pervasive triggers use their own
    /// identity-transform output so the autoencoder's reconstruction error is
    /// not charged to the trigger.
    virtual torch::Tensor reference(const torch::Tensor& x) const { return x; }
    /// Trainable tensors (empty for fixed triggers).
    virtual std::vector<torch::Tensor> parameters() const = 0;
    /// Deep copy; parameters of the copy share no storage with this trigger.
    virtual std::unique_ptr<TriggerFunction> clone() const = 0;
    /// Header fields plus named tensors for the archive format.
    virtual nlohmann::json describe(TensorMap& tensors) const = 0;

    torch::Tensor apply(const torch::Tensor& x) const { return apply_unclamped(x).clamp(0.0, 1.0); }
    ImageSample apply(const ImageSample& sample) const;
    Transform as_transform() const;
};

// ---------------------------------------------------------------------------
// Localized template: (1 - m(x)) * x + m(x) * delta(x)
// ---------------------------------------------------------------------------

/// Image-to-grid network used for input-dependent masks or patterns.
class Generator : public torch::nn::Module {
public:
    virtual torch::Tensor forward(const torch::Tensor& x) = 0;
    virtual nlohmann::json config() const = 0;
};

/// Plain 3x3 convolution stack, `layers` <= 4, spatial size preserved.
/// With `coords` the input gets two extra channels holding the row and
/// column position in [-1, 1], so outputs can depend on location.
class ConvGenerator : public Generator {
public:
    ConvGenerator(int64_t in_channels, int64_t out_channels, int64_t hidden = 16, int64_t layers = 3,
                  bool coords = false);
    torch::Tensor forward(const torch::Tensor& x) override;
    nlohmann::json config() const override;

private:
    int64_t in_channels_, out_channels_, hidden_, layers_;
    bool coords_;
    torch::nn::ModuleList convs_;
};

/// Builds a ConvGenerator with parameters drawn from `seed`.
std::shared_ptr<ConvGenerator> make_conv_generator(int64_t in_channels, int64_t out_channels,
                                                   uint64_t seed, int64_t hidden = 16,
                                                   int64_t layers = 3,
                                                   torch::Dtype dtype = torch::kFloat, bool coords = false);

/// Mask values used verbatim (no optimisation), 1 x 1 x H x W in [0, 1].
struct FixedMask {
    torch::Tensor values;
};
/// Unconstrained logits squashed by a sigmoid, 1 x 1 x H x W.
struct LogitMask {
    torch::Tensor logits;
};
struct GeneratedMask {
    std::shared_ptr<Generator> net;
};
using MaskSource = std::variant<FixedMask, LogitMask, GeneratedMask>;

struct FixedPattern {
    torch::Tensor values;  // 1 x C x H x W in [0, 1]
};
struct LogitPattern {
    torch::Tensor logits;  // 1 x C x H x W
};
struct GeneratedPattern {
    std::shared_ptr<Generator> net;
};
/// Convex combination of donor images, weights = softmax(weight_logits).
struct DonorPattern {
    torch::Tensor pool;           // P x C x H x W, fixed
    torch::Tensor weight_logits;  // P
    int64_t donor_class = -1;
};
using PatternSource = std::variant<FixedPattern, LogitPattern, GeneratedPattern, DonorPattern>;

/// Smooth masks are sigmoid(score).  Binary masks emit 1 where score >= 0 and
/// 0 elsewhere, with a straight-through gradient through the soft value
/// 0.5 + kBinarySoftRange * tanh(score), which is also what the L0 surrogate
/// sees.  The exact L0 count of a binary mask is therefore a plain pixel count.
enum class MaskMode { smooth, binary };
inline constexpr double kBinarySoftRange = 0.1;

struct MaskAndPattern {
    torch::Tensor mask;     // N x 1 x H x W
    torch::Tensor pattern;  // N x C x H x W
    torch::Tensor soft;     // mask before binary thresholding (equals `mask` otherwise)
};

class LocalizedTrigger : public TriggerFunction {
public:
    LocalizedTrigger(MaskSource mask, PatternSource pattern, MaskMode mode = MaskMode::smooth);

    /// Constant mask (H x W) and pattern (C x H x W), both in [0, 1].
    static LocalizedTrigger constant(const torch::Tensor& mask, const torch::Tensor& pattern);
    /// Trainable constant grids from unconstrained logits.
    static LocalizedTrigger from_logits(const torch::Tensor& mask_logits,
                                        const torch::Tensor& pattern_logits,
                                        MaskMode mode = MaskMode::smooth);

    TriggerKind kind() const override { return TriggerKind::localized; }
    torch::Tensor apply_unclamped(const torch::Tensor& x) const override;
    std::vector<torch::Tensor> parameters() const override;
    std::unique_ptr<TriggerFunction> clone() const override;
    nlohmann::json describe(TensorMap& tensors) const override;

    /// Emitted mask and pattern for a batch.  Throws ContractError when a
    /// generator returns the wrong shape.
    MaskAndPattern mask_pattern(const torch::Tensor& x) const;

    const MaskSource& mask_source() const { return mask_; }
    const PatternSource& pattern_source() const { return pattern_; }
    MaskMode mask_mode() const { return mode_; }
    bool input_dependent() const;

private:
    MaskSource mask_;
    PatternSource pattern_;
    MaskMode mode_;
};

// ---------------------------------------------------------------------------
// Pervasive template: Decoder(conv(Encoder(x)))
// ---------------------------------------------------------------------------

class PervasiveTrigger : public TriggerFunction {
public:
    /// Looks `encoder_id` up in the registry; throws ConfigurationError when
    /// it is not registered.  The 3x3 transform starts at identity plus
    /// Gaussian noise of standard deviation `noise_sigma`.
    PervasiveTrigger(const std::string& encoder_id, uint64_t seed, double noise_sigma = 0.01);
    /// Explicit pair and weights (weights: L x L x 3 x 3, bias: L).
    PervasiveTrigger(zoo::EncoderPair pair, torch::Tensor weight, torch::Tensor bias);

    TriggerKind kind() const override { return TriggerKind::pervasive; }
    torch::Tensor apply_unclamped(const torch::Tensor& x) const override;
    torch::Tensor reference(const torch::Tensor& x) const override;
    std::vector<torch::Tensor> parameters() const override { return {weight_, bias_}; }
    std::unique_ptr<TriggerFunction> clone() const override;
    nlohmann::json describe(TensorMap& tensors) const override;

    /// Decoder(conv(z)) for a precomputed latent batch.
    torch::Tensor apply_latent(const torch::Tensor& latent) const;
    torch::Tensor encode(const torch::Tensor& x) const;
    torch::Tensor decode(const torch::Tensor& z) const;

    const std::string& encoder_id() const { return pair_.id; }
    const zoo::EncoderPair& encoder_pair() const { return pair_; }
    const torch::Tensor& weight() const { return weight_; }
    const torch::Tensor& bias() const { return bias_; }

    /// Identity kernel (centre tap 1 on the diagonal) for `channels` latents.
    static torch::Tensor identity_kernel(int64_t channels, torch::Dtype dtype = torch::kFloat);

private:
    zoo::EncoderPair pair_;
    torch::Tensor weight_;
    torch::Tensor bias_;
};

// ---------------------------------------------------------------------------
// Frequency template: DFT^-1((1 - m) * DFT(x) + m * delta)
// ---------------------------------------------------------------------------

enum class DftDirection { forward, inverse };

/// 2-D DFT over the last two dimensions, unnormalised forward sum and 1/(MN)
/// inverse.  Forward takes real input; inverse takes complex input.  Both
/// return complex tensors.  Non-finite input throws ArgumentError.
torch::Tensor dft(const torch::Tensor& grid, DftDirection direction);

class FrequencyTrigger : public TriggerFunction {
public:
    /// `mask_logits`: 1 x C x H x W (sigmoid-squashed, trainable).
    /// `pattern_real`, `pattern_imag`: 1 x C x H x W.
    FrequencyTrigger(torch::Tensor mask_logits, torch::Tensor pattern_real, torch::Tensor pattern_imag);
    /// Fixed mask values in [0, 1] instead of logits.
    static FrequencyTrigger with_mask(const torch::Tensor& mask, const torch::Tensor& pattern_real,
                                      const torch::Tensor& pattern_imag);

    TriggerKind kind() const override { return TriggerKind::frequency; }
    torch::Tensor apply_unclamped(const torch::Tensor& x) const override;
    std::vector<torch::Tensor> parameters() const override;
    std::unique_ptr<TriggerFunction> clone() const override;
    nlohmann::json describe(TensorMap& tensors) const override;

    torch::Tensor mask() const;
    /// m * (delta - DFT(x)), the complex change the trigger makes to the spectrum.
    torch::Tensor spectral_change(const torch::Tensor& x) const;

private:
    FrequencyTrigger() = default;
    torch::Tensor mask_logits_;
    torch::Tensor fixed_mask_;
    torch::Tensor pattern_real_;
    torch::Tensor pattern_imag_;
};

// ---------------------------------------------------------------------------
// Archive
// ---------------------------------------------------------------------------

struct StoredTrigger {
    std::unique_ptr<TriggerFunction> trigger;
    RegulationSpec spec;
    nlohmann::json extra;
};

/// Self-describing binary archive: magic, JSON header (kind tag, regulation
/// spec, encoder id, tensor table), raw tensor bytes.  Round trips are
/// bit-exact.
void save_trigger(const std::filesystem::path& path, const TriggerFunction& trigger,
                  const RegulationSpec& spec, const nlohmann::json& extra = {});
StoredTrigger load_trigger(const std::filesystem::path& path);

nlohmann::json spec_to_json(const RegulationSpec& spec);
RegulationSpec spec_from_json(const nlohmann::json& j);

}  // namespace nbscan
