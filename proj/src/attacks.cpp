#include "nbscan/attacks.hpp"

#include <algorithm>
#include <array>
#include <cmath>
#include <numeric>
#include <sstream>

#include "nbscan/losses.hpp"
#include "nbscan/png_io.hpp"

namespace nbscan::attacks {

namespace F = torch::nn::functional;

std::string to_string(AttackKind kind) {
    switch (kind) {
    case AttackKind::patch: return "patch";
    case AttackKind::dynamic: return "dynamic";
    case AttackKind::inputaware_lite: return "inputaware-lite";
    case AttackKind::composite: return "composite";
    case AttackKind::warp: return "warp";
    case AttackKind::blend: return "blend";
    case AttackKind::reflection: return "reflection";
    case AttackKind::sig: return "sig";
    case AttackKind::filter: return "filter";
    }
    return "?";
}

AttackKind parse_attack_kind(std::string_view text) {
    for (auto kind : all_attack_kinds())
        if (to_string(kind) == text) return kind;
    throw ConfigurationError("unknown attack kind '" + std::string(text) + "'");
}

std::vector<AttackKind> all_attack_kinds() {
    return {AttackKind::patch, AttackKind::dynamic, AttackKind::inputaware_lite,
            AttackKind::composite, AttackKind::warp, AttackKind::blend,
            AttackKind::reflection, AttackKind::sig, AttackKind::filter};
}

namespace {

// Rectangle of roughly `fraction * H * W` cells, aspect ratio at most 2.
std::pair<int64_t, int64_t> patch_size(double fraction, int64_t height, int64_t width) {
    const double want = fraction * static_cast<double>(height * width);
    std::pair<int64_t, int64_t> best{1, 1};
    double best_gap = want;
    for (int64_t h = 1; h <= height; ++h)
        for (int64_t w = h; w <= std::min(width, 2 * h); ++w) {
            const double gap = std::abs(static_cast<double>(h * w) - want);
            if (gap < best_gap - 1e-12) {
                best_gap = gap;
                best = {h, w};
            }
        }
    return best;
}

torch::Tensor sepia_matrix(double strength) {
    const auto sepia = torch::tensor({0.393, 0.769, 0.189, 0.349, 0.686, 0.168, 0.272, 0.534, 0.131},
                                     torch::kFloat)
                           .view({3, 3});
    return (1.0 - strength) * torch::eye(3) + strength * sepia;
}

torch::Tensor box_blur(const torch::Tensor& image) {
    const auto c = image.size(0);
    const auto kernel = torch::full({c, 1, 3, 3}, 1.0 / 9.0, image.options());
    return F::conv2d(F::pad(image.unsqueeze(0), F::PadFuncOptions({1, 1, 1, 1}).mode(torch::kReplicate)),
                     kernel, F::Conv2dFuncOptions().groups(c))
        .squeeze(0);
}

torch::Tensor smooth_field(int64_t channels, int64_t points, int64_t height, int64_t width,
                           uint64_t seed) {
    auto gen = make_generator(seed);
    const auto control = torch::rand({1, channels, points, points}, gen) * 2.0 - 1.0;
    return F::interpolate(control, F::InterpolateFuncOptions()
                                       .size(std::vector<int64_t>{height, width})
                                       .mode(torch::kBicubic)
                                       .align_corners(true))
        .squeeze(0);
}

std::array<int64_t, 2> anchor(const PoisonRecipe& r, int64_t index) {
    const auto h = r.image_shape[1], w = r.image_shape[2];
    const auto g = std::max<int64_t>(1, r.options.anchor_grid);
    const auto row_slot = index / g, col_slot = index % g;
    const auto span_r = h - r.patch_height - 2, span_c = w - r.patch_width - 2;
    const auto row = g == 1 ? span_r : 1 + row_slot * span_r / (g - 1);
    const auto col = g == 1 ? span_c : 1 + col_slot * span_c / (g - 1);
    return {row, col};
}

// Anchor chosen by quantised quadrant means, so placement follows the image.
int64_t quadrant_hash(const torch::Tensor& image, int64_t slots) {
    const auto h = image.size(1), w = image.size(2);
    uint64_t hash = 1469598103934665603ull;
    for (int64_t qr = 0; qr < 2; ++qr)
        for (int64_t qc = 0; qc < 2; ++qc) {
            const auto mean = image.slice(1, qr * h / 2, (qr + 1) * h / 2)
                                  .slice(2, qc * w / 2, (qc + 1) * w / 2)
                                  .mean()
                                  .item<double>();
            const auto level = static_cast<uint64_t>(std::clamp(mean, 0.0, 1.0) * 7.999);
            hash = (hash ^ level) * 1099511628211ull;
        }
    return static_cast<int64_t>(hash % static_cast<uint64_t>(slots));
}

torch::Tensor place_patch(const PoisonRecipe& r, const torch::Tensor& image, int64_t row, int64_t col) {
    auto out = image.clone();
    out.slice(1, row, row + r.patch_height).slice(2, col, col + r.patch_width).copy_(r.pattern);
    return out;
}

bool input_independent(AttackKind kind) {
    return kind == AttackKind::patch || kind == AttackKind::blend || kind == AttackKind::reflection ||
           kind == AttackKind::sig || kind == AttackKind::filter || kind == AttackKind::warp;
}

// Pre-clamp stamp of an N x C x H x W batch for kinds without per-image state.
torch::Tensor stamp_constant(const PoisonRecipe& r, const torch::Tensor& x) {
    switch (r.kind) {
    case AttackKind::patch: {
        auto out = x.clone();
        const auto row = r.image_shape[1] - r.patch_height - 1;
        const auto col = r.image_shape[2] - r.patch_width - 1;
        out.slice(2, row, row + r.patch_height).slice(3, col, col + r.patch_width).copy_(r.pattern.to(x.dtype()));
        return out;
    }
    case AttackKind::blend: return (1.0 - r.options.alpha) * x + r.options.alpha * r.pattern.to(x.dtype());
    case AttackKind::reflection:
        return (1.0 - r.options.reflection_alpha) * x + r.options.reflection_alpha * r.pattern.to(x.dtype());
    case AttackKind::sig: return x + r.pattern.to(x.dtype());
    case AttackKind::filter:
        return torch::einsum("ij,njhw->nihw", {r.filter_matrix.to(x.dtype()), x}) +
               r.filter_offset.to(x.dtype()).view({1, -1, 1, 1});
    case AttackKind::warp: {
        const auto h = x.size(2), w = x.size(3);
        const auto ys = torch::linspace(-1.0, 1.0, h, x.options());
        const auto xs = torch::linspace(-1.0, 1.0, w, x.options());
        const auto mesh = torch::meshgrid({ys, xs}, "ij");
        const auto scale = torch::tensor({2.0 / static_cast<double>(w - 1), 2.0 / static_cast<double>(h - 1)},
                                         x.options());
        const auto grid = torch::stack({mesh[1], mesh[0]}, -1) + r.warp_field.to(x.dtype()) * scale;
        return F::grid_sample(x, grid.unsqueeze(0).expand({x.size(0), h, w, 2}),
                              F::GridSampleFuncOptions()
                                  .mode(torch::kBilinear)
                                  .padding_mode(torch::kBorder)
                                  .align_corners(true));
    }
    default: throw ContractError("stamp_constant: input-specific kind");
    }
}

// Pre-clamp stamp of one C x H x W image.
torch::Tensor stamp_raw(const PoisonRecipe& r, const torch::Tensor& x, std::mt19937_64& rng) {
    if (input_independent(r.kind)) return stamp_constant(r, x.unsqueeze(0)).squeeze(0);
    switch (r.kind) {
    case AttackKind::dynamic: {
        const auto slots = r.options.anchor_grid * r.options.anchor_grid;
        std::uniform_int_distribution<int64_t> pick(0, slots - 1);
        const auto [row, col] = anchor(r, pick(rng));
        return place_patch(r, x, row, col);
    }
    case AttackKind::inputaware_lite: {
        const auto slots = r.options.anchor_grid * r.options.anchor_grid;
        const auto [row, col] = anchor(r, quadrant_hash(x, slots));
        return place_patch(r, x, row, col);
    }
    case AttackKind::composite: {
        if (!r.donor_pool.defined() || r.donor_pool.size(0) == 0)
            throw ArgumentError("composite recipe has no donor images; call attach_donors");
        std::uniform_int_distribution<int64_t> pick(0, r.donor_pool.size(0) - 1);
        const auto& donor = r.donor_pool[pick(rng)];
        auto out = x.clone();
        const auto half = x.size(2) / 2;
        out.slice(2, half).copy_(donor.slice(2, half));
        return out;
    }
    default: break;
    }
    return x;
}

}  // namespace

// ---------------------------------------------------------------------------

void PoisonRecipe::validate() const {
    auto fail = [this](const std::string& what) {
        throw ArgumentError(to_string(kind) + " recipe: " + what);
    };
    if (!(poison_rate >= 0.0 && poison_rate <= kMaxPoisonRate))
        fail("poison rate must lie in [0, 0.10]");
    if (target < 0) fail("target must be a class index");
    if (image_shape.size() != 3 || image_shape[0] <= 0 || image_shape[1] <= 0 || image_shape[2] <= 0)
        fail("image shape must be C, H, W");
    const auto pixels = static_cast<double>(image_shape[1] * image_shape[2]);
    switch (kind) {
    case AttackKind::patch:
    case AttackKind::dynamic:
    case AttackKind::inputaware_lite:
        if (!(options.area_fraction > 0.0 && options.area_fraction <= 0.10))
            fail("patch area must lie in (0, 0.10] of the image");
        if (static_cast<double>(patch_height * patch_width) > 0.10 * pixels + 1.0)
            fail("patch exceeds 10% of the image");
        if (kind != AttackKind::patch && options.anchor_grid < 1) fail("anchor grid must be >= 1");
        break;
    case AttackKind::blend:
        if (!(options.alpha > 0.0 && options.alpha <= kMaxBlendAlpha)) fail("alpha must lie in (0, 0.2]");
        break;
    case AttackKind::reflection:
        if (!(options.reflection_alpha > 0.0 && options.reflection_alpha <= kMaxBlendAlpha))
            fail("reflection alpha must lie in (0, 0.2]");
        break;
    case AttackKind::sig:
        if (!(options.sig_amplitude > 0.0 && options.sig_amplitude <= kMaxBlendAlpha))
            fail("amplitude must lie in (0, 0.2]");
        if (!(options.sig_frequency > 0.0)) fail("frequency must be positive");
        break;
    case AttackKind::warp:
        if (!(options.warp_max_displacement > 0.0 && options.warp_max_displacement <= 1.0))
            fail("warp displacement must lie in (0, 1] pixels");
        if (options.warp_control_points < 2) fail("warp needs at least 2 control points per axis");
        break;
    case AttackKind::filter:
        if (!(options.filter_strength >= 0.0 && options.filter_strength <= 1.0))
            fail("filter strength must lie in [0, 1]");
        if (filter_matrix.defined() && filter_matrix.abs().max().item<double>() > 2.0)
            fail("filter matrix entries must lie in [-2, 2]");
        if (filter_offset.defined() && filter_offset.abs().max().item<double>() > 0.5)
            fail("filter offsets must lie in [-0.5, 0.5]");
        break;
    case AttackKind::composite:
        if (donor_class == target) fail("donor class must differ from the target");
        if (donor_pool.defined() && donor_pool.numel() > 0 &&
            donor_pool.sizes().slice(1).vec() != image_shape)
            fail("donor images do not match the image shape");
        break;
    }
    if (pattern.defined() && kind != AttackKind::sig &&
        (pattern.min().item<double>() < 0.0 || pattern.max().item<double>() > 1.0))
        fail("pattern values must lie in [0, 1]");
}

nlohmann::json PoisonRecipe::to_json() const {
    nlohmann::json opts = {{"area_fraction", options.area_fraction},
                           {"alpha", options.alpha},
                           {"reflection_alpha", options.reflection_alpha},
                           {"sig_amplitude", options.sig_amplitude},
                           {"sig_frequency", options.sig_frequency},
                           {"warp_max_displacement", options.warp_max_displacement},
                           {"warp_control_points", options.warp_control_points},
                           {"filter_strength", options.filter_strength},
                           {"donor_class", options.donor_class},
                           {"anchor_grid", options.anchor_grid}};
    return {{"kind", to_string(kind)},
            {"target", target},
            {"poison_rate", poison_rate},
            {"asset_seed", asset_seed},
            {"image_shape", image_shape},
            {"options", opts}};
}

PoisonRecipe make_recipe(AttackKind kind, int64_t target, double poison_rate, uint64_t asset_seed,
                         std::vector<int64_t> image_shape, const RecipeOptions& options) {
    PoisonRecipe r;
    r.kind = kind;
    r.target = target;
    r.poison_rate = poison_rate;
    r.asset_seed = asset_seed;
    r.options = options;
    r.image_shape = std::move(image_shape);
    if (r.image_shape.size() != 3) throw ArgumentError("image shape must be C, H, W");
    const auto c = r.image_shape[0], h = r.image_shape[1], w = r.image_shape[2];
    auto gen = make_generator(asset_seed);

    switch (kind) {
    case AttackKind::patch:
    case AttackKind::dynamic:
    case AttackKind::inputaware_lite: {
        std::tie(r.patch_height, r.patch_width) = patch_size(options.area_fraction, h, w);
        // Saturated random colours: every channel is 0 or 1.
        r.pattern = torch::bernoulli(torch::full({c, r.patch_height, r.patch_width}, 0.5), gen);
        if (kind == AttackKind::patch) {
            r.mask = torch::zeros({h, w});
            r.mask.slice(0, h - r.patch_height - 1, h - 1).slice(1, w - r.patch_width - 1, w - 1).fill_(1.0);
        }
        break;
    }
    case AttackKind::composite:
        r.donor_class = options.donor_class;
        break;
    case AttackKind::warp: {
        auto field = smooth_field(2, options.warp_control_points, h, w, asset_seed);
        const auto peak = field.pow(2).sum(0).sqrt().max().item<double>();
        r.warp_field = (field * (options.warp_max_displacement / peak)).permute({1, 2, 0}).contiguous();
        break;
    }
    case AttackKind::blend: r.pattern = torch::rand({c, h, w}, gen); break;
    case AttackKind::reflection: {
        // A smooth stand-in for an external photo, blurred like an out-of-focus reflection.
        const auto scene = (smooth_field(c, 5, h, w, asset_seed) * 0.5 + 0.5).clamp(0.0, 1.0);
        r.pattern = box_blur(scene).clamp(0.0, 1.0);
        break;
    }
    case AttackKind::sig: {
        const auto cols = torch::arange(w, torch::kDouble);
        const auto wave = torch::sin(2.0 * M_PI * options.sig_frequency * cols / static_cast<double>(w));
        r.pattern = (options.sig_amplitude * wave).to(torch::kFloat).view({1, 1, w}).expand({c, h, w}).contiguous();
        break;
    }
    case AttackKind::filter:
        if (c != 3) throw ArgumentError("filter recipe needs 3-channel images");
        r.filter_matrix = sepia_matrix(options.filter_strength);
        r.filter_offset = torch::tensor({0.04, 0.02, -0.03}, torch::kFloat) * options.filter_strength;
        break;
    }
    r.validate();
    return r;
}

PoisonRecipe recipe_from_json(const nlohmann::json& j) {
    RecipeOptions o;
    const auto opts = j.value("options", nlohmann::json::object());
    o.area_fraction = opts.value("area_fraction", o.area_fraction);
    o.alpha = opts.value("alpha", o.alpha);
    o.reflection_alpha = opts.value("reflection_alpha", o.reflection_alpha);
    o.sig_amplitude = opts.value("sig_amplitude", o.sig_amplitude);
    o.sig_frequency = opts.value("sig_frequency", o.sig_frequency);
    o.warp_max_displacement = opts.value("warp_max_displacement", o.warp_max_displacement);
    o.warp_control_points = opts.value("warp_control_points", o.warp_control_points);
    o.filter_strength = opts.value("filter_strength", o.filter_strength);
    o.donor_class = opts.value("donor_class", o.donor_class);
    o.anchor_grid = opts.value("anchor_grid", o.anchor_grid);
    return make_recipe(parse_attack_kind(j.at("kind").get<std::string>()), j.at("target"),
                       j.value("poison_rate", 0.1), j.value("asset_seed", uint64_t{0}),
                       j.value("image_shape", std::vector<int64_t>{3, 32, 32}), o);
}

void attach_donors(PoisonRecipe& recipe, const Dataset& data, int64_t pool_size) {
    if (recipe.kind != AttackKind::composite) return;
    if (recipe.donor_class < 0) recipe.donor_class = (recipe.target + 1) % data.num_classes;
    if (recipe.donor_class == recipe.target) throw ArgumentError("donor class must differ from the target");
    const auto donors = data.of_class(recipe.donor_class);
    if (donors.empty()) throw ArgumentError("no samples of donor class " + std::to_string(recipe.donor_class));
    recipe.donor_pool = donors.images.slice(0, 0, std::min(pool_size, donors.size())).clone();
    recipe.validate();
}

ImageSample stamp(const PoisonRecipe& recipe, const ImageSample& image, std::mt19937_64& rng) {
    const auto& x = image.pixels;
    if (x.dim() != 3 || x.sizes().vec() != recipe.image_shape)
        throw ArgumentError("stamp: image shape does not match the recipe");
    return {stamp_raw(recipe, x, rng).clamp(0.0, 1.0), image.label};
}

namespace {

uint64_t row_seed(uint64_t seed, int64_t row) {
    uint64_t z = seed + 0x9e3779b97f4a7c15ull * static_cast<uint64_t>(row + 1);
    z = (z ^ (z >> 30)) * 0xbf58476d1ce4e5b9ull;
    z = (z ^ (z >> 27)) * 0x94d049bb133111ebull;
    return z ^ (z >> 31);
}

torch::Tensor stamp_rows(const PoisonRecipe& recipe, const torch::Tensor& images, uint64_t seed) {
    if (images.dim() != 4 || images.sizes().slice(1).vec() != recipe.image_shape)
        throw ArgumentError("stamp_batch: batch shape does not match the recipe");
    if (input_independent(recipe.kind)) return stamp_constant(recipe, images);
    std::vector<torch::Tensor> rows;
    rows.reserve(static_cast<size_t>(images.size(0)));
    for (int64_t i = 0; i < images.size(0); ++i) {
        std::mt19937_64 rng(row_seed(seed, i));
        rows.push_back(stamp_raw(recipe, images[i], rng));
    }
    if (rows.empty()) return images.clone();
    return torch::stack(rows);
}

/// Injected stamp exposed through the trigger interface.
class StampTrigger : public TriggerFunction {
public:
    StampTrigger(PoisonRecipe recipe, uint64_t seed) : recipe_(std::move(recipe)), seed_(seed) {}

    TriggerKind kind() const override {
        switch (recipe_.kind) {
        case AttackKind::warp:
        case AttackKind::filter: return TriggerKind::pervasive;
        default: return TriggerKind::localized;
        }
    }
    torch::Tensor apply_unclamped(const torch::Tensor& x) const override {
        return stamp_rows(recipe_, x, seed_);
    }
    std::vector<torch::Tensor> parameters() const override { return {}; }
    std::unique_ptr<TriggerFunction> clone() const override {
        return std::make_unique<StampTrigger>(recipe_, seed_);
    }
    nlohmann::json describe(TensorMap&) const override {
        throw ContractError("injected stamps are stored as recipes, not trigger archives");
    }

private:
    PoisonRecipe recipe_;
    uint64_t seed_;
};

}  // namespace

torch::Tensor stamp_batch(const PoisonRecipe& recipe, const torch::Tensor& images, uint64_t seed) {
    return stamp_rows(recipe, images, seed).clamp(0.0, 1.0);
}

std::unique_ptr<TriggerFunction> as_trigger(const PoisonRecipe& recipe, uint64_t seed) {
    const auto c = recipe.image_shape[0], h = recipe.image_shape[1], w = recipe.image_shape[2];
    switch (recipe.kind) {
    case AttackKind::patch: {
        const auto full = place_patch(recipe, torch::zeros({c, h, w}), h - recipe.patch_height - 1,
                                      w - recipe.patch_width - 1);
        return std::make_unique<LocalizedTrigger>(LocalizedTrigger::constant(recipe.mask, full));
    }
    case AttackKind::blend:
        return std::make_unique<LocalizedTrigger>(
            LocalizedTrigger::constant(torch::full({h, w}, recipe.options.alpha), recipe.pattern));
    case AttackKind::reflection:
        return std::make_unique<LocalizedTrigger>(
            LocalizedTrigger::constant(torch::full({h, w}, recipe.options.reflection_alpha), recipe.pattern));
    default: return std::make_unique<StampTrigger>(recipe, seed);
    }
}

PoisonedData make_poisoned_dataset(const Dataset& data, const PoisonRecipe& recipe, uint64_t seed) {
    recipe.validate();
    PoisonedData out{data, {}};
    out.data.images = data.images.clone();
    out.data.labels = data.labels.clone();
    if (recipe.poison_rate == 0.0) return out;

    const auto count = static_cast<int64_t>(std::llround(recipe.poison_rate * static_cast<double>(data.size())));
    if (count < 1)
        throw ArgumentError("poison rate " + std::to_string(recipe.poison_rate) + " selects no sample of " +
                            std::to_string(data.size()));

    PoisonRecipe r = recipe;
    if (r.kind == AttackKind::composite && (!r.donor_pool.defined() || r.donor_pool.size(0) == 0))
        attach_donors(r, data);

    std::vector<int64_t> candidates;
    const auto labels = data.labels.contiguous();
    const auto* lab = labels.data_ptr<int64_t>();
    for (int64_t i = 0; i < data.size(); ++i)
        if (lab[i] != r.target && (r.kind != AttackKind::composite || lab[i] != r.donor_class))
            candidates.push_back(i);
    if (static_cast<int64_t>(candidates.size()) < count)
        throw ArgumentError("dataset has " + std::to_string(candidates.size()) + " eligible samples, " +
                            std::to_string(count) + " needed");

    std::mt19937_64 rng(seed);
    std::shuffle(candidates.begin(), candidates.end(), rng);
    candidates.resize(static_cast<size_t>(count));
    std::sort(candidates.begin(), candidates.end());

    const auto index = torch::tensor(candidates, torch::kLong);
    const auto stamped = stamp_batch(r, data.images.index_select(0, index), seed ^ 0x5eedull);
    out.data.images.index_copy_(0, index, stamped.to(out.data.images.dtype()));
    out.data.labels.index_fill_(0, index, r.target);
    out.poison_index = std::move(candidates);
    return out;
}

BackdoorTrainResult train_backdoored_model(const zoo::DatasetSplits& data, const PoisonRecipe& recipe,
                                           const std::string& architecture,
                                           const zoo::TrainConfig& config, uint64_t seed,
                                           const BackdoorTrainOptions& options) {
    PoisonRecipe r = recipe;
    if (r.kind == AttackKind::composite) attach_donors(r, data.train);

    auto poisoned = make_poisoned_dataset(data.train, r, seed);
    zoo::DatasetSplits splits{poisoned.data, data.validation, data.test};
    auto trained = zoo::train_classifier(architecture, splits, config, seed,
                                         "poisoned:" + to_string(r.kind));

    BackdoorTrainResult result;
    result.clean_accuracy = trained.accuracy;
    result.model = std::move(trained.model);

    auto victims = data.test.excluding_class(r.target);
    if (r.kind == AttackKind::composite) victims = victims.excluding_class(r.donor_class);
    const auto stamped = stamp_batch(r, victims.images, seed + 7);
    result.injected_asr =
        (result.model->predict_labels(stamped) == r.target).sum().item<double>() / static_cast<double>(victims.size());

    std::ostringstream msg;
    bool ok = trained.ok;
    if (!trained.ok) msg << trained.diagnostics << "; ";
    if (result.injected_asr < options.asr_target) {
        ok = false;
        msg << "injected ASR " << result.injected_asr << " below " << options.asr_target << " after "
            << config.epochs << " epochs; ";
    }
    if (options.reference_accuracy && *options.reference_accuracy - result.clean_accuracy > options.max_accuracy_drop) {
        ok = false;
        msg << "clean accuracy " << result.clean_accuracy << " dropped more than " << options.max_accuracy_drop
            << " below the clean twin's " << *options.reference_accuracy << "; ";
    }
    result.ok = ok;
    result.diagnostics = msg.str();
    return result;
}

// ---------------------------------------------------------------------------

nlohmann::json ReferenceBounds::to_json() const {
    return {{"l0_fraction", l0_fraction}, {"composite_fraction", composite_fraction},
            {"warp_l2", warp_l2},         {"warp_l2_max", warp_l2_max},
            {"linf", linf},               {"feature_l2", feature_l2},
            {"frequency_l1", frequency_l1}};
}

ReferenceBounds ReferenceBounds::from_json(const nlohmann::json& j) {
    ReferenceBounds b;
    b.l0_fraction = j.value("l0_fraction", b.l0_fraction);
    b.composite_fraction = j.value("composite_fraction", b.composite_fraction);
    b.warp_l2 = j.at("warp_l2");
    b.warp_l2_max = j.value("warp_l2_max", b.warp_l2);
    b.linf = j.value("linf", b.linf);
    b.feature_l2 = j.at("feature_l2");
    b.frequency_l1 = j.at("frequency_l1");
    return b;
}

ReferenceBounds calibrate_reference_bounds(const Dataset& reference, const zoo::EncoderPair& encoder,
                                           uint64_t seed) {
    if (reference.empty()) throw ArgumentError("calibration needs reference images");
    const std::vector<int64_t> shape{reference.channels(), reference.height(), reference.width()};
    torch::NoGradGuard no_grad;
    ReferenceBounds bounds;

    const auto warp = as_trigger(make_recipe(AttackKind::warp, 0, 0.0, seed, shape));
    RegulationSpec l2{RegulationSpace::pixel, Metric::l2, 1.0};
    const auto warp_distance = regulation_distance(*warp, reference.images, l2);
    bounds.warp_l2 = warp_distance.exact;
    bounds.warp_l2_max = warp_distance.per_sample.max().item<double>();

    const auto filter = as_trigger(make_recipe(AttackKind::filter, 0, 0.0, seed, shape));
    RegulationSpec feature{RegulationSpace::feature, Metric::l2, 1.0, Projection::encoder, encoder.id};
    bounds.feature_l2 = regulation_distance(*filter, reference.images, feature, &encoder).exact;
    RegulationSpec frequency{RegulationSpace::frequency, Metric::l1, 1.0, Projection::dft};
    bounds.frequency_l1 = regulation_distance(*filter, reference.images, frequency).exact;
    return bounds;
}

void export_examples(const PoisonRecipe& recipe, const Dataset& data, const std::filesystem::path& dir,
                     int64_t count, uint64_t seed) {
    std::filesystem::create_directories(dir);
    const auto n = std::min(count, data.size());
    const auto clean = data.images.slice(0, 0, n);
    const auto stamped = stamp_batch(recipe, clean, seed);
    for (int64_t i = 0; i < n; ++i) {
        const auto tag = to_string(recipe.kind) + "_" + std::to_string(i);
        write_png(dir / (tag + "_clean.png"), clean[i]);
        write_png(dir / (tag + "_stamped.png"), stamped[i]);
        auto diff = (stamped[i] - clean[i]).abs();
        const auto peak = diff.max().item<double>();
        write_png(dir / (tag + "_diff.png"), peak > 0 ? diff / peak : diff);
    }
}

}  // namespace nbscan::attacks
