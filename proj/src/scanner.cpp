#include "nbscan/scanner.hpp"

#include <algorithm>
#include <atomic>
#include <cmath>
#include <fstream>
#include <map>
#include <mutex>
#include <random>
#include <sstream>
#include <thread>

#include "nbscan/zoo.hpp"

namespace nbscan::scanner {

namespace F = torch::nn::functional;

std::string to_string(ScannerClass cls) {
    switch (cls) {
    case ScannerClass::genl0_patch: return "GenL0-patch";
    case ScannerClass::genl0_dynamic: return "GenL0-dynamic";
    case ScannerClass::genl0_inputaware: return "GenL0-inputaware";
    case ScannerClass::genl0_composite: return "GenL0-composite";
    case ScannerClass::genl2: return "GenL2";
    case ScannerClass::genlinf: return "GenLinf";
    case ScannerClass::featurel2: return "FeatureL2";
    case ScannerClass::freeb: return "FreeB";
    }
    return "?";
}

ScannerClass parse_scanner_class(std::string_view text) {
    for (auto cls : all_scanner_classes())
        if (to_string(cls) == text) return cls;
    throw ConfigurationError("unknown scanner class '" + std::string(text) + "'");
}

std::vector<ScannerClass> all_scanner_classes() {
    return {ScannerClass::genl0_patch,     ScannerClass::genl0_dynamic, ScannerClass::genl0_inputaware,
            ScannerClass::genl0_composite, ScannerClass::genl2,         ScannerClass::genlinf,
            ScannerClass::featurel2,       ScannerClass::freeb};
}

bool uses_generator(ScannerClass cls) {
    switch (cls) {
    case ScannerClass::genl0_dynamic:
    case ScannerClass::genl0_inputaware:
    case ScannerClass::genl2:
    case ScannerClass::featurel2: return true;
    default: return false;
    }
}

std::string to_string(ScanMode mode) {
    return mode == ScanMode::universal ? "universal" : "label-specific";
}

ScanMode parse_scan_mode(std::string_view text) {
    if (text == "universal") return ScanMode::universal;
    if (text == "label-specific") return ScanMode::label_specific;
    throw ConfigurationError("unknown scan mode '" + std::string(text) + "'");
}

// ---------------------------------------------------------------------------

nlohmann::json DatasetProfile::to_json() const {
    return {{"name", name},
            {"image_shape", image_shape},
            {"bounds", bounds.to_json()},
            {"encoder_id", encoder_id},
            {"constant_samples", constant_samples},
            {"generator_samples", generator_samples}};
}

DatasetProfile DatasetProfile::from_json(const nlohmann::json& j) {
    DatasetProfile p;
    p.name = j.value("name", p.name);
    p.image_shape = j.value("image_shape", p.image_shape);
    p.bounds = attacks::ReferenceBounds::from_json(j.at("bounds"));
    p.encoder_id = j.value("encoder_id", std::string());
    p.constant_samples = j.value("constant_samples", p.constant_samples);
    p.generator_samples = j.value("generator_samples", p.generator_samples);
    return p;
}

DatasetProfile DatasetProfile::cifar(const attacks::ReferenceBounds& bounds, std::string encoder_id) {
    DatasetProfile p;
    p.bounds = bounds;
    p.encoder_id = std::move(encoder_id);
    return p;
}

DatasetProfile DatasetProfile::imagenet(const attacks::ReferenceBounds& bounds, std::string encoder_id) {
    DatasetProfile p;
    p.name = "imagenet";
    p.image_shape = {3, 224, 224};
    p.bounds = bounds;
    p.encoder_id = std::move(encoder_id);
    p.constant_samples = 300;
    p.generator_samples = 1000;
    return p;
}

void ScanConfig::validate() const {
    if (mode == ScanMode::label_specific) {
        if (!victim) throw ConfigurationError("label-specific scans need a victim class");
        if (*victim == target) throw ConfigurationError("victim and target must differ");
    }
    if (target < 0) throw ConfigurationError("target must be a class index");
    if (sample_count < 2) throw ConfigurationError("a scan needs at least 2 samples");
    if (steps < 1) throw ConfigurationError("steps must be positive");
    if (!(learning_rate > 0.0)) throw ConfigurationError("learning rate must be positive");
    if (batch_size < 1 || eval_every < 1) throw ConfigurationError("batch size and eval interval must be positive");
    if (!(eval_fraction > 0.0 && eval_fraction < 1.0)) throw ConfigurationError("eval fraction must lie in (0, 1)");
    if (donor_candidates < 1) throw ConfigurationError("composite scans need at least one donor candidate");
    if ((scanner_class == ScannerClass::genl2 || scanner_class == ScannerClass::featurel2) && encoder_id.empty())
        throw ConfigurationError(to_string(scanner_class) + " needs an encoder id");
    spec.validate();
    objective.validate();
    const bool l0 = spec.space == RegulationSpace::pixel && spec.metric == Metric::l0;
    switch (scanner_class) {
    case ScannerClass::genl0_patch:
    case ScannerClass::genl0_dynamic:
    case ScannerClass::genl0_inputaware:
    case ScannerClass::genl0_composite:
        if (!l0) throw ConfigurationError(to_string(scanner_class) + " regulates pixel L0");
        break;
    case ScannerClass::genl2:
        if (spec.space != RegulationSpace::pixel || spec.metric != Metric::l2)
            throw ConfigurationError("GenL2 regulates pixel L2");
        break;
    case ScannerClass::genlinf:
        if (spec.space != RegulationSpace::pixel || spec.metric != Metric::linf)
            throw ConfigurationError("GenLinf regulates pixel Linf");
        break;
    case ScannerClass::featurel2:
        if (spec.space != RegulationSpace::feature) throw ConfigurationError("FeatureL2 regulates feature space");
        break;
    case ScannerClass::freeb:
        if (spec.space != RegulationSpace::frequency) throw ConfigurationError("FreeB regulates frequency space");
        break;
    }
}

nlohmann::json ScanConfig::to_json() const {
    return {{"scanner_class", to_string(scanner_class)},
            {"mode", to_string(mode)},
            {"target", target},
            {"victim", victim ? nlohmann::json(*victim) : nlohmann::json(nullptr)},
            {"sample_count", sample_count},
            {"steps", steps},
            {"learning_rate", learning_rate},
            {"seed", seed},
            {"spec", spec_to_json(spec)},
            {"objective", {{"lambda", objective.lambda}, {"asr_floor", objective.asr_floor}}},
            {"encoder_id", encoder_id},
            {"batch_size", batch_size},
            {"eval_every", eval_every},
            {"eval_fraction", eval_fraction},
            {"generator_hidden", generator_hidden},
            {"generator_layers", generator_layers},
            {"pretrain_steps", pretrain_steps},
            {"donor_candidates", donor_candidates}};
}

ScanConfig ScanConfig::from_json(const nlohmann::json& j) {
    ScanConfig c;
    c.scanner_class = parse_scanner_class(j.at("scanner_class").get<std::string>());
    c.mode = parse_scan_mode(j.value("mode", std::string("universal")));
    c.target = j.at("target");
    if (j.contains("victim") && !j.at("victim").is_null()) c.victim = j.at("victim").get<int64_t>();
    c.sample_count = j.value("sample_count", c.sample_count);
    c.steps = j.value("steps", c.steps);
    c.learning_rate = j.value("learning_rate", c.learning_rate);
    c.seed = j.value("seed", c.seed);
    c.spec = spec_from_json(j.at("spec"));
    if (j.contains("objective")) {
        c.objective.lambda = j.at("objective").value("lambda", c.objective.lambda);
        c.objective.asr_floor = j.at("objective").value("asr_floor", c.objective.asr_floor);
    }
    c.encoder_id = j.value("encoder_id", std::string());
    c.batch_size = j.value("batch_size", c.batch_size);
    c.eval_every = j.value("eval_every", c.eval_every);
    c.eval_fraction = j.value("eval_fraction", c.eval_fraction);
    c.generator_hidden = j.value("generator_hidden", c.generator_hidden);
    c.generator_layers = j.value("generator_layers", c.generator_layers);
    c.pretrain_steps = j.value("pretrain_steps", c.pretrain_steps);
    c.donor_candidates = j.value("donor_candidates", c.donor_candidates);
    c.validate();
    return c;
}

ScanConfig preset(ScannerClass cls, const DatasetProfile& profile, int64_t target, ScanMode mode,
                  std::optional<int64_t> victim) {
    ScanConfig c;
    c.scanner_class = cls;
    c.mode = mode;
    c.target = target;
    c.victim = victim;
    const bool generator = uses_generator(cls);
    c.sample_count = generator ? profile.generator_samples : profile.constant_samples;
    c.steps = generator ? 3000 : 1000;
    c.learning_rate = generator ? 1e-3 : 0.1;
    const auto pixels = static_cast<double>(profile.pixels());
    const auto& b = profile.bounds;
    switch (cls) {
    case ScannerClass::genl0_patch:
    case ScannerClass::genl0_dynamic:
    case ScannerClass::genl0_inputaware:
        c.spec = {RegulationSpace::pixel, Metric::l0, b.l0_fraction * pixels};
        break;
    case ScannerClass::genl0_composite:
        c.spec = {RegulationSpace::pixel, Metric::l0, b.composite_fraction * pixels};
        break;
    case ScannerClass::genl2: c.spec = {RegulationSpace::pixel, Metric::l2, b.warp_l2}; break;
    case ScannerClass::genlinf: c.spec = {RegulationSpace::pixel, Metric::linf, b.linf}; break;
    case ScannerClass::featurel2:
        if (profile.encoder_id.empty()) throw ConfigurationError("FeatureL2 needs the profile's encoder");
        c.spec = {RegulationSpace::feature, Metric::l2, b.feature_l2, Projection::encoder, profile.encoder_id};
        break;
    case ScannerClass::freeb:
        c.spec = {RegulationSpace::frequency, Metric::l1, b.frequency_l1, Projection::dft};
        break;
    }
    if (cls == ScannerClass::genl2 || cls == ScannerClass::featurel2) {
        if (profile.encoder_id.empty()) throw ConfigurationError(to_string(cls) + " needs the profile's encoder");
        c.encoder_id = profile.encoder_id;
    }
    c.validate();
    return c;
}

// ---------------------------------------------------------------------------

nlohmann::json ScanReport::to_json() const {
    return {{"scanner_class", to_string(config.scanner_class)},
            {"mode", to_string(config.mode)},
            {"target", config.target},
            {"victim", config.victim ? nlohmann::json(*config.victim) : nlohmann::json(nullptr)},
            {"asr", verdict.asr},
            {"regulation_distance", verdict.regulation_distance},
            {"exact_l0", exact_l0 ? nlohmann::json(*exact_l0) : nlohmann::json(nullptr)},
            {"bound", verdict.bound},
            {"valid", verdict.valid},
            {"steps_run", steps_run},
            {"seed", config.seed},
            {"wall_seconds", wall_seconds},
            {"trigger_path", trigger_path}};
}

nlohmann::json ScanReport::details_json() const {
    return {{"config", config.to_json()},
            {"failed", failed},
            {"diagnostics", diagnostics},
            {"best_step", best_step},
            {"in_budget_asr", in_budget_asr},
            {"evaluations", [this] {
                 auto rows = nlohmann::json::array();
                 for (const auto& e : evaluations) rows.push_back({e.step, e.asr, e.distance});
                 return rows;
             }()},
            {"loss_trace", loss_trace},
            {"surrogate_trace", surrogate_trace},
            {"exact_trace", exact_trace}};
}

SplitSamples evaluation_split(const Dataset& samples, const ScanConfig& config) {
    auto eligible = eligible_samples(samples, config.target,
                                     config.mode == ScanMode::label_specific ? config.victim : std::nullopt);
    const auto n = std::min(eligible.size(), config.sample_count);
    if (n < 2) throw ArgumentError("scan needs at least 2 eligible samples, got " + std::to_string(n));
    auto gen = make_generator(config.seed ^ 0xe5a1u);
    const auto order = torch::randperm(eligible.size(), gen, torch::kLong).slice(0, 0, n);
    const auto n_eval = std::clamp<int64_t>(std::llround(config.eval_fraction * static_cast<double>(n)), 1, n - 1);
    return {eligible.subset(order.slice(0, n_eval)), eligible.subset(order.slice(0, 0, n_eval))};
}

namespace {

struct Candidate {
    bool valid = false;
    double asr = -1.0;
    double distance = 0.0;
    int64_t step = -1;
};

// valid first, then higher ASR, then smaller distance, then the earlier step.
bool better(const Candidate& a, const Candidate& b) {
    if (a.valid != b.valid) return a.valid;
    if (a.asr != b.asr) return a.asr > b.asr;
    if (a.distance != b.distance) return a.distance < b.distance;
    return a.step < b.step;
}

double asr_on(const ClassifierHandle& model, const TriggerFunction& trigger, const Dataset& data, int64_t target) {
    torch::NoGradGuard no_grad;
    const auto predicted = model.predict_labels(trigger.apply(data.images));
    return (predicted == target).sum().item<double>() / static_cast<double>(data.size());
}

ClassifierHandle frozen_copy(const ClassifierHandle& model) {
    auto copy = zoo::clone(model);
    for (auto& p : copy.net->parameters()) p.requires_grad_(false);
    copy.net->eval();
    return copy;
}

torch::Tensor small_noise(std::vector<int64_t> shape, double mean, double sigma, uint64_t seed) {
    auto gen = make_generator(seed);
    return torch::randn(shape, gen) * sigma + mean;
}

// Last conv layer of a generator: scales its weight, sets its bias.
void set_last_layer(ConvGenerator& net, double weight_scale, double bias) {
    torch::NoGradGuard no_grad;
    auto params = net.named_parameters();
    std::string weight, last_bias;
    for (const auto& p : params) {
        if (p.key().find("weight") != std::string::npos) weight = p.key();
        if (p.key().find("bias") != std::string::npos) last_bias = p.key();
    }
    if (!weight.empty()) params[weight].mul_(weight_scale);
    if (!last_bias.empty()) params[last_bias].fill_(bias);
}

std::unique_ptr<TriggerFunction> build_trigger(const ScanConfig& c, const std::vector<int64_t>& shape) {
    const auto ch = shape[0], h = shape[1], w = shape[2];
    switch (c.scanner_class) {
    case ScannerClass::genl0_patch:
        // Logits just below zero: the binary mask starts empty and grows
        // where the straight-through gradient asks for it.
        return std::make_unique<LocalizedTrigger>(LocalizedTrigger::from_logits(
            small_noise({h, w}, -0.1, 0.02, c.seed + 1), small_noise({ch, h, w}, 0.0, 0.1, c.seed + 2),
            MaskMode::binary));
    case ScannerClass::genl0_dynamic:
    case ScannerClass::genl0_inputaware: {
        auto mask_net = make_conv_generator(ch, 1, c.seed + 1, c.generator_hidden, c.generator_layers,
                                            torch::kFloat, true);
        auto pattern_net = make_conv_generator(ch, ch, c.seed + 2, c.generator_hidden, c.generator_layers,
                                               torch::kFloat, true);
        return std::make_unique<LocalizedTrigger>(GeneratedMask{mask_net}, GeneratedPattern{pattern_net},
                                                  MaskMode::binary);
    }
    case ScannerClass::genlinf:
        return std::make_unique<LocalizedTrigger>(LocalizedTrigger::from_logits(
            small_noise({h, w}, -2.5, 0.02, c.seed + 1), small_noise({ch, h, w}, 0.0, 0.1, c.seed + 2),
            MaskMode::smooth));
    case ScannerClass::genl2:
    case ScannerClass::featurel2: {
        if (c.encoder_id.empty()) throw ConfigurationError(to_string(c.scanner_class) + " needs an encoder id");
        return std::make_unique<PervasiveTrigger>(c.encoder_id, c.seed + 1, 1e-3);
    }
    case ScannerClass::freeb:
        return std::make_unique<FrequencyTrigger>(small_noise({1, ch, h, w}, -4.0, 0.02, c.seed + 1),
                                                  torch::zeros({1, ch, h, w}), torch::zeros({1, ch, h, w}));
    case ScannerClass::genl0_composite: break;
    }
    throw ContractError("composite triggers are built per donor candidate");
}

struct Optimisation {
    std::unique_ptr<TriggerFunction> best;
    Candidate best_candidate;
    int64_t steps_run = 0;
    bool failed = false;
    std::string diagnostics;
};

Candidate evaluate(const ClassifierHandle& model, const TriggerFunction& trigger, const Dataset& eval,
                   const ScanConfig& c, int64_t step) {
    torch::NoGradGuard no_grad;
    Candidate cand;
    cand.asr = asr_on(model, trigger, eval, c.target);
    cand.distance = regulation_distance(trigger, eval.images, c.spec).exact;
    cand.step = step;
    BackdoorVerdict v;
    v.asr = cand.asr;
    v.regulation_distance = cand.distance;
    cand.valid = validate_verdict(v, c.spec.bound, c.objective.asr_floor);
    return cand;
}

// Decorrelates the masks a generator emits for different inputs while
// holding their mean density near `density`.
// Rescales the mask generator's output to a spread of kMaskLogitSpread and
// shifts it so a `fraction` of positions starts on.  Fresh generators emit
// near-zero logits, which the L0 surrogate counts as half on everywhere and
// which one step flips all at once.
constexpr double kMaskLogitSpread = 3.0;

void calibrate_mask_bias(LocalizedTrigger& trigger, const Dataset& data, double fraction) {
    const auto* gm = std::get_if<GeneratedMask>(&trigger.mask_source());
    if (!gm) return;
    auto& net = static_cast<ConvGenerator&>(*gm->net);
    set_last_layer(net, 1.0, 0.0);
    torch::NoGradGuard no_grad;
    const auto x = data.images.slice(0, 0, std::min<int64_t>(data.size(), 64));
    const auto raw = net.forward(x).flatten();
    const double spread = raw.std().item<double>();
    const double scale = spread > 0.0 ? kMaskLogitSpread / spread : 1.0;
    set_last_layer(net, scale, -scale * torch::quantile(raw, 1.0 - fraction).item<double>());
}

void pretrain_diversity(LocalizedTrigger& trigger, const Dataset& data, const ScanConfig& c, double density) {
    const auto* gm = std::get_if<GeneratedMask>(&trigger.mask_source());
    if (!gm || c.pretrain_steps <= 0) return;
    torch::optim::Adam opt(gm->net->parameters(), torch::optim::AdamOptions(c.learning_rate));
    auto gen = make_generator(c.seed + 31);
    const auto n = data.size();
    for (int64_t step = 0; step < c.pretrain_steps; ++step) {
        const auto idx = torch::randperm(n, gen, torch::kLong).slice(0, 0, std::min<int64_t>(n, 32));
        const auto x = data.images.index_select(0, idx);
        const auto soft = torch::sigmoid(gm->net->forward(x)).flatten(1);
        const auto centred = soft - soft.mean(1, true);
        const auto unit = centred / (centred.norm(2, 1, true) + 1e-8);
        const auto gram = torch::matmul(unit, unit.t());
        const auto m = static_cast<double>(soft.size(0));
        const auto correlation = (gram.sum() - gram.diagonal().sum()) / (m * (m - 1.0));
        const auto loss = correlation + 10.0 * (soft.mean() - density).pow(2);
        opt.zero_grad();
        loss.backward();
        opt.step();
    }
}

Optimisation optimise(const ClassifierHandle& model, std::unique_ptr<TriggerFunction> trigger,
                      const SplitSamples& split, const ScanConfig& c, ScanReport& report, int64_t steps) {
    Optimisation out;
    const auto params = trigger->parameters();
    std::vector<torch::optim::OptimizerParamGroup> groups;
    if (auto* freq = dynamic_cast<FrequencyTrigger*>(trigger.get())) {
        // Spectral pattern planes live on a sqrt(H*W) larger scale than the mask logits.
        const auto scale = std::sqrt(static_cast<double>(split.optimise.height() * split.optimise.width()));
        auto fp = freq->parameters();
        std::vector<torch::Tensor> mask(fp.begin(), fp.end() - 2), pattern(fp.end() - 2, fp.end());
        if (!mask.empty())
            groups.emplace_back(mask, std::make_unique<torch::optim::AdamOptions>(c.learning_rate));
        groups.emplace_back(pattern, std::make_unique<torch::optim::AdamOptions>(c.learning_rate * scale));
    } else {
        groups.emplace_back(params, std::make_unique<torch::optim::AdamOptions>(c.learning_rate));
    }
    torch::optim::Adam opt(std::move(groups), torch::optim::AdamOptions(c.learning_rate));
    LambdaController lambda(c.objective.lambda, c.objective.asr_floor);

    const auto& train = split.optimise;
    const auto n = train.size();
    const auto batch = std::min(n, c.batch_size);
    auto gen = make_generator(c.seed + 47);
    torch::Tensor order = torch::randperm(n, gen, torch::kLong);
    int64_t cursor = 0;
    const auto targets = torch::full({batch}, c.target, torch::kLong);

    auto record = [&](const Candidate& cand) {
        report.evaluations.push_back({cand.step, cand.asr, cand.distance});
        if (cand.distance <= c.spec.bound) report.in_budget_asr = std::max(report.in_budget_asr, cand.asr);
    };
    out.best_candidate = evaluate(model, *trigger, split.evaluate, c, 0);
    record(out.best_candidate);
    out.best = trigger->clone();

    for (int64_t step = 1; step <= steps; ++step) {
        if (cursor + batch > n) {
            order = torch::randperm(n, gen, torch::kLong);
            cursor = 0;
        }
        const auto x = train.images.index_select(0, order.slice(0, cursor, cursor + batch));
        cursor += batch;

        const auto logits = model.net->forward(trigger->apply(x));
        const auto ce = F::cross_entropy(logits, targets);
        const auto distance = regulation_distance(*trigger, x, c.spec);
        const auto total = ce + lambda.value() * bound_loss(distance.value, c.spec);
        const auto total_value = total.item<double>();
        if (!std::isfinite(total_value)) {
            out.failed = true;
            out.diagnostics = "non-finite objective at step " + std::to_string(step);
            break;
        }
        opt.zero_grad();
        total.backward();
        opt.step();
        out.steps_run = step;

        const auto batch_asr = (logits.argmax(1) == c.target).to(torch::kDouble).mean().item<double>();
        lambda.update(batch_asr);
        report.loss_trace.push_back(total_value);
        report.surrogate_trace.push_back(distance.value.item<double>());
        report.exact_trace.push_back(distance.exact);

        if (step % c.eval_every == 0 || step == steps) {
            const auto cand = evaluate(model, *trigger, split.evaluate, c, step);
            record(cand);
            if (better(cand, out.best_candidate)) {
                out.best_candidate = cand;
                out.best = trigger->clone();
            }
        }
    }
    return out;
}

std::vector<int64_t> image_shape(const Dataset& d) { return {d.channels(), d.height(), d.width()}; }

}  // namespace

ScanReport invert_trigger(const ClassifierHandle& model, const Dataset& samples, const ScanConfig& config) {
    const auto start = std::chrono::steady_clock::now();
    config.validate();
    ScanReport report;
    report.config = config;
    report.verdict.target = config.target;
    report.verdict.victim = config.mode == ScanMode::label_specific ? config.victim : std::nullopt;
    report.verdict.bound = config.spec.bound;

    const auto frozen = frozen_copy(model);
    const auto split = evaluation_split(samples, config);
    Optimisation result;

    try {
        if (config.scanner_class == ScannerClass::genl0_composite) {
            const auto shape = image_shape(samples);
            const auto h = shape[1], w = shape[2];
            struct Option {
                double asr;
                int64_t donor;
                int side;
                int64_t image;
            };
            std::vector<Option> options;
            std::map<int64_t, torch::Tensor> pools;
            for (int64_t d = 0; d < model.num_classes(); ++d) {
                const auto donors = samples.of_class(d);
                if (donors.empty()) continue;
                pools[d] = donors.images.slice(0, 0, std::min<int64_t>(donors.size(), 2 * kCompositeDonors)).clone();
            }
            auto half_mask = [&](int side) {
                auto m = torch::zeros({1, 1, h, w});
                if (side == 0) m.slice(3, 0, w / 2).fill_(1.0);
                else m.slice(3, w / 2, w).fill_(1.0);
                return m;
            };
            // Weights start peaked on one donor image; screening uses a one-hot mix.
            auto make = [&](int64_t donor, int side, int64_t image, double peak) {
                const auto& pool = pools.at(donor);
                auto logits = torch::zeros({pool.size(0)});
                logits[image] = peak;
                return std::make_unique<LocalizedTrigger>(FixedMask{half_mask(side)},
                                                          DonorPattern{pool, logits.requires_grad_(true), donor},
                                                          MaskMode::binary);
            };
            for (const auto& [donor, pool] : pools)
                for (int side = 0; side < 2; ++side)
                    for (int64_t i = 0; i < pool.size(0); ++i)
                        options.push_back({asr_on(frozen, *make(donor, side, i, 50.0), split.optimise, config.target),
                                           donor, side, i});
            std::stable_sort(options.begin(), options.end(),
                             [](const Option& a, const Option& b) { return a.asr > b.asr; });
            options.resize(std::min<size_t>(options.size(), static_cast<size_t>(config.donor_candidates)));
            bool first = true;
            for (const auto& opt : options) {
                auto attempt = optimise(frozen, make(opt.donor, opt.side, opt.image, 4.0), split, config, report, config.steps);
                const auto steps_before = result.steps_run;
                if (first || better(attempt.best_candidate, result.best_candidate)) {
                    attempt.steps_run += steps_before;
                    result = std::move(attempt);
                } else {
                    result.steps_run += attempt.steps_run;
                }
                first = false;
            }
        } else {
            auto trigger = build_trigger(config, image_shape(samples));
            if (config.scanner_class == ScannerClass::genl0_dynamic ||
                config.scanner_class == ScannerClass::genl0_inputaware) {
                auto& localized = static_cast<LocalizedTrigger&>(*trigger);
                const auto density =
                    0.5 * config.spec.bound / static_cast<double>(samples.height() * samples.width());
                calibrate_mask_bias(localized, split.optimise, density);
                if (config.scanner_class == ScannerClass::genl0_inputaware)
                    pretrain_diversity(localized, split.optimise, config, density);
            }
            result = optimise(frozen, std::move(trigger), split, config, report, config.steps);
        }
    } catch (const std::exception& e) {
        result.failed = true;
        result.diagnostics = e.what();
    }

    report.failed = result.failed;
    report.diagnostics = result.diagnostics;
    report.steps_run = result.steps_run;
    if (result.best) {
        report.best_step = result.best_candidate.step;
        report.verdict.asr = result.best_candidate.asr;
        report.verdict.regulation_distance = result.best_candidate.distance;
        report.verdict.valid = validate_verdict(report.verdict, config.spec.bound, config.objective.asr_floor);
        report.trigger = std::shared_ptr<const TriggerFunction>(std::move(result.best));
    }
    if (config.spec.space == RegulationSpace::pixel && config.spec.metric == Metric::l0)
        report.exact_l0 = report.verdict.regulation_distance;
    report.wall_seconds =
        std::chrono::duration<double>(std::chrono::steady_clock::now() - start).count();
    return report;
}

double reported_asr(const ClassifierHandle& model, const TriggerFunction& trigger, const Dataset& samples,
                    const ScanConfig& config) {
    const auto split = evaluation_split(samples, config);
    return asr_on(model, trigger, split.evaluate, config.target);
}

std::string report_stem(const ScanConfig& config) {
    std::string stem = to_string(config.scanner_class) + "_" + to_string(config.mode) + "_t" +
                       std::to_string(config.target);
    if (config.mode == ScanMode::label_specific && config.victim) stem += "_v" + std::to_string(*config.victim);
    return stem;
}

void save_scan(ScanReport& report, const std::filesystem::path& dir, const std::string& stem) {
    std::filesystem::create_directories(dir);
    if (report.trigger) {
        const auto archive = dir / (stem + ".nbt");
        save_trigger(archive, *report.trigger, report.config.spec,
                     {{"scanner_class", to_string(report.config.scanner_class)},
                      {"target", report.config.target},
                      {"seed", report.config.seed}});
        report.trigger_path = archive.filename().string();
    }
    auto write = [&](const std::filesystem::path& path, const nlohmann::json& j) {
        std::ofstream out(path);
        if (!out) throw IoError("cannot write " + path.string());
        out << j.dump(2) << "\n";
    };
    write(dir / (stem + ".json"), report.to_json());
    write(dir / (stem + ".details.json"), report.details_json());
}

// ---------------------------------------------------------------------------

nlohmann::json LabelPlan::to_json() const {
    nlohmann::json p = nlohmann::json::array();
    for (const auto& [t, v] : pairs) p.push_back({t, v});
    return {{"targets", targets}, {"pairs", p}};
}

LabelPlan LabelPlan::from_json(const nlohmann::json& j) {
    LabelPlan plan;
    plan.targets = j.value("targets", std::vector<int64_t>{});
    for (const auto& p : j.value("pairs", nlohmann::json::array()))
        plan.pairs.emplace_back(p.at(0).get<int64_t>(), p.at(1).get<int64_t>());
    return plan;
}

LabelPlan draw_label_plan(ScanMode mode, int64_t num_classes, uint64_t seed, int64_t count) {
    if (num_classes < 2) throw ArgumentError("label plans need at least 2 classes");
    std::mt19937_64 rng(seed);
    LabelPlan plan;
    if (mode == ScanMode::universal) {
        std::vector<int64_t> labels(static_cast<size_t>(num_classes));
        std::iota(labels.begin(), labels.end(), 0);
        std::shuffle(labels.begin(), labels.end(), rng);
        labels.resize(static_cast<size_t>(std::min(count, num_classes)));
        std::sort(labels.begin(), labels.end());
        plan.targets = labels;
    } else {
        std::vector<std::pair<int64_t, int64_t>> all;
        for (int64_t t = 0; t < num_classes; ++t)
            for (int64_t v = 0; v < num_classes; ++v)
                if (t != v) all.emplace_back(t, v);
        std::shuffle(all.begin(), all.end(), rng);
        all.resize(static_cast<size_t>(std::min<int64_t>(count, static_cast<int64_t>(all.size()))));
        std::sort(all.begin(), all.end());
        plan.pairs = all;
    }
    return plan;
}

Dataset draw_samples(const Dataset& pool, const ScanConfig& config) {
    if (pool.empty()) throw ArgumentError("scan sample pool is empty");
    auto gen = make_generator(config.seed ^ 0xd1a5u);
    Dataset drawn;
    if (config.mode == ScanMode::universal) {
        const auto n = std::min(pool.size(), config.sample_count);
        drawn = pool.subset(torch::randperm(pool.size(), gen, torch::kLong).slice(0, 0, n));
    } else {
        const auto victims = pool.of_class(*config.victim);
        const auto n = std::min(victims.size(), config.sample_count);
        drawn = victims.subset(torch::randperm(victims.size(), gen, torch::kLong).slice(0, 0, n));
    }
    if (config.scanner_class == ScannerClass::genl0_composite) {
        for (int64_t d = 0; d < pool.num_classes; ++d) {
            if (config.mode == ScanMode::label_specific && d == *config.victim) continue;
            const auto donors = pool.of_class(d);
            const auto take = std::min<int64_t>(donors.size(), kCompositeDonors);
            drawn = Dataset::concat(drawn, donors.subset(torch::randperm(donors.size(), gen, torch::kLong).slice(0, 0, take)));
        }
    }
    return drawn;
}

namespace {

uint64_t mix(uint64_t seed, uint64_t value) {
    uint64_t z = seed ^ (value + 0x9e3779b97f4a7c15ull + (seed << 6) + (seed >> 2));
    z = (z ^ (z >> 30)) * 0xbf58476d1ce4e5b9ull;
    z = (z ^ (z >> 27)) * 0x94d049bb133111ebull;
    return z ^ (z >> 31);
}

}  // namespace

std::vector<ScanReport> run_campaign(const ClassifierHandle& model, ScanMode mode, const LabelPlan& plan,
                                     const std::vector<ScannerClass>& classes, uint64_t seed,
                                     const CampaignOptions& options) {
    std::vector<ScanConfig> configs;
    for (auto cls : classes) {
        std::vector<std::pair<int64_t, std::optional<int64_t>>> labels;
        if (mode == ScanMode::universal)
            for (auto t : plan.targets) labels.emplace_back(t, std::nullopt);
        else
            for (auto [t, v] : plan.pairs) labels.emplace_back(t, v);
        for (const auto& [target, victim] : labels) {
            auto c = preset(cls, options.profile, target, mode, victim);
            c.seed = mix(mix(mix(seed, static_cast<uint64_t>(cls)), static_cast<uint64_t>(target)),
                         static_cast<uint64_t>(victim.value_or(-1)));
            if (options.steps && !uses_generator(cls)) c.steps = *options.steps;
            if (options.generator_steps && uses_generator(cls)) c.steps = *options.generator_steps;
            if (options.sample_count) c.sample_count = *options.sample_count;
            configs.push_back(c);
        }
    }

    std::vector<ScanReport> reports(configs.size());
    std::atomic<size_t> next{0};
    std::mutex io;
    auto worker = [&] {
        for (size_t i = next++; i < configs.size(); i = next++) {
            const auto& c = configs[i];
            ScanReport r;
            try {
                r = invert_trigger(model, draw_samples(options.pool, c), c);
                if (!options.out_dir.empty()) {
                    std::lock_guard lock(io);
                    save_scan(r, options.out_dir, report_stem(c));
                }
            } catch (const std::exception& e) {
                r.config = c;
                r.failed = true;
                r.diagnostics = e.what();
                r.verdict.target = c.target;
                r.verdict.bound = c.spec.bound;
            }
            reports[i] = std::move(r);
        }
    };
    const auto workers = std::max(1, std::min<int>(options.workers, static_cast<int>(configs.size())));
    std::vector<std::thread> pool;
    for (int w = 1; w < workers; ++w) pool.emplace_back(worker);
    worker();
    for (auto& t : pool) t.join();
    return reports;
}

}  // namespace nbscan::scanner
