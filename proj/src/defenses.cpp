#include "nbscan/defenses.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <numeric>

namespace nbscan::defenses {

namespace {

constexpr int64_t kChunk = 256;

torch::Tensor overlay_indices(const Dataset& pool, uint64_t seed, int64_t count) {
    auto gen = make_generator(seed ^ 0x57a1bu);
    return torch::randint(pool.size(), {count}, gen, torch::kLong);
}

void check_rate(const std::optional<double>& value, const char* name) {
    if (value && !(*value >= 0.0 && *value <= 1.0))
        throw ArgumentError(std::string(name) + " must lie in [0, 1]");
}

nlohmann::json optional_json(const std::optional<double>& value) {
    return value ? nlohmann::json(*value) : nlohmann::json(nullptr);
}

std::optional<double> optional_from(const nlohmann::json& j, const char* key) {
    if (!j.contains(key) || j.at(key).is_null()) return std::nullopt;
    return j.at(key).get<double>();
}

}  // namespace

// ---------------------------------------------------------------------------
// STRIP
// ---------------------------------------------------------------------------

torch::Tensor strip_entropies(const ClassifierHandle& model, const torch::Tensor& batch, const Dataset& clean_pool,
                              uint64_t seed, const StripOptions& options) {
    if (clean_pool.empty()) throw ArgumentError("strip: empty clean pool");
    if (options.overlays < 1) throw ArgumentError("strip: need at least one overlay");
    if (!(options.blend >= 0.0 && options.blend <= 1.0)) throw ArgumentError("strip: blend must lie in [0, 1]");
    if (batch.dim() != 4 || batch.sizes().slice(1) != clean_pool.images.sizes().slice(1))
        throw ArgumentError("strip: inputs and clean pool differ in shape");

    const auto overlays = clean_pool.images.index_select(0, overlay_indices(clean_pool, seed, options.overlays));
    const auto n = options.overlays;
    const auto rows_per_chunk = std::max<int64_t>(1, kChunk / n);
    std::vector<torch::Tensor> out;
    torch::NoGradGuard no_grad;
    for (int64_t start = 0; start < batch.size(0); start += rows_per_chunk) {
        const auto rows = batch.slice(0, start, std::min(batch.size(0), start + rows_per_chunk));
        const auto r = rows.size(0);
        // r x n superpositions, row-major
        const auto mixed = options.blend * rows.unsqueeze(1) + (1.0 - options.blend) * overlays.unsqueeze(0);
        const auto logits = model.logits(mixed.reshape({r * n, rows.size(1), rows.size(2), rows.size(3)}));
        const auto logp = torch::log_softmax(logits.to(torch::kDouble), 1);
        const auto entropy = -(logp.exp() * logp).sum(1);
        out.push_back(entropy.view({r, n}).mean(1));
    }
    return torch::cat(out);
}

double strip_entropy(const ClassifierHandle& model, const torch::Tensor& input, const Dataset& clean_pool,
                     uint64_t seed, const StripOptions& options) {
    const auto batch = input.dim() == 3 ? input.unsqueeze(0) : input;
    if (batch.size(0) != 1) throw ArgumentError("strip_entropy takes a single image");
    return strip_entropies(model, batch, clean_pool, seed, options).item<double>();
}

StripResult strip_far(const ClassifierHandle& model, const torch::Tensor& clean_set, const torch::Tensor& attack_set,
                      const Dataset& overlay_pool, double frr, uint64_t seed, const StripOptions& options) {
    if (clean_set.size(0) < kStripMinSamples || attack_set.size(0) < kStripMinSamples)
        throw ArgumentError("strip_far needs at least " + std::to_string(kStripMinSamples) +
                            " clean and attack samples");
    if (!(frr > 0.0 && frr < 1.0)) throw ArgumentError("strip_far: frr must lie in (0, 1)");
    StripResult result;
    result.frr = frr;
    result.clean_entropy = strip_entropies(model, clean_set, overlay_pool, seed, options);
    result.attack_entropy = strip_entropies(model, attack_set, overlay_pool, seed, options);
    result.threshold = torch::quantile(result.clean_entropy, frr).item<double>();
    result.far = (result.attack_entropy > result.threshold).to(torch::kDouble).mean().item<double>();
    return result;
}

// ---------------------------------------------------------------------------
// Activation clustering
// ---------------------------------------------------------------------------

KMeansResult kmeans(const torch::Tensor& points, int64_t k, int64_t restarts, uint64_t seed,
                    int64_t max_iterations) {
    if (points.dim() != 2) throw ArgumentError("kmeans: points must be N x D");
    const auto n = points.size(0);
    if (k < 1 || k > n) throw ArgumentError("kmeans: need 1 <= k <= N");
    if (restarts < 1) throw ArgumentError("kmeans: need at least one restart");
    const auto x = points.to(torch::kDouble);
    auto gen = make_generator(seed);

    KMeansResult best;
    best.inertia = std::numeric_limits<double>::infinity();
    for (int64_t r = 0; r < restarts; ++r) {
        // k-means++ seeding
        std::vector<int64_t> chosen{torch::randint(n, {1}, gen, torch::kLong).item<int64_t>()};
        while (static_cast<int64_t>(chosen.size()) < k) {
            const auto centres = x.index_select(0, torch::tensor(chosen, torch::kLong));
            const auto d2 = torch::cdist(x, centres).pow(2).amin(1);
            const auto total = d2.sum().item<double>();
            int64_t next;
            if (total <= 0.0) {
                next = torch::randint(n, {1}, gen, torch::kLong).item<int64_t>();
            } else {
                next = torch::multinomial(d2 / total, 1, false, gen).item<int64_t>();
            }
            chosen.push_back(next);
        }
        auto centroids = x.index_select(0, torch::tensor(chosen, torch::kLong)).clone();
        torch::Tensor assignment;
        for (int64_t it = 0; it < max_iterations; ++it) {
            auto next = torch::cdist(x, centroids).argmin(1);
            const bool settled = assignment.defined() && torch::equal(next, assignment);
            assignment = next;
            if (settled) break;
            for (int64_t c = 0; c < k; ++c) {
                const auto members = assignment == c;
                if (members.any().item<bool>()) centroids[c] = x.index({members}).mean(0);
            }
        }
        const auto inertia = torch::cdist(x, centroids).pow(2).gather(1, assignment.unsqueeze(1)).sum().item<double>();
        if (inertia < best.inertia) {
            best.inertia = inertia;
            best.assignment = assignment;
            best.centroids = centroids;
        }
    }
    return best;
}

double silhouette(const torch::Tensor& points, const torch::Tensor& assignment) {
    const auto n = points.size(0);
    if (assignment.size(0) != n) throw ArgumentError("silhouette: one label per point");
    const auto x = points.to(torch::kDouble);
    const auto labels = assignment.to(torch::kLong);
    const auto clusters = std::get<0>(at::_unique(labels));
    if (clusters.size(0) < 2) return 0.0;
    const auto dist = torch::cdist(x, x);

    std::vector<torch::Tensor> means;  // N per cluster: mean distance to its members
    std::vector<torch::Tensor> member;
    for (int64_t c = 0; c < clusters.size(0); ++c) {
        const auto m = (labels == clusters[c]).to(torch::kDouble);
        member.push_back(m);
        means.push_back(dist.matmul(m));
    }
    auto score = torch::zeros({n}, torch::kDouble);
    auto a = torch::zeros({n}, torch::kDouble);
    auto b = torch::full({n}, std::numeric_limits<double>::infinity(), torch::kDouble);
    auto singleton = torch::zeros({n}, torch::kBool);
    for (size_t c = 0; c < means.size(); ++c) {
        const auto count = member[c].sum().item<double>();
        const auto own = member[c] > 0.5;
        if (count > 1.0) a = torch::where(own, means[c] / (count - 1.0), a);
        else singleton = singleton | own;
        b = torch::where(own, b, torch::minimum(b, means[c] / count));
    }
    const auto denom = torch::maximum(a, b);
    score = torch::where(denom > 0, (b - a) / denom.clamp_min(1e-300), score);
    score = torch::where(singleton, torch::zeros_like(score), score);
    return score.mean().item<double>();
}

ClusteringResult activation_clustering(const ClassifierHandle& model, const Dataset& per_label_samples,
                                       uint64_t seed, int64_t restarts) {
    ClusteringResult result;
    torch::Tensor hidden;
    {
        torch::NoGradGuard no_grad;
        model.net->eval();
        std::vector<torch::Tensor> parts;
        const auto dtype = model.net->parameters().front().scalar_type();
        for (int64_t s = 0; s < per_label_samples.size(); s += kChunk)
            parts.push_back(model.net->hidden(
                per_label_samples.images.slice(0, s, std::min(per_label_samples.size(), s + kChunk)).to(dtype)));
        if (parts.empty()) return result;
        hidden = torch::cat(parts).to(torch::kDouble);
    }
    const auto labels = std::get<0>(at::_unique(per_label_samples.labels));
    for (int64_t i = 0; i < labels.size(0); ++i) {
        const auto label = labels[i].item<int64_t>();
        const auto rows = hidden.index({per_label_samples.labels == label});
        if (rows.size(0) < kClusteringMinSamples) {
            result.notices.push_back("label " + std::to_string(label) + " skipped: " +
                                     std::to_string(rows.size(0)) + " samples");
            continue;
        }
        const auto km = kmeans(rows, 2, restarts, seed + static_cast<uint64_t>(label));
        result.silhouette_by_label[label] = silhouette(rows, km.assignment);
    }
    return result;
}

// ---------------------------------------------------------------------------
// Fine-pruning
// ---------------------------------------------------------------------------

FinePruneResult fine_prune(const ClassifierHandle& model, const Dataset& clean_set, const Dataset& evaluation,
                           double prune_fraction, const FinePruneConfig& config, uint64_t seed) {
    if (!(prune_fraction >= 0.0 && prune_fraction < 1.0))
        throw ArgumentError("prune_fraction must lie in [0, 1)");
    if (clean_set.empty()) throw ArgumentError("fine_prune: empty clean set");
    FinePruneResult result;
    result.accuracy_before = evaluate_accuracy(model, evaluation);

    const auto channels = model.net->feature_channels();
    torch::Tensor activation;
    {
        torch::NoGradGuard no_grad;
        model.net->eval();
        const auto dtype = model.net->parameters().front().scalar_type();
        auto total = torch::zeros({channels}, torch::kDouble);
        for (int64_t s = 0; s < clean_set.size(); s += kChunk) {
            const auto f = model.net->features(clean_set.images.slice(0, s, std::min(clean_set.size(), s + kChunk)).to(dtype));
            total += f.to(torch::kDouble).mean({2, 3}).sum(0);
        }
        activation = total / static_cast<double>(clean_set.size());
    }
    const auto order = std::get<1>(torch::sort(activation, 0, false, true));
    std::vector<int64_t> ranking(order.data_ptr<int64_t>(), order.data_ptr<int64_t>() + channels);

    auto count = static_cast<int64_t>(std::llround(prune_fraction * static_cast<double>(channels)));
    if (count == 0) {
        result.model = zoo::clone(model);
        result.accuracy_after = result.accuracy_before;
        result.ok = true;
        return result;
    }
    count = std::min(count, channels - 1);
    while (true) {
        auto pruned = zoo::clone(model);
        {
            torch::NoGradGuard no_grad;
            for (int64_t i = 0; i < count; ++i) pruned.net->channel_mask()[ranking[i]] = 0.0;
        }
        zoo::fit(*pruned.net, clean_set, config.finetune, seed);
        pruned.net->eval();
        const auto acc = evaluate_accuracy(pruned, evaluation);
        if (acc >= result.accuracy_before - config.max_accuracy_drop - 1e-12) {
            result.fraction = static_cast<double>(count) / static_cast<double>(channels);
            result.pruned.assign(ranking.begin(), ranking.begin() + count);
            result.accuracy_after = acc;
            pruned.meta.accuracy = acc;
            char tag[32];
            std::snprintf(tag, sizeof tag, "pruned:%.3f", result.fraction);
            pruned.meta.provenance += std::string("+") + tag;
            result.model = std::move(pruned);
            result.ok = true;
            return result;
        }
        if (count == 1) {
            result.accuracy_after = acc;
            result.diagnostics = "accuracy guard violated even with a single pruned channel";
            return result;
        }
        count = std::max<int64_t>(1, count / 2);
    }
}

// ---------------------------------------------------------------------------
// Hardening
// ---------------------------------------------------------------------------

void HardenConfig::validate() const {
    if (preset != scanner::ScannerClass::genl0_patch && preset != scanner::ScannerClass::featurel2)
        throw ConfigurationError("hardening presets are GenL0-patch and FeatureL2, not " + scanner::to_string(preset));
    if (rounds < 1) throw ConfigurationError("hardening needs at least one round");
    if (scan_steps && *scan_steps < 1) throw ConfigurationError("scan_steps must be positive");
    if (!(max_accuracy_drop >= 0.0)) throw ConfigurationError("max_accuracy_drop must be >= 0");
}

nlohmann::json HardenConfig::to_json() const {
    nlohmann::json j{{"preset", scanner::to_string(preset)},
                     {"rounds", rounds},
                     {"targets", targets},
                     {"train", train.to_json()},
                     {"max_accuracy_drop", max_accuracy_drop}};
    j["scan_steps"] = scan_steps ? nlohmann::json(*scan_steps) : nlohmann::json(nullptr);
    j["sample_count"] = sample_count ? nlohmann::json(*sample_count) : nlohmann::json(nullptr);
    return j;
}

HardenConfig HardenConfig::from_json(const nlohmann::json& j) {
    HardenConfig c;
    if (j.contains("preset")) c.preset = scanner::parse_scanner_class(j.at("preset").get<std::string>());
    c.rounds = j.value("rounds", c.rounds);
    if (j.contains("targets")) c.targets = j.at("targets").get<std::vector<int64_t>>();
    if (j.contains("train")) c.train = zoo::TrainConfig::from_json(j.at("train"));
    c.max_accuracy_drop = j.value("max_accuracy_drop", c.max_accuracy_drop);
    if (j.contains("scan_steps") && !j.at("scan_steps").is_null()) c.scan_steps = j.at("scan_steps").get<int64_t>();
    if (j.contains("sample_count") && !j.at("sample_count").is_null())
        c.sample_count = j.at("sample_count").get<int64_t>();
    c.validate();
    return c;
}

HardenResult harden(const ClassifierHandle& model, const zoo::DatasetSplits& data,
                    const scanner::DatasetProfile& profile, const HardenConfig& config, uint64_t seed) {
    config.validate();
    HardenResult result;
    result.accuracy_before = evaluate_accuracy(model, data.test);
    auto targets = config.targets;
    if (targets.empty()) {
        targets.resize(static_cast<size_t>(model.num_classes()));
        std::iota(targets.begin(), targets.end(), 0);
    }

    auto current = zoo::clone(model);
    for (int64_t round = 0; round < config.rounds; ++round) {
        std::vector<std::shared_ptr<const TriggerFunction>> triggers;
        for (size_t i = 0; i < targets.size(); ++i) {
            auto c = scanner::preset(config.preset, profile, targets[i]);
            c.seed = seed + 1000 * static_cast<uint64_t>(round) + i;
            if (config.scan_steps) c.steps = *config.scan_steps;
            if (config.sample_count) c.sample_count = *config.sample_count;
            auto report = scanner::invert_trigger(current, scanner::draw_samples(data.validation, c), c);
            if (report.trigger && !report.failed) triggers.push_back(report.trigger);
            result.scans.push_back(std::move(report));
        }
        if (triggers.empty()) {
            result.failed_round = round;
            result.diagnostics = "round " + std::to_string(round) + ": no trigger could be inverted";
            break;
        }

        // stamped copies keep their true labels; row i gets trigger i mod T
        Dataset stamped = data.train;
        {
            torch::NoGradGuard no_grad;
            std::vector<torch::Tensor> parts;
            for (int64_t s = 0; s < data.train.size(); s += kChunk) {
                const auto rows = data.train.images.slice(0, s, std::min(data.train.size(), s + kChunk));
                auto out = rows.clone();
                for (size_t t = 0; t < triggers.size(); ++t) {
                    std::vector<int64_t> idx;
                    for (int64_t r = 0; r < rows.size(0); ++r)
                        if (static_cast<size_t>(s + r) % triggers.size() == t) idx.push_back(r);
                    if (idx.empty()) continue;
                    const auto sel = torch::tensor(idx, torch::kLong);
                    out.index_copy_(0, sel, triggers[t]->apply(rows.index_select(0, sel)).detach().to(out.dtype()));
                }
                parts.push_back(out);
            }
            stamped.images = torch::cat(parts);
        }
        auto candidate = zoo::clone(current);
        zoo::fit(*candidate.net, Dataset::concat(data.train, stamped), config.train, seed + 77 + round);
        candidate.net->eval();
        const auto acc = evaluate_accuracy(candidate, data.test);
        if (acc < result.accuracy_before - config.max_accuracy_drop - 1e-12) {
            result.failed_round = round;
            result.diagnostics = "round " + std::to_string(round) + ": accuracy " + std::to_string(acc) +
                                 " breaks the guard (before " + std::to_string(result.accuracy_before) + ")";
            break;
        }
        current = std::move(candidate);
        result.rounds_completed = round + 1;
    }

    result.ok = !result.failed_round.has_value();
    if (result.rounds_completed > 0) {
        current.meta.accuracy = evaluate_accuracy(current, data.test);
        current.meta.provenance += "+hardened:" + scanner::to_string(config.preset);
    }
    result.accuracy_after = evaluate_accuracy(current, data.test);
    result.model = std::move(current);
    return result;
}

// ---------------------------------------------------------------------------
// Reports
// ---------------------------------------------------------------------------

void DefenseReport::validate() const {
    check_rate(far, "far");
    check_rate(frr, "frr");
    check_rate(asr_before, "asr_before");
    check_rate(asr_after, "asr_after");
    check_rate(acc_before, "acc_before");
    check_rate(acc_after, "acc_after");
    for (const auto& [label, s] : silhouette_by_label)
        if (!(s >= -1.0 && s <= 1.0)) throw ArgumentError("silhouette must lie in [-1, 1]");
}

nlohmann::json DefenseReport::to_json() const {
    auto sil = nlohmann::json::object();
    for (const auto& [label, s] : silhouette_by_label) sil[std::to_string(label)] = s;
    return {{"defense", defense},
            {"model_provenance", model_provenance},
            {"trigger_source", trigger_source},
            {"far", optional_json(far)},
            {"frr", optional_json(frr)},
            {"silhouette_by_label", sil},
            {"asr_before", optional_json(asr_before)},
            {"asr_after", optional_json(asr_after)},
            {"acc_before", optional_json(acc_before)},
            {"acc_after", optional_json(acc_after)},
            {"seed", seed}};
}

DefenseReport DefenseReport::from_json(const nlohmann::json& j) {
    DefenseReport r;
    r.defense = j.at("defense").get<std::string>();
    r.model_provenance = j.value("model_provenance", "");
    r.trigger_source = j.value("trigger_source", "");
    r.far = optional_from(j, "far");
    r.frr = optional_from(j, "frr");
    if (j.contains("silhouette_by_label"))
        for (const auto& [key, value] : j.at("silhouette_by_label").items())
            r.silhouette_by_label[std::stoll(key)] = value.get<double>();
    r.asr_before = optional_from(j, "asr_before");
    r.asr_after = optional_from(j, "asr_after");
    r.acc_before = optional_from(j, "acc_before");
    r.acc_after = optional_from(j, "acc_after");
    r.seed = j.value("seed", uint64_t{0});
    return r;
}

}  // namespace nbscan::defenses
