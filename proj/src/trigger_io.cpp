#include <cstring>
#include <fstream>

#include "nbscan/triggers.hpp"

namespace nbscan {

namespace {

constexpr char kMagic[8] = {'N', 'B', 'T', 'R', 'I', 'G', '0', '1'};

std::string dtype_name(torch::ScalarType type) {
    switch (type) {
    case torch::kFloat: return "float32";
    case torch::kDouble: return "float64";
    case torch::kLong: return "int64";
    default: throw ArgumentError("unsupported tensor dtype in trigger archive");
    }
}

torch::ScalarType dtype_from(const std::string& name) {
    if (name == "float32") return torch::kFloat;
    if (name == "float64") return torch::kDouble;
    if (name == "int64") return torch::kLong;
    throw IoError("unknown dtype '" + name + "' in trigger archive");
}

torch::Tensor trainable(const torch::Tensor& t) { return t.detach().clone().requires_grad_(true); }

void load_generator_parameters(Generator& net, const TensorMap& tensors, const std::string& prefix) {
    torch::NoGradGuard no_grad;
    for (auto& p : net.named_parameters()) {
        const auto it = tensors.find(prefix + p.key());
        if (it == tensors.end()) throw IoError("trigger archive lacks tensor " + prefix + p.key());
        p.value().set_data(it->second.clone());
    }
}

std::shared_ptr<Generator> restore_generator(const nlohmann::json& config, const TensorMap& tensors,
                                             const std::string& prefix) {
    if (config.value("type", "") != "conv") throw IoError("unsupported generator type in archive");
    auto net = std::make_shared<ConvGenerator>(config.at("in_channels"), config.at("out_channels"),
                                               config.at("hidden"), config.at("layers"),
                                               config.value("coords", false));
    load_generator_parameters(*net, tensors, prefix);
    return net;
}

const torch::Tensor& need(const TensorMap& tensors, const std::string& name) {
    const auto it = tensors.find(name);
    if (it == tensors.end()) throw IoError("trigger archive lacks tensor " + name);
    return it->second;
}

}  // namespace

nlohmann::json spec_to_json(const RegulationSpec& spec) {
    return {{"space", to_string(spec.space)},
            {"metric", to_string(spec.metric)},
            {"bound", spec.bound},
            {"projection", to_string(spec.projection)},
            {"encoder_id", spec.encoder_id},
            {"loss_scale", spec.loss_scale},
            {"loss_power", spec.loss_power}};
}

RegulationSpec spec_from_json(const nlohmann::json& j) {
    RegulationSpec spec;
    spec.space = parse_space(j.at("space").get<std::string>());
    spec.metric = parse_metric(j.at("metric").get<std::string>());
    spec.bound = j.at("bound");
    spec.projection = parse_projection(j.value("projection", std::string("identity")));
    spec.encoder_id = j.value("encoder_id", std::string());
    spec.loss_scale = j.value("loss_scale", 1.0);
    spec.loss_power = j.value("loss_power", 2.0);
    spec.validate();
    return spec;
}

void save_trigger(const std::filesystem::path& path, const TriggerFunction& trigger,
                  const RegulationSpec& spec, const nlohmann::json& extra) {
    TensorMap tensors;
    nlohmann::json header;
    header["kind"] = to_string(trigger.kind());
    header["trigger"] = trigger.describe(tensors);
    header["spec"] = spec_to_json(spec);
    header["extra"] = extra;

    std::vector<torch::Tensor> blobs;
    uint64_t offset = 0;
    nlohmann::json table = nlohmann::json::array();
    for (const auto& [name, tensor] : tensors) {
        auto blob = tensor.detach().contiguous().cpu();
        const auto bytes = static_cast<uint64_t>(blob.numel()) * blob.element_size();
        table.push_back({{"name", name},
                         {"dtype", dtype_name(blob.scalar_type())},
                         {"shape", blob.sizes().vec()},
                         {"offset", offset},
                         {"bytes", bytes}});
        offset += bytes;
        blobs.push_back(std::move(blob));
    }
    header["tensors"] = table;

    if (!path.parent_path().empty()) std::filesystem::create_directories(path.parent_path());
    std::ofstream out(path, std::ios::binary);
    if (!out) throw IoError("cannot write trigger archive " + path.string());
    const auto text = header.dump();
    const uint64_t length = text.size();
    out.write(kMagic, sizeof(kMagic));
    out.write(reinterpret_cast<const char*>(&length), sizeof(length));
    out.write(text.data(), static_cast<std::streamsize>(text.size()));
    for (const auto& blob : blobs)
        out.write(static_cast<const char*>(blob.data_ptr()),
                  static_cast<std::streamsize>(blob.numel() * blob.element_size()));
    if (!out) throw IoError("failed writing trigger archive " + path.string());
}

StoredTrigger load_trigger(const std::filesystem::path& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw IoError("cannot read trigger archive " + path.string());
    char magic[sizeof(kMagic)];
    uint64_t length = 0;
    in.read(magic, sizeof(magic));
    in.read(reinterpret_cast<char*>(&length), sizeof(length));
    if (!in || std::memcmp(magic, kMagic, sizeof(kMagic)) != 0)
        throw IoError("not a trigger archive: " + path.string());
    std::string text(length, '\0');
    in.read(text.data(), static_cast<std::streamsize>(length));
    const auto header = nlohmann::json::parse(text);

    TensorMap tensors;
    for (const auto& entry : header.at("tensors")) {
        const auto shape = entry.at("shape").get<std::vector<int64_t>>();
        auto tensor = torch::empty(shape, torch::TensorOptions().dtype(dtype_from(entry.at("dtype"))));
        const auto bytes = entry.at("bytes").get<uint64_t>();
        if (bytes != static_cast<uint64_t>(tensor.numel()) * tensor.element_size())
            throw IoError("tensor size mismatch in trigger archive " + path.string());
        in.read(static_cast<char*>(tensor.data_ptr()), static_cast<std::streamsize>(bytes));
        if (!in) throw IoError("truncated trigger archive " + path.string());
        tensors[entry.at("name")] = tensor;
    }

    StoredTrigger stored;
    stored.spec = spec_from_json(header.at("spec"));
    stored.extra = header.value("extra", nlohmann::json::object());
    const auto kind = header.at("kind").get<std::string>();
    const auto& desc = header.at("trigger");

    if (kind == "localized") {
        MaskSource mask;
        const auto mask_source = desc.at("mask").at("source").get<std::string>();
        if (mask_source == "fixed") mask = FixedMask{need(tensors, "mask.values")};
        else if (mask_source == "logits") mask = LogitMask{trainable(need(tensors, "mask.logits"))};
        else mask = GeneratedMask{restore_generator(desc.at("mask").at("config"), tensors, "mask.net.")};

        PatternSource pattern;
        const auto pattern_source = desc.at("pattern").at("source").get<std::string>();
        if (pattern_source == "fixed") pattern = FixedPattern{need(tensors, "pattern.values")};
        else if (pattern_source == "logits")
            pattern = LogitPattern{trainable(need(tensors, "pattern.logits"))};
        else if (pattern_source == "generator")
            pattern = GeneratedPattern{
                restore_generator(desc.at("pattern").at("config"), tensors, "pattern.net.")};
        else
            pattern = DonorPattern{need(tensors, "pattern.pool"),
                                   trainable(need(tensors, "pattern.weight_logits")),
                                   desc.at("pattern").value("donor_class", int64_t{-1})};
        const auto mode = desc.value("mask_mode", "smooth") == "binary" ? MaskMode::binary
                                                                         : MaskMode::smooth;
        stored.trigger = std::make_unique<LocalizedTrigger>(std::move(mask), std::move(pattern), mode);
    } else if (kind == "pervasive") {
        auto pair = zoo::find_encoder(desc.at("encoder_id"));
        stored.trigger = std::make_unique<PervasiveTrigger>(std::move(pair), need(tensors, "conv.weight"),
                                                            need(tensors, "conv.bias"));
    } else if (kind == "frequency") {
        if (desc.value("mask", "logits") == "fixed")
            stored.trigger = std::make_unique<FrequencyTrigger>(FrequencyTrigger::with_mask(
                need(tensors, "mask.values"), need(tensors, "pattern.real"), need(tensors, "pattern.imag")));
        else
            stored.trigger = std::make_unique<FrequencyTrigger>(
                need(tensors, "mask.logits"), need(tensors, "pattern.real"), need(tensors, "pattern.imag"));
    } else {
        throw IoError("unknown trigger kind '" + kind + "' in " + path.string());
    }
    return stored;
}

}  // namespace nbscan
