#include "nbscan/zoo.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <iomanip>
#include <mutex>
#include <numeric>
#include <numbers>
#include <random>
#include <sstream>

#include "nbscan/png_io.hpp"

namespace nbscan::zoo {

namespace fs = std::filesystem;
namespace F = torch::nn::functional;

// ---------------------------------------------------------------------------
// Synthetic shapes
// ---------------------------------------------------------------------------

namespace {

constexpr int64_t kShapeClasses = 10;

struct Rgb {
    double r, g, b;
};

bool inside_shape(int64_t shape, double u, double v) {
    const double r = std::sqrt(u * u + v * v);
    const double au = std::abs(u);
    const double av = std::abs(v);
    switch (shape) {
    case 0:  // disk
        return r <= 1.0;
    case 1:  // square
        return std::max(au, av) <= 0.8;
    case 2: {  // triangle with vertices (0,-1), (0.87,0.5), (-0.87,0.5)
        if (v > 0.5) return false;
        const double half_width = (v + 1.0) / 1.5 * 0.87;
        return v >= -1.0 && au <= half_width;
    }
    case 3:  // ring
        return r <= 1.0 && r >= 0.55;
    case 4:  // plus
        return (au <= 0.28 && av <= 1.0) || (av <= 0.28 && au <= 1.0);
    case 5: {  // diagonal cross
        const double p = (u + v) * std::numbers::sqrt2 / 2.0;
        const double q = (u - v) * std::numbers::sqrt2 / 2.0;
        return (std::abs(p) <= 0.28 && std::abs(q) <= 1.05) ||
               (std::abs(q) <= 0.28 && std::abs(p) <= 1.05);
    }
    case 6:  // horizontal bar
        return au <= 1.25 && av <= 0.3;
    case 7:  // vertical bar
        return av <= 1.25 && au <= 0.3;
    case 8:  // hollow frame
        return std::max(au, av) <= 0.95 && std::max(au, av) >= 0.6;
    case 9:  // twin dots
        return std::hypot(u - 0.6, v) <= 0.4 || std::hypot(u + 0.6, v) <= 0.4;
    default:
        return false;
    }
}

double max_rotation(int64_t shape) {
    switch (shape) {
    case 1: case 4: case 5: case 8: return 0.2;
    case 6: case 7: return 0.15;
    case 0: case 3: return 0.0;
    default: return std::numbers::pi;
    }
}

Dataset render_shapes(int64_t count, int64_t size, std::mt19937_64& rng, const std::string& id) {
    std::uniform_real_distribution<double> unit(0.0, 1.0);
    std::normal_distribution<double> noise(0.0, 0.025);

    std::vector<int64_t> labels(static_cast<size_t>(count));
    for (int64_t i = 0; i < count; ++i) labels[static_cast<size_t>(i)] = i % kShapeClasses;
    std::shuffle(labels.begin(), labels.end(), rng);

    const auto plane = size * size;
    std::vector<float> pixels(static_cast<size_t>(count * 3 * plane));
    const double scale = static_cast<double>(size) / 32.0;

    for (int64_t n = 0; n < count; ++n) {
        const auto shape = labels[static_cast<size_t>(n)];
        const Rgb bg0{unit(rng), unit(rng), unit(rng)};
        const Rgb bg1{unit(rng) * 0.5 + bg0.r * 0.5, unit(rng) * 0.5 + bg0.g * 0.5,
                      unit(rng) * 0.5 + bg0.b * 0.5};
        Rgb fg{};
        for (int attempt = 0; attempt < 64; ++attempt) {
            fg = {unit(rng), unit(rng), unit(rng)};
            const double dr = fg.r - (bg0.r + bg1.r) / 2.0;
            const double dg = fg.g - (bg0.g + bg1.g) / 2.0;
            const double db = fg.b - (bg0.b + bg1.b) / 2.0;
            if (std::sqrt(dr * dr + dg * dg + db * db) >= 0.45) break;
        }
        const double direction = unit(rng) * 2.0 * std::numbers::pi;
        const double cx = (10.0 + unit(rng) * 12.0) * scale;
        const double cy = (10.0 + unit(rng) * 12.0) * scale;
        const double extent = (6.0 + unit(rng) * 3.5) * scale;
        const double angle = (unit(rng) * 2.0 - 1.0) * max_rotation(shape);
        const double ca = std::cos(angle);
        const double sa = std::sin(angle);

        float* out = pixels.data() + n * 3 * plane;
        for (int64_t y = 0; y < size; ++y) {
            for (int64_t x = 0; x < size; ++x) {
                const double t = 0.5 + 0.5 * (std::cos(direction) * (x - size / 2.0) +
                                              std::sin(direction) * (y - size / 2.0)) /
                                           static_cast<double>(size);
                const double dx = (x + 0.5 - cx) / extent;
                const double dy = (y + 0.5 - cy) / extent;
                const double u = ca * dx + sa * dy;
                const double v = -sa * dx + ca * dy;
                const bool on = inside_shape(shape, u, v);
                const Rgb base{bg0.r * (1 - t) + bg1.r * t, bg0.g * (1 - t) + bg1.g * t,
                               bg0.b * (1 - t) + bg1.b * t};
                const Rgb c = on ? fg : base;
                const auto at = y * size + x;
                out[at] = static_cast<float>(std::clamp(c.r + noise(rng), 0.0, 1.0));
                out[plane + at] = static_cast<float>(std::clamp(c.g + noise(rng), 0.0, 1.0));
                out[2 * plane + at] = static_cast<float>(std::clamp(c.b + noise(rng), 0.0, 1.0));
            }
        }
    }

    Dataset data;
    data.images = torch::from_blob(pixels.data(), {count, 3, size, size}, torch::kFloat).clone();
    data.labels = torch::tensor(labels, torch::kLong);
    data.num_classes = kShapeClasses;
    data.id = id;
    return data;
}

}  // namespace

DatasetSplits synthetic_shapes(uint64_t seed, const ShapesOptions& options) {
    const std::string id = "synthetic-shapes-10";
    std::mt19937_64 train_rng(seed * 3 + 11);
    std::mt19937_64 val_rng(seed * 3 + 12);
    std::mt19937_64 test_rng(seed * 3 + 13);
    return {render_shapes(options.train, options.image_size, train_rng, id),
            render_shapes(options.validation, options.image_size, val_rng, id),
            render_shapes(options.test, options.image_size, test_rng, id)};
}

DatasetSplits ingest_directory(const fs::path& root, uint64_t seed) {
    if (!fs::is_directory(root)) throw IngestionError("dataset directory not found: " + root.string());

    std::vector<std::string> classes;
    const auto listing = root / "classes.txt";
    if (fs::exists(listing)) {
        std::ifstream in(listing);
        for (std::string line; std::getline(in, line);) {
            line.erase(line.find_last_not_of(" \t\r\n") + 1);
            if (!line.empty()) classes.push_back(line);
        }
    } else {
        for (const auto& entry : fs::directory_iterator(root))
            if (entry.is_directory()) classes.push_back(entry.path().filename().string());
        std::sort(classes.begin(), classes.end());
    }
    if (classes.empty()) throw IngestionError("no class folders under " + root.string());

    std::vector<torch::Tensor> images;
    std::vector<int64_t> labels;
    for (size_t label = 0; label < classes.size(); ++label) {
        const auto folder = root / classes[label];
        if (!fs::is_directory(folder))
            throw IngestionError("class folder missing: " + folder.string());
        std::vector<fs::path> files;
        for (const auto& entry : fs::directory_iterator(folder))
            if (entry.is_regular_file() && entry.path().extension() == ".png")
                files.push_back(entry.path());
        std::sort(files.begin(), files.end());
        if (files.empty()) throw IngestionError("class folder has no PNG files: " + folder.string());
        for (const auto& file : files) {
            auto image = read_png(file);
            if (!images.empty() && image.sizes() != images.front().sizes())
                throw IngestionError("image size differs from the first image: " + file.string());
            images.push_back(std::move(image));
            labels.push_back(static_cast<int64_t>(label));
        }
    }

    Dataset all;
    all.images = torch::stack(images);
    all.labels = torch::tensor(labels, torch::kLong);
    all.num_classes = static_cast<int64_t>(classes.size());
    all.id = "small-natural-" + std::to_string(classes.size());

    std::vector<int64_t> order(labels.size());
    std::iota(order.begin(), order.end(), 0);
    std::mt19937_64 rng(seed);
    std::shuffle(order.begin(), order.end(), rng);
    const auto n = static_cast<int64_t>(order.size());
    const auto n_val = n / 13;
    const auto n_test = 2 * n / 13;
    const auto n_train = n - n_val - n_test;
    auto slice = [&](int64_t from, int64_t to) {
        return all.subset(std::vector<int64_t>(order.begin() + from, order.begin() + to));
    };
    return {slice(0, n_train), slice(n_train, n_train + n_val), slice(n_train + n_val, n)};
}

DatasetSplits provision_dataset(const std::string& id, uint64_t seed, const fs::path& directory) {
    if (id == "synthetic-shapes-10") return synthetic_shapes(seed);
    if (id == "small-natural-10") {
        if (directory.empty())
            throw ConfigurationError("small-natural-10 needs a dataset directory");
        return ingest_directory(directory, seed);
    }
    throw ConfigurationError("unknown dataset id '" + id + "'");
}

void export_directory(const Dataset& data, const fs::path& root) {
    fs::create_directories(root);
    std::ofstream listing(root / "classes.txt");
    for (int64_t c = 0; c < data.num_classes; ++c) {
        const auto name = "class_" + std::to_string(c);
        listing << name << "\n";
        fs::create_directories(root / name);
    }
    for (int64_t i = 0; i < data.size(); ++i) {
        const auto label = data.labels[i].item<int64_t>();
        std::ostringstream file;
        file << std::setw(6) << std::setfill('0') << i << ".png";
        write_png(root / ("class_" + std::to_string(label)) / file.str(), data.images[i]);
    }
}

std::string split_hash(const Dataset& data) {
    uint64_t hash = 1469598103934665603ULL;
    auto mix = [&hash](const void* bytes, size_t count) {
        const auto* p = static_cast<const unsigned char*>(bytes);
        for (size_t i = 0; i < count; ++i) {
            hash ^= p[i];
            hash *= 1099511628211ULL;
        }
    };
    if (!data.empty()) {
        const auto images = data.images.to(torch::kFloat).contiguous();
        const auto labels = data.labels.to(torch::kLong).contiguous();
        mix(images.data_ptr<float>(), static_cast<size_t>(images.numel()) * sizeof(float));
        mix(labels.data_ptr<int64_t>(), static_cast<size_t>(labels.numel()) * sizeof(int64_t));
    }
    std::ostringstream out;
    out << std::hex << std::setw(16) << std::setfill('0') << hash;
    return out.str();
}

// ---------------------------------------------------------------------------
// Training configuration
// ---------------------------------------------------------------------------

nlohmann::json TrainConfig::to_json() const {
    return {{"batch_size", batch_size},       {"epochs", epochs},
            {"learning_rate", learning_rate}, {"weight_decay", weight_decay},
            {"optimizer", optimizer},         {"scheduler", scheduler},
            {"accuracy_floor", accuracy_floor}};
}

TrainConfig TrainConfig::from_json(const nlohmann::json& j) {
    TrainConfig c;
    c.batch_size = j.value("batch_size", c.batch_size);
    c.epochs = j.value("epochs", c.epochs);
    c.learning_rate = j.value("learning_rate", c.learning_rate);
    c.weight_decay = j.value("weight_decay", c.weight_decay);
    c.optimizer = j.value("optimizer", c.optimizer);
    c.scheduler = j.value("scheduler", c.scheduler);
    c.accuracy_floor = j.value("accuracy_floor", c.accuracy_floor);
    if (c.batch_size <= 0) throw ConfigurationError("batch_size must be positive");
    if (c.epochs < 0) throw ConfigurationError("epochs must be non-negative");
    if (c.optimizer != "adam" && c.optimizer != "sgd")
        throw ConfigurationError("optimizer must be adam or sgd");
    if (c.scheduler != "none" && c.scheduler != "step" && c.scheduler != "cosine")
        throw ConfigurationError("scheduler must be none, step or cosine");
    return c;
}

// ---------------------------------------------------------------------------
// Architectures
// ---------------------------------------------------------------------------

namespace {

class ConvBlockImpl : public torch::nn::Module {
public:
    ConvBlockImpl(int64_t in, int64_t out, int64_t stride = 1, bool separable = false) {
        if (separable) {
            depthwise_ = register_module(
                "depthwise",
                torch::nn::Conv2d(torch::nn::Conv2dOptions(in, in, 3).padding(1).groups(in).bias(false)));
            conv_ = register_module("pointwise",
                                    torch::nn::Conv2d(torch::nn::Conv2dOptions(in, out, 1).bias(false)));
        } else {
            conv_ = register_module(
                "conv",
                torch::nn::Conv2d(torch::nn::Conv2dOptions(in, out, 3).stride(stride).padding(1).bias(false)));
        }
        bn_ = register_module("bn", torch::nn::BatchNorm2d(out));
    }
    torch::Tensor forward(torch::Tensor x) {
        if (depthwise_) x = depthwise_->forward(x);
        return torch::relu(bn_->forward(conv_->forward(x)));
    }

private:
    torch::nn::Conv2d depthwise_{nullptr}, conv_{nullptr};
    torch::nn::BatchNorm2d bn_{nullptr};
};
TORCH_MODULE(ConvBlock);

class PlainNet : public Classifier {
public:
    PlainNet(int64_t in_channels, int64_t num_classes) : Classifier(48, num_classes) {
        layers_ = register_module(
            "layers", torch::nn::Sequential(ConvBlock(in_channels, 16), torch::nn::MaxPool2d(2),
                                            ConvBlock(16, 32), torch::nn::MaxPool2d(2),
                                            ConvBlock(32, 48)));
    }
    std::string architecture() const override { return "plain"; }

protected:
    torch::Tensor body(const torch::Tensor& x) override { return layers_->forward(x); }

private:
    torch::nn::Sequential layers_{nullptr};
};

class ResidualBlockImpl : public torch::nn::Module {
public:
    explicit ResidualBlockImpl(int64_t channels) {
        conv1_ = register_module("conv1", torch::nn::Conv2d(torch::nn::Conv2dOptions(channels, channels, 3).padding(1).bias(false)));
        bn1_ = register_module("bn1", torch::nn::BatchNorm2d(channels));
        conv2_ = register_module("conv2", torch::nn::Conv2d(torch::nn::Conv2dOptions(channels, channels, 3).padding(1).bias(false)));
        bn2_ = register_module("bn2", torch::nn::BatchNorm2d(channels));
    }
    torch::Tensor forward(const torch::Tensor& x) {
        auto y = torch::relu(bn1_->forward(conv1_->forward(x)));
        return torch::relu(x + bn2_->forward(conv2_->forward(y)));
    }

private:
    torch::nn::Conv2d conv1_{nullptr}, conv2_{nullptr};
    torch::nn::BatchNorm2d bn1_{nullptr}, bn2_{nullptr};
};
TORCH_MODULE(ResidualBlock);

class ResidualNet : public Classifier {
public:
    ResidualNet(int64_t in_channels, int64_t num_classes) : Classifier(32, num_classes) {
        layers_ = register_module(
            "layers", torch::nn::Sequential(ConvBlock(in_channels, 16), torch::nn::MaxPool2d(2),
                                            ResidualBlock(16), ConvBlock(16, 32, 2),
                                            ResidualBlock(32)));
    }
    std::string architecture() const override { return "residual"; }

protected:
    torch::Tensor body(const torch::Tensor& x) override { return layers_->forward(x); }

private:
    torch::nn::Sequential layers_{nullptr};
};

class SeparableNet : public Classifier {
public:
    SeparableNet(int64_t in_channels, int64_t num_classes) : Classifier(64, num_classes) {
        layers_ = register_module(
            "layers", torch::nn::Sequential(ConvBlock(in_channels, 16), torch::nn::MaxPool2d(2),
                                            ConvBlock(16, 32, 1, true), torch::nn::MaxPool2d(2),
                                            ConvBlock(32, 64, 1, true),
                                            ConvBlock(64, 64, 1, true)));
    }
    std::string architecture() const override { return "separable"; }

protected:
    torch::Tensor body(const torch::Tensor& x) override { return layers_->forward(x); }

private:
    torch::nn::Sequential layers_{nullptr};
};

// Parameter initialisation draws from the global torch generator.
std::mutex& init_mutex() {
    static std::mutex m;
    return m;
}

}  // namespace

std::vector<std::string> architectures() { return {"plain", "residual", "separable"}; }

std::shared_ptr<Classifier> make_architecture(const std::string& id, int64_t num_classes,
                                              int64_t in_channels) {
    std::shared_ptr<Classifier> net;
    if (id == "plain") net = std::make_shared<PlainNet>(in_channels, num_classes);
    else if (id == "residual") net = std::make_shared<ResidualNet>(in_channels, num_classes);
    else if (id == "separable") net = std::make_shared<SeparableNet>(in_channels, num_classes);
    else throw ConfigurationError("unknown architecture '" + id + "'");
    net->eval();
    return net;
}

int64_t parameter_count(const torch::nn::Module& module) {
    int64_t total = 0;
    for (const auto& p : module.parameters()) total += p.numel();
    return total;
}

// ---------------------------------------------------------------------------
// Training
// ---------------------------------------------------------------------------

void fit(Classifier& net, const Dataset& train, const TrainConfig& config, uint64_t seed) {
    if (train.empty()) throw ArgumentError("fit: empty training set");
    if (config.epochs == 0) return;
    auto params = net.parameters();
    std::unique_ptr<torch::optim::Optimizer> optimizer;
    if (config.optimizer == "sgd")
        optimizer = std::make_unique<torch::optim::SGD>(
            params, torch::optim::SGDOptions(config.learning_rate)
                        .momentum(0.9)
                        .weight_decay(config.weight_decay));
    else
        optimizer = std::make_unique<torch::optim::Adam>(
            params, torch::optim::AdamOptions(config.learning_rate).weight_decay(config.weight_decay));

    auto generator = make_generator(seed);
    const auto n = train.size();
    const auto dtype = params.front().scalar_type();
    for (int64_t epoch = 0; epoch < config.epochs; ++epoch) {
        double lr = config.learning_rate;
        if (config.scheduler == "cosine")
            lr = config.learning_rate * 0.5 *
                 (1.0 + std::cos(std::numbers::pi * static_cast<double>(epoch) /
                                 static_cast<double>(config.epochs)));
        else if (config.scheduler == "step")
            lr = config.learning_rate * (epoch >= config.epochs * 3 / 4 ? 0.01
                                         : epoch >= config.epochs / 2 ? 0.1
                                                                      : 1.0);
        for (auto& group : optimizer->param_groups()) group.options().set_lr(lr);

        net.train();
        const auto order = torch::randperm(n, generator, torch::kLong);
        for (int64_t start = 0; start < n; start += config.batch_size) {
            const auto idx = order.slice(0, start, std::min(n, start + config.batch_size));
            if (idx.size(0) < 2) continue;  // batch norm needs two samples
            const auto x = train.images.index_select(0, idx).to(dtype);
            const auto y = train.labels.index_select(0, idx);
            optimizer->zero_grad();
            auto loss = F::cross_entropy(net.forward(x), y);
            loss.backward();
            optimizer->step();
        }
    }
    net.eval();
}

TrainResult train_classifier(const std::string& architecture, const DatasetSplits& data,
                             const TrainConfig& config, uint64_t seed,
                             const std::string& provenance) {
    std::shared_ptr<Classifier> net;
    {
        std::lock_guard lock(init_mutex());
        torch::manual_seed(seed);
        net = make_architecture(architecture, data.train.num_classes, data.train.channels());
    }
    fit(*net, data.train, config, seed + 1);

    ClassifierHandle handle{net, {}};
    handle.meta.architecture = architecture;
    handle.meta.dataset = data.train.id;
    handle.meta.seed = seed;
    handle.meta.provenance = provenance;
    handle.meta.training_config = config.to_json().dump();
    handle.meta.accuracy = evaluate_accuracy(handle, data.test);

    TrainResult result;
    result.accuracy = handle.meta.accuracy;
    result.ok = functionality_ok(result.accuracy, config.accuracy_floor);
    if (!result.ok) {
        std::ostringstream msg;
        msg << architecture << ": held-out accuracy " << result.accuracy << " below floor "
            << config.accuracy_floor << " after " << config.epochs << " epochs";
        result.diagnostics = msg.str();
    }
    result.model = std::move(handle);
    return result;
}

namespace {

std::string serialize_module(const torch::nn::Module& module) {
    torch::serialize::OutputArchive archive;
    module.save(archive);
    std::ostringstream out;
    archive.save_to(out);
    return out.str();
}

void deserialize_module(torch::nn::Module& module, const std::string& bytes) {
    torch::serialize::InputArchive archive;
    std::istringstream in(bytes);
    archive.load_from(in);
    module.load(archive);
}

}  // namespace

ClassifierHandle clone(const ClassifierHandle& model) {
    auto net = make_architecture(model.net->architecture(), model.net->num_classes(),
                                 model.net->parameters().front().size(1));
    net->to(model.net->parameters().front().scalar_type());
    deserialize_module(*net, serialize_module(*model.net));
    net->eval();
    return {net, model.meta};
}

ClassifierHandle clone_as(const ClassifierHandle& model, torch::Dtype dtype) {
    auto copy = clone(model);
    copy.net->to(dtype);
    return copy;
}

void save_bundle(const ClassifierHandle& model, const fs::path& path) {
    if (!path.parent_path().empty()) fs::create_directories(path.parent_path());
    {
        torch::serialize::OutputArchive archive;
        model.net->save(archive);
        archive.save_to(path.string() + ".pt");
    }
    nlohmann::json sidecar = {{"architecture", model.meta.architecture},
                              {"dataset", model.meta.dataset},
                              {"accuracy", model.meta.accuracy},
                              {"seed", model.meta.seed},
                              {"provenance", model.meta.provenance},
                              {"num_classes", model.net->num_classes()},
                              {"in_channels", model.net->parameters().front().size(1)},
                              {"training_config", model.meta.training_config}};
    std::ofstream out(path.string() + ".json");
    if (!out) throw IoError("cannot write " + path.string() + ".json");
    out << sidecar.dump(2) << "\n";
}

ClassifierHandle load_bundle(const fs::path& path) {
    std::ifstream in(path.string() + ".json");
    if (!in) throw IoError("cannot read " + path.string() + ".json");
    const auto sidecar = nlohmann::json::parse(in);
    ClassifierHandle handle;
    handle.meta.architecture = sidecar.at("architecture");
    handle.meta.dataset = sidecar.at("dataset");
    handle.meta.accuracy = sidecar.at("accuracy");
    handle.meta.seed = sidecar.at("seed");
    handle.meta.provenance = sidecar.at("provenance");
    handle.meta.training_config = sidecar.value("training_config", "");
    handle.net = make_architecture(handle.meta.architecture, sidecar.at("num_classes"),
                                   sidecar.value("in_channels", 3));
    torch::serialize::InputArchive archive;
    archive.load_from(path.string() + ".pt");
    handle.net->load(archive);
    handle.net->eval();
    return handle;
}

// ---------------------------------------------------------------------------
// Autoencoder
// ---------------------------------------------------------------------------

Autoencoder::Autoencoder(int64_t channels, int64_t width, int64_t latent_channels, int64_t stride)
    : channels_(channels), width_(width), latent_channels_(latent_channels), stride_(stride) {
    using namespace torch::nn;
    if (stride != 1 && stride != 2) throw ConfigurationError("autoencoder stride must be 1 or 2");
    encoder_ = register_module(
        "encoder",
        Sequential(Conv2d(Conv2dOptions(channels, width, 3).padding(1)), ReLU(),
                   Conv2d(Conv2dOptions(width, width, stride == 2 ? 4 : 3).stride(stride).padding(1)),
                   ReLU(), Conv2d(Conv2dOptions(width, latent_channels, 3).padding(1))));
    decoder_ = register_module(
        "decoder",
        Sequential(Conv2d(Conv2dOptions(latent_channels, width, 3).padding(1)), ReLU(),
                   ConvTranspose2d(ConvTranspose2dOptions(width, width, stride == 2 ? 4 : 3)
                                       .stride(stride)
                                       .padding(1)),
                   ReLU(), Conv2d(Conv2dOptions(width, channels, 3).padding(1))));
}

torch::Tensor Autoencoder::encode(const torch::Tensor& x) { return encoder_->forward(x); }
torch::Tensor Autoencoder::decode(const torch::Tensor& z) { return decoder_->forward(z); }

std::pair<torch::Tensor, torch::Tensor> reconstruction_errors(const EncoderPair& pair,
                                                              const Dataset& data) {
    torch::NoGradGuard no_grad;
    const auto dtype = pair.net->parameters().front().scalar_type();
    std::vector<torch::Tensor> sq;
    for (int64_t start = 0; start < data.size(); start += 256) {
        const auto x = data.images.slice(0, start, std::min(data.size(), start + 256)).to(dtype);
        sq.push_back((pair.net->forward(x) - x).pow(2).flatten(1).sum(1));
    }
    const auto sum_sq = torch::cat(sq).to(torch::kDouble);
    const auto per_pixel = static_cast<double>(data.images[0].numel());
    return {(sum_sq / per_pixel).sqrt(), sum_sq.sqrt()};
}

AutoencoderResult train_autoencoder(const DatasetSplits& data, const AutoencoderConfig& config,
                                    uint64_t seed, const std::string& id) {
    std::shared_ptr<Autoencoder> net;
    {
        std::lock_guard lock(init_mutex());
        torch::manual_seed(seed);
        net = std::make_shared<Autoencoder>(data.train.channels(), config.width,
                                            config.latent_channels, config.stride);
    }
    torch::optim::Adam optimizer(net->parameters(), torch::optim::AdamOptions(config.learning_rate));
    auto generator = make_generator(seed + 1);
    const auto n = data.train.size();
    for (int64_t epoch = 0; epoch < config.epochs; ++epoch) {
        const double lr = config.learning_rate * 0.5 *
                          (1.0 + std::cos(std::numbers::pi * static_cast<double>(epoch) /
                                          static_cast<double>(config.epochs)));
        for (auto& group : optimizer.param_groups()) group.options().set_lr(lr);
        const auto order = torch::randperm(n, generator, torch::kLong);
        for (int64_t start = 0; start < n; start += config.batch_size) {
            const auto idx = order.slice(0, start, std::min(n, start + config.batch_size));
            const auto x = data.train.images.index_select(0, idx);
            optimizer.zero_grad();
            auto loss = F::mse_loss(net->forward(x), x);
            loss.backward();
            optimizer.step();
        }
    }
    net->eval();

    EncoderPair pair;
    pair.id = id;
    pair.net = net;
    pair.dataset = data.train.id;
    {
        torch::NoGradGuard no_grad;
        pair.representation_shape = net->encode(data.train.images.slice(0, 0, 1)).sizes().slice(1).vec();
    }
    const auto [rmse, l2] = reconstruction_errors(pair, data.train);
    pair.budget_rmse = rmse.pow(2).mean().sqrt().item<double>();
    pair.budget_l2 = l2.max().item<double>();

    AutoencoderResult result;
    result.ok = pair.budget_rmse <= config.rmse_ceiling;
    if (!result.ok) {
        std::ostringstream msg;
        msg << "reconstruction RMSE budget " << pair.budget_rmse << " exceeds ceiling "
            << config.rmse_ceiling;
        result.diagnostics = msg.str();
    }
    result.pair = std::move(pair);
    return result;
}

void save_encoder(const EncoderPair& pair, const fs::path& path) {
    if (!path.parent_path().empty()) fs::create_directories(path.parent_path());
    torch::serialize::OutputArchive archive;
    pair.net->save(archive);
    archive.save_to(path.string() + ".pt");
    nlohmann::json sidecar = {{"id", pair.id},
                              {"dataset", pair.dataset},
                              {"channels", pair.net->channels()},
                              {"width", pair.net->width()},
                              {"latent_channels", pair.net->latent_channels()},
                              {"stride", pair.net->stride()},
                              {"representation_shape", pair.representation_shape},
                              {"budget_rmse", pair.budget_rmse},
                              {"budget_l2", pair.budget_l2}};
    std::ofstream out(path.string() + ".json");
    if (!out) throw IoError("cannot write " + path.string() + ".json");
    out << sidecar.dump(2) << "\n";
}

EncoderPair load_encoder(const fs::path& path) {
    std::ifstream in(path.string() + ".json");
    if (!in) throw IoError("cannot read " + path.string() + ".json");
    const auto sidecar = nlohmann::json::parse(in);
    EncoderPair pair;
    pair.id = sidecar.at("id");
    pair.dataset = sidecar.value("dataset", "");
    pair.net = std::make_shared<Autoencoder>(sidecar.at("channels"), sidecar.at("width"),
                                             sidecar.at("latent_channels"),
                                             sidecar.value("stride", 2));
    torch::serialize::InputArchive archive;
    archive.load_from(path.string() + ".pt");
    pair.net->load(archive);
    pair.net->eval();
    pair.representation_shape = sidecar.at("representation_shape").get<std::vector<int64_t>>();
    pair.budget_rmse = sidecar.at("budget_rmse");
    pair.budget_l2 = sidecar.at("budget_l2");
    return pair;
}

namespace {

struct Registry {
    std::mutex mutex;
    std::map<std::string, EncoderPair> pairs;
};

Registry& registry() {
    static Registry r;
    return r;
}

}  // namespace

void register_encoder(const EncoderPair& pair) {
    if (pair.id.empty() || !pair.net) throw ConfigurationError("encoder pair needs an id and a network");
    // Registered projectors are read-only during scanning.
    for (auto& p : pair.net->parameters()) p.requires_grad_(false);
    std::lock_guard lock(registry().mutex);
    registry().pairs[pair.id] = pair;
}

EncoderPair find_encoder(const std::string& id) {
    std::lock_guard lock(registry().mutex);
    const auto it = registry().pairs.find(id);
    if (it == registry().pairs.end())
        throw ConfigurationError("encoder '" + id + "' is not registered");
    return it->second;
}

bool has_encoder(const std::string& id) {
    std::lock_guard lock(registry().mutex);
    return registry().pairs.count(id) > 0;
}

}  // namespace nbscan::zoo
