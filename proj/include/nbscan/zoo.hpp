#pragma once

#include <filesystem>
#include <map>
#include <memory>
#include <optional>
#include <string>
#include <vector>

#include <json.hpp>

#include "nbscan/core.hpp"

namespace nbscan::zoo {

// ---------------------------------------------------------------------------
// Datasets
// ---------------------------------------------------------------------------

struct DatasetSplits {
    Dataset train;
    Dataset validation;
    Dataset test;
};

struct ShapesOptions {
    int64_t train = 5000;
    int64_t validation = 500;
    int64_t test = 1000;
    int64_t image_size = 32;
};

/// Ten shape classes (disk, square, triangle, ring, plus, cross, horizontal
/// bar, vertical bar, frame, twin dots) drawn in random colours over noisy
/// gradient backgrounds.  Classes are exactly balanced in every split.
DatasetSplits synthetic_shapes(uint64_t seed, const ShapesOptions& options = {});

/// Loads `root/<class>/*.png`.  If `root/classes.txt` exists it fixes the
/// class order and every listed folder must be present; otherwise all
/// subdirectories are used in sorted order.  Splits keep the 10:1:2 ratio.
DatasetSplits ingest_directory(const std::filesystem::path& root, uint64_t seed);

/// `synthetic-shapes-10` or `small-natural-10` (the latter reads `directory`).
DatasetSplits provision_dataset(const std::string& id, uint64_t seed,
                                const std::filesystem::path& directory = {});

/// Writes a dataset in the ingest layout (one folder of PNGs per class).
void export_directory(const Dataset& data, const std::filesystem::path& root);

/// Hex digest over image bytes and labels; equal digests mean identical splits.
std::string split_hash(const Dataset& data);

// ---------------------------------------------------------------------------
// Classifiers
// ---------------------------------------------------------------------------

/// The learning-procedure factors a training run exposes.
struct TrainConfig {
    int64_t batch_size = 64;
    int64_t epochs = 8;
    double learning_rate = 2e-3;
    double weight_decay = 0.0;
    std::string optimizer = "adam";   // adam | sgd
    std::string scheduler = "cosine"; // none | step | cosine
    double accuracy_floor = kDefaultAccuracyFloor;

    nlohmann::json to_json() const;
    static TrainConfig from_json(const nlohmann::json& j);
};

std::vector<std::string> architectures();
std::shared_ptr<Classifier> make_architecture(const std::string& id, int64_t num_classes,
                                              int64_t in_channels = 3);
int64_t parameter_count(const torch::nn::Module& module);

struct TrainResult {
    std::optional<ClassifierHandle> model;
    double accuracy = 0.0;
    bool ok = false;
    std::string diagnostics;
};

/// Trains on `data.train`, records accuracy on `data.test`.  Returns a
/// failure (with the model still attached) when the accuracy floor is unmet.
TrainResult train_classifier(const std::string& architecture, const DatasetSplits& data,
                             const TrainConfig& config, uint64_t seed,
                             const std::string& provenance = "clean");

/// Continues training an existing network in place.  Used by training,
/// fine-tuning and hardening.
void fit(Classifier& net, const Dataset& train, const TrainConfig& config, uint64_t seed);

/// Deep copy via an in-memory archive.
ClassifierHandle clone(const ClassifierHandle& model);
/// Deep copy converted to double precision (for gradient checks).
ClassifierHandle clone_as(const ClassifierHandle& model, torch::Dtype dtype);

/// `<path>.pt` holds the weights, `<path>.json` the metadata sidecar
/// {architecture, dataset, accuracy, seed, provenance, num_classes, training_config}.
void save_bundle(const ClassifierHandle& model, const std::filesystem::path& path);
ClassifierHandle load_bundle(const std::filesystem::path& path);

// ---------------------------------------------------------------------------
// Autoencoder / feature projector
// ---------------------------------------------------------------------------

class Autoencoder : public torch::nn::Module {
public:
    Autoencoder(int64_t channels = 3, int64_t width = 16, int64_t latent_channels = 8,
                int64_t stride = 2);

    torch::Tensor encode(const torch::Tensor& x);
    torch::Tensor decode(const torch::Tensor& z);
    torch::Tensor forward(const torch::Tensor& x) { return decode(encode(x)); }

    int64_t channels() const { return channels_; }
    int64_t width() const { return width_; }
    int64_t latent_channels() const { return latent_channels_; }
    int64_t stride() const { return stride_; }

private:
    int64_t channels_;
    int64_t width_;
    int64_t latent_channels_;
    int64_t stride_;
    torch::nn::Sequential encoder_{nullptr};
    torch::nn::Sequential decoder_{nullptr};
};

struct EncoderPair {
    std::string id;
    std::shared_ptr<Autoencoder> net;
    std::vector<int64_t> representation_shape;  // C x h x w of the latent
    /// Reconstruction RMSE over every pixel of the reference set.
    double budget_rmse = 0.0;
    /// Largest per-image reconstruction pixel L2 on the reference set.
    double budget_l2 = 0.0;
    std::string dataset;
};

struct AutoencoderConfig {
    int64_t epochs = 20;
    int64_t batch_size = 32;
    double learning_rate = 2e-3;
    int64_t width = 16;
    int64_t latent_channels = 16;
    int64_t stride = 2;
    double rmse_ceiling = 0.05;
};

struct AutoencoderResult {
    std::optional<EncoderPair> pair;
    bool ok = false;
    std::string diagnostics;
};

/// Trains on `data.train`, which is also the reference set for the certified budget.
AutoencoderResult train_autoencoder(const DatasetSplits& data, const AutoencoderConfig& config,
                                    uint64_t seed, const std::string& id = "ae-shapes");

/// Per-image reconstruction RMSE and pixel L2 over a dataset.
std::pair<torch::Tensor, torch::Tensor> reconstruction_errors(const EncoderPair& pair,
                                                              const Dataset& data);

void save_encoder(const EncoderPair& pair, const std::filesystem::path& path);
EncoderPair load_encoder(const std::filesystem::path& path);

/// Process-wide registry of named encoder pairs.  Thread-safe.
void register_encoder(const EncoderPair& pair);
/// Throws ConfigurationError for unknown ids.
EncoderPair find_encoder(const std::string& id);
bool has_encoder(const std::string& id);

}  // namespace nbscan::zoo
