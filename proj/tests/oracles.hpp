#pragma once

// Independent reference computations for the tests.  Nothing here calls the
// code under test except for building fixtures.

#include <complex>
#include <functional>
#include <vector>

#include <torch/torch.h>

#include "nbscan/core.hpp"
#include "nbscan/zoo.hpp"

namespace oracle {

using Grid = std::vector<std::vector<std::complex<double>>>;

/// Textbook O(H^2 W^2) DFT of an H x W grid.  `inverse` uses exp(+i...) and
/// divides by H*W.
Grid dft(const Grid& x, bool inverse);
Grid to_grid(const torch::Tensor& hw);          // real or complex H x W tensor
double max_abs_diff(const Grid& a, const torch::Tensor& b);

/// Central difference of `f` along one coordinate of `param` (modified in
/// place and restored).
double central_difference(const std::function<double()>& f, torch::Tensor& param, int64_t flat_index,
                          double eps);

struct ProbeStats {
    int probes = 0;
    int failures = 0;
    double worst_relative = 0.0;
};

/// Compares autograd gradients of `loss` against central differences at
/// `count` random coordinates spread over `params`.  A probe fails when
/// |g - fd| > rel * max(|g|, |fd|) + abs_floor.
ProbeStats probe_gradients(const std::function<torch::Tensor()>& loss, std::vector<torch::Tensor> params,
                           int count, uint64_t seed, double rel, double eps = 1e-6, double abs_floor = 1e-10);

/// Mean silhouette by the definition, with explicit loops.
double silhouette(const std::vector<std::vector<double>>& points, const std::vector<int64_t>& labels);

/// k * (d / beta)^b written out directly.
double bound_loss(double d, double beta, double k, double b);

/// Two-sided 95% normal-approximation interval half-width for a binomial rate.
double binomial_halfwidth(double p, int64_t n);

// Fixtures

/// Small synthetic splits for fast tests.
nbscan::zoo::DatasetSplits small_splits(uint64_t seed, int64_t train = 400, int64_t image_size = 32);

/// A classifier of `architecture` trained briefly on `splits` (no accuracy floor).
nbscan::ClassifierHandle quick_model(const nbscan::zoo::DatasetSplits& splits, const std::string& architecture,
                                     uint64_t seed, int64_t epochs = 2);

/// Splits with 2000 training images and a plain model trained on them to
/// roughly 85% accuracy.  Built once per process.
struct TrainedFixture {
    nbscan::zoo::DatasetSplits splits;
    nbscan::ClassifierHandle model;
};
const TrainedFixture& trained_fixture();

/// Untrained autoencoder registered under `id`, converted to `dtype`.
nbscan::zoo::EncoderPair untrained_encoder(const std::string& id, uint64_t seed, torch::Dtype dtype = torch::kFloat);

}  // namespace oracle
