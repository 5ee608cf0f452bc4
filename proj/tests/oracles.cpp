#include "oracles.hpp"

#include <cmath>
#include <numbers>
#include <random>

namespace oracle {

Grid dft(const Grid& x, bool inverse) {
    const auto h = x.size(), w = x[0].size();
    Grid out(h, std::vector<std::complex<double>>(w));
    const double sign = inverse ? 1.0 : -1.0;
    for (size_t u = 0; u < h; ++u)
        for (size_t v = 0; v < w; ++v) {
            std::complex<double> acc = 0.0;
            for (size_t r = 0; r < h; ++r)
                for (size_t c = 0; c < w; ++c) {
                    const double angle = sign * 2.0 * std::numbers::pi *
                                         (static_cast<double>(u * r) / static_cast<double>(h) +
                                          static_cast<double>(v * c) / static_cast<double>(w));
                    acc += x[r][c] * std::complex<double>(std::cos(angle), std::sin(angle));
                }
            out[u][v] = inverse ? acc / static_cast<double>(h * w) : acc;
        }
    return out;
}

Grid to_grid(const torch::Tensor& hw) {
    const auto t = hw.is_complex() ? hw.to(torch::kComplexDouble).contiguous() : hw.to(torch::kDouble).contiguous();
    Grid g(t.size(0), std::vector<std::complex<double>>(t.size(1)));
    for (int64_t r = 0; r < t.size(0); ++r)
        for (int64_t c = 0; c < t.size(1); ++c) {
            if (t.is_complex()) {
                const auto z = t[r][c].item<c10::complex<double>>();
                g[r][c] = {z.real(), z.imag()};
            } else {
                g[r][c] = t[r][c].item<double>();
            }
        }
    return g;
}

double max_abs_diff(const Grid& a, const torch::Tensor& b) {
    const auto g = to_grid(b);
    double worst = 0.0;
    for (size_t r = 0; r < a.size(); ++r)
        for (size_t c = 0; c < a[r].size(); ++c) worst = std::max(worst, std::abs(a[r][c] - g[r][c]));
    return worst;
}

double central_difference(const std::function<double()>& f, torch::Tensor& param, int64_t flat_index,
                          double eps) {
    torch::NoGradGuard no_grad;
    auto flat = param.view({-1});
    const double original = flat[flat_index].item<double>();
    flat[flat_index] = original + eps;
    const double up = f();
    flat[flat_index] = original - eps;
    const double down = f();
    flat[flat_index] = original;
    return (up - down) / (2.0 * eps);
}

ProbeStats probe_gradients(const std::function<torch::Tensor()>& loss, std::vector<torch::Tensor> params,
                           int count, uint64_t seed, double rel, double eps, double abs_floor) {
    for (auto& p : params)
        if (p.grad().defined()) p.mutable_grad().zero_();
    const auto value = loss();
    const auto grads = torch::autograd::grad({value}, params, {}, false, false, true);
    std::mt19937_64 rng(seed);
    int64_t total = 0;
    for (const auto& p : params) total += p.numel();
    std::uniform_int_distribution<int64_t> pick(0, total - 1);
    auto scalar = [&] {
        torch::NoGradGuard no_grad;
        return loss().item<double>();
    };
    ProbeStats stats;
    for (int i = 0; i < count; ++i) {
        auto k = pick(rng);
        size_t which = 0;
        while (k >= params[which].numel()) k -= params[which++].numel();
        const double g = grads[which].defined() ? grads[which].reshape({-1})[k].item<double>() : 0.0;
        const double fd = central_difference(scalar, params[which], k, eps);
        const double err = std::abs(g - fd);
        const double scale = std::max(std::abs(g), std::abs(fd));
        ++stats.probes;
        if (err > rel * scale + abs_floor) ++stats.failures;
        if (scale > 0) stats.worst_relative = std::max(stats.worst_relative, err / scale);
    }
    return stats;
}

double silhouette(const std::vector<std::vector<double>>& points, const std::vector<int64_t>& labels) {
    const auto n = points.size();
    auto dist = [&](size_t i, size_t j) {
        double s = 0.0;
        for (size_t d = 0; d < points[i].size(); ++d) s += (points[i][d] - points[j][d]) * (points[i][d] - points[j][d]);
        return std::sqrt(s);
    };
    std::vector<int64_t> clusters(labels.begin(), labels.end());
    std::sort(clusters.begin(), clusters.end());
    clusters.erase(std::unique(clusters.begin(), clusters.end()), clusters.end());
    if (clusters.size() < 2) return 0.0;
    double total = 0.0;
    for (size_t i = 0; i < n; ++i) {
        double a = 0.0, b = std::numeric_limits<double>::infinity();
        int64_t own = 0;
        for (size_t j = 0; j < n; ++j)
            if (j != i && labels[j] == labels[i]) a += dist(i, j), ++own;
        if (own == 0) continue;  // singleton scores 0
        a /= static_cast<double>(own);
        for (auto c : clusters) {
            if (c == labels[i]) continue;
            double s = 0.0;
            int64_t m = 0;
            for (size_t j = 0; j < n; ++j)
                if (labels[j] == c) s += dist(i, j), ++m;
            b = std::min(b, s / static_cast<double>(m));
        }
        const double denom = std::max(a, b);
        total += denom > 0 ? (b - a) / denom : 0.0;
    }
    return total / static_cast<double>(n);
}

double bound_loss(double d, double beta, double k, double b) { return k * std::pow(d / beta, b); }

double binomial_halfwidth(double p, int64_t n) { return 1.96 * std::sqrt(p * (1.0 - p) / static_cast<double>(n)); }

nbscan::zoo::DatasetSplits small_splits(uint64_t seed, int64_t train, int64_t image_size) {
    nbscan::zoo::ShapesOptions o;
    o.train = train;
    o.validation = 100;
    o.test = 200;
    o.image_size = image_size;
    return nbscan::zoo::synthetic_shapes(seed, o);
}

nbscan::ClassifierHandle quick_model(const nbscan::zoo::DatasetSplits& splits, const std::string& architecture,
                                     uint64_t seed, int64_t epochs) {
    nbscan::zoo::TrainConfig cfg;
    cfg.epochs = epochs;
    cfg.accuracy_floor = 0.0;
    auto r = nbscan::zoo::train_classifier(architecture, splits, cfg, seed);
    return *r.model;
}

const TrainedFixture& trained_fixture() {
    static const TrainedFixture f = [] {
        TrainedFixture out;
        out.splits = small_splits(51, 2000);
        nbscan::zoo::TrainConfig cfg;
        cfg.epochs = 10;
        cfg.accuracy_floor = 0.0;
        out.model = *nbscan::zoo::train_classifier("plain", out.splits, cfg, 51).model;
        return out;
    }();
    return f;
}

nbscan::zoo::EncoderPair untrained_encoder(const std::string& id, uint64_t seed, torch::Dtype dtype) {
    torch::manual_seed(seed);
    auto net = std::make_shared<nbscan::zoo::Autoencoder>(3, 8, 4, 2);
    net->to(dtype);
    net->eval();
    nbscan::zoo::EncoderPair pair;
    pair.id = id;
    pair.net = net;
    pair.representation_shape = {4, 16, 16};
    nbscan::zoo::register_encoder(pair);
    return pair;
}

}  // namespace oracle
