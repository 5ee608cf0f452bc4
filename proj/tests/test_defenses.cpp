#include "nbscan/defenses.hpp"
#include "oracles.hpp"

#include "doctest_torch.hpp"

using namespace nbscan;
using namespace nbscan::defenses;

namespace {

const zoo::DatasetSplits& splits() { return oracle::trained_fixture().splits; }
const ClassifierHandle& model() { return oracle::trained_fixture().model; }

std::vector<std::vector<double>> rows(const torch::Tensor& t) {
    std::vector<std::vector<double>> out;
    const auto d = t.to(torch::kDouble).contiguous();
    for (int64_t i = 0; i < d.size(0); ++i) {
        std::vector<double> r;
        for (int64_t j = 0; j < d.size(1); ++j) r.push_back(d[i][j].item<double>());
        out.push_back(r);
    }
    return out;
}

std::vector<int64_t> labels(const torch::Tensor& t) {
    std::vector<int64_t> out;
    for (int64_t i = 0; i < t.size(0); ++i) out.push_back(t[i].item<int64_t>());
    return out;
}

}  // namespace

TEST_CASE("two separated blobs score a high silhouette; one blob does not") {
    auto g = make_generator(62);
    auto two = torch::cat({torch::randn({40, 5}, g, torch::kDouble), torch::randn({40, 5}, g, torch::kDouble) + 10.0});
    const auto k2 = kmeans(two, 2, 5, 1);
    const double s2 = silhouette(two, k2.assignment);
    CHECK(s2 >= 0.5);
    CHECK(s2 == doctest::Approx(oracle::silhouette(rows(two), labels(k2.assignment))).epsilon(1e-9));
    // the clustering recovers the blobs exactly
    CHECK((k2.assignment.slice(0, 0, 40) == k2.assignment[0]).all().item<bool>());
    CHECK((k2.assignment.slice(0, 40, 80) == k2.assignment[40]).all().item<bool>());

    const auto one = torch::randn({300, 2}, g, torch::kDouble);
    const auto k1 = kmeans(one, 2, 5, 1);
    const double s1 = silhouette(one, k1.assignment);
    CHECK(s1 < 0.5);
    CHECK(s1 == doctest::Approx(oracle::silhouette(rows(one), labels(k1.assignment))).epsilon(1e-9));
    CHECK(silhouette(one, torch::zeros({300}, torch::kLong)) == 0.0);
}

TEST_CASE("silhouette agrees with the loop definition for arbitrary labels, singletons included") {
    auto g = make_generator(63);
    const auto pts = torch::rand({25, 3}, g, torch::kDouble);
    auto assign = torch::randint(0, 3, {25}, g, torch::kLong);
    assign[0] = 3;  // singleton
    CHECK(silhouette(pts, assign) ==
          doctest::Approx(oracle::silhouette(rows(pts), labels(assign))).epsilon(1e-9));
}

TEST_CASE("uniform logits give the maximal STRIP entropy") {
    auto flat = zoo::clone(model());
    {
        torch::NoGradGuard no_grad;
        for (auto& p : flat.net->parameters()) p.zero_();
    }
    const auto e = strip_entropy(flat, splits().test.images[0], splits().validation, 3);
    CHECK(e == doctest::Approx(std::log(10.0)).epsilon(1e-6));
}

TEST_CASE("batched entropies match the single-input path") {
    const auto batch = splits().test.images.slice(0, 0, 5);
    const auto many = strip_entropies(model(), batch, splits().validation, 4);
    for (int64_t i = 0; i < 5; ++i)
        CHECK(many[i].item<double>() ==
              doctest::Approx(strip_entropy(model(), batch[i], splits().validation, 4)).epsilon(1e-6));
}

TEST_CASE("STRIP rejects small sets and empty pools") {
    const auto small = splits().test.images.slice(0, 0, 50);
    const auto enough = splits().test.images.slice(0, 0, 120);
    CHECK_THROWS_AS(strip_far(model(), small, enough, splits().validation), ArgumentError);
    CHECK_THROWS_AS(strip_far(model(), enough, small, splits().validation), ArgumentError);
    CHECK_THROWS_AS(strip_entropy(model(), enough[0], Dataset{}, 1), ArgumentError);
}

TEST_CASE("clean against clean accepts 1 - frr within the binomial interval") {
    const auto& test = splits().test;
    const auto a = test.images.slice(0, 0, 100);
    const auto b = test.images.slice(0, 100, 200);
    const auto r = strip_far(model(), a, b, splits().validation, 0.01, 5);
    CHECK(r.far >= 0.0);
    CHECK(r.far <= 1.0);
    CHECK(std::abs(r.far - 0.99) <= oracle::binomial_halfwidth(0.99, 100) + 0.02);
    // same set on both sides: only the quantile's own rows fall at or below it
    const auto self = strip_far(model(), a, a, splits().validation, 0.01, 5);
    CHECK(self.far == doctest::Approx(0.99).epsilon(0.02));
}

TEST_CASE("activation clustering is reproducible and skips small labels") {
    auto data = splits().test;
    const auto a = activation_clustering(model(), data, 7, 3);
    const auto b = activation_clustering(model(), data, 7, 3);
    CHECK(a.silhouette_by_label == b.silhouette_by_label);
    CHECK(a.silhouette_by_label.size() == 10);
    for (const auto& [label, s] : a.silhouette_by_label) {
        CHECK(s >= -1.0);
        CHECK(s <= 1.0);
    }
    const auto few = Dataset::concat(data.of_class(0), data.of_class(1).subset(torch::arange(2)));
    const auto c = activation_clustering(model(), few, 7, 3);
    CHECK(c.silhouette_by_label.count(1) == 0);
    CHECK_FALSE(c.notices.empty());
}

TEST_CASE("fine-pruning nothing leaves predictions untouched") {
    const auto r = fine_prune(model(), splits().validation, splits().test, 0.0, {}, 8);
    REQUIRE(r.ok);
    REQUIRE(r.model.has_value());
    CHECK(torch::equal(r.model->predict_labels(splits().test.images), model().predict_labels(splits().test.images)));
    CHECK(r.pruned.empty());
}

TEST_CASE("fine-pruning respects the accuracy guard") {
    const auto r = fine_prune(model(), splits().validation, splits().test, 0.3, {}, 9);
    if (r.ok) {
        REQUIRE(r.model.has_value());
        CHECK(r.accuracy_before - r.accuracy_after <= 0.02 + 1e-12);
        CHECK(r.fraction <= 0.3);
        CHECK(r.model->meta.provenance.find("+pruned:") != std::string::npos);
    } else {
        CHECK_FALSE(r.diagnostics.empty());
    }
}

TEST_CASE("defense reports publish a fixed field set") {
    DefenseReport r;
    r.defense = "strip";
    r.model_provenance = "clean";
    r.trigger_source = "injected";
    r.far = 0.1;
    r.frr = 0.01;
    const auto j = r.to_json();
    CHECK(j.size() == 11);
    CHECK(j["asr_before"].is_null());
    CHECK(DefenseReport::from_json(j).to_json() == j);
    r.far = 1.5;
    CHECK_THROWS_AS(r.validate(), ArgumentError);
}

TEST_CASE("hardening accepts only the patch and feature presets") {
    HardenConfig c;
    CHECK_NOTHROW(c.validate());
    c.preset = scanner::ScannerClass::featurel2;
    CHECK_NOTHROW(c.validate());
    c.preset = scanner::ScannerClass::freeb;
    CHECK_THROWS_AS(c.validate(), ConfigurationError);
    c.preset = scanner::ScannerClass::genl0_patch;
    c.rounds = 3;
    c.targets = {1, 2};
    CHECK(HardenConfig::from_json(c.to_json()).to_json() == c.to_json());
}

TEST_CASE("hardening never returns a model that breaks the guard") {
    static const auto pair = oracle::untrained_encoder("test-ae-harden", 64);
    const auto profile = scanner::DatasetProfile::cifar({}, pair.id);
    HardenConfig c;
    c.rounds = 1;
    c.targets = {2};
    c.scan_steps = 10;
    c.sample_count = 40;
    c.train.epochs = 1;
    const auto r = harden(model(), splits(), profile, c, 10);
    REQUIRE(r.model.has_value());
    const bool tagged = r.model->meta.provenance.find("+hardened:GenL0-patch") != std::string::npos;
    CHECK((tagged || r.rounds_completed == 0));
    CHECK(r.accuracy_before - r.accuracy_after <= 0.02 + 1e-12);
    CHECK(r.scans.size() == 1);
}
