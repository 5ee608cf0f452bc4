#include "nbscan/core.hpp"
#include "oracles.hpp"

#include "doctest_torch.hpp"

using namespace nbscan;

TEST_CASE("metric distances match hand-computed values") {
    const auto a = torch::tensor({0.0, 0.5, 1.0, 0.25});
    const auto b = torch::tensor({0.0, 0.0, 0.5, 1.0});
    CHECK(metric_distance(a, b, Metric::l0) == 3.0);
    CHECK(metric_distance(a, b, Metric::l1) == doctest::Approx(0.5 + 0.5 + 0.75));
    CHECK(metric_distance(a, b, Metric::l2) == doctest::Approx(std::sqrt(0.25 + 0.25 + 0.5625)));
    CHECK(metric_distance(a, b, Metric::linf) == doctest::Approx(0.75));
    CHECK(metric_distance(a, a, Metric::l2) == 0.0);
    CHECK_THROWS_AS(metric_distance(a, torch::zeros({3}), Metric::l1), ArgumentError);
}

TEST_CASE("verdict validity is inclusive on both thresholds") {
    BackdoorVerdict v;
    v.asr = 0.8;
    v.regulation_distance = 10.0;
    CHECK(validate_verdict(v, 10.0, 0.8));
    v.regulation_distance = 10.0 + 1e-9;
    CHECK_FALSE(validate_verdict(v, 10.0, 0.8));
    v.regulation_distance = 1.0;
    v.asr = 0.79;
    CHECK_FALSE(validate_verdict(v, 10.0, 0.8));
}

TEST_CASE("regulation spec pairing rules") {
    RegulationSpec s{RegulationSpace::feature, Metric::l2, 1.0, Projection::encoder, ""};
    CHECK_THROWS_AS(s.validate(), ConfigurationError);
    s.encoder_id = "e";
    CHECK_NOTHROW(s.validate());
    RegulationSpec f{RegulationSpace::frequency, Metric::l1, 1.0, Projection::identity};
    CHECK_THROWS_AS(f.validate(), ConfigurationError);
    RegulationSpec p{RegulationSpace::pixel, Metric::l0, 1.0};
    p.loss_power = 1.0;
    CHECK_THROWS_AS(p.validate(), ConfigurationError);
}

TEST_CASE("dataset subsets and eligibility") {
    Dataset d;
    d.images = torch::rand({6, 3, 4, 4});
    d.labels = torch::tensor({0, 1, 2, 1, 0, 2}, torch::kLong);
    d.num_classes = 3;
    CHECK(d.of_class(1).size() == 2);
    CHECK(d.excluding_class(0).size() == 4);
    CHECK(eligible_samples(d, 0, std::nullopt).size() == 4);
    CHECK(eligible_samples(d, 0, 2).size() == 2);
    CHECK(eligible_samples(d, 2, 2).size() == 0);
    const auto both = Dataset::concat(d.of_class(0), d.of_class(2));
    CHECK(both.size() == 4);
    CHECK(torch::equal(both.labels, torch::tensor({0, 0, 2, 2}, torch::kLong)));
}

TEST_CASE("seeded generators reproduce draws") {
    auto g1 = make_generator(42), g2 = make_generator(42), g3 = make_generator(43);
    const auto a = torch::randn({16}, g1);
    CHECK(torch::equal(a, torch::randn({16}, g2)));
    CHECK_FALSE(torch::equal(a, torch::randn({16}, g3)));
}

TEST_CASE("attack success rate counts eligible samples mapped to the target") {
    const auto splits = oracle::small_splits(1, 200);
    const auto model = oracle::quick_model(splits, "plain", 1, 1);
    // the identity trigger maps exactly the samples the model already calls `target`
    const int64_t target = 3;
    const auto eligible = eligible_samples(splits.test, target, std::nullopt);
    const auto predicted = model.predict_labels(eligible.images);
    const double expected = (predicted == target).sum().item<double>() / static_cast<double>(eligible.size());
    CHECK(attack_success_rate(model, [](const torch::Tensor& x) { return x; }, splits.test, target) == expected);
    Dataset only_target = splits.test.of_class(target);
    CHECK_THROWS_AS(attack_success_rate(model, [](const torch::Tensor& x) { return x; }, only_target, target),
                    ArgumentError);
}
