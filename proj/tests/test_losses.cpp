#include "nbscan/losses.hpp"
#include "oracles.hpp"

#include "doctest_torch.hpp"

using namespace nbscan;

namespace {

const ClassifierHandle& double_model() {
    static const ClassifierHandle model = [] {
        const auto splits = oracle::small_splits(21, 300);
        return zoo::clone_as(oracle::quick_model(splits, "plain", 21, 1), torch::kDouble);
    }();
    return model;
}

}  // namespace

TEST_CASE("bound loss closed forms") {
    RegulationSpec s{RegulationSpace::pixel, Metric::l2, 2.5};
    s.loss_scale = 3.0;
    s.loss_power = 2.0;
    CHECK(bound_loss(0.0, s) == 0.0);
    CHECK(std::abs(bound_loss(2.5, s) - 3.0) <= 1e-9);
    s.loss_scale = 1.0;
    CHECK(std::abs(bound_loss(5.0, s) - 4.0) <= 1e-9);
    for (double d : {0.1, 0.7, 1.9, 4.4}) {
        s.loss_power = 3.0;
        CHECK(bound_loss(d, s) == doctest::Approx(oracle::bound_loss(d, 2.5, 1.0, 3.0)).epsilon(1e-12));
        CHECK(bound_loss(torch::tensor(d, torch::kDouble), s).item<double>() ==
              doctest::Approx(oracle::bound_loss(d, 2.5, 1.0, 3.0)).epsilon(1e-12));
    }
    s.bound = 0.0;
    CHECK_THROWS_AS(bound_loss(1.0, s), ConfigurationError);
}

TEST_CASE("lambda controller steps after five consecutive observations") {
    LambdaController c(1e-3, 0.8);
    for (int i = 0; i < 4; ++i) CHECK(c.update(0.9) == 1e-3);
    CHECK(c.update(0.9) == doctest::Approx(1.5e-3));
    // a below-floor step resets the streak
    for (int i = 0; i < 4; ++i) c.update(0.9);
    c.update(0.1);
    CHECK(c.value() == doctest::Approx(1.5e-3));
    for (int i = 0; i < 4; ++i) c.update(0.1);
    CHECK(c.value() == doctest::Approx(1e-3));
    LambdaController low(2e-5, 0.8);
    for (int i = 0; i < 50; ++i) low.update(0.0);
    CHECK(low.value() == doctest::Approx(1e-5));
}

TEST_CASE("distances are averaged independently of batch order") {
    auto g = make_generator(22);
    const auto x = torch::rand({7, 3, 8, 8}, g, torch::kDouble);
    const auto t = LocalizedTrigger::from_logits(torch::randn({8, 8}, g, torch::kDouble),
                                                 torch::randn({3, 8, 8}, g, torch::kDouble));
    RegulationSpec l2{RegulationSpace::pixel, Metric::l2, 1.0};
    const auto perm = torch::randperm(7, g, torch::kLong);
    const auto a = regulation_distance(t, x, l2);
    const auto b = regulation_distance(t, x.index_select(0, perm), l2);
    CHECK(a.exact == b.exact);
    double manual = 0.0;
    const auto diff = t.apply_unclamped(x) - x;
    for (int64_t i = 0; i < 7; ++i) manual += diff[i].pow(2).sum().sqrt().item<double>();
    CHECK(a.exact == doctest::Approx(manual / 7.0).epsilon(1e-12));
}

TEST_CASE("L0 surrogate approaches the exact count for saturated masks") {
    auto logits = torch::full({8, 8}, -20.0, torch::kDouble);
    logits.slice(0, 0, 2).fill_(20.0);  // 16 positions on
    const auto t = LocalizedTrigger::from_logits(logits, torch::zeros({3, 8, 8}, torch::kDouble));
    const auto d = regulation_distance(t, torch::rand({2, 3, 8, 8}, torch::kDouble),
                                       {RegulationSpace::pixel, Metric::l0, 16.0});
    CHECK(d.value.item<double>() == doctest::Approx(16.0).epsilon(1e-6));
    // smooth masks are never exactly zero, so the exact count includes every position
    CHECK(d.exact == 64.0);

    const auto binary = LocalizedTrigger::from_logits(logits, torch::zeros({3, 8, 8}, torch::kDouble),
                                                      MaskMode::binary);
    const auto db = regulation_distance(binary, torch::rand({2, 3, 8, 8}, torch::kDouble),
                                        {RegulationSpace::pixel, Metric::l0, 16.0});
    CHECK(db.exact == 16.0);
}

TEST_CASE("unsupported space and template pairs are rejected") {
    const auto pair = oracle::untrained_encoder("test-ae-unsupported", 4);
    PervasiveTrigger p(pair, PervasiveTrigger::identity_kernel(pair.net->latent_channels()),
                       torch::zeros({pair.net->latent_channels()}));
    CHECK_THROWS_AS(regulation_distance(p, torch::rand({1, 3, 32, 32}), {RegulationSpace::pixel, Metric::l0, 1.0}),
                    UnsupportedCombination);
    const auto t = LocalizedTrigger::constant(torch::zeros({4, 4}), torch::zeros({3, 4, 4}));
    CHECK_THROWS_AS(regulation_distance(t, torch::rand({1, 3, 4, 4}),
                                        {RegulationSpace::frequency, Metric::l2, 1.0, Projection::dft}),
                    UnsupportedCombination);
}

TEST_CASE("exploitation loss is the mean target cross-entropy") {
    const auto& model = double_model();
    auto g = make_generator(23);
    const auto x = torch::rand({5, 3, 32, 32}, g, torch::kDouble);
    const auto t = LocalizedTrigger::constant(torch::zeros({32, 32}, torch::kDouble),
                                              torch::zeros({3, 32, 32}, torch::kDouble));
    const auto loss = exploitation_loss(model, t, x, 4).item<double>();
    const auto logits = model.logits(x);
    double manual = 0.0;
    for (int64_t i = 0; i < 5; ++i) {
        double lse = 0.0;
        for (int64_t k = 0; k < logits.size(1); ++k) lse += std::exp(logits[i][k].item<double>());
        manual += std::log(lse) - logits[i][4].item<double>();
    }
    CHECK(loss == doctest::Approx(manual / 5.0).epsilon(1e-10));
}

TEST_CASE("objective gradients agree with central differences") {
    const auto& model = double_model();
    auto g = make_generator(24);
    const auto x = torch::rand({3, 3, 32, 32}, g, torch::kDouble);
    const ObjectiveConfig cfg{0.5, 0.8};
    int failures = 0, probes = 0;
    auto run = [&](const TriggerFunction& t, const RegulationSpec& spec, const zoo::EncoderPair* enc, uint64_t seed) {
        const auto stats = oracle::probe_gradients(
            [&] { return total_objective(model, t, x, 2, spec, cfg, enc).total; }, t.parameters(), 20, seed, 1e-4,
            1e-6, 1e-8);
        failures += stats.failures;
        probes += stats.probes;
        INFO("worst relative error " << stats.worst_relative);
        CHECK(stats.failures == 0);
    };
    auto smooth = LocalizedTrigger::from_logits(torch::randn({32, 32}, g, torch::kDouble) - 1.0,
                                                torch::randn({3, 32, 32}, g, torch::kDouble));
    run(smooth, {RegulationSpace::pixel, Metric::l1, 40.0}, nullptr, 1);
    run(smooth, {RegulationSpace::pixel, Metric::l2, 3.0}, nullptr, 2);
    run(smooth, {RegulationSpace::pixel, Metric::l0, 50.0}, nullptr, 3);

    FrequencyTrigger freq(torch::randn({1, 3, 32, 32}, g, torch::kDouble) - 3.0,
                          torch::randn({1, 3, 32, 32}, g, torch::kDouble),
                          torch::randn({1, 3, 32, 32}, g, torch::kDouble));
    run(freq, {RegulationSpace::frequency, Metric::l1, 0.05, Projection::dft}, nullptr, 4);

    const auto pair = oracle::untrained_encoder("test-ae-grad", 5, torch::kDouble);
    const auto channels = pair.net->latent_channels();
    PervasiveTrigger perv(pair,
                          PervasiveTrigger::identity_kernel(channels, torch::kDouble) +
                              0.05 * torch::randn({channels, channels, 3, 3}, g, torch::kDouble),
                          0.01 * torch::randn({channels}, g, torch::kDouble));
    run(perv, {RegulationSpace::feature, Metric::l2, 2.0, Projection::encoder, pair.id}, &pair, 5);
    CHECK(probes == 100);
    CHECK(failures == 0);
}
