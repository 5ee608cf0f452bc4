#include <filesystem>

#include "nbscan/losses.hpp"
#include "nbscan/triggers.hpp"
#include "oracles.hpp"

#include "doctest_torch.hpp"

using namespace nbscan;
namespace fs = std::filesystem;

TEST_CASE("localized stamping: zero mask is the identity, full mask the pattern") {
    auto g = make_generator(5);
    const auto x = torch::rand({4, 3, 8, 8}, g);
    const auto pattern = torch::rand({3, 8, 8}, g);

    const auto none = LocalizedTrigger::constant(torch::zeros({8, 8}), pattern);
    CHECK(torch::equal(none.apply(x), x));
    const auto full = LocalizedTrigger::constant(torch::ones({8, 8}), pattern);
    CHECK(torch::equal(full.apply(x), pattern.unsqueeze(0).expand_as(x)));

    // half mask: stamped region equals the pattern, the rest the input
    auto m = torch::zeros({8, 8});
    m.slice(1, 0, 4).fill_(1.0);
    const auto half = LocalizedTrigger::constant(m, pattern).apply(x);
    CHECK(torch::equal(half.slice(3, 0, 4), pattern.unsqueeze(0).expand_as(x).slice(3, 0, 4)));
    CHECK(torch::equal(half.slice(3, 4, 8), x.slice(3, 4, 8)));
}

TEST_CASE("localized stamping is a convex combination for fractional masks") {
    auto g = make_generator(6);
    const auto x = torch::rand({2, 3, 5, 5}, g, torch::kDouble);
    const auto m = torch::rand({5, 5}, g, torch::kDouble);
    const auto p = torch::rand({3, 5, 5}, g, torch::kDouble);
    const auto out = LocalizedTrigger::constant(m, p).apply(x);
    const auto expected = (1 - m) * x + m * p;
    CHECK(torch::allclose(out, expected, 0, 1e-12));
}

TEST_CASE("binary masks emit hard values; soft values stay near one half") {
    auto g = make_generator(7);
    const auto t = LocalizedTrigger::from_logits(torch::randn({6, 6}, g), torch::randn({3, 6, 6}, g),
                                                 MaskMode::binary);
    const auto e = t.mask_pattern(torch::rand({2, 3, 6, 6}, g));
    CHECK(((e.mask == 0) | (e.mask == 1)).all().item<bool>());
    CHECK((e.soft - 0.5).abs().max().item<double>() <= kBinarySoftRange + 1e-12);
    // hard value is 1 exactly where the soft value is at least one half
    CHECK(torch::equal(e.mask, (e.soft >= 0.5).to(e.mask.dtype())));
}

TEST_CASE("generator contract violations are reported") {
    auto bad = make_conv_generator(3, 2, 1);  // a mask must have one channel
    LocalizedTrigger t(GeneratedMask{bad}, FixedPattern{torch::zeros({1, 3, 8, 8})});
    CHECK_THROWS_AS(t.apply(torch::rand({1, 3, 8, 8})), ContractError);
}

TEST_CASE("forward DFT matches the textbook sum") {
    auto g = make_generator(8);
    const auto x = torch::rand({6, 8}, g, torch::kDouble);
    const auto spectrum = dft(x, DftDirection::forward);
    CHECK(oracle::max_abs_diff(oracle::dft(oracle::to_grid(x), false), spectrum) <= 1e-9);
    const auto back = dft(spectrum, DftDirection::inverse);
    CHECK(oracle::max_abs_diff(oracle::dft(oracle::to_grid(spectrum), true), back) <= 1e-9);
}

TEST_CASE("DFT round trip and Parseval") {
    auto g = make_generator(9);
    const auto x = torch::rand({3, 32, 32}, g, torch::kDouble);
    const auto spectrum = dft(x, DftDirection::forward);
    const auto back = torch::real(dft(spectrum, DftDirection::inverse));
    CHECK((back - x).abs().max().item<double>() <= 1e-6);
    const double energy = x.pow(2).sum().item<double>();
    const double spectral = spectrum.abs().pow(2).sum().item<double>() / (32.0 * 32.0);
    CHECK(std::abs(energy - spectral) / energy <= 1e-6);
    CHECK_THROWS_AS(dft(torch::full({4, 4}, std::nan("")), DftDirection::forward), ArgumentError);
    CHECK_THROWS_AS(dft(x, DftDirection::inverse), ArgumentError);
}

TEST_CASE("frequency trigger: empty mask is the identity, full mask replaces the spectrum") {
    auto g = make_generator(10);
    const auto x = torch::rand({2, 3, 8, 8}, g, torch::kDouble);
    const auto zeros = torch::zeros({1, 3, 8, 8}, torch::kDouble);
    const auto identity = FrequencyTrigger::with_mask(zeros, torch::rand({1, 3, 8, 8}, g, torch::kDouble), zeros);
    CHECK((identity.apply_unclamped(x) - x).abs().max().item<double>() <= 1e-12);

    const auto y = torch::rand({1, 3, 8, 8}, g, torch::kDouble);
    const auto spec = torch::fft::fft2(y);
    const auto replace = FrequencyTrigger::with_mask(torch::ones({1, 3, 8, 8}, torch::kDouble), torch::real(spec),
                                                     torch::imag(spec));
    CHECK((replace.apply_unclamped(x) - y.expand_as(x)).abs().max().item<double>() <= 1e-12);
}

TEST_CASE("frequency L1 distance is the mean spectral change over sqrt(HW)") {
    auto g = make_generator(11);
    const auto x = torch::rand({2, 1, 4, 4}, g, torch::kDouble);
    auto m = torch::zeros({1, 1, 4, 4}, torch::kDouble);
    m[0][0][1][2] = 1.0;
    const auto re = torch::full({1, 1, 4, 4}, 3.0, torch::kDouble);
    const auto im = torch::full({1, 1, 4, 4}, -1.0, torch::kDouble);
    const auto t = FrequencyTrigger::with_mask(m, re, im);
    const auto d = regulation_distance(t, x, {RegulationSpace::frequency, Metric::l1, 1.0, Projection::dft});
    double expected = 0.0;
    for (int64_t n = 0; n < 2; ++n) {
        const auto X = oracle::dft(oracle::to_grid(x[n][0]), false);
        expected += std::abs(std::complex<double>(3.0, -1.0) - X[1][2]) / 16.0 / 4.0;
    }
    CHECK(d.exact == doctest::Approx(expected / 2.0).epsilon(1e-12));
}

TEST_CASE("pervasive identity transform reproduces the reference") {
    const auto pair = oracle::untrained_encoder("test-ae-identity", 3);
    const auto channels = pair.net->latent_channels();
    PervasiveTrigger t(pair, PervasiveTrigger::identity_kernel(channels), torch::zeros({channels}));
    auto g = make_generator(12);
    const auto x = torch::rand({2, 3, 32, 32}, g);
    CHECK(torch::allclose(t.apply_unclamped(x), t.reference(x), 0, 1e-6));
}

TEST_CASE("trigger archives round-trip bit-exactly") {
    const auto dir = fs::temp_directory_path() / "nbscan_trigger_io";
    fs::create_directories(dir);
    auto g = make_generator(13);
    const auto x = torch::rand({3, 3, 8, 8}, g);

    const auto loc = LocalizedTrigger::from_logits(torch::randn({8, 8}, g), torch::randn({3, 8, 8}, g),
                                                   MaskMode::binary);
    RegulationSpec l0{RegulationSpace::pixel, Metric::l0, 5.0};
    save_trigger(dir / "loc.nbt", loc, l0, {{"note", "x"}});
    const auto back = load_trigger(dir / "loc.nbt");
    CHECK(torch::equal(back.trigger->apply(x), loc.apply(x)));
    CHECK(back.spec.bound == 5.0);
    CHECK(back.extra["note"] == "x");

    FrequencyTrigger f(torch::randn({1, 3, 8, 8}, g), torch::randn({1, 3, 8, 8}, g), torch::randn({1, 3, 8, 8}, g));
    RegulationSpec fs_spec{RegulationSpace::frequency, Metric::l1, 0.1, Projection::dft};
    save_trigger(dir / "freq.nbt", f, fs_spec);
    CHECK(torch::equal(load_trigger(dir / "freq.nbt").trigger->apply(x), f.apply(x)));

    auto gen = make_conv_generator(3, 1, 14);
    LocalizedTrigger dyn(GeneratedMask{gen}, LogitPattern{torch::randn({1, 3, 8, 8}, g)}, MaskMode::binary);
    save_trigger(dir / "dyn.nbt", dyn, l0);
    CHECK(torch::equal(load_trigger(dir / "dyn.nbt").trigger->apply(x), dyn.apply(x)));
}

TEST_CASE("clones share no storage") {
    auto g = make_generator(15);
    auto t = LocalizedTrigger::from_logits(torch::randn({4, 4}, g), torch::randn({3, 4, 4}, g));
    auto copy = t.clone();
    const auto x = torch::rand({1, 3, 4, 4}, g);
    const auto before = copy->apply(x);
    {
        torch::NoGradGuard no_grad;
        for (auto& p : t.parameters()) p.add_(1.0);
    }
    CHECK(torch::equal(copy->apply(x), before));
}
