#include "nbscan/attacks.hpp"
#include "oracles.hpp"

#include "doctest_torch.hpp"

using namespace nbscan;
using namespace nbscan::attacks;

namespace {

const zoo::DatasetSplits& splits() {
    static const auto s = oracle::small_splits(31, 300);
    return s;
}

}  // namespace

TEST_CASE("patch size follows the area fraction") {
    const auto r = make_recipe(AttackKind::patch, 0, 0.1, 1, {3, 32, 32});
    CHECK(r.patch_height * r.patch_width == 48);
    CHECK(std::abs(r.patch_height * r.patch_width - 0.046 * 1024) <= 2.0);
    CHECK(r.mask.sum().item<double>() == 48.0);
    // bottom-right placement, inset by one pixel
    CHECK(r.mask[30][30].item<double>() == 1.0);
    CHECK(r.mask[31][31].item<double>() == 0.0);  // one-pixel margin
    CHECK(r.mask[0][0].item<double>() == 0.0);
}

TEST_CASE("patch stamping touches only the mask and is idempotent") {
    const auto r = make_recipe(AttackKind::patch, 0, 0.1, 2, {3, 32, 32});
    const auto x = splits().test.images.slice(0, 0, 8);
    const auto once = stamp_batch(r, x, 1);
    const auto twice = stamp_batch(r, once, 1);
    CHECK(torch::equal(once, twice));
    const auto changed = (once != x).any(1);  // N x H x W
    CHECK((changed.to(torch::kFloat) <= r.mask.unsqueeze(0)).all().item<bool>());
}

TEST_CASE("blend stamping is the alpha mix with the pattern") {
    const auto r = make_recipe(AttackKind::blend, 1, 0.1, 3, {3, 32, 32});
    const auto x = splits().test.images.slice(0, 0, 4);
    const auto out = stamp_batch(r, x, 0);
    const auto expected = ((1.0 - r.options.alpha) * x + r.options.alpha * r.pattern.unsqueeze(0)).clamp(0, 1);
    CHECK(torch::allclose(out, expected, 0, 1e-6));
    CHECK((out - x).abs().max().item<double>() <= kMaxBlendAlpha + 1e-6);
}

TEST_CASE("every kind keeps shape and range; stamping is reproducible by seed") {
    for (auto kind : all_attack_kinds()) {
        auto r = make_recipe(kind, 2, 0.1, 4, {3, 32, 32});
        attach_donors(r, splits().train);
        const auto x = splits().test.images.slice(0, 0, 6);
        const auto a = stamp_batch(r, x, 9);
        CAPTURE(to_string(kind));
        CHECK(a.sizes() == x.sizes());
        CHECK(a.min().item<double>() >= 0.0);
        CHECK(a.max().item<double>() <= 1.0);
        CHECK(torch::equal(a, stamp_batch(r, x, 9)));
        CHECK_FALSE(torch::equal(a, x));
        const auto back = recipe_from_json(r.to_json());
        auto b = back;
        attach_donors(b, splits().train);
        CHECK(torch::equal(stamp_batch(b, x, 9), a));
    }
}

TEST_CASE("warp displacement respects the pixel limit") {
    const auto r = make_recipe(AttackKind::warp, 0, 0.1, 5, {3, 32, 32});
    CHECK(r.warp_field.abs().max().item<double>() <= r.options.warp_max_displacement + 1e-9);
}

TEST_CASE("sig amplitude bounds the change") {
    const auto r = make_recipe(AttackKind::sig, 0, 0.1, 5, {3, 32, 32});
    const auto x = torch::full({1, 3, 32, 32}, 0.5);
    const auto out = stamp_batch(r, x, 0);
    CHECK((out - x).abs().max().item<double>() == doctest::Approx(20.0 / 255.0).epsilon(1e-5));
}

TEST_CASE("composite stamping takes the right half from a donor-class image") {
    auto r = make_recipe(AttackKind::composite, 0, 0.1, 6, {3, 32, 32});
    attach_donors(r, splits().train);
    CHECK(r.donor_class == 1);
    const auto x = splits().test.images.slice(0, 0, 3);
    const auto out = stamp_batch(r, x, 2);
    CHECK(torch::equal(out.slice(3, 0, 16), x.slice(3, 0, 16)));
    for (int64_t i = 0; i < 3; ++i) {
        bool found = false;
        for (int64_t p = 0; p < r.donor_pool.size(0) && !found; ++p)
            found = torch::equal(out[i].slice(2, 16, 32), r.donor_pool[p].slice(2, 16, 32));
        CHECK(found);
    }
}

TEST_CASE("assets beyond the magnitude limits are rejected") {
    RecipeOptions big;
    big.alpha = 0.5;
    CHECK_THROWS_AS(make_recipe(AttackKind::blend, 0, 0.1, 1, {3, 32, 32}, big).validate(), ArgumentError);
    CHECK_THROWS_AS(make_recipe(AttackKind::patch, 0, 0.2, 1, {3, 32, 32}).validate(), ArgumentError);
    RecipeOptions wide;
    wide.area_fraction = 0.3;
    CHECK_THROWS_AS(make_recipe(AttackKind::patch, 0, 0.1, 1, {3, 32, 32}, wide).validate(), ArgumentError);
}

TEST_CASE("poisoning stamps round(rate * N) non-target samples and relabels them") {
    const auto r = make_recipe(AttackKind::patch, 4, 0.1, 7, {3, 32, 32});
    const auto& data = splits().train;
    const auto p = make_poisoned_dataset(data, r, 11);
    CHECK(static_cast<int64_t>(p.poison_index.size()) == std::llround(0.1 * static_cast<double>(data.size())));
    CHECK(std::is_sorted(p.poison_index.begin(), p.poison_index.end()));
    std::vector<bool> poisoned(static_cast<size_t>(data.size()), false);
    for (auto i : p.poison_index) {
        poisoned[static_cast<size_t>(i)] = true;
        CHECK(data.labels[i].item<int64_t>() != 4);
        CHECK(p.data.labels[i].item<int64_t>() == 4);
    }
    for (int64_t i = 0; i < data.size(); ++i)
        if (!poisoned[static_cast<size_t>(i)]) {
            CHECK(torch::equal(p.data.images[i], data.images[i]));
            CHECK(p.data.labels[i].item<int64_t>() == data.labels[i].item<int64_t>());
        }
    const auto again = make_poisoned_dataset(data, r, 11);
    CHECK(again.poison_index == p.poison_index);
    CHECK(torch::equal(again.data.images, p.data.images));

    const auto none = make_poisoned_dataset(data, make_recipe(AttackKind::patch, 4, 0.0, 7, {3, 32, 32}), 11);
    CHECK(none.poison_index.empty());
    CHECK(torch::equal(none.data.images, data.images));
}

TEST_CASE("constant kinds become equivalent localized triggers") {
    for (auto kind : {AttackKind::patch, AttackKind::blend, AttackKind::reflection}) {
        const auto r = make_recipe(kind, 0, 0.1, 8, {3, 32, 32});
        const auto t = as_trigger(r);
        CHECK(t->kind() == TriggerKind::localized);
        const auto x = splits().test.images.slice(0, 0, 4);
        CHECK(torch::allclose(t->apply(x), stamp_batch(r, x, 0), 0, 1e-6));
    }
}
