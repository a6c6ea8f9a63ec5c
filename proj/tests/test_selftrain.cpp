#include "eqreg/selftrain.hpp"

#include <doctest.h>

#include <cmath>
#include <fstream>
#include <random>

using namespace eqreg;
namespace fs = std::filesystem;

namespace {

struct TempDir {
    fs::path path;
    TempDir()
    {
        std::random_device rd;
        path = fs::temp_directory_path() / ("eqreg_selftrain_" + std::to_string(rd()));
        fs::create_directories(path);
    }
    ~TempDir() { fs::remove_all(path); }
};

Volume<float> smooth_volume(const Dims& d)
{
    Volume<float> v(d);
    for_each_voxel(d, [&](Index flat, const Vec3& p) {
        v.data[flat] = float(std::sin(0.31 * p[0]) + std::cos(0.27 * p[1]) + std::sin(0.22 * p[2] + 0.1 * p[0]));
    });
    return v;
}

DisplacementField<float> smooth_field(const Dims& d)
{
    DisplacementField<float> u(d);
    for_each_voxel(d, [&](Index flat, const Vec3& p) {
        u.set(flat, Eigen::Vector3f(float(1.2 * std::sin(0.2 * p[1])), float(0.8 * std::cos(0.15 * p[2])),
                                    float(1.0 * std::sin(0.18 * p[0]))));
    });
    return u;
}

double interior_rms(const Volume<float>& a, const Volume<float>& b, double margin)
{
    double acc = 0.0;
    Index n = 0;
    for_each_voxel(a.dims, [&](Index flat, const Vec3& p) {
        for (int k = 0; k < 3; ++k)
            if (p[k] < margin || p[k] > double(a.dims[k]) - 1 - margin)
                return;
        acc += std::pow(double(a.data[flat] - b.data[flat]), 2);
        ++n;
    });
    return std::sqrt(acc / double(n));
}

TrainConfig tiny_config()
{
    TrainConfig c;
    c.stages = 2;
    c.iters_per_stage = 2;
    c.batch_size = 1;
    c.net.extractor_channels = {2, 2, 2, 2};
    c.net.head_hidden = 4;
    c.net.head_out = 4;
    c.pipeline.samples = 16;
    c.pipeline.solver.radius = 1;
    c.refine.instance_cfg.iters = 3;
    c.seed = 11;
    return c;
}

std::vector<LoadedPair> tiny_pairs()
{
    PhantomSpec s;
    s.shape = {16, 16, 16};
    s.radius_min = 2;
    s.radius_max = 3;
    s.seed = 2;
    return phantom_pairs(s, 2);
}

bool same_params(const NetParams<float>& a, const NetParams<float>& b)
{
    if (a.entries.size() != b.entries.size())
        return false;
    for (std::size_t i = 0; i < a.entries.size(); ++i)
        if (a.entries[i].name != b.entries[i].name || a.entries[i].value.shape != b.entries[i].value.shape ||
            !(a.entries[i].value.data == b.entries[i].value.data).all())
            return false;
    return true;
}

} // namespace

TEST_CASE("augmentation disabled returns bitwise-identical images and pseudo-label")
{
    const Dims d{12, 13, 14};
    const auto img = smooth_volume(d);
    const auto u = smooth_field(d);
    AugmentationSpec spec;
    spec.geometric = false;
    spec.intensity = false;
    spec.pair_affine = false;
    const auto out = augment_pair(img, img, u, spec, 7);
    CHECK((out.fixed.data == img.data).all());
    CHECK((out.moving.data == img.data).all());
    CHECK((out.pseudo.data == u.data).all());
}

TEST_CASE("augmented pseudo-label still aligns the augmented pair")
{
    const Dims d{32, 32, 32};
    const auto moving = smooth_volume(d);
    const auto u = smooth_field(d);
    const auto fixed = warp(moving, u);
    AugmentationSpec spec;
    spec.intensity = false;
    for (std::uint64_t seed = 0; seed < 4; ++seed) {
        const auto aug = augment_pair(fixed, moving, u, spec, seed);
        CHECK(!aug.t_fixed.is_identity());
        const double with_aug = interior_rms(warp(aug.moving, aug.pseudo), aug.fixed, 8);
        const double with_raw = interior_rms(warp(aug.moving, u), aug.fixed, 8);
        CHECK(with_aug < 0.05);
        CHECK(with_aug < 0.25 * with_raw);
    }
}

TEST_CASE("augment_field: equal affines keep a zero field zero up to the shared linear map")
{
    const Dims d{8, 8, 8};
    std::mt19937_64 rng(3);
    const auto t = sample_affine(AugmentationSpec{}, d, rng);
    const auto out = augment_field(DisplacementField<float>(d), t, t);
    CHECK(out.data.abs().maxCoeff() < 1e-5f);
}

TEST_CASE("intensity augmentation: identity parameters leave normalized images unchanged")
{
    auto img = smooth_volume({6, 6, 6});
    const float lo = img.data.minCoeff(), hi = img.data.maxCoeff();
    img.data = (img.data - lo) / (hi - lo);
    const auto out = apply_intensity(img, IntensityParams{});
    CHECK((out.data - img.data).abs().maxCoeff() < 1e-6f);

    std::mt19937_64 rng(1);
    AugmentationSpec spec;
    for (int trial = 0; trial < 20; ++trial) {
        const auto p = sample_intensity(spec, rng);
        CHECK(p.gamma >= spec.gamma_min);
        CHECK(p.gamma <= spec.gamma_max);
        CHECK(all_finite(apply_intensity(img, p).data));
    }
}

TEST_CASE("sampled affines are invertible and within range")
{
    std::mt19937_64 rng(5);
    AugmentationSpec spec;
    for (int trial = 0; trial < 100; ++trial) {
        const auto t = sample_affine(spec, {20, 20, 20}, rng);
        CHECK(t.invertible());
        CHECK(t.linear.determinant() > 0.5);
        CHECK(t.linear.determinant() < 1.6);
    }
}

TEST_CASE("cosine learning-rate schedule with per-stage restarts")
{
    CHECK(cosine_restart_lr(0, 100, 1e-3, 1e-5) == doctest::Approx(1e-3));
    CHECK(cosine_restart_lr(99, 100, 1e-3, 1e-5) == doctest::Approx(1e-5));
    CHECK(cosine_restart_lr(0, 1, 1e-3, 1e-5) == 1e-3);
    double prev = 1.0;
    for (int i = 0; i < 50; ++i) {
        const double lr = cosine_restart_lr(i, 50, 1e-3, 1e-5);
        CHECK(lr <= prev);
        CHECK(lr >= 1e-5 - 1e-18);
        prev = lr;
    }
}

TEST_CASE("train config JSON round-trip and validation")
{
    auto c = tiny_config();
    c.augment.rotation_deg = 7.5;
    c.pipeline.weights.alpha = 0.25;
    c.refine.double_warp = false;
    const auto j = to_json(c);
    const auto back = train_config_from_json(j);
    CHECK(to_json(back) == j);
    CHECK(back.net.extractor_channels == c.net.extractor_channels);
    CHECK(back.refine.double_warp == false);

    TempDir tmp;
    std::ofstream(tmp.path / "c.json") << j.dump();
    CHECK(to_json(load_train_config(tmp.path / "c.json")) == j);

    auto bad = j;
    bad["stages"] = 0;
    CHECK_THROWS(train_config_from_json(bad).validate());
    CHECK_THROWS_AS(load_train_config(tmp.path / "absent.json"), DataError);
}

TEST_CASE("checkpoint round-trip and corruption")
{
    TempDir tmp;
    auto c = tiny_config();
    const auto state = initial_state(c);
    save_checkpoint(tmp.path / "ck.bin", state.params, {{"note", "x"}});
    nlohmann::json manifest;
    const auto back = load_checkpoint(tmp.path / "ck.bin", &manifest);
    CHECK(same_params(back, state.params));
    CHECK(manifest["training"]["note"] == "x");

    std::ofstream(tmp.path / "bad.bin") << "NOTACKPT and some more bytes";
    CHECK_THROWS_AS(load_checkpoint(tmp.path / "bad.bin"), DataError);
    fs::copy_file(tmp.path / "ck.bin", tmp.path / "cut.bin");
    fs::resize_file(tmp.path / "cut.bin", fs::file_size(tmp.path / "ck.bin") - 8);
    CHECK_THROWS_AS(load_checkpoint(tmp.path / "cut.bin"), DataError);
}

TEST_CASE("training is deterministic for a fixed seed and records history")
{
    const auto pairs = tiny_pairs();
    auto c = tiny_config();
    const auto a = run_training(pairs, c);
    const auto b = run_training(pairs, c);
    CHECK(same_params(a.params, b.params));
    CHECK(a.stage == 2);
    REQUIRE(a.history.size() == 4);
    CHECK(a.history[0].lr == doctest::Approx(c.lr_max));
    CHECK(a.history[2].lr == doctest::Approx(c.lr_max));
    CHECK(a.stages.size() == 2);
    CHECK(a.params.finite());
    CHECK(!same_params(a.params, initial_state(c).params));
}

TEST_CASE("frozen network parameters do not move")
{
    auto c = tiny_config();
    c.stages = 1;
    c.train_extractor = false;
    c.pipeline.contrastive = false;
    const auto init = initial_state(c);
    const auto out = run_training(tiny_pairs(), c);
    for (std::size_t i = 0; i < init.params.entries.size(); ++i) {
        const auto& e = init.params.entries[i];
        if (e.name.rfind("extractor.", 0) == 0 && e.name.find("running_") == std::string::npos)
            CHECK((out.params.entries[i].value.data == e.value.data).all());
    }
}

TEST_CASE("resume from a checkpointed stage matches an uninterrupted run")
{
    TempDir tmp;
    const auto pairs = tiny_pairs();
    auto c = tiny_config();
    const auto full = run_training(pairs, c);

    auto one = c;
    one.stages = 1;
    auto partial = run_training(pairs, one);
    const auto resumed = run_training(pairs, c, {}, &partial);
    CHECK(resumed.stage == 2);
    CHECK(same_params(resumed.params, full.params));
}

TEST_CASE("registration output has the image extent and finite values")
{
    const auto pairs = tiny_pairs();
    auto state = initial_state(tiny_config());
    const auto r = register_images(state, tiny_config().pipeline.solver, pairs[0].fixed, pairs[0].moving);
    CHECK(r.field.dims == pairs[0].fixed.dims);
    CHECK(all_finite(r.field.data));
    CHECK(r.seconds >= 0.0);
}
