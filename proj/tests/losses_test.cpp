#include "doctest.h"

#include <cmath>
#include <vector>

#include "test_util.hpp"
#include "x3d/camera.hpp"
#include "x3d/field.hpp"
#include "x3d/losses.hpp"
#include "x3d/volume_render.hpp"

using namespace x3d;
using x3d_test::max_grad_rel_err;
using x3d_test::rel_err;

namespace {

Image const_image(int w, int h, int c, double val) { return Image(w, h, c, val); }

Image random_image(int w, int h, int c, Rng& rng, double lo = 0.1, double hi = 0.9) {
    Image img(w, h, c);
    for (double& v : img.data) v = rng.uniform(lo, hi);
    return img;
}

Latent zero_eps(const Image& img) { return make_latent(img.channels, img.height, img.width); }

Latent random_eps(const Image& img, Rng& rng) {
    Latent eps = zero_eps(img);
    for (double& v : eps.data) v = rng.normal();
    return eps;
}

// Point mass (stddev 0) denoises every sample to its mean.
GmPrior point_mass(const Image& like, double mean_val, NoiseSchedule sched = NoiseSchedule()) {
    GmComponent c;
    c.weight = 1;
    c.mean.assign(like.size(), mean_val);
    c.stddev = 0;
    return GmPrior({c}, sched);
}

GmPrior two_blob(const Image& like, NoiseSchedule sched = NoiseSchedule()) {
    GmComponent a, b;
    a.weight = 0.6;
    a.mean.assign(like.size(), 0.2);
    a.stddev = 0.5;
    b.weight = 0.4;
    b.mean.assign(like.size(), 0.8);
    b.stddev = 0.9;
    return GmPrior({a, b}, sched);
}

PriorCondition dummy_cond() { return embedding_condition({1.0, 0.0}); }

} // namespace

TEST_SUITE("losses") {

TEST_CASE("sds vanishes when the render already matches the prior mean") {
    const NoiseSchedule sched;
    const Image x = const_image(2, 2, 3, 0.7);
    const GmPrior prior = point_mass(x, 0.7, sched);
    const LossWeights w;
    Rng rng(5);
    const Latent eps = random_eps(x, rng);
    LossCallCounts counts;
    Image g(x.width, x.height, x.channels);
    const double loss =
        sds_grad(prior, sched, x, 0.5, dummy_cond(), eps, w, &g, nullptr, &counts);
    CHECK(loss == doctest::Approx(0.0));
    for (double v : g.data) CHECK(v == doctest::Approx(0.0));
    CHECK(counts.sds == 1);
}

TEST_CASE("sds gradient is the weighted latent residual") {
    const NoiseSchedule sched;
    Rng rng(7);
    const Image x = random_image(2, 3, 3, rng);
    const GmPrior prior = point_mass(x, 0.2, sched);
    LossWeights w;
    const Latent eps = zero_eps(x);

    Image g(x.width, x.height, x.channels);
    const double l1 = sds_grad(prior, sched, x, 0.4, dummy_cond(), eps, w, &g);
    double expect = 0;
    for (double v : x.data) expect += 0.5 * (v - 0.2) * (v - 0.2);
    CHECK(l1 == doctest::Approx(expect).epsilon(1e-12));
    for (std::size_t i = 0; i < x.data.size(); ++i)
        CHECK(g.data[i] == doctest::Approx(x.data[i] - 0.2).epsilon(1e-12));

    w.lambda = [](double) { return 2.0; };
    Image g2(x.width, x.height, x.channels);
    const double l2 = sds_grad(prior, sched, x, 0.4, dummy_cond(), eps, w, &g2);
    CHECK(l2 == doctest::Approx(2.0 * l1).epsilon(1e-12));
    for (std::size_t i = 0; i < x.data.size(); ++i)
        CHECK(g2.data[i] == doctest::Approx(2.0 * g.data[i]).epsilon(1e-12));
}

TEST_CASE("sds rejects a noise tensor of the wrong shape") {
    const NoiseSchedule sched;
    const Image x = const_image(2, 2, 3, 0.5);
    const GmPrior prior = point_mass(x, 0.0, sched);
    const Latent eps = make_latent(3, 2, 3);
    CHECK_THROWS_AS(
        sds_grad(prior, sched, x, 0.5, dummy_cond(), eps, LossWeights{}), DomainError);
}

TEST_CASE("sds finite difference against frozen targets") {
    const NoiseSchedule sched;
    Rng rng(11);
    Image x = random_image(2, 2, 3, rng);
    const GmPrior prior = two_blob(x, sched);
    LossWeights w;
    w.lambda = [](double t) { return 1.0 + t; };
    const Latent eps = random_eps(x, rng);
    const PriorCondition cond = dummy_cond();
    const SdsTargets tg = sds_targets(prior, sched, x, 0.6, cond, eps, w);

    Image g(x.width, x.height, x.channels);
    sds_grad(prior, sched, x, 0.6, cond, eps, w, &g, &tg);
    const auto f = [&]() { return sds_grad(prior, sched, x, 0.6, cond, eps, w, nullptr, &tg); };
    CHECK(max_grad_rel_err(f, x.data, g.data) < 1e-6);
}

TEST_CASE("augmented sds doubles the surrogate under the identity codec") {
    const NoiseSchedule sched;
    Rng rng(13);
    const Image x = random_image(3, 2, 3, rng);
    const GmPrior prior = two_blob(x, sched);
    LossWeights w;
    w.img = 1.0;
    const Latent eps = random_eps(x, rng);
    const PriorCondition cond = dummy_cond();

    Image g_sds(x.width, x.height, x.channels);
    const double base = sds_grad(prior, sched, x, 0.3, cond, eps, w, &g_sds);
    Image g_aug(x.width, x.height, x.channels);
    const AugSdsResult r =
        aug_sds_loss(prior, sched, x, 0.3, cond, eps, w, nullptr, &g_aug);
    CHECK(r.nz == 0.0);
    CHECK(r.surrogate == doctest::Approx(2.0 * base).epsilon(1e-12));
    for (std::size_t i = 0; i < g_aug.data.size(); ++i)
        CHECK(g_aug.data[i] == doctest::Approx(2.0 * g_sds.data[i]).epsilon(1e-12));
}

TEST_CASE("augmented sds with zero image weight matches plain sds") {
    const NoiseSchedule sched;
    Rng rng(17);
    const Image x = random_image(2, 2, 3, rng);
    const GmPrior prior = two_blob(x, sched);
    LossWeights w;
    w.img = 0.0;
    const Latent eps = random_eps(x, rng);
    const PriorCondition cond = dummy_cond();

    Image g_sds(x.width, x.height, x.channels);
    const double base = sds_grad(prior, sched, x, 0.5, cond, eps, w, &g_sds);
    Image g_aug(x.width, x.height, x.channels);
    const AugSdsResult r = aug_sds_loss(prior, sched, x, 0.5, cond, eps, w, nullptr, &g_aug);
    CHECK(r.loss == doctest::Approx(base).epsilon(1e-12));
    for (std::size_t i = 0; i < g_aug.data.size(); ++i)
        CHECK(g_aug.data[i] == doctest::Approx(g_sds.data[i]).epsilon(1e-12));
}

TEST_CASE("augmented sds adds the depth variance penalty only for radiance renders") {
    const NoiseSchedule sched;
    const Image x = const_image(2, 1, 3, 0.5);
    const GmPrior prior = point_mass(x, 0.5, sched);
    LossWeights w;
    const Latent eps = zero_eps(x);

    RenderOutput nerf;
    nerf.rgb = x;
    nerf.mask = {0.9, 0.1};
    nerf.zvar = {0.3, 0.5};
    nerf.depth = {1.0, 1.0};

    LossCallCounts counts;
    std::vector<double> g_zvar;
    const AugSdsResult with_field = aug_sds_loss(prior, sched, x, 0.5, dummy_cond(), eps, w,
                                                 &nerf, nullptr, &g_zvar, nullptr, &counts);
    CHECK(with_field.nz == doctest::Approx(w.nz * 0.3).epsilon(1e-12));
    CHECK(with_field.loss == doctest::Approx(with_field.surrogate + with_field.nz));
    REQUIRE(g_zvar.size() == 2);
    CHECK(g_zvar[0] == doctest::Approx(w.nz).epsilon(1e-12));
    CHECK(g_zvar[1] == doctest::Approx(0.0));
    CHECK(counts.nz == 1);
    CHECK(counts.aug_sds == 1);

    const AugSdsResult mesh_phase = aug_sds_loss(prior, sched, x, 0.5, dummy_cond(), eps, w,
                                                 nullptr, nullptr, &g_zvar, nullptr, &counts);
    CHECK(mesh_phase.nz == 0.0);
    CHECK(g_zvar.empty());
    CHECK(counts.nz == 1);
}

TEST_CASE("augmented sds finite difference against frozen targets") {
    const NoiseSchedule sched;
    Rng rng(19);
    Image x = random_image(2, 2, 3, rng);
    const GmPrior prior = two_blob(x, sched);
    LossWeights w;
    w.star = 1.7;
    w.img = 0.35;
    const Latent eps = random_eps(x, rng);
    const PriorCondition cond = dummy_cond();
    const AugSdsTargets tg = aug_sds_targets(prior, sched, x, 0.25, cond, eps, w);

    Image g(x.width, x.height, x.channels);
    aug_sds_loss(prior, sched, x, 0.25, cond, eps, w, nullptr, &g, nullptr, &tg);
    const auto f = [&]() {
        return aug_sds_loss(prior, sched, x, 0.25, cond, eps, w, nullptr, nullptr, nullptr, &tg)
            .loss;
    };
    CHECK(max_grad_rel_err(f, x.data, g.data) < 1e-6);
}

TEST_CASE("consistency loss collapses to zero at equal timesteps") {
    const NoiseSchedule sched;
    Rng rng(23);
    const Image x = random_image(2, 2, 3, rng);
    const GmPrior prior = two_blob(x, sched);
    const Latent eps = random_eps(x, rng);
    Image g(x.width, x.height, x.channels);
    const double loss =
        cds_loss(prior, sched, x, 0.5, 0.5, dummy_cond(), eps, LossWeights{}, &g);
    CHECK(loss == 0.0);
    for (double v : g.data) CHECK(v == 0.0);
}

TEST_CASE("consistency loss is zero under a point-mass prior") {
    const NoiseSchedule sched;
    Rng rng(29);
    const Image x = random_image(2, 2, 3, rng);
    const GmPrior prior = point_mass(x, 0.4, sched);
    const Latent eps = random_eps(x, rng);
    const auto [t1, t2] = sched.adjacent_pair(25);
    const double loss = cds_loss(prior, sched, x, t1, t2, dummy_cond(), eps, LossWeights{});
    CHECK(loss == doctest::Approx(0.0));
}

TEST_CASE("consistency loss closed form on the two-step schedule") {
    const NoiseSchedule sched(0.25, 1.0, 2);
    const auto [t1, t2] = sched.adjacent_pair(2);
    CHECK(t1 == doctest::Approx(1.0));
    CHECK(t2 == doctest::Approx(0.5));
    CHECK(sched.sigma(t1) == doctest::Approx(1.0));
    CHECK(sched.sigma(t2) == doctest::Approx(0.5));

    const Image x = const_image(1, 1, 1, 2.0);
    GmComponent c;
    c.weight = 1;
    c.mean = {0.0};
    c.stddev = 1.0;
    const GmPrior prior({c}, sched);
    const Latent eps = zero_eps(x);

    LossWeights w;
    const double loss = cds_loss(prior, sched, x, t1, t2, dummy_cond(), eps, w);
    CHECK(loss == doctest::Approx(0.04).epsilon(1e-12));

    LossWeights w3;
    w3.lambda = [](double) { return 3.0; };
    const double scaled = cds_loss(prior, sched, x, t1, t2, dummy_cond(), eps, w3);
    CHECK(scaled == doctest::Approx(0.12).epsilon(1e-12));
}

TEST_CASE("consistency loss rejects inverted timesteps") {
    const NoiseSchedule sched;
    const Image x = const_image(1, 1, 1, 0.5);
    const GmPrior prior = point_mass(x, 0.0, sched);
    const Latent eps = zero_eps(x);
    CHECK_THROWS_AS(
        cds_loss(prior, sched, x, 0.2, 0.7, dummy_cond(), eps, LossWeights{}), DomainError);
}

TEST_CASE("consistency loss stop gradient probe") {
    const NoiseSchedule sched;
    Rng rng(31);
    Image x = random_image(2, 2, 3, rng);
    const GmPrior prior = two_blob(x, sched);
    LossWeights w;
    const Latent eps = random_eps(x, rng);
    const PriorCondition cond = dummy_cond();
    const auto [t1, t2] = sched.adjacent_pair(30);
    const CdsTargets tg = cds_targets(prior, sched, x, t1, t2, cond, eps, w);

    const double l0 = cds_loss(prior, sched, x, t1, t2, cond, eps, w, nullptr, &tg);
    CdsTargets shifted = tg;
    shifted.target.data[0] += 0.01;
    Image g(x.width, x.height, x.channels);
    const double l1 = cds_loss(prior, sched, x, t1, t2, cond, eps, w, &g, &shifted);
    CHECK(l1 != l0);

    const auto f = [&]() {
        return cds_loss(prior, sched, x, t1, t2, cond, eps, w, nullptr, &shifted);
    };
    CHECK(max_grad_rel_err(f, x.data, g.data) < 1e-5);
}

TEST_CASE("view-conditioned sds is zero at a stored oracle view") {
    const CameraPose ref_pose{15, 0, 2.5, 40};
    const CameraPose side_pose{15, 90, 2.5, 40};
    Rng rng(37);
    const Image ref_render = random_image(4, 4, 3, rng);
    const Image side_render = random_image(4, 4, 3, rng);

    MultiviewOraclePrior oracle(ref_pose);
    oracle.add_view(ref_pose, ref_render);
    oracle.add_view(side_pose, side_render);

    ReferenceView ref;
    ref.x_r = ref_render;
    ref.mask = Image(4, 4, 1, 1.0);
    ref.pose = ref_pose;

    const NoiseSchedule sched;
    const Latent eps = zero_eps(side_render);
    const double loss = sds3d_grad(oracle, sched, side_render, 0.5, ref, side_pose, eps,
                                   LossWeights{});
    CHECK(loss == doctest::Approx(0.0));
}

TEST_CASE("view-conditioned sds gradient points at the nearest stored view") {
    const CameraPose ref_pose{15, 0, 2.5, 40};
    const CameraPose side_pose{15, 90, 2.5, 40};
    Rng rng(41);
    const Image ref_render = random_image(4, 4, 3, rng);
    const Image side_render = random_image(4, 4, 3, rng);

    MultiviewOraclePrior oracle(ref_pose);
    oracle.add_view(ref_pose, ref_render);
    oracle.add_view(side_pose, side_render);

    ReferenceView ref;
    ref.x_r = ref_render;
    ref.mask = Image(4, 4, 1, 1.0);
    ref.pose = ref_pose;

    const NoiseSchedule sched;
    const Image x = random_image(4, 4, 3, rng);
    const Latent eps = zero_eps(x);
    LossCallCounts counts;
    Image g(4, 4, 3);
    const CameraPose query{15, 80, 2.5, 40};
    sds3d_grad(oracle, sched, x, 0.5, ref, query, eps, LossWeights{}, &g, nullptr, &counts);
    CHECK(counts.sds3d == 1);
    for (std::size_t i = 0; i < g.data.size(); ++i)
        CHECK(g.data[i] == doctest::Approx(x.data[i] - side_render.data[i]).epsilon(1e-12));
}

TEST_CASE("view-conditioned sds propagates an unavailable prior") {
    MultiviewOraclePrior empty;
    ReferenceView ref;
    ref.x_r = Image(4, 4, 3, 0.5);
    ref.mask = Image(4, 4, 1, 1.0);
    ref.pose = CameraPose{};
    const NoiseSchedule sched;
    const Latent eps = make_latent(3, 4, 4);
    CHECK_THROWS_AS(sds3d_grad(empty, sched, ref.x_r, 0.5, ref, CameraPose{}, eps,
                               LossWeights{}),
                    DenoiserUnavailable);
}

TEST_CASE("reference reconstruction is zero on a perfect match") {
    Rng rng(43);
    const Image render = random_image(3, 3, 3, rng);
    ReferenceView ref;
    ref.x_r = render;
    ref.mask = Image(3, 3, 1, 1.0);
    ref.pose = CameraPose{};
    const std::vector<double> alpha(9, 1.0);
    const RefResult r = ref_loss(render, alpha, ref, LossWeights{});
    CHECK(r.loss == doctest::Approx(0.0));
    CHECK(r.rgb_term == doctest::Approx(0.0));
    CHECK(r.mask_term == doctest::Approx(0.0));
}

TEST_CASE("reference color term pays the color weight per masked pixel") {
    LossWeights w;
    Image render(2, 1, 3, 0.5);
    ReferenceView ref;
    ref.x_r = render;
    ref.x_r.at(0, 0, 1) += 1.0;
    ref.mask = Image(2, 1, 1, 0.0);
    ref.mask.at(0, 0, 0) = 1.0;
    ref.pose = CameraPose{};
    const std::vector<double> alpha = {1.0, 0.0};
    const RefResult r = ref_loss(render, alpha, ref, w);
    CHECK(r.rgb_term == doctest::Approx(w.rgb).epsilon(1e-12));
    CHECK(r.mask_term == doctest::Approx(0.0));

    // Outside the mask the color difference is free.
    ReferenceView unmasked = ref;
    unmasked.mask = Image(2, 1, 1, 0.0);
    const std::vector<double> alpha0 = {0.0, 0.0};
    const RefResult r0 = ref_loss(render, alpha0, unmasked, w);
    CHECK(r0.loss == doctest::Approx(0.0));
}

TEST_CASE("reference mask term clamps accumulated alpha") {
    LossWeights w;
    const Image render(1, 1, 3, 0.5);
    ReferenceView ref;
    ref.x_r = render;
    ref.mask = Image(1, 1, 1, 1.0);
    ref.pose = CameraPose{};

    std::vector<double> g_alpha;
    const RefResult over = ref_loss(render, {2.0}, ref, w, nullptr, &g_alpha);
    CHECK(over.mask_term == doctest::Approx(0.0));
    CHECK(g_alpha[0] == 0.0);

    const RefResult half = ref_loss(render, {0.5}, ref, w, nullptr, &g_alpha);
    CHECK(half.mask_term == doctest::Approx(w.mask * 0.25).epsilon(1e-12));
    CHECK(g_alpha[0] == doctest::Approx(2.0 * w.mask * (0.5 - 1.0)).epsilon(1e-12));
}

TEST_CASE("reference loss finite difference over pixels and alpha") {
    Rng rng(47);
    Image render = random_image(3, 3, 3, rng);
    ReferenceView ref;
    ref.x_r = random_image(3, 3, 3, rng);
    ref.mask = Image(3, 3, 1, 0.0);
    for (int i = 0; i < 9; ++i) ref.mask.data[i] = (i % 2 == 0) ? 1.0 : 0.0;
    ref.pose = CameraPose{};
    std::vector<double> alpha(9);
    for (double& a : alpha) a = rng.uniform(0.05, 0.95);

    LossWeights w;
    Image g_pix(3, 3, 3);
    std::vector<double> g_alpha;
    ref_loss(render, alpha, ref, w, &g_pix, &g_alpha);

    const auto f_pix = [&]() { return ref_loss(render, alpha, ref, w).loss; };
    CHECK(max_grad_rel_err(f_pix, render.data, g_pix.data) < 1e-6);
    const auto f_alpha = [&]() { return ref_loss(render, alpha, ref, w).loss; };
    CHECK(max_grad_rel_err(f_alpha, alpha, g_alpha) < 1e-6);
}

TEST_CASE("reference loss validates shapes") {
    const Image render(2, 2, 3, 0.5);
    ReferenceView ref;
    ref.x_r = Image(3, 2, 3, 0.5);
    ref.mask = Image(2, 2, 1, 1.0);
    ref.pose = CameraPose{};
    CHECK_THROWS_AS(ref_loss(render, std::vector<double>(4, 1.0), ref, LossWeights{}),
                    DomainError);
    ref.x_r = Image(2, 2, 3, 0.5);
    ref.mask = Image(2, 2, 3, 1.0);
    CHECK_THROWS_AS(ref_loss(render, std::vector<double>(4, 1.0), ref, LossWeights{}),
                    DomainError);
    ref.mask = Image(2, 2, 1, 1.0);
    CHECK_THROWS_AS(ref_loss(render, std::vector<double>(3, 1.0), ref, LossWeights{}),
                    DomainError);
}

namespace {

struct PlanarFixture {
    NoiseSchedule sched;
    Image x;
    GmPrior prior;
    ToyEncoder encoder;
    PlanarInputs in;
    LossWeights w;

    explicit PlanarFixture(int seed = 53)
        : sched(), x(), prior(two_blob(Image(8, 8, 3), sched)), encoder(16, 9) {
        Rng rng(seed);
        x = random_image(8, 8, 3, rng);
        in.prior = &prior;
        in.schedule = &sched;
        in.encoder = &encoder;
        in.prompt = encoder.embed(random_image(8, 8, 3, rng));
        in.aug.n = 2;
        in.t = 0.45;
        in.cds_index = 20;
        in.eps = random_eps(x, rng);
    }
};

} // namespace

TEST_CASE("planar phase S equals the modality term plus augmented sds") {
    PlanarFixture fx;
    Rng rng_a(101), rng_b(101);

    LossCallCounts counts;
    const PlanarResult r =
        planar_loss(PlanarPhase::S, fx.in, fx.x, nullptr, fx.w, rng_a, nullptr, nullptr, &counts);

    const MsResult ms = ms_loss(fx.in.prompt, {fx.x}, fx.in.aug, fx.w.ms_branch, fx.encoder,
                                rng_b, nullptr);
    const AugSdsResult aug = aug_sds_loss(fx.prior, fx.sched, fx.x, fx.in.t,
                                          embedding_condition(fx.in.prompt), fx.in.eps, fx.w);
    CHECK(r.ms == doctest::Approx(fx.w.ms * ms.loss).epsilon(1e-12));
    CHECK(r.branch == doctest::Approx(aug.surrogate).epsilon(1e-12));
    CHECK(r.loss == doctest::Approx(r.ms + r.branch).epsilon(1e-12));
    CHECK(counts.ms == 1);
    CHECK(counts.aug_sds == 1);
    CHECK(counts.cds == 0);
    CHECK(counts.sds == 0);
}

TEST_CASE("planar phase C swaps in the consistency branch and makes no sds calls") {
    PlanarFixture fx;
    Rng rng_a(103), rng_b(103);

    LossCallCounts counts;
    const PlanarResult r =
        planar_loss(PlanarPhase::C, fx.in, fx.x, nullptr, fx.w, rng_a, nullptr, nullptr, &counts);
    CHECK(counts.cds == 1);
    CHECK(counts.aug_sds == 0);
    CHECK(counts.sds == 0);
    CHECK(r.nz == 0.0);

    const auto [t1, t2] = fx.sched.adjacent_pair(fx.in.cds_index);
    const double c = cds_loss(fx.prior, fx.sched, fx.x, t1, t2,
                              embedding_condition(fx.in.prompt), fx.in.eps, fx.w);
    const MsResult ms = ms_loss(fx.in.prompt, {fx.x}, fx.in.aug, fx.w.ms_branch, fx.encoder,
                                rng_b, nullptr);
    CHECK(r.branch == doctest::Approx(fx.w.cds * c).epsilon(1e-12));
    CHECK(r.loss == doctest::Approx(fx.w.ms * ms.loss + fx.w.cds * c).epsilon(1e-12));
}

TEST_CASE("planar consistency weight scales both value and gradient") {
    PlanarFixture fx;
    LossWeights w2 = fx.w;
    w2.cds = 2.0;
    w2.ms = 0.0;

    Rng rng_a(107), rng_b(107);
    Image g1(8, 8, 3), g2(8, 8, 3);
    LossWeights w1 = w2;
    w1.cds = 1.0;
    const PlanarResult r1 =
        planar_loss(PlanarPhase::C, fx.in, fx.x, nullptr, w1, rng_a, &g1);
    const PlanarResult r2 =
        planar_loss(PlanarPhase::C, fx.in, fx.x, nullptr, w2, rng_b, &g2);
    CHECK(r2.branch == doctest::Approx(2.0 * r1.branch).epsilon(1e-12));
    for (std::size_t i = 0; i < g1.data.size(); ++i)
        CHECK(g2.data[i] == doctest::Approx(2.0 * g1.data[i]).epsilon(1e-12));
}

TEST_CASE("planar with zero modality weight reduces to the diffusion branch") {
    PlanarFixture fx;
    LossWeights w = fx.w;
    w.ms = 0.0;
    Rng rng(109);
    const PlanarResult r = planar_loss(PlanarPhase::S, fx.in, fx.x, nullptr, w, rng);
    const AugSdsResult aug = aug_sds_loss(fx.prior, fx.sched, fx.x, fx.in.t,
                                          embedding_condition(fx.in.prompt), fx.in.eps, w);
    CHECK(r.ms == 0.0);
    CHECK(r.loss == doctest::Approx(aug.surrogate).epsilon(1e-12));
}

TEST_CASE("stereo applies the spatial branch weight exactly once") {
    const CameraPose ref_pose{15, 0, 2.5, 40};
    const CameraPose query{15, 30, 2.5, 40};
    Rng rng(113);
    const Image ref_render = random_image(4, 4, 3, rng);
    const Image query_render = random_image(4, 4, 3, rng);

    MultiviewOraclePrior oracle(ref_pose);
    oracle.add_view(ref_pose, ref_render);
    oracle.add_view(query, query_render);

    ReferenceView ref;
    ref.x_r = ref_render;
    ref.mask = Image(4, 4, 1, 1.0);
    ref.pose = ref_pose;

    const NoiseSchedule sched;
    const Image x = random_image(4, 4, 3, rng);
    const Latent eps = zero_eps(x);
    LossWeights w;
    w.sds3d = 0.7;

    const double raw = sds3d_grad(oracle, sched, x, 0.5, ref, query, eps, w);
    const std::vector<double> alpha(16, 1.0);
    const StereoResult r =
        stereo_loss(oracle, sched, x, 0.5, ref, query, eps, ref_render, alpha, w);
    CHECK(r.sds3d == doctest::Approx(0.7 * raw).epsilon(1e-12));
    CHECK(r.ref == doctest::Approx(0.0));
    CHECK(r.loss == doctest::Approx(r.sds3d).epsilon(1e-12));

    LossWeights w0 = w;
    w0.sds3d = 0.0;
    const StereoResult r0 =
        stereo_loss(oracle, sched, x, 0.5, ref, query, eps, ref_render, alpha, w0);
    CHECK(r0.loss == doctest::Approx(0.0));
}

TEST_CASE("hybrid equals planar plus stereo with additive gradients") {
    PlanarFixture fx;
    const CameraPose ref_pose{15, 0, 2.5, 40};
    const CameraPose query{15, 60, 2.5, 40};
    Rng rng(127);
    const Image ref_render = random_image(8, 8, 3, rng);
    const Image query_render = random_image(8, 8, 3, rng);

    MultiviewOraclePrior oracle(ref_pose);
    oracle.add_view(ref_pose, ref_render);
    oracle.add_view(query, query_render);

    ReferenceView ref;
    ref.x_r = ref_render;
    ref.mask = Image(8, 8, 1, 1.0);
    ref.pose = ref_pose;

    const Image render_at_ref = random_image(8, 8, 3, rng);
    std::vector<double> alpha(64);
    for (double& a : alpha) a = rng.uniform(0.1, 0.9);

    Rng rng_h(131), rng_p(131);
    LossCallCounts counts;
    Image g_view(8, 8, 3), g_ref(8, 8, 3);
    std::vector<double> g_alpha;
    const HybridResult h =
        hybrid_loss(PlanarPhase::S, fx.in, oracle, fx.x, nullptr, ref, query, render_at_ref,
                    alpha, fx.w, rng_h, &g_view, nullptr, &g_ref, &g_alpha, &counts);

    Image g_planar(8, 8, 3);
    const PlanarResult p =
        planar_loss(PlanarPhase::S, fx.in, fx.x, nullptr, fx.w, rng_p, &g_planar);
    Image g_stereo(8, 8, 3);
    Image g_ref2(8, 8, 3);
    std::vector<double> g_alpha2;
    const StereoResult s = stereo_loss(oracle, fx.sched, fx.x, fx.in.t, ref, query, fx.in.eps,
                                       render_at_ref, alpha, fx.w, &g_stereo, &g_ref2,
                                       &g_alpha2);

    CHECK(h.loss == p.loss + s.loss);
    CHECK(h.planar.loss == p.loss);
    CHECK(h.stereo.loss == s.loss);
    CHECK(counts.ms == 1);
    CHECK(counts.sds3d == 1);
    CHECK(counts.ref == 1);
    for (std::size_t i = 0; i < g_view.data.size(); ++i)
        CHECK(g_view.data[i] == g_planar.data[i] + g_stereo.data[i]);
    for (std::size_t i = 0; i < g_ref.data.size(); ++i)
        CHECK(g_ref.data[i] == g_ref2.data[i]);
    for (std::size_t i = 0; i < g_alpha.size(); ++i) CHECK(g_alpha[i] == g_alpha2[i]);
}

TEST_CASE("finite differences through the volume renderer") {
    // End-to-end probe on a micro scene: field -> render -> loss, with the
    // pixel gradients pulled back through the compositor into field params.
    VoxelRadianceField field = make_field(4, 1.0, 3.0, 0.5);
    Rng rng(137);
    for (double& v : field.raw_color) v = rng.uniform(-0.5, 0.5);
    const CameraPose pose{20, 35, 2.5, 40};
    const RayBatch rays = generate_rays(pose, 4, 4);
    const int n_samples = 8;

    const NoiseSchedule sched;
    LossWeights w;
    w.img = 0.4;
    const GmPrior prior = two_blob(Image(4, 4, 3), sched);
    const PriorCondition cond = dummy_cond();
    Rng eps_rng(139);
    Latent eps = make_latent(3, 4, 4);
    for (double& v : eps.data) v = eps_rng.normal();

    SUBCASE("augmented sds with the depth regularizer") {
        RenderCache cache;
        const RenderOutput out = render_volume(field, rays, n_samples, nullptr, {1, 1, 1}, &cache);
        // The foreground indicator inside the depth term switches at 0.5; the
        // probe steps must not push any ray across it.
        for (double m : out.mask) REQUIRE(std::abs(m - 0.5) > 0.02);
        const AugSdsTargets tg = aug_sds_targets(prior, sched, out.rgb, 0.5, cond, eps, w);

        Image g_pix(4, 4, 3);
        std::vector<double> g_zvar;
        aug_sds_loss(prior, sched, out.rgb, 0.5, cond, eps, w, &out, &g_pix, &g_zvar, &tg);
        RenderGrads grads;
        grads.rgb = g_pix.data;
        grads.zvar = g_zvar;
        FieldGrads fg(field);
        render_volume_backward(field, cache, out, grads, fg);

        const auto f = [&]() {
            const RenderOutput o = render_volume(field, rays, n_samples, nullptr);
            return aug_sds_loss(prior, sched, o.rgb, 0.5, cond, eps, w, &o, nullptr, nullptr,
                                &tg)
                .loss;
        };
        CHECK(max_grad_rel_err(f, field.raw_density, fg.raw_density, 1e-4, 1e-6) < 1e-3);
        CHECK(max_grad_rel_err(f, field.raw_color, fg.raw_color, 1e-4, 1e-6) < 1e-3);
    }

    SUBCASE("reference reconstruction including the mask path") {
        RenderCache cache;
        const RenderOutput out = render_volume(field, rays, n_samples, nullptr, {1, 1, 1}, &cache);
        // Accumulated alpha must sit inside the open clamp interval so the
        // mask gradient is smooth around every probe.
        for (double m : out.mask) REQUIRE((m > 0.005 && m < 0.995));
        ReferenceView ref;
        Rng ref_rng(149);
        ref.x_r = random_image(4, 4, 3, ref_rng);
        ref.mask = Image(4, 4, 1, 0.0);
        for (int i = 0; i < 16; ++i) ref.mask.data[i] = (i % 3 == 0) ? 1.0 : 0.0;
        ref.pose = pose;

        Image g_pix(4, 4, 3);
        std::vector<double> g_alpha;
        ref_loss(out.rgb, out.mask, ref, w, &g_pix, &g_alpha);
        RenderGrads grads;
        grads.rgb = g_pix.data;
        grads.mask = g_alpha;
        FieldGrads fg(field);
        render_volume_backward(field, cache, out, grads, fg);

        const auto f = [&]() {
            const RenderOutput o = render_volume(field, rays, n_samples, nullptr);
            return ref_loss(o.rgb, o.mask, ref, w).loss;
        };
        CHECK(max_grad_rel_err(f, field.raw_density, fg.raw_density, 1e-4, 1e-6) < 1e-3);
        CHECK(max_grad_rel_err(f, field.raw_color, fg.raw_color, 1e-4, 1e-6) < 1e-3);
    }
}

} // TEST_SUITE
