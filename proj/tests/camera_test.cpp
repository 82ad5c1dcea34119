#include <cmath>

#include "doctest.h"
#include "x3d/camera.hpp"

using namespace x3d;

TEST_SUITE("camera") {

TEST_CASE("pose position matches spherical coordinates") {
    CameraPose p;
    p.elevation_deg = 0;
    p.azimuth_deg = 0;
    p.distance = 2.5;
    const Vec3 pos = p.position();
    CHECK(pos.x == doctest::Approx(2.5));
    CHECK(pos.y == doctest::Approx(0.0));
    CHECK(pos.z == doctest::Approx(0.0));

    p.elevation_deg = 90;
    const Vec3 top = p.position();
    CHECK(top.z == doctest::Approx(2.5));
    CHECK(std::abs(top.x) < 1e-12);
}

TEST_CASE("rotation is orthonormal and looks at the origin") {
    CameraPose p;
    p.elevation_deg = 23;
    p.azimuth_deg = -117;
    p.distance = 1.8;
    const Mat3 R = p.rotation();
    for (int i = 0; i < 3; ++i)
        for (int j = 0; j < 3; ++j)
            CHECK(dot(R.row(i), R.row(j)) == doctest::Approx(i == j ? 1.0 : 0.0).epsilon(1e-10));
    // World origin lands on the optical axis at -distance in camera space.
    const Vec3 origin_cam = R * (Vec3{0, 0, 0} - p.position());
    CHECK(origin_cam.x == doctest::Approx(0.0).epsilon(1e-10));
    CHECK(origin_cam.y == doctest::Approx(0.0).epsilon(1e-10));
    CHECK(origin_cam.z == doctest::Approx(-p.distance));
}

TEST_CASE("up vector keeps the horizon level") {
    CameraPose p;
    p.elevation_deg = 35;
    p.azimuth_deg = 72;
    const Mat3 R = p.rotation();
    // The right axis is horizontal (no world-z component).
    CHECK(R.row(0).z == doctest::Approx(0.0).epsilon(1e-10));
    // The up axis has positive world-z component.
    CHECK(R.row(1).z > 0);
}

TEST_CASE("center ray of an odd-resolution image is the optical axis") {
    CameraPose p;
    p.elevation_deg = -15;
    p.azimuth_deg = 40;
    const RayBatch rays = generate_rays(p, 5, 5);
    const Vec3 center = rays.directions[2 * 5 + 2];
    const Vec3 f = p.forward();
    CHECK(dot(center, f) == doctest::Approx(1.0).epsilon(1e-12));
}

TEST_CASE("corner ray angle matches the pinhole model") {
    CameraPose p;
    p.fov_deg = 40;
    const int n = 8;
    const RayBatch rays = generate_rays(p, n, n);
    const double half = std::tan(deg2rad(40) * 0.5) * (1.0 - 1.0 / n);
    const double expect = std::atan(half * std::sqrt(2.0));
    const double got = std::acos(dot(rays.directions[0], p.forward()));
    CHECK(got == doctest::Approx(expect).epsilon(1e-10));
}

TEST_CASE("all rays are unit length and front-facing") {
    CameraPose p;
    p.elevation_deg = 33;
    p.azimuth_deg = -60;
    const RayBatch rays = generate_rays(p, 9, 7);
    CHECK(rays.width == 9);
    CHECK(rays.height == 7);
    for (const Vec3& d : rays.directions) {
        CHECK(norm(d) == doctest::Approx(1.0).epsilon(1e-12));
        CHECK(dot(d, p.forward()) > 0.5);
    }
}

TEST_CASE("pixel y grows downward and x rightward") {
    CameraPose p;
    const RayBatch rays = generate_rays(p, 4, 4);
    const Mat3 R = p.rotation();
    const Vec3 up = R.row(1), right = R.row(0);
    CHECK(dot(rays.directions[0], up) > dot(rays.directions[3 * 4], up));
    CHECK(dot(rays.directions[3], right) > dot(rays.directions[0], right));
}

TEST_CASE("phase ranges gate the sampled poses") {
    Rng rng(11);
    for (int i = 0; i < 200; ++i) {
        const CameraPose p1 = sample_camera(1, rng);
        CHECK(p1.elevation_deg >= -45);
        CHECK(p1.elevation_deg <= 45);
        CHECK(p1.azimuth_deg >= -180);
        CHECK(p1.azimuth_deg <= 180);
        CHECK(p1.distance == doctest::Approx(2.5));
        CHECK(p1.fov_deg == doctest::Approx(40.0));

        const CameraPose p2 = sample_camera(2, rng);
        CHECK(p2.elevation_deg >= -10);
        CHECK(p2.elevation_deg <= 45);
        CHECK(p2.azimuth_deg >= -135);
        CHECK(p2.azimuth_deg <= 225);
        CHECK(p2.distance >= 1.5);
        CHECK(p2.distance <= 2.0);
        CHECK(p2.fov_deg >= 30);
        CHECK(p2.fov_deg <= 45);

        const CameraPose p3 = sample_camera(3, rng);
        CHECK(p3.distance == doctest::Approx(2.5));
        CHECK(p3.fov_deg == doctest::Approx(40.0));
    }
}

TEST_CASE("same rng state reproduces the same pose") {
    Rng a(5), b(5);
    const CameraPose pa = sample_camera(2, a);
    const CameraPose pb = sample_camera(2, b);
    CHECK(pa.elevation_deg == pb.elevation_deg);
    CHECK(pa.azimuth_deg == pb.azimuth_deg);
    CHECK(pa.distance == pb.distance);
    CHECK(pa.fov_deg == pb.fov_deg);
}

} // TEST_SUITE
