#pragma once
#include <cmath>
#include <vector>

#include "x3d/errors.hpp"
#include "x3d/rng.hpp"
#include "x3d/vec.hpp"

namespace x3d {

inline constexpr double kPi = 3.14159265358979323846;
inline double deg2rad(double d) { return d * kPi / 180.0; }
inline double rad2deg(double r) { return r * 180.0 / kPi; }

// World frame: +z is up, the object sits at the origin. Cameras orbit the
// origin and look at it. Rotation rows are [right; up; -forward] so that
// world -> camera is x_cam = R (x_world - position).
struct CameraPose {
    double elevation_deg = 0;
    double azimuth_deg = 0;
    double distance = 2.5;
    double fov_deg = 40;

    Vec3 position() const {
        const double el = deg2rad(elevation_deg), az = deg2rad(azimuth_deg);
        return {distance * std::cos(el) * std::cos(az),
                distance * std::cos(el) * std::sin(az),
                distance * std::sin(el)};
    }

    // Forward points from the camera to the origin.
    Vec3 forward() const { return normalized(-position()); }

    Mat3 rotation() const {
        const Vec3 f = forward();
        Vec3 up{0, 0, 1};
        // Degenerate at the poles; fall back to a fixed up.
        if (std::abs(dot(f, up)) > 1.0 - 1e-9) up = {1, 0, 0};
        const Vec3 r = normalized(cross(f, up));
        const Vec3 u = cross(r, f);
        return Mat3::from_rows(r, u, -f);
    }
};

struct CameraRanges {
    double elevation_min = -45, elevation_max = 45;
    double azimuth_min = -180, azimuth_max = 180;
    double distance_min = 2.5, distance_max = 2.5;
    double fov_min = 40, fov_max = 40;
};

// Phase 2 pulls the camera in closer and restricts elevation so the surface
// refinement sees mostly side-on views.
inline CameraRanges camera_ranges_for_phase(int phase) {
    CameraRanges r;
    if (phase == 2) {
        r.elevation_min = -10; r.elevation_max = 45;
        r.azimuth_min = -135; r.azimuth_max = 225;
        r.distance_min = 1.5; r.distance_max = 2.0;
        r.fov_min = 30; r.fov_max = 45;
    }
    return r;
}

inline CameraPose sample_camera(const CameraRanges& ranges, Rng& rng) {
    CameraPose p;
    p.elevation_deg = rng.uniform(ranges.elevation_min, ranges.elevation_max);
    p.azimuth_deg = rng.uniform(ranges.azimuth_min, ranges.azimuth_max);
    p.distance = rng.uniform(ranges.distance_min, ranges.distance_max);
    p.fov_deg = rng.uniform(ranges.fov_min, ranges.fov_max);
    return p;
}

inline CameraPose sample_camera(int phase, Rng& rng) {
    return sample_camera(camera_ranges_for_phase(phase), rng);
}

struct RayBatch {
    int width = 0;
    int height = 0;
    Vec3 origin;                  // shared pinhole origin
    std::vector<Vec3> directions; // unit length, row-major
};

// Pinhole rays through pixel centers. fov is the vertical full angle; pixels
// are square so the horizontal extent scales by width/height.
inline RayBatch generate_rays(const CameraPose& pose, int width, int height) {
    if (width <= 0 || height <= 0) throw DomainError("generate_rays: non-positive resolution");
    RayBatch batch;
    batch.width = width;
    batch.height = height;
    batch.origin = pose.position();
    batch.directions.resize(std::size_t(width) * height);
    const Mat3 rot = pose.rotation();
    const Vec3 right = rot.row(0), up = rot.row(1);
    const Vec3 fwd = -rot.row(2);
    const double tan_half = std::tan(deg2rad(pose.fov_deg) * 0.5);
    const double aspect = double(width) / height;
    for (int y = 0; y < height; ++y) {
        // NDC in [-1, 1] at pixel centers; v runs top-down.
        const double v = (1.0 - 2.0 * (y + 0.5) / height) * tan_half;
        for (int x = 0; x < width; ++x) {
            const double u = (2.0 * (x + 0.5) / width - 1.0) * tan_half * aspect;
            batch.directions[std::size_t(y) * width + x] = normalized(fwd + right * u + up * v);
        }
    }
    return batch;
}

} // namespace x3d
