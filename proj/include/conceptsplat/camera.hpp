#pragma once

// Pinhole camera model. Camera space is x-right, y-down, z-forward; image
// origin at the top-left pixel corner.

#include <cmath>
#include <optional>

#include "conceptsplat/common.hpp"

namespace csplat {

struct Camera {
    Vec3 position{0, 0, 0};
    Vec3 look_at{0, 0, 1};
    Vec3 up{0, 0, 1};
    double fov_y = deg2rad(49.0); // vertical field of view, radians
    int height = 64;
    int width = 64;
    double z_near = 0.01;
    double z_far = 100.0;

    void validate() const
    {
        if (!(fov_y > 0.0 && fov_y < kPi))
            throw ValidationError("camera: fov_y must lie in (0, pi)");
        if (height < 8 || width < 8)
            throw ValidationError("camera: resolution must be at least 8x8");
        if (!(z_near > 0.0 && z_near < z_far))
            throw ValidationError("camera: need 0 < z_near < z_far");
        if ((look_at - position).norm() < 1e-12)
            throw ValidationError("camera: look_at coincides with position");
        Vec3 f = (look_at - position).normalized();
        if (f.cross(up).norm() < 1e-9)
            throw ValidationError("camera: up direction parallel to view direction");
    }

    // World->camera rotation. Rows are the camera axes expressed in world
    // coordinates: right, down, forward.
    Mat3 rotation() const
    {
        Vec3 f = (look_at - position).normalized();
        Vec3 r = f.cross(up).normalized();
        Vec3 u = r.cross(f); // points "up" in world; camera y axis is -u
        Mat3 R;
        R.row(0) = r.transpose();
        R.row(1) = (-u).transpose();
        R.row(2) = f.transpose();
        return R;
    }

    Vec3 to_camera(const Vec3& p_world) const
    {
        return rotation() * (p_world - position);
    }

    double focal() const { return (height / 2.0) / std::tan(fov_y / 2.0); }
    double cx() const { return width / 2.0; }
    double cy() const { return height / 2.0; }

    // Pinhole projection of a camera-space point; no visibility culling.
    Vec2 project(const Vec3& p_cam) const
    {
        const double f = focal();
        return Vec2(f * p_cam.x() / p_cam.z() + cx(), f * p_cam.y() / p_cam.z() + cy());
    }
};

// Camera on a sphere around `center`, looking inward. Azimuth is measured in
// the xy plane from the +x axis; elevation tilts toward +z.
inline Camera orbit_camera(const Vec3& center, double azimuth_rad, double elevation_rad,
                           double radius, int height, int width,
                           double fov_y = deg2rad(49.0))
{
    Camera cam;
    const double ce = std::cos(elevation_rad);
    cam.position = center + radius * Vec3(ce * std::cos(azimuth_rad),
                                          ce * std::sin(azimuth_rad),
                                          std::sin(elevation_rad));
    cam.look_at = center;
    cam.up = Vec3(0, 0, 1);
    cam.fov_y = fov_y;
    cam.height = height;
    cam.width = width;
    cam.validate();
    return cam;
}

} // namespace csplat
