#pragma once

// Dense image buffers: interleaved float images, plane-major channel stacks
// for per-concept renderings, and binary mask stacks.

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <vector>

#include "conceptsplat/common.hpp"

namespace csplat {

// Row-major interleaved (y, x, channel) double image.
struct Image {
    int h = 0;
    int w = 0;
    int c = 0;
    std::vector<double> v;

    Image() = default;
    Image(int h_, int w_, int c_, double fill = 0.0)
        : h(h_), w(w_), c(c_), v(static_cast<size_t>(h_) * w_ * c_, fill)
    {
    }

    double& at(int y, int x, int ch)
    {
        return v[(static_cast<size_t>(y) * w + x) * c + ch];
    }
    double at(int y, int x, int ch) const
    {
        return v[(static_cast<size_t>(y) * w + x) * c + ch];
    }

    size_t size() const { return v.size(); }
    bool same_shape(const Image& o) const { return h == o.h && w == o.w && c == o.c; }

    bool all_finite() const
    {
        for (double x : v)
            if (!std::isfinite(x)) return false;
        return true;
    }
};

inline Image operator-(const Image& a, const Image& b)
{
    Image r = a;
    for (size_t i = 0; i < r.v.size(); ++i) r.v[i] -= b.v[i];
    return r;
}

inline double max_abs_diff(const Image& a, const Image& b)
{
    double m = 0.0;
    for (size_t i = 0; i < a.v.size(); ++i) m = std::max(m, std::abs(a.v[i] - b.v[i]));
    return m;
}

// Plane-major stack of k scalar maps, e.g. the concept rendering M.
struct ChannelStack {
    int k = 0;
    int h = 0;
    int w = 0;
    std::vector<double> v;

    ChannelStack() = default;
    ChannelStack(int k_, int h_, int w_, double fill = 0.0)
        : k(k_), h(h_), w(w_), v(static_cast<size_t>(k_) * h_ * w_, fill)
    {
    }

    double& at(int i, int y, int x)
    {
        return v[(static_cast<size_t>(i) * h + y) * w + x];
    }
    double at(int i, int y, int x) const
    {
        return v[(static_cast<size_t>(i) * h + y) * w + x];
    }

    // Copies plane i out as a single-channel image.
    Image plane(int i) const
    {
        Image img(h, w, 1);
        for (int y = 0; y < h; ++y)
            for (int x = 0; x < w; ++x) img.at(y, x, 0) = at(i, y, x);
        return img;
    }
};

// k binary concept masks plus the derived background mask.
struct MaskStack {
    int k = 0;
    int h = 0;
    int w = 0;
    std::vector<std::uint8_t> v;  // plane-major concept planes
    std::vector<std::uint8_t> bg; // h*w

    MaskStack() = default;
    MaskStack(int k_, int h_, int w_)
        : k(k_), h(h_), w(w_), v(static_cast<size_t>(k_) * h_ * w_, 0),
          bg(static_cast<size_t>(h_) * w_, 0)
    {
    }

    std::uint8_t& at(int i, int y, int x)
    {
        return v[(static_cast<size_t>(i) * h + y) * w + x];
    }
    std::uint8_t at(int i, int y, int x) const
    {
        return v[(static_cast<size_t>(i) * h + y) * w + x];
    }
    std::uint8_t& bg_at(int y, int x) { return bg[static_cast<size_t>(y) * w + x]; }
    std::uint8_t bg_at(int y, int x) const { return bg[static_cast<size_t>(y) * w + x]; }

    // Fills bg as the complement of the union of concept planes.
    void recompute_background()
    {
        for (int y = 0; y < h; ++y) {
            for (int x = 0; x < w; ++x) {
                bool any = false;
                for (int i = 0; i < k && !any; ++i) any = at(i, y, x) != 0;
                bg_at(y, x) = any ? 0 : 1;
            }
        }
    }
};

} // namespace csplat
