#pragma once

#include <array>
#include <string>
#include <vector>

#include "cellcount/tensor.hpp"

namespace cellcount {

// Annotated cell centroids for one image. x is the column index in [0, cols),
// y the row index in [0, rows).
struct Centroid {
    int x = 0;
    int y = 0;
};

struct CentroidList {
    std::string image_id;
    std::vector<Centroid> points;
    int64_t rows = 0; // M
    int64_t cols = 0; // N

    int64_t count() const { return static_cast<int64_t>(points.size()); }

    void validate() const {
        for (const auto& p : points)
            if (p.x < 0 || p.x >= cols || p.y < 0 || p.y >= rows)
                throw UsageError("CentroidList '" + image_id + "': point (" +
                                 std::to_string(p.x) + "," + std::to_string(p.y) +
                                 ") outside " + std::to_string(rows) + "x" +
                                 std::to_string(cols) + " image");
    }
};

struct KernelSpec {
    double sigma = 3.0;   // pixels; 5 suits bone-marrow-sized cells
    int64_t half = 10;    // K_G; support is (2*half+1)^2
};

struct ProximitySpec {
    double decay_alpha = 3.0;
    double dist_threshold = 15.0; // d, pixels
};

// full-resolution density map plus its sum-pooled versions at 1/8, 1/4, 1/2
struct DensityTarget {
    Tensor4 full;               // (1,1,M,N)
    std::array<Tensor4, 3> lr;  // factors 8, 4, 2
};

namespace detail {

// unnormalized-then-normalized discrete Gaussian, double precision
inline std::vector<double> gaussian_kernel_values(const KernelSpec& spec) {
    if (spec.sigma <= 0.0 || spec.half < 1)
        throw UsageError("gaussian_kernel: need sigma > 0 and K >= 1");
    const int64_t s = 2 * spec.half + 1;
    std::vector<double> v(static_cast<size_t>(s * s));
    double total = 0.0;
    for (int64_t ny = -spec.half; ny <= spec.half; ++ny) {
        for (int64_t nx = -spec.half; nx <= spec.half; ++nx) {
            const double g = std::exp(-(static_cast<double>(nx * nx + ny * ny)) /
                                      (2.0 * spec.sigma * spec.sigma));
            v[static_cast<size_t>((ny + spec.half) * s + (nx + spec.half))] = g;
            total += g;
        }
    }
    for (auto& x : v) x /= total;
    return v;
}

} // namespace detail

// Normalized discrete Gaussian on a (2K+1)x(2K+1) support; sums to 1 exactly
// up to float rounding.
inline Tensor4 gaussian_kernel(const KernelSpec& spec) {
    const auto v = detail::gaussian_kernel_values(spec);
    const int64_t s = 2 * spec.half + 1;
    Tensor4 out({1, 1, s, s});
    for (size_t i = 0; i < v.size(); ++i) out[i] = static_cast<float>(v[i]);
    return out;
}

// Superposition of unit-mass Gaussian kernels, one per centroid. Kernels
// clipped by the image border are renormalized so every cell still deposits
// total mass 1, keeping sum(map) == centroid count.
inline Tensor4 density_map(const CentroidList& centroids, const KernelSpec& spec) {
    centroids.validate();
    const int64_t rows = centroids.rows, cols = centroids.cols;
    Tensor4 map({1, 1, rows, cols});
    const auto kernel = detail::gaussian_kernel_values(spec);
    const int64_t half = spec.half, s = 2 * half + 1;

    for (const auto& p : centroids.points) {
        const int64_t y0 = std::max<int64_t>(0, p.y - half), y1 = std::min<int64_t>(rows - 1, p.y + half);
        const int64_t x0 = std::max<int64_t>(0, p.x - half), x1 = std::min<int64_t>(cols - 1, p.x + half);
        double clipped = 0.0;
        for (int64_t y = y0; y <= y1; ++y)
            for (int64_t x = x0; x <= x1; ++x)
                clipped += kernel[static_cast<size_t>((y - p.y + half) * s + (x - p.x + half))];
        for (int64_t y = y0; y <= y1; ++y)
            for (int64_t x = x0; x <= x1; ++x)
                map.at(0, 0, y, x) += static_cast<float>(
                    kernel[static_cast<size_t>((y - p.y + half) * s + (x - p.x + half))] / clipped);
    }
    return map;
}

// non-overlapping sum pooling; conserves total mass
inline Tensor4 sum_pool(const Tensor4& map, int64_t factor) {
    const Shape4 s = map.shape();
    if (s.h % factor != 0 || s.w % factor != 0)
        throw ShapeError("sum_pool: dims " + s.str() + " not divisible by " +
                         std::to_string(factor));
    Tensor4 out({s.b, s.c, s.h / factor, s.w / factor});
    for (int64_t bc = 0; bc < s.b * s.c; ++bc) {
        const float* src = map.data() + bc * s.h * s.w;
        float* dst = out.data() + bc * (s.h / factor) * (s.w / factor);
        for (int64_t y = 0; y < s.h / factor; ++y) {
            for (int64_t x = 0; x < s.w / factor; ++x) {
                double acc = 0.0;
                for (int64_t dy = 0; dy < factor; ++dy)
                    for (int64_t dx = 0; dx < factor; ++dx)
                        acc += src[(y * factor + dy) * s.w + x * factor + dx];
                dst[y * (s.w / factor) + x] = static_cast<float>(acc);
            }
        }
    }
    return out;
}

// The three low-resolution ground-truth maps: factors 8, 4, 2, matching the
// feature resolutions tapped at blocks 4, 5 and 6.
inline std::array<Tensor4, 3> make_lrgt(const Tensor4& full) {
    const Shape4 s = full.shape();
    if (s.h % 8 != 0 || s.w % 8 != 0)
        throw ShapeError("make_lrgt: dims " + s.str() + " must be divisible by 8");
    return {sum_pool(full, 8), sum_pool(full, 4), sum_pool(full, 2)};
}

inline DensityTarget make_density_target(const CentroidList& centroids, const KernelSpec& spec) {
    DensityTarget t;
    t.full = density_map(centroids, spec);
    t.lr = make_lrgt(t.full);
    return t;
}

// decay profile of the proximity field as a function of nearest-centroid
// distance: 1 at distance 0, 0 at and beyond the threshold
inline double proximity_decay(double dist, const ProximitySpec& spec) {
    if (spec.decay_alpha <= 0.0 || spec.dist_threshold <= 0.0)
        throw UsageError("proximity_decay: need decay_alpha > 0 and d > 0");
    if (dist > spec.dist_threshold) return 0.0;
    return (std::exp(spec.decay_alpha * (1.0 - dist / spec.dist_threshold)) - 1.0) /
           (std::exp(spec.decay_alpha) - 1.0);
}

// Exponentially decaying proximity field: 1 at a centroid, 0 at distance >= d.
// Nearest centroids found by exact brute-force search.
inline Tensor4 proximity_map(const CentroidList& centroids, const ProximitySpec& spec) {
    if (spec.decay_alpha <= 0.0 || spec.dist_threshold <= 0.0)
        throw UsageError("proximity_map: need decay_alpha > 0 and d > 0");
    if (centroids.points.empty())
        throw UsageError("proximity_map: centroid list for '" + centroids.image_id +
                         "' is empty");
    centroids.validate();

    Tensor4 map({1, 1, centroids.rows, centroids.cols});
    for (int64_t y = 0; y < centroids.rows; ++y) {
        for (int64_t x = 0; x < centroids.cols; ++x) {
            double d2 = 1e300;
            for (const auto& p : centroids.points) {
                const double dy = static_cast<double>(y - p.y);
                const double dx = static_cast<double>(x - p.x);
                d2 = std::min(d2, dy * dy + dx * dx);
            }
            map.at(0, 0, y, x) = static_cast<float>(proximity_decay(std::sqrt(d2), spec));
        }
    }
    return map;
}

} // namespace cellcount
