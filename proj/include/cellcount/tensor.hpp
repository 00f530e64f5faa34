#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <numeric>
#include <random>
#include <stdexcept>
#include <string>
#include <vector>

namespace cellcount {

struct ShapeError : std::runtime_error {
    explicit ShapeError(const std::string& msg) : std::runtime_error(msg) {}
};

struct UsageError : std::runtime_error {
    explicit UsageError(const std::string& msg) : std::runtime_error(msg) {}
};

struct IoError : std::runtime_error {
    explicit IoError(const std::string& msg) : std::runtime_error(msg) {}
};

struct NumericError : std::runtime_error {
    explicit NumericError(const std::string& msg) : std::runtime_error(msg) {}
};

struct Shape4 {
    int64_t b = 0, c = 0, h = 0, w = 0;

    int64_t numel() const { return b * c * h * w; }
    bool operator==(const Shape4&) const = default;

    std::string str() const {
        return "(" + std::to_string(b) + "," + std::to_string(c) + "," +
               std::to_string(h) + "," + std::to_string(w) + ")";
    }
};

// Dense 4-D value: (batch, channels, height, width), float32, row-major.
class Tensor4 {
public:
    Tensor4() = default;
    explicit Tensor4(Shape4 s, float fill = 0.0f)
        : shape_(s), v_(static_cast<size_t>(s.numel()), fill) {
        if (s.b < 0 || s.c < 0 || s.h < 0 || s.w < 0)
            throw ShapeError("Tensor4: negative dimension " + s.str());
    }
    Tensor4(Shape4 s, std::vector<float> values) : shape_(s), v_(std::move(values)) {
        if (static_cast<int64_t>(v_.size()) != s.numel())
            throw ShapeError("Tensor4: value count " + std::to_string(v_.size()) +
                             " does not match dims " + s.str());
    }

    const Shape4& shape() const { return shape_; }
    int64_t numel() const { return shape_.numel(); }
    bool empty() const { return v_.empty(); }

    float* data() { return v_.data(); }
    const float* data() const { return v_.data(); }
    std::vector<float>& values() { return v_; }
    const std::vector<float>& values() const { return v_; }

    float& at(int64_t b, int64_t c, int64_t h, int64_t w) {
        return v_[static_cast<size_t>(((b * shape_.c + c) * shape_.h + h) * shape_.w + w)];
    }
    float at(int64_t b, int64_t c, int64_t h, int64_t w) const {
        return v_[static_cast<size_t>(((b * shape_.c + c) * shape_.h + h) * shape_.w + w)];
    }

    float& operator[](size_t i) { return v_[i]; }
    float operator[](size_t i) const { return v_[i]; }

    void fill(float x) { std::fill(v_.begin(), v_.end(), x); }

    double sum() const {
        double acc = 0.0;
        for (float x : v_) acc += x;
        return acc;
    }

    bool all_finite() const {
        for (float x : v_)
            if (!std::isfinite(x)) return false;
        return true;
    }

    static Tensor4 scalar(float x) { return Tensor4({1, 1, 1, 1}, {x}); }

private:
    Shape4 shape_{};
    std::vector<float> v_;
};

inline void require_same_shape(const Tensor4& a, const Tensor4& b, const char* where) {
    if (!(a.shape() == b.shape()))
        throw ShapeError(std::string(where) + ": shape mismatch " + a.shape().str() +
                         " vs " + b.shape().str());
}

// Seeded RNG with pinned draw semantics. All randomness in the project goes
// through this wrapper so identically-seeded runs reproduce byte-identical
// artifacts regardless of the standard library's distribution internals.
class Rng {
public:
    explicit Rng(uint64_t seed) : engine_(static_cast<std::mt19937::result_type>(seed)) {}

    uint32_t next_u32() { return engine_(); }

    // uniform in [0, 1) with 24 bits of mantissa
    double uniform01() { return (engine_() >> 8) * (1.0 / 16777216.0); }

    double uniform(double lo, double hi) { return lo + (hi - lo) * uniform01(); }

    // inclusive bounds
    int64_t uniform_int(int64_t lo, int64_t hi) {
        if (hi < lo) throw UsageError("Rng::uniform_int: empty range");
        uint64_t span = static_cast<uint64_t>(hi - lo) + 1;
        return lo + static_cast<int64_t>((static_cast<uint64_t>(engine_()) << 32 |
                                          engine_()) % span);
    }

    bool coin() { return (engine_() & 1u) != 0; }

    // Box-Muller, one cached value
    double normal() {
        if (have_spare_) {
            have_spare_ = false;
            return spare_;
        }
        double u1 = 0.0;
        while (u1 <= 1e-12) u1 = uniform01();
        double u2 = uniform01();
        double r = std::sqrt(-2.0 * std::log(u1));
        double a = 6.283185307179586 * u2;
        spare_ = r * std::sin(a);
        have_spare_ = true;
        return r * std::cos(a);
    }

    // decorrelated child stream, e.g. one per image
    Rng fork(uint64_t stream) {
        uint64_t z = (static_cast<uint64_t>(engine_()) << 32) ^ stream ^ 0x9e3779b97f4a7c15ull;
        z = (z ^ (z >> 30)) * 0xbf58476d1ce4e5b9ull;
        z = (z ^ (z >> 27)) * 0x94d049bb133111ebull;
        return Rng(z ^ (z >> 31));
    }

private:
    std::mt19937 engine_;
    bool have_spare_ = false;
    double spare_ = 0.0;
};

} // namespace cellcount
