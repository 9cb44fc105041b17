#pragma once

// Dense row-major double tensors plus the small set of numerics the rest of
// the project is built on: relative L1 distance, difference statistics,
// seeded Gaussian sampling, PSNR/SSIM, and a flat binary container format.

#include <cmath>
#include <cstdint>
#include <cstring>
#include <fstream>
#include <limits>
#include <ostream>
#include <istream>
#include <stdexcept>
#include <string>
#include <vector>

namespace mixcache {

using Shape = std::vector<std::size_t>;

inline std::size_t shape_numel(const Shape& shape) {
    std::size_t n = 1;
    for (std::size_t extent : shape) {
        if (extent == 0) {
            throw std::invalid_argument("tensor shape has a zero extent");
        }
        n *= extent;
    }
    return n;
}

struct Tensor {
    Shape shape;
    std::vector<double> data;

    Tensor() = default;

    explicit Tensor(Shape s, double fill = 0.0)
        : shape(std::move(s)), data(shape_numel(shape), fill) {}

    Tensor(Shape s, std::vector<double> values)
        : shape(std::move(s)), data(std::move(values)) {
        if (shape_numel(shape) != data.size()) {
            throw std::invalid_argument("tensor data length does not match shape");
        }
    }

    std::size_t numel() const { return data.size(); }

    double& operator[](std::size_t i) { return data[i]; }
    double operator[](std::size_t i) const { return data[i]; }
};

inline bool same_shape(const Tensor& a, const Tensor& b) {
    return a.shape == b.shape;
}

inline void require_same_shape(const Tensor& a, const Tensor& b, const char* op) {
    if (!same_shape(a, b)) {
        throw std::invalid_argument(std::string(op) + ": shape mismatch");
    }
}

// Shape-and-bit equality. NaN payloads compare equal to themselves, which is
// what the cache-exactness tests need.
inline bool bitwise_equal(const Tensor& a, const Tensor& b) {
    if (!same_shape(a, b)) {
        return false;
    }
    if (a.data.empty()) {
        return true;
    }
    return std::memcmp(a.data.data(), b.data.data(), a.data.size() * sizeof(double)) == 0;
}

inline Tensor add(const Tensor& a, const Tensor& b) {
    require_same_shape(a, b, "add");
    Tensor out = a;
    for (std::size_t i = 0; i < out.data.size(); ++i) {
        out.data[i] += b.data[i];
    }
    return out;
}

inline Tensor sub(const Tensor& a, const Tensor& b) {
    require_same_shape(a, b, "sub");
    Tensor out = a;
    for (std::size_t i = 0; i < out.data.size(); ++i) {
        out.data[i] -= b.data[i];
    }
    return out;
}

inline Tensor scaled(const Tensor& a, double c) {
    Tensor out = a;
    for (double& v : out.data) {
        v *= c;
    }
    return out;
}

inline double l1_norm(const Tensor& a) {
    double sum = 0.0;
    for (double v : a.data) {
        sum += std::fabs(v);
    }
    return sum;
}

// D = ||a - b||_1 / ||b||_1, the redundancy measure used at every cache level.
inline double relative_l1(const Tensor& a, const Tensor& b) {
    require_same_shape(a, b, "relative_l1");
    double num = 0.0;
    double den = 0.0;
    for (std::size_t i = 0; i < a.data.size(); ++i) {
        num += std::fabs(a.data[i] - b.data[i]);
        den += std::fabs(b.data[i]);
    }
    if (den == 0.0) {
        throw std::invalid_argument("relative_l1: reference tensor has zero L1 norm");
    }
    return num / den;
}

struct DiffStats {
    double mu = 0.0;
    double sigma = 0.0;  // population standard deviation
};

inline DiffStats diff_stats(const Tensor& a, const Tensor& b) {
    require_same_shape(a, b, "diff_stats");
    const std::size_t n = a.data.size();
    double mean = 0.0;
    for (std::size_t i = 0; i < n; ++i) {
        mean += a.data[i] - b.data[i];
    }
    mean /= static_cast<double>(n);
    double var = 0.0;
    for (std::size_t i = 0; i < n; ++i) {
        const double d = (a.data[i] - b.data[i]) - mean;
        var += d * d;
    }
    var /= static_cast<double>(n);
    return DiffStats{mean, std::sqrt(var)};
}

namespace detail {

inline std::uint64_t splitmix64(std::uint64_t x) {
    x += 0x9e3779b97f4a7c15ULL;
    x = (x ^ (x >> 30)) * 0xbf58476d1ce4e5b9ULL;
    x = (x ^ (x >> 27)) * 0x94d049bb133111ebULL;
    return x ^ (x >> 31);
}

inline std::uint64_t mix_seed(std::uint64_t base, std::uint64_t salt) {
    return splitmix64(base ^ (splitmix64(salt) + 0x9e3779b97f4a7c15ULL + (base << 6) + (base >> 2)));
}

// 53-bit uniform in [0, 1).
inline double u64_to_unit(std::uint64_t x) {
    return static_cast<double>(x >> 11) * 0x1.0p-53;
}

// Deterministic N(0,1) stream. Box-Muller over a splitmix64 sequence keeps
// the values identical across standard-library implementations, which
// std::normal_distribution does not guarantee.
class GaussianStream {
public:
    explicit GaussianStream(std::uint64_t seed) : state_(seed) {}

    double next() {
        if (has_spare_) {
            has_spare_ = false;
            return spare_;
        }
        const double u1 = 1.0 - u64_to_unit(next_u64());  // (0, 1]
        const double u2 = u64_to_unit(next_u64());
        const double r = std::sqrt(-2.0 * std::log(u1));
        const double angle = 2.0 * 3.14159265358979323846 * u2;
        spare_ = r * std::sin(angle);
        has_spare_ = true;
        return r * std::cos(angle);
    }

private:
    std::uint64_t next_u64() {
        state_ += 0x9e3779b97f4a7c15ULL;
        std::uint64_t x = state_;
        x = (x ^ (x >> 30)) * 0xbf58476d1ce4e5b9ULL;
        x = (x ^ (x >> 27)) * 0x94d049bb133111ebULL;
        return x ^ (x >> 31);
    }

    std::uint64_t state_;
    double spare_ = 0.0;
    bool has_spare_ = false;
};

}  // namespace detail

inline Tensor gaussian_like(const Shape& shape, double mu, double sigma, std::uint64_t seed) {
    if (sigma < 0.0) {
        throw std::invalid_argument("gaussian_like: sigma must be >= 0");
    }
    Tensor out{Shape(shape)};
    if (sigma == 0.0) {
        for (double& v : out.data) {
            v = mu;
        }
        return out;
    }
    detail::GaussianStream stream(seed);
    for (double& v : out.data) {
        v = mu + sigma * stream.next();
    }
    return out;
}

inline double psnr(const Tensor& a, const Tensor& b, double peak) {
    require_same_shape(a, b, "psnr");
    if (!(peak > 0.0)) {
        throw std::invalid_argument("psnr: peak must be > 0");
    }
    double mse = 0.0;
    for (std::size_t i = 0; i < a.data.size(); ++i) {
        const double d = a.data[i] - b.data[i];
        mse += d * d;
    }
    mse /= static_cast<double>(a.data.size());
    if (mse == 0.0) {
        return std::numeric_limits<double>::infinity();
    }
    return 10.0 * std::log10(peak * peak / mse);
}

// Global-statistics SSIM over the flattened tensors. Latents are not images,
// so no windowing; the usual stabilizers C1/C2 are scaled by `peak`.
inline double ssim(const Tensor& a, const Tensor& b, double peak = 1.0) {
    require_same_shape(a, b, "ssim");
    const std::size_t n = a.data.size();
    if (n < 2) {
        throw std::invalid_argument("ssim: needs at least 2 elements");
    }
    double mean_a = 0.0;
    double mean_b = 0.0;
    for (std::size_t i = 0; i < n; ++i) {
        mean_a += a.data[i];
        mean_b += b.data[i];
    }
    mean_a /= static_cast<double>(n);
    mean_b /= static_cast<double>(n);

    double var_a = 0.0;
    double var_b = 0.0;
    double cov = 0.0;
    for (std::size_t i = 0; i < n; ++i) {
        const double da = a.data[i] - mean_a;
        const double db = b.data[i] - mean_b;
        var_a += da * da;
        var_b += db * db;
        cov += da * db;
    }
    var_a /= static_cast<double>(n);
    var_b /= static_cast<double>(n);
    cov /= static_cast<double>(n);

    const double c1 = (0.01 * peak) * (0.01 * peak);
    const double c2 = (0.03 * peak) * (0.03 * peak);
    return ((2.0 * mean_a * mean_b + c1) * (2.0 * cov + c2)) /
           ((mean_a * mean_a + mean_b * mean_b + c1) * (var_a + var_b + c2));
}

// --- binary container ----------------------------------------------------
//
// Layout: magic "MXT1", rank as u32, extents as u64 each, then raw f64 data.
// Everything little-endian.

namespace detail {

inline void write_le(std::ostream& os, std::uint64_t value, int bytes) {
    char buf[8];
    for (int i = 0; i < bytes; ++i) {
        buf[i] = static_cast<char>((value >> (8 * i)) & 0xff);
    }
    os.write(buf, bytes);
}

inline std::uint64_t read_le(std::istream& is, int bytes) {
    char buf[8];
    is.read(buf, bytes);
    if (!is) {
        throw std::runtime_error("tensor container: truncated header");
    }
    std::uint64_t value = 0;
    for (int i = 0; i < bytes; ++i) {
        value |= static_cast<std::uint64_t>(static_cast<unsigned char>(buf[i])) << (8 * i);
    }
    return value;
}

}  // namespace detail

inline void save_tensor(const Tensor& t, std::ostream& os) {
    os.write("MXT1", 4);
    detail::write_le(os, t.shape.size(), 4);
    for (std::size_t extent : t.shape) {
        detail::write_le(os, extent, 8);
    }
    for (double v : t.data) {
        std::uint64_t bits;
        std::memcpy(&bits, &v, sizeof(bits));
        detail::write_le(os, bits, 8);
    }
    if (!os) {
        throw std::runtime_error("tensor container: write failed");
    }
}

inline void save_tensor(const Tensor& t, const std::string& path) {
    std::ofstream os(path, std::ios::binary);
    if (!os) {
        throw std::runtime_error("tensor container: cannot open " + path + " for writing");
    }
    save_tensor(t, os);
}

inline Tensor load_tensor(std::istream& is) {
    char magic[4];
    is.read(magic, 4);
    if (!is || std::memcmp(magic, "MXT1", 4) != 0) {
        throw std::runtime_error("tensor container: bad magic");
    }
    const std::uint64_t rank = detail::read_le(is, 4);
    if (rank > 64) {
        throw std::runtime_error("tensor container: implausible rank");
    }
    Shape shape(rank);
    for (std::uint64_t i = 0; i < rank; ++i) {
        shape[i] = static_cast<std::size_t>(detail::read_le(is, 8));
    }
    Tensor out{std::move(shape)};
    for (double& v : out.data) {
        const std::uint64_t bits = detail::read_le(is, 8);
        std::memcpy(&v, &bits, sizeof(v));
    }
    return out;
}

inline Tensor load_tensor(const std::string& path) {
    std::ifstream is(path, std::ios::binary);
    if (!is) {
        throw std::runtime_error("tensor container: cannot open " + path);
    }
    return load_tensor(is);
}

}  // namespace mixcache
