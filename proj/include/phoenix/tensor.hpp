#pragma once
// Dense row-major float tensor. Shapes are plain int vectors; layer code
// reads 3-D activations as {C, H, W}.

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <stdexcept>
#include <string>
#include <vector>

namespace phoenix {

struct Tensor {
    std::vector<int> dims;
    std::vector<float> data;

    Tensor() = default;
    explicit Tensor(std::vector<int> d) : dims(std::move(d)) {
        data.assign(element_count(dims), 0.0f);
    }
    Tensor(std::vector<int> d, std::vector<float> values)
        : dims(std::move(d)), data(std::move(values)) {
        if (data.size() != element_count(dims))
            throw std::invalid_argument("tensor data does not match shape");
    }

    static std::size_t element_count(const std::vector<int>& d) {
        std::size_t n = 1;
        for (int x : d) {
            if (x <= 0) throw std::invalid_argument("non-positive dimension");
            n *= static_cast<std::size_t>(x);
        }
        return n;
    }

    std::size_t size() const { return data.size(); }
    bool same_shape(const Tensor& o) const { return dims == o.dims; }

    // {C, H, W} accessors.
    float& at(int c, int y, int x) {
        return data[(static_cast<std::size_t>(c) * dims[1] + y) * dims[2] + x];
    }
    float at(int c, int y, int x) const {
        return data[(static_cast<std::size_t>(c) * dims[1] + y) * dims[2] + x];
    }
};

inline std::string shape_str(const std::vector<int>& dims) {
    std::string s = "[";
    for (std::size_t i = 0; i < dims.size(); ++i)
        s += (i ? "x" : "") + std::to_string(dims[i]);
    return s + "]";
}

/// ||a - b||_2 / ||b||_2 as a percentage; 0/0 counts as zero error.
inline double relative_l2_pct(const std::vector<float>& a,
                              const std::vector<float>& b) {
    if (a.size() != b.size())
        throw std::invalid_argument("relative_l2_pct: size mismatch");
    double num = 0.0, den = 0.0;
    for (std::size_t i = 0; i < a.size(); ++i) {
        double d = static_cast<double>(a[i]) - b[i];
        num += d * d;
        den += static_cast<double>(b[i]) * b[i];
    }
    if (den == 0.0) return num == 0.0 ? 0.0 : 100.0;
    return 100.0 * std::sqrt(num / den);
}

inline double max_abs_diff(const std::vector<float>& a,
                           const std::vector<float>& b) {
    double m = 0.0;
    for (std::size_t i = 0; i < a.size(); ++i)
        m = std::max(m, std::abs(static_cast<double>(a[i]) - b[i]));
    return m;
}

}  // namespace phoenix
