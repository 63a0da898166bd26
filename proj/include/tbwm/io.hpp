#pragma once

// Binary stream helpers for checkpoints (exact double round-trips).

#include <cstdint>
#include <istream>
#include <ostream>
#include <stdexcept>
#include <string>
#include <vector>

#include "tbwm/tensor.hpp"

namespace tbwm::io {

inline void write_u64(std::ostream& os, std::uint64_t v) {
    os.write(reinterpret_cast<const char*>(&v), sizeof(v));
}

inline std::uint64_t read_u64(std::istream& is) {
    std::uint64_t v = 0;
    is.read(reinterpret_cast<char*>(&v), sizeof(v));
    if (!is) throw std::runtime_error("checkpoint: truncated stream (u64)");
    return v;
}

inline void write_i64(std::ostream& os, std::int64_t v) {
    write_u64(os, static_cast<std::uint64_t>(v));
}

inline std::int64_t read_i64(std::istream& is) {
    return static_cast<std::int64_t>(read_u64(is));
}

inline void write_f64(std::ostream& os, double v) {
    os.write(reinterpret_cast<const char*>(&v), sizeof(v));
}

inline double read_f64(std::istream& is) {
    double v = 0;
    is.read(reinterpret_cast<char*>(&v), sizeof(v));
    if (!is) throw std::runtime_error("checkpoint: truncated stream (f64)");
    return v;
}

inline void write_string(std::ostream& os, const std::string& s) {
    write_u64(os, s.size());
    os.write(s.data(), static_cast<std::streamsize>(s.size()));
}

inline std::string read_string(std::istream& is) {
    const auto n = read_u64(is);
    std::string s(n, '\0');
    is.read(s.data(), static_cast<std::streamsize>(n));
    if (!is) throw std::runtime_error("checkpoint: truncated stream (string)");
    return s;
}

inline void write_f64_vec(std::ostream& os, const std::vector<double>& v) {
    write_u64(os, v.size());
    os.write(reinterpret_cast<const char*>(v.data()),
             static_cast<std::streamsize>(v.size() * sizeof(double)));
}

inline std::vector<double> read_f64_vec(std::istream& is) {
    const auto n = read_u64(is);
    std::vector<double> v(n);
    is.read(reinterpret_cast<char*>(v.data()),
            static_cast<std::streamsize>(n * sizeof(double)));
    if (!is) throw std::runtime_error("checkpoint: truncated stream (f64 vec)");
    return v;
}

inline void write_i32_vec(std::ostream& os, const std::vector<int>& v) {
    write_u64(os, v.size());
    os.write(reinterpret_cast<const char*>(v.data()),
             static_cast<std::streamsize>(v.size() * sizeof(int)));
}

inline std::vector<int> read_i32_vec(std::istream& is) {
    const auto n = read_u64(is);
    std::vector<int> v(n);
    is.read(reinterpret_cast<char*>(v.data()),
            static_cast<std::streamsize>(n * sizeof(int)));
    if (!is) throw std::runtime_error("checkpoint: truncated stream (i32 vec)");
    return v;
}

inline void write_tensor(std::ostream& os, const Tensor& t) {
    write_u64(os, t.shape().size());
    for (int d : t.shape()) write_i64(os, d);
    os.write(reinterpret_cast<const char*>(t.data()),
             static_cast<std::streamsize>(t.size() * sizeof(double)));
}

inline Tensor read_tensor(std::istream& is) {
    const auto nd = read_u64(is);
    std::vector<int> shape(nd);
    for (auto& d : shape) d = static_cast<int>(read_i64(is));
    Tensor t(shape);
    is.read(reinterpret_cast<char*>(t.data()),
            static_cast<std::streamsize>(t.size() * sizeof(double)));
    if (!is) throw std::runtime_error("checkpoint: truncated stream (tensor)");
    return t;
}

// Reads into an existing tensor, enforcing the expected shape.
inline void read_tensor_into(std::istream& is, Tensor& t) {
    Tensor r = read_tensor(is);
    if (!r.same_shape(t))
        throw std::runtime_error("checkpoint: tensor shape mismatch");
    t = r;
}

}  // namespace tbwm::io
