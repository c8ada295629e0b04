#pragma once

// Dense row-major arrays and their NPY (v1.0) serialization.

#include <bit>
#include <cstdint>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <functional>
#include <numeric>
#include <span>
#include <sstream>
#include <string>
#include <string_view>
#include <type_traits>
#include <utility>
#include <variant>
#include <vector>

#include "neco/error.hpp"

namespace neco {

static_assert(std::endian::native == std::endian::little,
              "NPY payloads are read and written without byte swapping");

enum class DType { float32, float64, uint8, uint16, int32 };

template <typename T> struct dtype_of;
template <> struct dtype_of<float> { static constexpr DType value = DType::float32; };
template <> struct dtype_of<double> { static constexpr DType value = DType::float64; };
template <> struct dtype_of<std::uint8_t> { static constexpr DType value = DType::uint8; };
template <> struct dtype_of<std::uint16_t> { static constexpr DType value = DType::uint16; };
template <> struct dtype_of<std::int32_t> { static constexpr DType value = DType::int32; };

inline std::string_view dtype_name(DType t) {
    switch (t) {
    case DType::float32: return "float32";
    case DType::float64: return "float64";
    case DType::uint8: return "uint8";
    case DType::uint16: return "uint16";
    case DType::int32: return "int32";
    }
    return "?";
}

using Shape = std::vector<std::size_t>;

inline std::size_t element_count(const Shape& shape) {
    return std::accumulate(shape.begin(), shape.end(), std::size_t{1}, std::multiplies<>());
}

inline std::string shape_string(const Shape& shape) {
    std::string s = "(";
    for (std::size_t i = 0; i < shape.size(); ++i) {
        if (i) s += ", ";
        s += std::to_string(shape[i]);
    }
    return s + ")";
}

/// A shaped, typed, row-major buffer. Value semantics; element count always
/// equals the product of the shape.
class Tensor {
public:
    using Storage = std::variant<std::vector<float>, std::vector<double>, std::vector<std::uint8_t>,
                                 std::vector<std::uint16_t>, std::vector<std::int32_t>>;

    Tensor() : Tensor(Shape{0}, std::vector<float>{}) {}

    template <typename T>
    Tensor(Shape shape, std::vector<T> data) : shape_(std::move(shape)), data_(std::move(data)) {
        if (element_count(shape_) != std::get<std::vector<T>>(data_).size()) {
            throw DataError("tensor shape " + shape_string(shape_) + " does not match " +
                            std::to_string(std::get<std::vector<T>>(data_).size()) + " elements");
        }
    }

    template <typename T>
    static Tensor zeros(Shape shape) {
        auto n = element_count(shape);
        return Tensor(std::move(shape), std::vector<T>(n));
    }

    const Shape& shape() const noexcept { return shape_; }
    std::size_t rank() const noexcept { return shape_.size(); }
    std::size_t dim(std::size_t i) const { return shape_.at(i); }
    std::size_t size() const noexcept { return element_count(shape_); }

    DType dtype() const noexcept {
        return std::visit([](const auto& v) { return dtype_of<typename std::decay_t<decltype(v)>::value_type>::value; },
                          data_);
    }

    template <typename T>
    bool holds() const noexcept {
        return std::holds_alternative<std::vector<T>>(data_);
    }

    template <typename T>
    std::span<const T> values() const {
        if (!holds<T>()) {
            throw DataError("tensor holds " + std::string(dtype_name(dtype())) + ", requested " +
                            std::string(dtype_name(dtype_of<T>::value)));
        }
        return std::get<std::vector<T>>(data_);
    }

    template <typename T>
    std::span<T> values() {
        if (!holds<T>()) {
            throw DataError("tensor holds " + std::string(dtype_name(dtype())) + ", requested " +
                            std::string(dtype_name(dtype_of<T>::value)));
        }
        return std::get<std::vector<T>>(data_);
    }

    /// Raw little-endian payload view.
    std::span<const std::byte> bytes() const {
        return std::visit([](const auto& v) { return std::as_bytes(std::span(v)); }, data_);
    }

    /// Element i converted to double, for dtype-agnostic consumers.
    double at_double(std::size_t i) const {
        return std::visit([i](const auto& v) { return static_cast<double>(v[i]); }, data_);
    }

    friend bool operator==(const Tensor& a, const Tensor& b) {
        if (a.shape_ != b.shape_ || a.dtype() != b.dtype()) return false;
        auto x = a.bytes();
        auto y = b.bytes();
        return x.size() == y.size() && (x.empty() || std::memcmp(x.data(), y.data(), x.size()) == 0);
    }

private:
    Shape shape_;
    Storage data_;
};

/// Distinct failure modes when decoding an array file.
class ArrayFormatError : public DataError {
public:
    enum class Code { malformed_header, unsupported_dtype, truncated_payload };

    ArrayFormatError(Code code, const std::string& what) : DataError(what), code_(code) {}
    Code code() const noexcept { return code_; }

private:
    Code code_;
};

namespace npy_detail {

inline std::string_view descr_of(DType t) {
    switch (t) {
    case DType::float32: return "<f4";
    case DType::float64: return "<f8";
    case DType::uint8: return "|u1";
    case DType::uint16: return "<u2";
    case DType::int32: return "<i4";
    }
    return "";
}

inline bool parse_descr(std::string_view d, DType& out) {
    if (d == "<f4") out = DType::float32;
    else if (d == "<f8") out = DType::float64;
    else if (d == "|u1" || d == "<u1") out = DType::uint8;
    else if (d == "<u2") out = DType::uint16;
    else if (d == "<i4") out = DType::int32;
    else return false;
    return true;
}

inline std::size_t dtype_size(DType t) {
    switch (t) {
    case DType::float32: return 4;
    case DType::float64: return 8;
    case DType::uint8: return 1;
    case DType::uint16: return 2;
    case DType::int32: return 4;
    }
    return 0;
}

// Value following `'key':` in a numpy header dict, trimmed up to the next
// top-level comma or closing brace.
inline std::string_view dict_value(std::string_view header, std::string_view key) {
    std::string needle = "'" + std::string(key) + "'";
    auto pos = header.find(needle);
    if (pos == std::string_view::npos) return {};
    pos = header.find(':', pos + needle.size());
    if (pos == std::string_view::npos) return {};
    ++pos;
    while (pos < header.size() && header[pos] == ' ') ++pos;
    auto end = pos;
    int depth = 0;
    while (end < header.size()) {
        char c = header[end];
        if (c == '(') ++depth;
        else if (c == ')') --depth;
        else if ((c == ',' || c == '}') && depth == 0) break;
        ++end;
    }
    return header.substr(pos, end - pos);
}

inline Shape parse_shape(std::string_view text, const std::string& path) {
    auto fail = [&] {
        return ArrayFormatError(ArrayFormatError::Code::malformed_header,
                                path + ": malformed shape '" + std::string(text) + "'");
    };
    if (text.size() < 2 || text.front() != '(' || text.back() != ')') throw fail();
    Shape shape;
    std::string_view body = text.substr(1, text.size() - 2);
    std::size_t i = 0;
    while (i < body.size()) {
        while (i < body.size() && (body[i] == ' ' || body[i] == ',')) ++i;
        if (i >= body.size()) break;
        std::size_t v = 0;
        std::size_t start = i;
        while (i < body.size() && body[i] >= '0' && body[i] <= '9') {
            v = v * 10 + static_cast<std::size_t>(body[i] - '0');
            ++i;
        }
        if (i == start) throw fail();
        if (i < body.size() && body[i] == 'L') ++i;
        shape.push_back(v);
    }
    return shape;
}

template <typename T>
Tensor read_payload(std::istream& in, Shape shape, const std::string& path) {
    std::vector<T> data(element_count(shape));
    const auto want = static_cast<std::streamsize>(data.size() * sizeof(T));
    in.read(reinterpret_cast<char*>(data.data()), want);
    if (in.gcount() != want) {
        throw ArrayFormatError(ArrayFormatError::Code::truncated_payload,
                               path + ": payload truncated (" + std::to_string(in.gcount()) + " of " +
                                   std::to_string(want) + " bytes)");
    }
    if (in.peek() != std::char_traits<char>::eof()) {
        throw ArrayFormatError(ArrayFormatError::Code::malformed_header,
                               path + ": trailing bytes after payload of shape " + shape_string(shape));
    }
    return Tensor(std::move(shape), std::move(data));
}

}  // namespace npy_detail

/// Decodes an NPY file (format 1.0 or 2.0, C order, little endian).
inline Tensor read_array(const std::filesystem::path& path) {
    using Code = ArrayFormatError::Code;
    const std::string name = path.string();
    std::ifstream in(path, std::ios::binary);
    if (!in) throw DataError(name + ": cannot open array file");

    char magic[8];
    in.read(magic, 8);
    if (in.gcount() != 8 || std::memcmp(magic, "\x93NUMPY", 6) != 0) {
        throw ArrayFormatError(Code::malformed_header, name + ": missing NPY magic");
    }
    const auto major = static_cast<unsigned char>(magic[6]);
    std::size_t header_len = 0;
    if (major == 1) {
        unsigned char len[2];
        in.read(reinterpret_cast<char*>(len), 2);
        if (in.gcount() != 2) throw ArrayFormatError(Code::malformed_header, name + ": short header");
        header_len = len[0] | (len[1] << 8);
    } else if (major == 2) {
        unsigned char len[4];
        in.read(reinterpret_cast<char*>(len), 4);
        if (in.gcount() != 4) throw ArrayFormatError(Code::malformed_header, name + ": short header");
        header_len = len[0] | (len[1] << 8) | (len[2] << 16) | (static_cast<std::size_t>(len[3]) << 24);
    } else {
        throw ArrayFormatError(Code::malformed_header, name + ": unsupported NPY version " + std::to_string(major));
    }

    std::string header(header_len, '\0');
    in.read(header.data(), static_cast<std::streamsize>(header_len));
    if (static_cast<std::size_t>(in.gcount()) != header_len) {
        throw ArrayFormatError(Code::malformed_header, name + ": header shorter than declared");
    }

    auto descr = npy_detail::dict_value(header, "descr");
    auto fortran = npy_detail::dict_value(header, "fortran_order");
    auto shape_text = npy_detail::dict_value(header, "shape");
    if (descr.size() < 2 || shape_text.empty() || fortran.empty()) {
        throw ArrayFormatError(Code::malformed_header, name + ": header dict missing descr/fortran_order/shape");
    }
    if (fortran != "False") {
        throw ArrayFormatError(Code::malformed_header, name + ": Fortran-order arrays are not supported");
    }
    descr = descr.substr(1, descr.size() - 2);  // strip quotes
    DType dtype{};
    if (!npy_detail::parse_descr(descr, dtype)) {
        throw ArrayFormatError(Code::unsupported_dtype, name + ": unsupported dtype '" + std::string(descr) + "'");
    }
    Shape shape = npy_detail::parse_shape(shape_text, name);

    switch (dtype) {
    case DType::float32: return npy_detail::read_payload<float>(in, std::move(shape), name);
    case DType::float64: return npy_detail::read_payload<double>(in, std::move(shape), name);
    case DType::uint8: return npy_detail::read_payload<std::uint8_t>(in, std::move(shape), name);
    case DType::uint16: return npy_detail::read_payload<std::uint16_t>(in, std::move(shape), name);
    case DType::int32: return npy_detail::read_payload<std::int32_t>(in, std::move(shape), name);
    }
    throw ArrayFormatError(Code::unsupported_dtype, name + ": unsupported dtype");
}

/// Encodes as NPY 1.0. Header padded so the payload starts on a 64-byte boundary.
inline void write_array(const std::filesystem::path& path, const Tensor& t) {
    std::string header = "{'descr': '" + std::string(npy_detail::descr_of(t.dtype())) +
                         "', 'fortran_order': False, 'shape': (";
    for (std::size_t i = 0; i < t.rank(); ++i) {
        header += std::to_string(t.dim(i));
        if (t.rank() == 1 || i + 1 < t.rank()) header += ",";
        if (i + 1 < t.rank()) header += " ";
    }
    header += "), }";
    const std::size_t unpadded = 10 + header.size() + 1;
    header.append((64 - unpadded % 64) % 64, ' ');
    header += '\n';

    std::ofstream out(path, std::ios::binary | std::ios::trunc);
    if (!out) throw DataError(path.string() + ": cannot open for writing");
    const unsigned char preamble[10] = {0x93, 'N', 'U', 'M', 'P', 'Y', 1, 0,
                                        static_cast<unsigned char>(header.size() & 0xff),
                                        static_cast<unsigned char>(header.size() >> 8)};
    out.write(reinterpret_cast<const char*>(preamble), 10);
    out.write(header.data(), static_cast<std::streamsize>(header.size()));
    auto payload = t.bytes();
    out.write(reinterpret_cast<const char*>(payload.data()), static_cast<std::streamsize>(payload.size()));
    out.flush();
    if (!out) throw DataError(path.string() + ": write failed");
}

}  // namespace neco
