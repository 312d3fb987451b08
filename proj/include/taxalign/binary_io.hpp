#pragma once

// Little-endian encoders for the binary embedding and checkpoint formats.

#include <bit>
#include <cstdint>
#include <cstring>
#include <string>
#include <string_view>

#include "taxalign/errors.hpp"

namespace taxalign::binary {

template <class UInt>
void put_le(std::string& out, UInt v) {
    for (std::size_t i = 0; i < sizeof(UInt); ++i) {
        out.push_back(static_cast<char>((v >> (8 * i)) & 0xff));
    }
}

inline void put_f32(std::string& out, float v) { put_le(out, std::bit_cast<std::uint32_t>(v)); }
inline void put_f64(std::string& out, double v) { put_le(out, std::bit_cast<std::uint64_t>(v)); }

class Reader {
public:
    explicit Reader(std::string_view data) : data_(data) {}

    [[nodiscard]] bool done() const noexcept { return pos_ == data_.size(); }
    [[nodiscard]] std::size_t offset() const noexcept { return pos_; }

    template <class UInt>
    UInt get_le() {
        need(sizeof(UInt));
        UInt v = 0;
        for (std::size_t i = 0; i < sizeof(UInt); ++i) {
            v |= static_cast<UInt>(static_cast<unsigned char>(data_[pos_ + i])) << (8 * i);
        }
        pos_ += sizeof(UInt);
        return v;
    }

    float get_f32() { return std::bit_cast<float>(get_le<std::uint32_t>()); }
    double get_f64() { return std::bit_cast<double>(get_le<std::uint64_t>()); }

    std::string get_bytes(std::size_t n) {
        need(n);
        std::string s(data_.substr(pos_, n));
        pos_ += n;
        return s;
    }

private:
    void need(std::size_t n) const {
        if (data_.size() - pos_ < n) {
            throw parse_error(0, "truncated binary input at byte " + std::to_string(pos_));
        }
    }

    std::string_view data_;
    std::size_t pos_ = 0;
};

}  // namespace taxalign::binary
