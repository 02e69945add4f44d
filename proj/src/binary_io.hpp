#pragma once

// Little-endian binary helpers shared by the model and filter containers.

#include <array>
#include <bit>
#include <cstdint>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <iterator>
#include <string>
#include <string_view>
#include <vector>

#include "facecap/error.hpp"

namespace facecap::detail {

class BinaryWriter {
public:
  void bytes(std::string_view s) { buf_.insert(buf_.end(), s.begin(), s.end()); }

  template <typename T>
  void le(T value) {
    using U = std::conditional_t<sizeof(T) == 8, std::uint64_t, std::uint32_t>;
    static_assert(sizeof(T) == sizeof(U));
    const U bits = std::bit_cast<U>(value);
    for (std::size_t i = 0; i < sizeof(U); ++i) buf_.push_back(static_cast<char>((bits >> (8 * i)) & 0xFFu));
  }

  void save(const std::filesystem::path& path) const {
    std::ofstream out(path, std::ios::binary);
    if (!out) throw Error("cannot open '" + path.string() + "' for writing");
    out.write(buf_.data(), static_cast<std::streamsize>(buf_.size()));
    if (!out) throw Error("write failed for '" + path.string() + "'");
  }

private:
  std::vector<char> buf_;
};

class BinaryReader {
public:
  explicit BinaryReader(const std::filesystem::path& path) : name_(path.string()) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw Error("cannot open '" + name_ + "' for reading");
    buf_.assign(std::istreambuf_iterator<char>(in), std::istreambuf_iterator<char>());
  }

  void expect(std::string_view magic) {
    need(magic.size());
    if (std::string_view(buf_.data() + pos_, magic.size()) != magic) throw Error(name_ + ": bad magic");
    pos_ += magic.size();
  }

  template <typename T>
  T le() {
    using U = std::conditional_t<sizeof(T) == 8, std::uint64_t, std::uint32_t>;
    need(sizeof(U));
    U bits = 0;
    for (std::size_t i = 0; i < sizeof(U); ++i) {
      bits |= static_cast<U>(static_cast<unsigned char>(buf_[pos_ + i])) << (8 * i);
    }
    pos_ += sizeof(U);
    return std::bit_cast<T>(bits);
  }

  // Guards against absurd counts before allocating.
  void need(std::size_t n) const {
    if (n > buf_.size() - pos_) throw Error(name_ + ": file truncated");
  }

  bool at_end() const { return pos_ == buf_.size(); }
  const std::string& name() const { return name_; }

private:
  std::string name_;
  std::vector<char> buf_;
  std::size_t pos_ = 0;
};

}  // namespace facecap::detail
