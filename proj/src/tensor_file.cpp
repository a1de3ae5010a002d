#include "qe/tensor_file.hpp"

#include <bit>
#include <cmath>
#include <cstring>
#include <fstream>
#include <iterator>
#include <limits>

#include "qe/error.hpp"

namespace qe {
namespace {

template <typename T>
void put_le(std::vector<std::uint8_t>& out, T value) {
  using U = std::conditional_t<sizeof(T) == 8, std::uint64_t,
                               std::conditional_t<sizeof(T) == 4, std::uint32_t, std::uint8_t>>;
  const U bits = std::bit_cast<U>(value);
  for (std::size_t i = 0; i < sizeof(T); ++i) out.push_back(static_cast<std::uint8_t>(bits >> (8 * i)));
}

template <typename T>
T get_le(const std::uint8_t* p) {
  using U = std::conditional_t<sizeof(T) == 8, std::uint64_t,
                               std::conditional_t<sizeof(T) == 4, std::uint32_t, std::uint8_t>>;
  U bits = 0;
  for (std::size_t i = 0; i < sizeof(T); ++i) bits |= static_cast<U>(p[i]) << (8 * i);
  return std::bit_cast<T>(bits);
}

}  // namespace

std::size_t dtype_size(DType t) {
  switch (t) {
    case DType::f32: return 4;
    case DType::f64: return 8;
    case DType::i8: return 1;
    case DType::i32: return 4;
  }
  return 0;
}

std::uint64_t RawTensor::element_count() const {
  std::uint64_t n = 1;
  for (auto d : dims) n *= d;
  return n;
}

std::vector<std::uint8_t> encode_tensor(const RawTensor& t) {
  std::vector<std::uint8_t> out;
  out.reserve(16 + 8 * t.dims.size() + t.payload.size());
  const char magic[4] = {'Q', 'E', 'T', 'F'};
  out.insert(out.end(), magic, magic + 4);
  put_le<std::uint32_t>(out, kTensorFileVersion);
  put_le<std::uint32_t>(out, static_cast<std::uint32_t>(t.dtype));
  put_le<std::uint32_t>(out, static_cast<std::uint32_t>(t.dims.size()));
  for (auto d : t.dims) put_le<std::uint64_t>(out, d);
  out.insert(out.end(), t.payload.begin(), t.payload.end());
  return out;
}

RawTensor decode_tensor(std::span<const std::uint8_t> bytes, const std::string& source) {
  if (bytes.size() < 16) throw ParseError(source, bytes.size(), "truncated header");
  if (std::memcmp(bytes.data(), "QETF", 4) != 0) throw ParseError(source, 0, "bad magic, expected QETF");
  const auto version = get_le<std::uint32_t>(bytes.data() + 4);
  if (version != kTensorFileVersion) {
    throw ParseError(source, 4, "unsupported version " + std::to_string(version));
  }
  const auto code = get_le<std::uint32_t>(bytes.data() + 8);
  if (code < 1 || code > 4) throw ParseError(source, 8, "unknown dtype code " + std::to_string(code));
  const auto ndim = get_le<std::uint32_t>(bytes.data() + 12);
  if (ndim > 8) throw ParseError(source, 12, "ndim " + std::to_string(ndim) + " too large");
  RawTensor t;
  t.dtype = static_cast<DType>(code);
  std::size_t off = 16;
  if (bytes.size() < off + 8ull * ndim) throw ParseError(source, bytes.size(), "truncated dims");
  std::uint64_t count = 1;
  for (std::uint32_t i = 0; i < ndim; ++i, off += 8) {
    const auto d = get_le<std::uint64_t>(bytes.data() + off);
    if (d != 0 && count > std::numeric_limits<std::uint64_t>::max() / d) {
      throw ParseError(source, off, "dimension product overflows");
    }
    count *= d;
    t.dims.push_back(d);
  }
  const std::uint64_t expected = count * dtype_size(t.dtype);
  const std::uint64_t available = bytes.size() - off;
  if (available < expected) {
    throw ParseError(source, bytes.size(),
                     "payload truncated: expected " + std::to_string(expected) + " bytes, found " +
                         std::to_string(available));
  }
  if (available > expected) {
    throw ParseError(source, off + expected, "trailing bytes after payload");
  }
  t.payload.assign(bytes.begin() + static_cast<std::ptrdiff_t>(off), bytes.end());
  return t;
}

void write_raw_tensor(const std::string& path, const RawTensor& t) {
  const auto bytes = encode_tensor(t);
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw Error("cannot open " + path + " for writing");
  out.write(reinterpret_cast<const char*>(bytes.data()), static_cast<std::streamsize>(bytes.size()));
  if (!out) throw Error("failed writing " + path);
}

RawTensor read_raw_tensor(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw ParseError(path, 0, "cannot open file");
  std::vector<std::uint8_t> bytes((std::istreambuf_iterator<char>(in)), std::istreambuf_iterator<char>());
  return decode_tensor(bytes, path);
}

RawTensor make_f64(const Tensor2D& t) {
  RawTensor r{DType::f64, {t.rows(), t.cols()}, {}};
  r.payload.reserve(t.size() * 8);
  for (double v : t.data()) put_le<double>(r.payload, v);
  return r;
}

RawTensor make_f64(std::span<const double> v) {
  RawTensor r{DType::f64, {v.size()}, {}};
  r.payload.reserve(v.size() * 8);
  for (double x : v) put_le<double>(r.payload, x);
  return r;
}

RawTensor make_f32(const Tensor2D& t) {
  RawTensor r{DType::f32, {t.rows(), t.cols()}, {}};
  r.payload.reserve(t.size() * 4);
  for (double v : t.data()) put_le<float>(r.payload, static_cast<float>(v));
  return r;
}

RawTensor make_int(std::span<const std::int32_t> v, std::vector<std::uint64_t> dims, DType dtype) {
  RawTensor r{dtype, std::move(dims), {}};
  if (r.element_count() != v.size()) throw InvalidInput("make_int: dims do not match value count");
  if (dtype == DType::i8) {
    for (auto x : v) {
      if (x < -128 || x > 127) throw InvalidInput("make_int: value " + std::to_string(x) + " does not fit i8");
      r.payload.push_back(static_cast<std::uint8_t>(static_cast<std::int8_t>(x)));
    }
  } else if (dtype == DType::i32) {
    for (auto x : v) put_le<std::int32_t>(r.payload, x);
  } else {
    throw InvalidInput("make_int: dtype must be i8 or i32");
  }
  return r;
}

std::vector<double> to_doubles(const RawTensor& t, const std::string& source) {
  const std::size_t n = static_cast<std::size_t>(t.element_count());
  std::vector<double> out(n);
  if (t.dtype == DType::f64) {
    for (std::size_t i = 0; i < n; ++i) out[i] = get_le<double>(t.payload.data() + 8 * i);
  } else if (t.dtype == DType::f32) {
    for (std::size_t i = 0; i < n; ++i) out[i] = get_le<float>(t.payload.data() + 4 * i);
  } else {
    throw ParseError(source, 8, "expected a floating-point tensor");
  }
  for (std::size_t i = 0; i < n; ++i) {
    if (!std::isfinite(out[i])) {
      throw ParseError(source, 16 + 8 * t.dims.size() + i * dtype_size(t.dtype), "non-finite value");
    }
  }
  return out;
}

Tensor2D to_tensor2d(const RawTensor& t, const std::string& source) {
  if (t.dims.size() != 1 && t.dims.size() != 2) {
    throw ParseError(source, 12, "expected a 1-D or 2-D tensor, got ndim " + std::to_string(t.dims.size()));
  }
  const std::size_t rows = t.dims.size() == 2 ? t.dims[0] : 1;
  const std::size_t cols = t.dims.back();
  return Tensor2D(rows, cols, to_doubles(t, source));
}

std::vector<std::int32_t> to_ints(const RawTensor& t, const std::string& source) {
  const std::size_t n = static_cast<std::size_t>(t.element_count());
  std::vector<std::int32_t> out(n);
  if (t.dtype == DType::i8) {
    for (std::size_t i = 0; i < n; ++i) out[i] = static_cast<std::int8_t>(t.payload[i]);
  } else if (t.dtype == DType::i32) {
    for (std::size_t i = 0; i < n; ++i) out[i] = get_le<std::int32_t>(t.payload.data() + 4 * i);
  } else {
    throw ParseError(source, 8, "expected an integer tensor");
  }
  return out;
}

void write_tensor(const std::string& path, const Tensor2D& t) { write_raw_tensor(path, make_f64(t)); }

Tensor2D read_tensor(const std::string& path) { return to_tensor2d(read_raw_tensor(path), path); }

}  // namespace qe
