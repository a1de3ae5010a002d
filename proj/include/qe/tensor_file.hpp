#pragma once

#include <cstdint>
#include <span>
#include <string>
#include <vector>

#include "qe/tensor.hpp"

namespace qe {

/// On-disk tensor container ("QETF"):
///
///   offset 0   magic "QETF"
///   offset 4   u32 version (1)
///   offset 8   u32 dtype (1 f32, 2 f64, 3 i8, 4 i32)
///   offset 12  u32 ndim
///   offset 16  ndim x u64 dims
///   then       row-major payload, product(dims) x sizeof(dtype)
///
/// All integers and values are little-endian.
enum class DType : std::uint32_t { f32 = 1, f64 = 2, i8 = 3, i32 = 4 };

constexpr std::uint32_t kTensorFileVersion = 1;

std::size_t dtype_size(DType t);

struct RawTensor {
  DType dtype = DType::f64;
  std::vector<std::uint64_t> dims;
  std::vector<std::uint8_t> payload;

  std::uint64_t element_count() const;
};

std::vector<std::uint8_t> encode_tensor(const RawTensor& t);
/// `source` names the file in diagnostics.
RawTensor decode_tensor(std::span<const std::uint8_t> bytes, const std::string& source);

void write_raw_tensor(const std::string& path, const RawTensor& t);
RawTensor read_raw_tensor(const std::string& path);

RawTensor make_f64(const Tensor2D& t);
RawTensor make_f64(std::span<const double> v);
RawTensor make_f32(const Tensor2D& t);
/// Integer codes; fails if a value does not fit the requested dtype.
RawTensor make_int(std::span<const std::int32_t> v, std::vector<std::uint64_t> dims, DType dtype);

/// Float payload as a matrix. 1-D tensors become a single row.
Tensor2D to_tensor2d(const RawTensor& t, const std::string& source);
std::vector<double> to_doubles(const RawTensor& t, const std::string& source);
std::vector<std::int32_t> to_ints(const RawTensor& t, const std::string& source);

void write_tensor(const std::string& path, const Tensor2D& t);
Tensor2D read_tensor(const std::string& path);

}  // namespace qe
