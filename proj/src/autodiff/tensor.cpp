#include "mcl/tensor.hpp"

#include <bit>
#include <cstring>
#include <fstream>
#include <istream>
#include <ostream>
#include <sstream>

namespace mcl {

static_assert(std::endian::native == std::endian::little, "MCT1 IO assumes a little-endian host");

std::size_t shape_numel(const Shape& shape) {
  std::size_t n = 1;
  for (auto e : shape) n *= e;
  return n;
}

std::string shape_str(const Shape& shape) {
  std::ostringstream os;
  os << '(';
  for (std::size_t i = 0; i < shape.size(); ++i) {
    if (i) os << ',';
    os << shape[i];
  }
  os << ')';
  return os.str();
}

namespace {
void check_extents(const Shape& shape) {
  for (auto e : shape)
    if (e == 0) throw ShapeError("tensor extents must be positive, got " + shape_str(shape));
}
}  // namespace

Tensor::Tensor(Shape shape) : shape_(std::move(shape)) {
  check_extents(shape_);
  data_.assign(shape_numel(shape_), 0.0);
}

Tensor::Tensor(Shape shape, std::vector<double> data) : shape_(std::move(shape)), data_(std::move(data)) {
  check_extents(shape_);
  if (shape_numel(shape_) != data_.size())
    throw ShapeError("tensor data length " + std::to_string(data_.size()) + " does not match shape " +
                     shape_str(shape_));
}

Tensor Tensor::scalar(double v) { return Tensor(Shape{}, {v}); }

Tensor Tensor::full(Shape shape, double v) {
  Tensor t(std::move(shape));
  for (auto& x : t.data_) x = v;
  return t;
}

Tensor Tensor::from(std::initializer_list<double> values) {
  return Tensor(Shape{values.size()}, std::vector<double>(values));
}

double Tensor::item() const {
  if (data_.size() != 1) throw ShapeError("item() on tensor of shape " + shape_str(shape_));
  return data_[0];
}

Tensor Tensor::reshaped(Shape shape) const {
  if (shape_numel(shape) != data_.size())
    throw ShapeError("cannot reshape " + shape_str(shape_) + " to " + shape_str(shape));
  return Tensor(std::move(shape), data_);
}

std::size_t mct_byte_size(const Shape& shape) {
  return 4 + 4 + 4 * shape.size() + 8 * shape_numel(shape);
}

namespace {
void put_u32(std::ostream& out, std::uint32_t v) { out.write(reinterpret_cast<const char*>(&v), 4); }
}  // namespace

void write_mct(std::ostream& out, const Tensor& t) {
  out.write("MCT1", 4);
  put_u32(out, static_cast<std::uint32_t>(t.rank()));
  for (auto e : t.shape()) put_u32(out, static_cast<std::uint32_t>(e));
  out.write(reinterpret_cast<const char*>(t.data().data()), static_cast<std::streamsize>(8 * t.size()));
  if (!out) throw FormatError("failed writing MCT1 tensor");
}

Tensor read_mct(std::istream& in, const std::string& origin) {
  char magic[4];
  in.read(magic, 4);
  if (in.gcount() != 4) throw FormatError(origin + ": truncated MCT1 header");
  if (std::memcmp(magic, "MCT1", 4) != 0) throw FormatError(origin + ": bad magic, expected MCT1");
  std::uint32_t rank = 0;
  in.read(reinterpret_cast<char*>(&rank), 4);
  if (in.gcount() != 4) throw FormatError(origin + ": truncated MCT1 header");
  if (rank > 16) throw FormatError(origin + ": implausible rank " + std::to_string(rank));
  Shape shape(rank);
  for (auto& e : shape) {
    std::uint32_t v = 0;
    in.read(reinterpret_cast<char*>(&v), 4);
    if (in.gcount() != 4) throw FormatError(origin + ": truncated MCT1 extents");
    if (v == 0) throw FormatError(origin + ": zero extent in MCT1 header");
    e = v;
  }
  const std::size_t n = shape_numel(shape);
  std::vector<double> data(n);
  in.read(reinterpret_cast<char*>(data.data()), static_cast<std::streamsize>(8 * n));
  const auto got = static_cast<std::size_t>(in.gcount());
  if (got != 8 * n) {
    const std::size_t header = 8 + 4 * rank;
    throw FormatError(origin + ": truncated MCT1 payload, expected " + std::to_string(header + 8 * n) +
                      " bytes, got " + std::to_string(header + got));
  }
  return Tensor(std::move(shape), std::move(data));
}

void save_mct(const std::filesystem::path& path, const Tensor& t) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw FormatError("cannot open " + path.string() + " for writing");
  write_mct(out, t);
}

Tensor load_mct(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw FormatError("cannot open " + path.string());
  Tensor t = read_mct(in, path.string());
  if (in.peek() != std::char_traits<char>::eof())
    throw FormatError(path.string() + ": trailing bytes after MCT1 payload");
  return t;
}

}  // namespace mcl
