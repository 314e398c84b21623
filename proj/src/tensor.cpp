#include "hierattn/tensor.hpp"

#include <algorithm>
#include <bit>
#include <cmath>
#include <istream>
#include <ostream>
#include <sstream>

#include "hierattn/errors.hpp"

namespace hierattn {

Shape::Shape(std::initializer_list<std::size_t> dims) : rank_(dims.size()) {
  if (rank_ > kMaxRank) throw DimensionError("tensor rank " + std::to_string(rank_) + " exceeds 4");
  std::copy(dims.begin(), dims.end(), dims_.begin());
}

Shape::Shape(std::size_t rank) : rank_(rank) {
  if (rank_ > kMaxRank) throw DimensionError("tensor rank " + std::to_string(rank_) + " exceeds 4");
}

std::size_t Shape::at(std::size_t i) const {
  if (i >= rank_) throw DimensionError("shape index " + std::to_string(i) + " out of range");
  return dims_[i];
}

bool Shape::operator==(const Shape& other) const {
  return rank_ == other.rank_ && std::equal(begin(), end(), other.begin());
}

std::string shape_string(const Shape& shape) {
  std::ostringstream os;
  os << '[';
  for (std::size_t i = 0; i < shape.size(); ++i) {
    if (i) os << 'x';
    os << shape[i];
  }
  os << ']';
  return os.str();
}

std::size_t shape_numel(const Shape& shape) {
  std::size_t n = 1;
  for (auto d : shape) n *= d;
  return n;
}

Tensor::Tensor(Shape shape, double fill) : shape_(std::move(shape)), data_(shape_numel(shape_), fill) {}

Tensor::Tensor(Shape shape, std::vector<double> data) : shape_(std::move(shape)), data_(std::move(data)) {
  if (shape_numel(shape_) != data_.size()) {
    throw DimensionError("tensor data length " + std::to_string(data_.size()) + " does not match shape " +
                         shape_string(shape_));
  }
}

Tensor Tensor::identity(std::size_t n) {
  Tensor t({n, n});
  for (std::size_t i = 0; i < n; ++i) t(i, i) = 1.0;
  return t;
}

Tensor Tensor::matrix(std::initializer_list<std::initializer_list<double>> rows) {
  const std::size_t r = rows.size();
  const std::size_t c = r ? rows.begin()->size() : 0;
  std::vector<double> data;
  data.reserve(r * c);
  for (const auto& row : rows) {
    if (row.size() != c) throw DimensionError("ragged matrix literal");
    data.insert(data.end(), row.begin(), row.end());
  }
  return Tensor({r, c}, std::move(data));
}

Tensor Tensor::row_vector(std::span<const double> values) {
  return Tensor({1, values.size()}, std::vector<double>(values.begin(), values.end()));
}

std::size_t Tensor::rows() const noexcept {
  if (shape_.empty()) return 1;
  if (shape_.size() == 1) return 1;
  std::size_t r = 1;
  for (std::size_t i = 0; i + 1 < shape_.size(); ++i) r *= shape_[i];
  return r;
}

std::size_t Tensor::cols() const noexcept { return shape_.empty() ? 1 : shape_.back(); }

void Tensor::fill(double v) { std::fill(data_.begin(), data_.end(), v); }

Tensor Tensor::reshaped(Shape shape) const {
  if (shape_numel(shape) != data_.size()) {
    throw DimensionError("cannot reshape " + shape_string(shape_) + " to " + shape_string(shape));
  }
  return Tensor(std::move(shape), data_);
}

namespace {

void require_matrix(const Tensor& t, const char* what) {
  if (t.rank() != 2) throw DimensionError(std::string(what) + " expects a matrix, got " + shape_string(t.shape()));
}

void require_same_shape(const Tensor& a, const Tensor& b, const char* what) {
  if (a.shape() != b.shape()) {
    throw DimensionError(std::string(what) + ": shape mismatch " + shape_string(a.shape()) + " vs " +
                         shape_string(b.shape()));
  }
}

}  // namespace

Tensor matmul(const Tensor& a, const Tensor& b) {
  require_matrix(a, "matmul");
  require_matrix(b, "matmul");
  const std::size_t m = a.rows(), k = a.cols(), n = b.cols();
  if (b.rows() != k) {
    throw DimensionError("matmul: inner dimensions disagree for " + shape_string(a.shape()) + " and " +
                         shape_string(b.shape()));
  }
  Tensor out({m, n});
  const double* pa = a.data().data();
  const double* pb = b.data().data();
  double* po = out.data().data();
  for (std::size_t i = 0; i < m; ++i) {
    double* orow = po + i * n;
    for (std::size_t p = 0; p < k; ++p) {
      const double av = pa[i * k + p];
      if (av == 0.0) continue;
      const double* brow = pb + p * n;
      for (std::size_t j = 0; j < n; ++j) orow[j] += av * brow[j];
    }
  }
  return out;
}

Tensor matmul_nt(const Tensor& a, const Tensor& b) {
  require_matrix(a, "matmul_nt");
  require_matrix(b, "matmul_nt");
  const std::size_t m = a.rows(), k = a.cols(), n = b.rows();
  if (b.cols() != k) {
    throw DimensionError("matmul_nt: inner dimensions disagree for " + shape_string(a.shape()) + " and " +
                         shape_string(b.shape()) + "ᵀ");
  }
  Tensor out({m, n});
  const double* pa = a.data().data();
  const double* pb = b.data().data();
  double* po = out.data().data();
  for (std::size_t i = 0; i < m; ++i) {
    const double* arow = pa + i * k;
    for (std::size_t j = 0; j < n; ++j) {
      const double* brow = pb + j * k;
      double s0 = 0.0, s1 = 0.0, s2 = 0.0, s3 = 0.0;
      std::size_t p = 0;
      for (; p + 4 <= k; p += 4) {
        s0 += arow[p] * brow[p];
        s1 += arow[p + 1] * brow[p + 1];
        s2 += arow[p + 2] * brow[p + 2];
        s3 += arow[p + 3] * brow[p + 3];
      }
      for (; p < k; ++p) s0 += arow[p] * brow[p];
      po[i * n + j] = (s0 + s1) + (s2 + s3);
    }
  }
  return out;
}

Tensor matmul_tn(const Tensor& a, const Tensor& b) {
  require_matrix(a, "matmul_tn");
  require_matrix(b, "matmul_tn");
  const std::size_t k = a.rows(), m = a.cols(), n = b.cols();
  if (b.rows() != k) {
    throw DimensionError("matmul_tn: inner dimensions disagree for " + shape_string(a.shape()) + "ᵀ and " +
                         shape_string(b.shape()));
  }
  Tensor out({m, n});
  const double* pa = a.data().data();
  const double* pb = b.data().data();
  double* po = out.data().data();
  for (std::size_t p = 0; p < k; ++p) {
    const double* arow = pa + p * m;
    const double* brow = pb + p * n;
    for (std::size_t i = 0; i < m; ++i) {
      const double av = arow[i];
      if (av == 0.0) continue;
      double* orow = po + i * n;
      for (std::size_t j = 0; j < n; ++j) orow[j] += av * brow[j];
    }
  }
  return out;
}

Tensor transpose(const Tensor& a) {
  require_matrix(a, "transpose");
  Tensor out({a.cols(), a.rows()});
  for (std::size_t i = 0; i < a.rows(); ++i)
    for (std::size_t j = 0; j < a.cols(); ++j) out(j, i) = a(i, j);
  return out;
}

Tensor softmax_rows(const Tensor& x) {
  Tensor out(x.shape());
  const std::size_t n = x.cols();
  for (std::size_t r = 0; r < x.rows(); ++r) {
    auto in = x.row(r);
    auto o = out.row(r);
    double mx = -INFINITY;
    for (double v : in) {
      if (std::isnan(v)) throw NumericError("softmax_rows: NaN input");
      mx = std::max(mx, v);
    }
    if (!std::isfinite(mx)) throw NumericError("softmax_rows: non-finite input");
    double sum = 0.0;
    for (std::size_t j = 0; j < n; ++j) {
      o[j] = std::exp(in[j] - mx);
      sum += o[j];
    }
    for (std::size_t j = 0; j < n; ++j) o[j] /= sum;
  }
  return out;
}

Tensor clamp_nonneg(const Tensor& x) {
  Tensor out = x;
  for (double& v : out.data()) v = v > 0.0 ? v : 0.0;
  return out;
}

Tensor add(const Tensor& a, const Tensor& b) {
  require_same_shape(a, b, "add");
  Tensor out = a;
  add_inplace(out, b);
  return out;
}

Tensor hadamard(const Tensor& a, const Tensor& b) {
  require_same_shape(a, b, "hadamard");
  Tensor out = a;
  auto o = out.data();
  auto pb = b.data();
  for (std::size_t i = 0; i < o.size(); ++i) o[i] *= pb[i];
  return out;
}

Tensor scaled(const Tensor& a, double s) {
  Tensor out = a;
  for (double& v : out.data()) v *= s;
  return out;
}

void add_inplace(Tensor& acc, const Tensor& x) {
  if (acc.size() != x.size()) require_same_shape(acc, x, "add_inplace");
  auto o = acc.data();
  auto p = x.data();
  for (std::size_t i = 0; i < o.size(); ++i) o[i] += p[i];
}

double max_abs_diff(const Tensor& a, const Tensor& b) {
  require_same_shape(a, b, "max_abs_diff");
  double m = 0.0;
  for (std::size_t i = 0; i < a.size(); ++i) m = std::max(m, std::abs(a[i] - b[i]));
  return m;
}

bool all_finite(const Tensor& x) {
  return std::all_of(x.data().begin(), x.data().end(), [](double v) { return std::isfinite(v); });
}

namespace {

void put_u32(std::ostream& out, std::uint32_t v) {
  char b[4];
  for (int i = 0; i < 4; ++i) b[i] = static_cast<char>((v >> (8 * i)) & 0xFF);
  out.write(b, 4);
}

void put_f64(std::ostream& out, double d) {
  const auto v = std::bit_cast<std::uint64_t>(d);
  char b[8];
  for (int i = 0; i < 8; ++i) b[i] = static_cast<char>((v >> (8 * i)) & 0xFF);
  out.write(b, 8);
}

std::size_t offset_of(std::istream& in) {
  const auto pos = in.tellg();
  return pos < 0 ? 0 : static_cast<std::size_t>(pos);
}

void get_bytes(std::istream& in, unsigned char* buf, std::size_t n, const char* what) {
  const std::size_t at = offset_of(in);
  in.read(reinterpret_cast<char*>(buf), static_cast<std::streamsize>(n));
  if (static_cast<std::size_t>(in.gcount()) != n) {
    in.clear();
    throw ParseError(std::string("truncated tensor ") + what, at);
  }
}

std::uint32_t get_u32(std::istream& in, const char* what) {
  unsigned char b[4];
  get_bytes(in, b, 4, what);
  std::uint32_t v = 0;
  for (int i = 0; i < 4; ++i) v |= static_cast<std::uint32_t>(b[i]) << (8 * i);
  return v;
}

}  // namespace

void write_tensor(std::ostream& out, const Tensor& t) {
  put_u32(out, static_cast<std::uint32_t>(t.rank()));
  for (auto d : t.shape()) put_u32(out, static_cast<std::uint32_t>(d));
  for (double v : t.data()) put_f64(out, v);
}

Tensor read_tensor(std::istream& in) {
  constexpr std::uint32_t kMaxRank = Shape::kMaxRank;
  constexpr std::size_t kMaxElements = std::size_t{1} << 28;
  const std::size_t start = offset_of(in);
  const std::uint32_t rank = get_u32(in, "rank");
  if (rank > kMaxRank) throw ParseError("tensor rank " + std::to_string(rank) + " exceeds limit", start);
  Shape shape(rank);
  for (auto& d : shape) d = get_u32(in, "dimension");
  const std::size_t n = shape_numel(shape);
  if (n > kMaxElements) throw ParseError("tensor too large: " + shape_string(shape), start);
  std::vector<unsigned char> raw(n * 8);
  get_bytes(in, raw.data(), raw.size(), "payload");
  std::vector<double> data(n);
  for (std::size_t i = 0; i < n; ++i) {
    std::uint64_t v = 0;
    for (int b = 0; b < 8; ++b) v |= static_cast<std::uint64_t>(raw[i * 8 + b]) << (8 * b);
    data[i] = std::bit_cast<double>(v);
  }
  return Tensor(std::move(shape), std::move(data));
}

std::size_t serialized_size(const Tensor& t) { return 4 + 4 * t.rank() + 8 * t.size(); }

}  // namespace hierattn
