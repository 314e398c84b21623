#pragma once

#include <array>
#include <cstddef>
#include <cstdint>
#include <initializer_list>
#include <iosfwd>
#include <span>
#include <string>
#include <vector>

namespace hierattn {

// Dimension list with inline storage (rank ≤ 4).
class Shape {
 public:
  static constexpr std::size_t kMaxRank = 4;

  Shape() = default;
  Shape(std::initializer_list<std::size_t> dims);
  explicit Shape(std::size_t rank);

  std::size_t size() const noexcept { return rank_; }
  bool empty() const noexcept { return rank_ == 0; }
  std::size_t& operator[](std::size_t i) { return dims_[i]; }
  std::size_t operator[](std::size_t i) const { return dims_[i]; }
  std::size_t at(std::size_t i) const;
  std::size_t back() const { return dims_[rank_ - 1]; }
  std::size_t* begin() noexcept { return dims_.data(); }
  std::size_t* end() noexcept { return dims_.data() + rank_; }
  const std::size_t* begin() const noexcept { return dims_.data(); }
  const std::size_t* end() const noexcept { return dims_.data() + rank_; }
  std::vector<std::size_t> to_vector() const { return {begin(), end()}; }

  bool operator==(const Shape& other) const;

 private:
  std::array<std::size_t, kMaxRank> dims_{};
  std::size_t rank_ = 0;
};

std::string shape_string(const Shape& shape);
std::size_t shape_numel(const Shape& shape);

// Dense row-major array of doubles. Value semantics; gradients live on the tape.
class Tensor {
 public:
  Tensor() = default;
  explicit Tensor(Shape shape, double fill = 0.0);
  Tensor(Shape shape, std::vector<double> data);

  static Tensor zeros(std::size_t rows, std::size_t cols) { return Tensor({rows, cols}); }
  static Tensor identity(std::size_t n);
  static Tensor matrix(std::initializer_list<std::initializer_list<double>> rows);
  static Tensor row_vector(std::span<const double> values);

  const Shape& shape() const noexcept { return shape_; }
  std::size_t rank() const noexcept { return shape_.size(); }
  std::size_t size() const noexcept { return data_.size(); }
  bool empty() const noexcept { return data_.empty(); }

  // 2-D accessors. Rank-1 tensors are treated as a single row.
  std::size_t rows() const noexcept;
  std::size_t cols() const noexcept;

  double& operator()(std::size_t r, std::size_t c) { return data_[r * cols() + c]; }
  double operator()(std::size_t r, std::size_t c) const { return data_[r * cols() + c]; }
  double& operator[](std::size_t i) { return data_[i]; }
  double operator[](std::size_t i) const { return data_[i]; }

  std::span<double> data() noexcept { return data_; }
  std::span<const double> data() const noexcept { return data_; }
  std::span<const double> row(std::size_t r) const { return data().subspan(r * cols(), cols()); }
  std::span<double> row(std::size_t r) { return data().subspan(r * cols(), cols()); }

  void fill(double v);
  Tensor reshaped(Shape shape) const;

  bool operator==(const Tensor& other) const = default;

 private:
  Shape shape_;
  std::vector<double> data_;
};

// Plain (untaped) kernels. The taped versions in tape.hpp reuse these.
Tensor matmul(const Tensor& a, const Tensor& b);
Tensor matmul_nt(const Tensor& a, const Tensor& b);  // a · bᵀ
Tensor matmul_tn(const Tensor& a, const Tensor& b);  // aᵀ · b
Tensor transpose(const Tensor& a);
Tensor softmax_rows(const Tensor& x);
Tensor clamp_nonneg(const Tensor& x);
Tensor add(const Tensor& a, const Tensor& b);
Tensor hadamard(const Tensor& a, const Tensor& b);
Tensor scaled(const Tensor& a, double s);
void add_inplace(Tensor& acc, const Tensor& x);

double max_abs_diff(const Tensor& a, const Tensor& b);
bool all_finite(const Tensor& x);

// Binary form: u32 rank, u32 dims, then little-endian f64 payload.
void write_tensor(std::ostream& out, const Tensor& t);
Tensor read_tensor(std::istream& in);
std::size_t serialized_size(const Tensor& t);

}  // namespace hierattn
