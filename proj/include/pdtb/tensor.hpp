#pragma once

#include <cstdint>
#include <functional>
#include <string>
#include <vector>

namespace pdtb {

// Row-major dense double array, rank <= 3. Leading dimension is the batch
// dimension where one exists; no broadcasting beyond that.
class DenseArray {
 public:
  DenseArray() = default;
  explicit DenseArray(std::vector<int> shape);

  static DenseArray zeros(std::vector<int> shape) { return DenseArray(std::move(shape)); }
  static DenseArray full(std::vector<int> shape, double fill);
  static DenseArray from(std::vector<int> shape, std::vector<double> values);
  static DenseArray scalar(double v) { return from({1}, {v}); }

  int ndim() const { return static_cast<int>(shape_.size()); }
  const std::vector<int>& shape() const { return shape_; }
  int dim(int i) const { return shape_[i]; }
  std::int64_t size() const { return static_cast<std::int64_t>(v_.size()); }
  bool same_shape(const DenseArray& o) const { return shape_ == o.shape_; }
  std::string shape_str() const;

  double* data() { return v_.data(); }
  const double* data() const { return v_.data(); }
  double& operator[](std::int64_t i) { return v_[static_cast<size_t>(i)]; }
  double operator[](std::int64_t i) const { return v_[static_cast<size_t>(i)]; }

  // Rows of the trailing matrix view: product of all dims but the last.
  std::int64_t rows() const { return shape_.empty() ? 0 : size() / shape_.back(); }
  int cols() const { return shape_.empty() ? 0 : shape_.back(); }

  void fill(double v) { std::fill(v_.begin(), v_.end(), v); }

 private:
  std::vector<int> shape_;
  std::vector<double> v_;
};

// Deterministic work partitioning: [0, n) is split into one contiguous range
// per worker, so each output element is written by exactly one thread and
// accumulation order never depends on scheduling.
void parallel_for(std::int64_t n, const std::function<void(std::int64_t, std::int64_t)>& fn);

// Pool size controls (global). Set to 1 when running independent jobs at a
// higher level. Reads PDTB_THREADS on first use.
void set_compute_threads(int n);
int compute_threads();

// C[M,N] = A[M,K] * B[K,N], accumulating into C when beta1 is true.
void gemm_nn(const double* a, const double* b, double* c, int m, int k, int n, bool acc);
// C[M,N] = A[M,K] * B[N,K]^T
void gemm_nt(const double* a, const double* b, double* c, int m, int k, int n, bool acc);
// C[K,N] = A[M,K]^T * B[M,N]
void gemm_tn(const double* a, const double* b, double* c, int m, int k, int n, bool acc);

}  // namespace pdtb
