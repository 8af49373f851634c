#include "pdtb/tensor.hpp"

#include <algorithm>
#include <atomic>
#include <condition_variable>
#include <cstdlib>
#include <mutex>
#include <numeric>
#include <sstream>
#include <stdexcept>
#include <thread>

#ifdef PDTB_USE_OPENBLAS
#include <cblas.h>
extern "C" void openblas_set_num_threads(int);
#endif

namespace pdtb {

DenseArray::DenseArray(std::vector<int> shape) : shape_(std::move(shape)) {
  std::int64_t n = 1;
  for (int d : shape_) {
    if (d < 0) throw std::invalid_argument("DenseArray: negative dimension");
    n *= d;
  }
  v_.assign(static_cast<size_t>(n), 0.0);
}

DenseArray DenseArray::full(std::vector<int> shape, double fill) {
  DenseArray a(std::move(shape));
  a.fill(fill);
  return a;
}

DenseArray DenseArray::from(std::vector<int> shape, std::vector<double> values) {
  DenseArray a;
  a.shape_ = std::move(shape);
  std::int64_t n = 1;
  for (int d : a.shape_) n *= d;
  if (n != static_cast<std::int64_t>(values.size())) {
    throw std::invalid_argument("DenseArray::from: value count does not match shape");
  }
  a.v_ = std::move(values);
  return a;
}

std::string DenseArray::shape_str() const {
  std::ostringstream os;
  os << "[";
  for (size_t i = 0; i < shape_.size(); ++i) os << (i ? "," : "") << shape_[i];
  os << "]";
  return os.str();
}

namespace {

// Persistent worker pool. Workers execute contiguous chunks of the active job
// in fixed order; the calling thread takes chunk 0.
class Pool {
 public:
  static Pool& instance() {
    static Pool p;
    return p;
  }

  void set_threads(int n) {
    std::unique_lock<std::mutex> lk(mu_);
    target_threads_ = std::max(1, n);
  }

  int threads() {
    std::unique_lock<std::mutex> lk(mu_);
    return target_threads_;
  }

  void run(std::int64_t n, const std::function<void(std::int64_t, std::int64_t)>& fn) {
    if (n <= 0) return;
    int nt;
    {
      std::unique_lock<std::mutex> lk(mu_);
      nt = std::min<std::int64_t>(target_threads_, n);
      if (nt > 1) ensure_workers(nt - 1);
      if (nt > 1 && busy_) nt = 1;  // no nested parallelism
    }
    if (nt <= 1) {
      fn(0, n);
      return;
    }
    {
      std::unique_lock<std::mutex> lk(mu_);
      busy_ = true;
      job_fn_ = &fn;
      job_n_ = n;
      job_nt_ = nt;
      job_next_ = 1;
      job_pending_ = nt - 1;
      ++job_id_;
    }
    cv_.notify_all();
    run_chunk(fn, n, nt, 0);
    std::unique_lock<std::mutex> lk(mu_);
    done_cv_.wait(lk, [&] { return job_pending_ == 0; });
    job_fn_ = nullptr;
    busy_ = false;
  }

 private:
  Pool() {
    const char* env = std::getenv("PDTB_THREADS");
    int n = env ? std::atoi(env) : static_cast<int>(std::thread::hardware_concurrency());
    target_threads_ = std::max(1, n);
  }

  ~Pool() {
    {
      std::unique_lock<std::mutex> lk(mu_);
      stop_ = true;
    }
    cv_.notify_all();
    for (auto& t : workers_) t.join();
  }

  static void run_chunk(const std::function<void(std::int64_t, std::int64_t)>& fn,
                        std::int64_t n, int nt, int idx) {
    const std::int64_t chunk = (n + nt - 1) / nt;
    const std::int64_t lo = idx * chunk;
    const std::int64_t hi = std::min<std::int64_t>(n, lo + chunk);
    if (lo < hi) fn(lo, hi);
  }

  void ensure_workers(int n) {
    while (static_cast<int>(workers_.size()) < n) {
      workers_.emplace_back([this] { worker_loop(); });
    }
  }

  void worker_loop() {
    std::uint64_t seen = 0;
    while (true) {
      const std::function<void(std::int64_t, std::int64_t)>* fn = nullptr;
      std::int64_t n = 0;
      int nt = 0, idx = 0;
      {
        std::unique_lock<std::mutex> lk(mu_);
        cv_.wait(lk, [&] { return stop_ || (job_fn_ != nullptr && job_id_ != seen && job_next_ < job_nt_); });
        if (stop_) return;
        seen = job_id_;
        fn = job_fn_;
        n = job_n_;
        nt = job_nt_;
        idx = job_next_++;
      }
      run_chunk(*fn, n, nt, idx);
      {
        std::unique_lock<std::mutex> lk(mu_);
        if (--job_pending_ == 0) done_cv_.notify_all();
      }
    }
  }

  std::mutex mu_;
  std::condition_variable cv_, done_cv_;
  std::vector<std::thread> workers_;
  int target_threads_ = 1;
  bool stop_ = false;
  bool busy_ = false;
  const std::function<void(std::int64_t, std::int64_t)>* job_fn_ = nullptr;
  std::int64_t job_n_ = 0;
  int job_nt_ = 0;
  int job_next_ = 0;
  int job_pending_ = 0;
  std::uint64_t job_id_ = 0;
};

#ifdef PDTB_USE_OPENBLAS
struct BlasInit {
  BlasInit() { openblas_set_num_threads(1); }
};
const BlasInit blas_init;
#endif

// Below this many multiply-adds a dispatch costs more than it saves.
constexpr std::int64_t kParallelFlops = 1 << 18;

}  // namespace

void parallel_for(std::int64_t n, const std::function<void(std::int64_t, std::int64_t)>& fn) {
  Pool::instance().run(n, fn);
}

void set_compute_threads(int n) { Pool::instance().set_threads(n); }

int compute_threads() { return Pool::instance().threads(); }

void gemm_nn(const double* a, const double* b, double* c, int m, int k, int n, bool acc) {
  auto block = [&](std::int64_t lo, std::int64_t hi) {
    const int rows = static_cast<int>(hi - lo);
#ifdef PDTB_USE_OPENBLAS
    cblas_dgemm(CblasRowMajor, CblasNoTrans, CblasNoTrans, rows, n, k, 1.0, a + lo * k, k, b, n,
                acc ? 1.0 : 0.0, c + lo * n, n);
#else
    for (std::int64_t i = lo; i < hi; ++i) {
      double* ci = c + i * n;
      if (!acc) std::fill(ci, ci + n, 0.0);
      const double* ai = a + i * k;
      for (int p = 0; p < k; ++p) {
        const double av = ai[p];
        const double* bp = b + static_cast<std::int64_t>(p) * n;
        for (int j = 0; j < n; ++j) ci[j] += av * bp[j];
      }
    }
    (void)rows;
#endif
  };
  if (2LL * m * n * k < kParallelFlops) {
    block(0, m);
  } else {
    parallel_for(m, block);
  }
}

void gemm_nt(const double* a, const double* b, double* c, int m, int k, int n, bool acc) {
  auto block = [&](std::int64_t lo, std::int64_t hi) {
    const int rows = static_cast<int>(hi - lo);
#ifdef PDTB_USE_OPENBLAS
    cblas_dgemm(CblasRowMajor, CblasNoTrans, CblasTrans, rows, n, k, 1.0, a + lo * k, k, b, k,
                acc ? 1.0 : 0.0, c + lo * n, n);
#else
    for (std::int64_t i = lo; i < hi; ++i) {
      const double* ai = a + i * k;
      double* ci = c + i * n;
      for (int j = 0; j < n; ++j) {
        const double* bj = b + static_cast<std::int64_t>(j) * k;
        double s = 0.0;
        for (int p = 0; p < k; ++p) s += ai[p] * bj[p];
        ci[j] = acc ? ci[j] + s : s;
      }
    }
    (void)rows;
#endif
  };
  if (2LL * m * n * k < kParallelFlops) {
    block(0, m);
  } else {
    parallel_for(m, block);
  }
}

void gemm_tn(const double* a, const double* b, double* c, int m, int k, int n, bool acc) {
  // Output is [k, n]; row r of C gathers column r of A.
  auto block = [&](std::int64_t lo, std::int64_t hi) {
    const int rows = static_cast<int>(hi - lo);
#ifdef PDTB_USE_OPENBLAS
    cblas_dgemm(CblasRowMajor, CblasTrans, CblasNoTrans, rows, n, m, 1.0, a + lo, k, b, n,
                acc ? 1.0 : 0.0, c + lo * n, n);
#else
    for (std::int64_t r = lo; r < hi; ++r) {
      double* cr = c + r * n;
      if (!acc) std::fill(cr, cr + n, 0.0);
      for (int i = 0; i < m; ++i) {
        const double av = a[static_cast<std::int64_t>(i) * k + r];
        const double* bi = b + static_cast<std::int64_t>(i) * n;
        for (int j = 0; j < n; ++j) cr[j] += av * bi[j];
      }
    }
    (void)rows;
#endif
  };
  if (2LL * m * n * k < kParallelFlops) {
    block(0, k);
  } else {
    parallel_for(k, block);
  }
}

}  // namespace pdtb
