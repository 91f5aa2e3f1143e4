// Dense tensors, named parameter storage, initialization, softmax, Adam and
// the finite-difference gradient checker.

#ifndef MLR_NUMERICS_H_
#define MLR_NUMERICS_H_

#include <cstddef>
#include <cstdint>
#include <functional>
#include <iosfwd>
#include <random>
#include <span>
#include <string>
#include <unordered_map>
#include <utility>
#include <vector>

#include <Eigen/Core>

namespace mlr {

template <typename T>
using Mat = Eigen::Matrix<T, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
template <typename T>
using Vec = Eigen::Matrix<T, Eigen::Dynamic, 1>;
template <typename T>
using MatMap = Eigen::Map<Mat<T>>;
template <typename T>
using ConstMatMap = Eigen::Map<const Mat<T>>;
template <typename T>
using VecMap = Eigen::Map<Vec<T>>;
template <typename T>
using ConstVecMap = Eigen::Map<const Vec<T>>;

using Shape = std::vector<std::size_t>;

std::size_t shape_size(const Shape& shape);
std::string shape_string(const Shape& shape);

// Row-major dense array. T is float for training and double for
// verification runs.
template <typename T>
class Tensor {
 public:
  Tensor() = default;
  explicit Tensor(Shape shape);
  Tensor(Shape shape, std::vector<T> values);

  const Shape& shape() const { return shape_; }
  std::size_t rank() const { return shape_.size(); }
  std::size_t dim(std::size_t i) const { return shape_.at(i); }
  std::size_t size() const { return values_.size(); }

  T* data() { return values_.data(); }
  const T* data() const { return values_.data(); }
  std::span<T> values() { return values_; }
  std::span<const T> values() const { return values_; }
  T& operator[](std::size_t i) { return values_[i]; }
  const T& operator[](std::size_t i) const { return values_[i]; }

  // Views the tensor as dim(0) x (size / dim(0)).
  MatMap<T> matrix();
  ConstMatMap<T> matrix() const;
  VecMap<T> vector();
  ConstVecMap<T> vector() const;

  void fill(T value);
  bool all_finite() const;

  bool operator==(const Tensor& other) const = default;

 private:
  Shape shape_;
  // Aligned so vectorized kernels take the same code path on every run;
  // otherwise float reductions can round differently between runs.
  std::vector<T, Eigen::aligned_allocator<T>> values_;
};

// Ordered name -> tensor map. Insertion order is the serialization order.
template <typename T>
class ParamStore {
 public:
  using Entry = std::pair<std::string, Tensor<T>>;

  Tensor<T>& add(const std::string& name, Tensor<T> tensor);
  Tensor<T>& add(const std::string& name, const Shape& shape) {
    return add(name, Tensor<T>(shape));
  }

  bool contains(const std::string& name) const;
  Tensor<T>& get(const std::string& name);
  const Tensor<T>& get(const std::string& name) const;
  Tensor<T>& operator[](const std::string& name) { return get(name); }
  const Tensor<T>& operator[](const std::string& name) const {
    return get(name);
  }

  std::size_t size() const { return entries_.size(); }
  std::size_t num_values() const;
  auto begin() { return entries_.begin(); }
  auto end() { return entries_.end(); }
  auto begin() const { return entries_.begin(); }
  auto end() const { return entries_.end(); }
  const Entry& entry(std::size_t i) const { return entries_.at(i); }
  Entry& entry(std::size_t i) { return entries_.at(i); }

  // Same names and shapes, all zeros.
  ParamStore zeros_like() const;
  void set_zero();
  // Throws std::invalid_argument naming the first differing parameter.
  void check_same_layout(const ParamStore& other) const;

  // Binary, little-endian, versioned; round trip is bit-exact.
  void write(std::ostream& out) const;
  static ParamStore read(std::istream& in);

  bool operator==(const ParamStore& other) const {
    return entries_ == other.entries_;
  }

 private:
  std::vector<Entry> entries_;
  std::unordered_map<std::string, std::size_t> index_;
};

template <typename To, typename From>
ParamStore<To> cast_params(const ParamStore<From>& params);

// Deterministic, platform-independent pseudo-random source.
class Rng {
 public:
  explicit Rng(std::uint64_t seed);
  std::uint64_t next_u64();
  // Uniform in [0, 1).
  double uniform();
  double uniform(double lo, double hi) { return lo + (hi - lo) * uniform(); }
  // Uniform in [0, n).
  std::size_t below(std::size_t n);

  template <typename It>
  void shuffle(It first, It last) {
    for (auto n = static_cast<std::size_t>(last - first); n > 1; --n) {
      std::swap(first[n - 1], first[below(n)]);
    }
  }

 private:
  std::mt19937_64 engine_;
};

// Uniform on [-a, a], a = sqrt(6 / (fan_in + fan_out)). Vectors use
// fan_in = fan_out = length; rank >= 2 uses fan_out = dim(0) and
// fan_in = product of the remaining dims.
template <typename T>
Tensor<T> glorot_uniform_init(const Shape& shape, std::uint64_t seed);
double glorot_bound(const Shape& shape);

template <typename T>
std::vector<T> softmax(std::span<const T> x);
template <typename T>
T log_sum_exp(std::span<const T> x);

// Scales grads in place so their global L2 norm is at most max_norm.
// Returns the norm before clipping.
template <typename T>
double clip_global_norm(ParamStore<T>& grads, double max_norm);

struct AdamConfig {
  double lr = 0.001;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double epsilon = 1e-8;
};

template <typename T>
struct AdamState {
  ParamStore<T> m;
  ParamStore<T> v;
  std::int64_t step = 0;

  static AdamState for_params(const ParamStore<T>& params) {
    return {params.zeros_like(), params.zeros_like(), 0};
  }
};

// Bias-corrected Adam update. Throws std::invalid_argument naming the
// parameter on a layout mismatch.
template <typename T>
void adam_step(ParamStore<T>& params, const ParamStore<T>& grads,
               AdamState<T>& state, const AdamConfig& config);

struct GradCheckEntry {
  std::string name;
  double max_rel_error = 0.0;
  std::size_t worst_index = 0;
  double analytic_at_worst = 0.0;
  double numeric_at_worst = 0.0;
  std::size_t coords_checked = 0;
  std::size_t coords_failed = 0;
  double max_abs_error = 0.0;  // max |analytic - numeric|
};

struct GradCheckReport {
  std::vector<GradCheckEntry> entries;
  double tolerance = 0.0;
  bool pass = false;

  const GradCheckEntry& worst() const;
};

// Returns the loss and, when grads is non-null, writes the analytic
// gradient into it (grads has the layout of params, pre-zeroed).
using LossFn =
    std::function<double(const ParamStore<double>&, ParamStore<double>*)>;

struct GradCheckOptions {
  double eps = 1e-5;
  double tol = 1e-4;
  // Tensors larger than this are checked on a seeded random subsample of
  // max_coords_per_tensor coordinates. Must be >= 200.
  std::size_t max_coords_per_tensor = 100000;
  std::uint64_t seed = 0;
};

GradCheckReport finite_diff_gradcheck(const LossFn& loss_fn,
                                      ParamStore<double> params,
                                      const GradCheckOptions& options);

double relative_error(double analytic, double numeric);

}  // namespace mlr

#endif  // MLR_NUMERICS_H_
