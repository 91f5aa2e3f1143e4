#include "mlr/numerics.h"

#include <algorithm>
#include <cmath>
#include <istream>
#include <limits>
#include <numeric>
#include <ostream>
#include <sstream>
#include <stdexcept>

#include "binary_io.h"

namespace mlr {

namespace {

constexpr char kParamMagic[8] = {'M', 'L', 'R', 'P', 'A', 'R', 'M', 'S'};
constexpr std::uint64_t kParamFormatVersion = 1;
constexpr std::uint64_t kMaxRank = 8;
constexpr std::uint64_t kMaxNameLen = 1 << 12;
constexpr std::uint64_t kMaxTensorValues = std::uint64_t{1} << 32;

}  // namespace

std::size_t shape_size(const Shape& shape) {
  return std::accumulate(shape.begin(), shape.end(), std::size_t{1},
                         std::multiplies<>());
}

std::string shape_string(const Shape& shape) {
  std::ostringstream os;
  os << '(';
  for (std::size_t i = 0; i < shape.size(); ++i) {
    if (i > 0) os << ',';
    os << shape[i];
  }
  os << ')';
  return os.str();
}

template <typename T>
Tensor<T>::Tensor(Shape shape) : shape_(std::move(shape)) {
  if (shape_.empty()) throw std::invalid_argument("tensor shape has no dims");
  for (std::size_t d : shape_) {
    if (d == 0) {
      throw std::invalid_argument("zero-size dimension in shape " +
                                  shape_string(shape_));
    }
  }
  values_.assign(shape_size(shape_), T{0});
}

template <typename T>
Tensor<T>::Tensor(Shape shape, std::vector<T> values) : Tensor(std::move(shape)) {
  if (values.size() != values_.size()) {
    throw std::invalid_argument("value count " + std::to_string(values.size()) +
                                " does not match shape " + shape_string(shape_));
  }
  values_.assign(values.begin(), values.end());
}

template <typename T>
MatMap<T> Tensor<T>::matrix() {
  const auto rows = static_cast<Eigen::Index>(shape_.at(0));
  return MatMap<T>(values_.data(), rows,
                   static_cast<Eigen::Index>(values_.size()) / rows);
}

template <typename T>
ConstMatMap<T> Tensor<T>::matrix() const {
  const auto rows = static_cast<Eigen::Index>(shape_.at(0));
  return ConstMatMap<T>(values_.data(), rows,
                        static_cast<Eigen::Index>(values_.size()) / rows);
}

template <typename T>
VecMap<T> Tensor<T>::vector() {
  return VecMap<T>(values_.data(), static_cast<Eigen::Index>(values_.size()));
}

template <typename T>
ConstVecMap<T> Tensor<T>::vector() const {
  return ConstVecMap<T>(values_.data(),
                        static_cast<Eigen::Index>(values_.size()));
}

template <typename T>
void Tensor<T>::fill(T value) {
  std::fill(values_.begin(), values_.end(), value);
}

template <typename T>
bool Tensor<T>::all_finite() const {
  return std::all_of(values_.begin(), values_.end(),
                     [](T v) { return std::isfinite(v); });
}

template <typename T>
Tensor<T>& ParamStore<T>::add(const std::string& name, Tensor<T> tensor) {
  if (index_.count(name) != 0) {
    throw std::invalid_argument("duplicate parameter name: " + name);
  }
  index_.emplace(name, entries_.size());
  entries_.emplace_back(name, std::move(tensor));
  return entries_.back().second;
}

template <typename T>
bool ParamStore<T>::contains(const std::string& name) const {
  return index_.count(name) != 0;
}

template <typename T>
Tensor<T>& ParamStore<T>::get(const std::string& name) {
  auto it = index_.find(name);
  if (it == index_.end()) throw std::out_of_range("no parameter named " + name);
  return entries_[it->second].second;
}

template <typename T>
const Tensor<T>& ParamStore<T>::get(const std::string& name) const {
  auto it = index_.find(name);
  if (it == index_.end()) throw std::out_of_range("no parameter named " + name);
  return entries_[it->second].second;
}

template <typename T>
std::size_t ParamStore<T>::num_values() const {
  std::size_t n = 0;
  for (const auto& [name, t] : entries_) n += t.size();
  return n;
}

template <typename T>
ParamStore<T> ParamStore<T>::zeros_like() const {
  ParamStore out;
  for (const auto& [name, t] : entries_) out.add(name, t.shape());
  return out;
}

template <typename T>
void ParamStore<T>::set_zero() {
  for (auto& [name, t] : entries_) t.fill(T{0});
}

template <typename T>
void ParamStore<T>::check_same_layout(const ParamStore& other) const {
  if (other.size() != size()) {
    throw std::invalid_argument("parameter count mismatch: " +
                                std::to_string(size()) + " vs " +
                                std::to_string(other.size()));
  }
  for (std::size_t i = 0; i < entries_.size(); ++i) {
    const auto& [name, t] = entries_[i];
    const auto& [other_name, other_t] = other.entries_[i];
    if (name != other_name) {
      throw std::invalid_argument("parameter name mismatch at position " +
                                  std::to_string(i) + ": " + name + " vs " +
                                  other_name);
    }
    if (t.shape() != other_t.shape()) {
      throw std::invalid_argument("shape mismatch for parameter " + name +
                                  ": " + shape_string(t.shape()) + " vs " +
                                  shape_string(other_t.shape()));
    }
  }
}

template <typename T>
void ParamStore<T>::write(std::ostream& out) const {
  out.write(kParamMagic, sizeof(kParamMagic));
  binary::write_u64(out, kParamFormatVersion);
  binary::write_u64(out, sizeof(T));
  binary::write_u64(out, entries_.size());
  for (const auto& [name, t] : entries_) {
    binary::write_string(out, name);
    binary::write_u64(out, t.rank());
    for (std::size_t d : t.shape()) binary::write_u64(out, d);
    for (T v : t.values()) binary::write_scalar(out, v);
  }
}

template <typename T>
ParamStore<T> ParamStore<T>::read(std::istream& in) {
  char magic[sizeof(kParamMagic)];
  if (!in.read(magic, sizeof(magic)) ||
      !std::equal(magic, magic + sizeof(magic), kParamMagic)) {
    throw binary::FormatError("bad parameter block magic");
  }
  const auto version = binary::read_u64(in);
  if (version != kParamFormatVersion) {
    throw binary::FormatError("unsupported parameter format version " +
                              std::to_string(version));
  }
  const auto width = binary::read_u64(in);
  if (width != sizeof(T)) {
    throw binary::FormatError("parameter scalar width " + std::to_string(width) +
                              " does not match requested width " +
                              std::to_string(sizeof(T)));
  }
  const auto count = binary::read_u64(in);
  ParamStore store;
  for (std::uint64_t k = 0; k < count; ++k) {
    std::string name = binary::read_string(in, kMaxNameLen);
    const auto rank = binary::read_u64(in);
    if (rank == 0 || rank > kMaxRank) {
      throw binary::FormatError("bad rank for parameter " + name);
    }
    Shape shape(rank);
    std::uint64_t total = 1;
    for (auto& d : shape) {
      d = binary::read_u64(in);
      if (d == 0 || d > kMaxTensorValues) {
        throw binary::FormatError("bad dimension for parameter " + name);
      }
      total *= d;
      if (total > kMaxTensorValues) {
        throw binary::FormatError("parameter too large: " + name);
      }
    }
    std::vector<T> values(total);
    for (auto& v : values) v = binary::read_scalar<T>(in);
    store.add(name, Tensor<T>(std::move(shape), std::move(values)));
  }
  return store;
}

template <typename To, typename From>
ParamStore<To> cast_params(const ParamStore<From>& params) {
  ParamStore<To> out;
  for (const auto& [name, t] : params) {
    std::vector<To> values(t.values().begin(), t.values().end());
    out.add(name, Tensor<To>(t.shape(), std::move(values)));
  }
  return out;
}

Rng::Rng(std::uint64_t seed) : engine_(seed) {}

std::uint64_t Rng::next_u64() { return engine_(); }

double Rng::uniform() {
  // 53 high bits -> [0, 1).
  return static_cast<double>(engine_() >> 11) * 0x1.0p-53;
}

std::size_t Rng::below(std::size_t n) {
  if (n == 0) throw std::invalid_argument("Rng::below(0)");
  // Rejection sampling keeps the draw unbiased.
  const std::uint64_t limit =
      std::numeric_limits<std::uint64_t>::max() -
      std::numeric_limits<std::uint64_t>::max() % n;
  std::uint64_t x;
  do {
    x = engine_();
  } while (x >= limit);
  return static_cast<std::size_t>(x % n);
}

double glorot_bound(const Shape& shape) {
  if (shape.empty()) throw std::invalid_argument("glorot: empty shape");
  double fan_in, fan_out;
  if (shape.size() == 1) {
    fan_in = fan_out = static_cast<double>(shape[0]);
  } else {
    fan_out = static_cast<double>(shape[0]);
    fan_in = static_cast<double>(shape_size(shape) / shape[0]);
  }
  return std::sqrt(6.0 / (fan_in + fan_out));
}

template <typename T>
Tensor<T> glorot_uniform_init(const Shape& shape, std::uint64_t seed) {
  Tensor<T> t(shape);
  const double a = glorot_bound(shape);
  Rng rng(seed);
  for (auto& v : t.values()) {
    v = static_cast<T>(rng.uniform(-a, a));
    // Rounding to float can land just outside the bound.
    v = std::clamp(v, static_cast<T>(-a), static_cast<T>(a));
  }
  return t;
}

template <typename T>
std::vector<T> softmax(std::span<const T> x) {
  std::vector<T> out(x.size());
  if (x.empty()) return out;
  const T max = *std::max_element(x.begin(), x.end());
  T sum = 0;
  for (std::size_t i = 0; i < x.size(); ++i) {
    out[i] = std::exp(x[i] - max);
    sum += out[i];
  }
  for (auto& v : out) v /= sum;
  return out;
}

template <typename T>
T log_sum_exp(std::span<const T> x) {
  if (x.empty()) return -std::numeric_limits<T>::infinity();
  const T max = *std::max_element(x.begin(), x.end());
  if (!std::isfinite(max)) return max;
  T sum = 0;
  for (T v : x) sum += std::exp(v - max);
  return max + std::log(sum);
}

template <typename T>
double clip_global_norm(ParamStore<T>& grads, double max_norm) {
  double sq = 0.0;
  for (const auto& [name, g] : grads) {
    for (T v : g.values()) sq += static_cast<double>(v) * v;
  }
  const double norm = std::sqrt(sq);
  if (max_norm > 0.0 && norm > max_norm) {
    const T scale = static_cast<T>(max_norm / norm);
    for (auto& [name, g] : grads) g.vector() *= scale;
  }
  return norm;
}

template <typename T>
void adam_step(ParamStore<T>& params, const ParamStore<T>& grads,
               AdamState<T>& state, const AdamConfig& config) {
  params.check_same_layout(grads);
  params.check_same_layout(state.m);
  params.check_same_layout(state.v);
  ++state.step;
  const double bc1 = 1.0 - std::pow(config.beta1, static_cast<double>(state.step));
  const double bc2 = 1.0 - std::pow(config.beta2, static_cast<double>(state.step));
  const T b1 = static_cast<T>(config.beta1);
  const T b2 = static_cast<T>(config.beta2);
  const T step_size = static_cast<T>(config.lr / bc1);
  const T inv_sqrt_bc2 = static_cast<T>(1.0 / std::sqrt(bc2));
  const T eps = static_cast<T>(config.epsilon);
  for (std::size_t k = 0; k < params.size(); ++k) {
    auto p = params.entry(k).second.vector();
    const auto g = grads.entry(k).second.vector();
    auto m = state.m.entry(k).second.vector();
    auto v = state.v.entry(k).second.vector();
    m = b1 * m + (T{1} - b1) * g;
    v = b2 * v + (T{1} - b2) * g.cwiseProduct(g);
    p.array() -= step_size * m.array() /
                 (v.array().sqrt() * inv_sqrt_bc2 + eps);
  }
}

const GradCheckEntry& GradCheckReport::worst() const {
  if (entries.empty()) throw std::logic_error("empty gradcheck report");
  return *std::max_element(entries.begin(), entries.end(),
                           [](const auto& a, const auto& b) {
                             return a.max_rel_error < b.max_rel_error;
                           });
}

double relative_error(double analytic, double numeric) {
  const double denom =
      std::max({std::abs(analytic), std::abs(numeric), 1e-8});
  return std::abs(analytic - numeric) / denom;
}

GradCheckReport finite_diff_gradcheck(const LossFn& loss_fn,
                                      ParamStore<double> params,
                                      const GradCheckOptions& options) {
  if (options.max_coords_per_tensor < 200) {
    throw std::invalid_argument("gradcheck subsample must be >= 200 coords");
  }
  ParamStore<double> analytic = params.zeros_like();
  const double base = loss_fn(params, &analytic);
  if (!std::isfinite(base)) throw std::runtime_error("gradcheck: non-finite loss");

  GradCheckReport report;
  report.tolerance = options.tol;
  report.pass = true;
  Rng rng(options.seed);
  for (std::size_t k = 0; k < params.size(); ++k) {
    auto& [name, tensor] = params.entry(k);
    const auto& grad = analytic.entry(k).second;

    std::vector<std::size_t> coords(tensor.size());
    std::iota(coords.begin(), coords.end(), std::size_t{0});
    if (coords.size() > options.max_coords_per_tensor) {
      rng.shuffle(coords.begin(), coords.end());
      coords.resize(options.max_coords_per_tensor);
      std::sort(coords.begin(), coords.end());
    }

    GradCheckEntry entry;
    entry.name = name;
    entry.coords_checked = coords.size();
    for (std::size_t idx : coords) {
      const double saved = tensor[idx];
      tensor[idx] = saved + options.eps;
      const double plus = loss_fn(params, nullptr);
      tensor[idx] = saved - options.eps;
      const double minus = loss_fn(params, nullptr);
      tensor[idx] = saved;
      if (!std::isfinite(plus) || !std::isfinite(minus)) {
        throw std::runtime_error("gradcheck: non-finite loss perturbing " + name);
      }
      const double numeric = (plus - minus) / (2.0 * options.eps);
      const double err = relative_error(grad[idx], numeric);
      entry.max_abs_error =
          std::max(entry.max_abs_error, std::abs(grad[idx] - numeric));
      if (err > options.tol) ++entry.coords_failed;
      if (err >= entry.max_rel_error) {
        entry.max_rel_error = err;
        entry.worst_index = idx;
        entry.analytic_at_worst = grad[idx];
        entry.numeric_at_worst = numeric;
      }
    }
    if (entry.max_rel_error > options.tol) report.pass = false;
    report.entries.push_back(std::move(entry));
  }
  return report;
}

template class Tensor<float>;
template class Tensor<double>;
template class ParamStore<float>;
template class ParamStore<double>;
template ParamStore<float> cast_params<float, double>(const ParamStore<double>&);
template ParamStore<double> cast_params<double, float>(const ParamStore<float>&);
template ParamStore<float> cast_params<float, float>(const ParamStore<float>&);
template ParamStore<double> cast_params<double, double>(const ParamStore<double>&);
template Tensor<float> glorot_uniform_init<float>(const Shape&, std::uint64_t);
template Tensor<double> glorot_uniform_init<double>(const Shape&, std::uint64_t);
template std::vector<float> softmax<float>(std::span<const float>);
template std::vector<double> softmax<double>(std::span<const double>);
template float log_sum_exp<float>(std::span<const float>);
template double log_sum_exp<double>(std::span<const double>);
template double clip_global_norm<float>(ParamStore<float>&, double);
template double clip_global_norm<double>(ParamStore<double>&, double);
template void adam_step<float>(ParamStore<float>&, const ParamStore<float>&,
                               AdamState<float>&, const AdamConfig&);
template void adam_step<double>(ParamStore<double>&, const ParamStore<double>&,
                                AdamState<double>&, const AdamConfig&);

}  // namespace mlr
