#include "mlr/encoder.h"

#include <cmath>
#include <fstream>
#include <sstream>
#include <stdexcept>

namespace mlr {

namespace {

template <typename T>
T sigmoid(T x) {
  return T{1} / (T{1} + std::exp(-x));
}

template <typename T>
int hidden_width(const Tensor<T>& b) {
  if (b.rank() != 1 || b.size() % 4 != 0) {
    throw std::invalid_argument("LSTM bias must be a vector of length 4H");
  }
  return static_cast<int>(b.size() / 4);
}

template <typename T>
void check_lstm_shapes(const Tensor<T>& W, const Tensor<T>& b, Eigen::Index in) {
  const int H = hidden_width(b);
  if (W.rank() != 2 || W.dim(0) != static_cast<std::size_t>(4 * H) ||
      W.dim(1) != static_cast<std::size_t>(in + H)) {
    throw std::invalid_argument("LSTM weight shape " + shape_string(W.shape()) +
                                " does not match input width " +
                                std::to_string(in) + " and hidden width " +
                                std::to_string(H));
  }
}

// z holds pre-activations; applies the gate nonlinearities in place.
template <typename T>
void activate_gates(Eigen::Ref<Vec<T>> z, int H) {
  for (int k = 0; k < 4 * H; ++k) {
    z[k] = (k >= 2 * H && k < 3 * H) ? std::tanh(z[k]) : sigmoid(z[k]);
  }
}

}  // namespace

void EncoderConfig::validate() const {
  if (vocab_size < Vocab::kNumReserved) {
    throw std::invalid_argument("vocab_size must cover the reserved tokens");
  }
  if (d_emb < 1 || d_hid < 1) {
    throw std::invalid_argument("encoder widths must be >= 1");
  }
}

std::string encoder_param_name(int layer, bool backward, char which) {
  return "enc.l" + std::to_string(layer) + (backward ? ".bwd." : ".fwd.") + which;
}

template <typename T>
void add_encoder_params(ParamStore<T>& params, const EncoderConfig& config,
                        std::uint64_t seed) {
  config.validate();
  const auto V = static_cast<std::size_t>(config.vocab_size);
  const auto E = static_cast<std::size_t>(config.d_emb);
  const auto H = static_cast<std::size_t>(config.d_hid);
  params.add(kEmbeddingParam, glorot_uniform_init<T>({V, E}, seed));
  for (int layer = 0; layer < EncoderConfig::kLayers; ++layer) {
    const std::size_t in = layer == 0 ? E : 2 * H;
    for (int dir = 0; dir < 2; ++dir) {
      const auto tag = static_cast<std::uint64_t>(layer * 2 + dir + 1);
      params.add(encoder_param_name(layer, dir == 1, 'W'),
                 glorot_uniform_init<T>({4 * H, in + H}, seed + 101 * tag));
      Tensor<T> bias({4 * H});
      for (std::size_t k = H; k < 2 * H; ++k) bias[k] = T{1};
      params.add(encoder_param_name(layer, dir == 1, 'b'), std::move(bias));
    }
  }
}

template <typename T>
Mat<T> embed(std::span<const int> input_ids, const Tensor<T>& embedding) {
  const auto table = embedding.matrix();
  Mat<T> out(static_cast<Eigen::Index>(input_ids.size()), table.cols());
  for (std::size_t i = 0; i < input_ids.size(); ++i) {
    const int id = input_ids[i];
    if (id < 0 || id >= table.rows()) {
      throw std::out_of_range("token id " + std::to_string(id) +
                              " outside embedding table of " +
                              std::to_string(table.rows()) + " rows");
    }
    out.row(static_cast<Eigen::Index>(i)) = table.row(id);
  }
  return out;
}

template <typename T>
void embed_backward(std::span<const int> input_ids, const Mat<T>& d_embedded,
                    Tensor<T>& d_embedding) {
  auto table = d_embedding.matrix();
  for (std::size_t i = 0; i < input_ids.size(); ++i) {
    table.row(input_ids[i]) += d_embedded.row(static_cast<Eigen::Index>(i));
  }
}

template <typename T>
double load_pretrained_embeddings(const std::string& path, const Vocab& vocab,
                                  Tensor<T>& embedding) {
  std::ifstream in(path);
  if (!in) throw std::runtime_error("cannot open embedding file " + path);
  const auto dim = embedding.dim(1);
  auto table = embedding.matrix();
  std::vector<bool> covered(static_cast<std::size_t>(vocab.size()), false);
  std::string line;
  int line_no = 0;
  while (std::getline(in, line)) {
    ++line_no;
    const Tokens fields = split_whitespace(line);
    if (fields.empty()) continue;
    if (line_no == 1 && fields.size() == 2) {
      // "count dim" header.
      std::size_t header_dim = 0;
      try {
        std::stoull(fields[0]);
        header_dim = std::stoull(fields[1]);
      } catch (const std::exception&) {
        header_dim = 0;
      }
      if (header_dim != 0) {
        if (header_dim != dim) {
          throw std::invalid_argument(
              "embedding file dimension " + std::to_string(header_dim) +
              " does not match configured d_emb " + std::to_string(dim));
        }
        continue;
      }
    }
    if (fields.size() != dim + 1) {
      throw std::invalid_argument(
          path + ":" + std::to_string(line_no) + ": expected " +
          std::to_string(dim) + " values, found " +
          std::to_string(fields.size() - 1));
    }
    if (!vocab.contains(fields[0])) continue;
    const int id = vocab.id(fields[0]);
    for (std::size_t k = 0; k < dim; ++k) {
      try {
        table(id, static_cast<Eigen::Index>(k)) =
            static_cast<T>(std::stod(fields[k + 1]));
      } catch (const std::exception&) {
        throw std::invalid_argument(path + ":" + std::to_string(line_no) +
                                    ": bad number '" + fields[k + 1] + "'");
      }
    }
    covered[static_cast<std::size_t>(id)] = true;
  }
  std::size_t n = 0;
  for (bool c : covered) n += c ? 1 : 0;
  return static_cast<double>(n) / static_cast<double>(vocab.size());
}

template <typename T>
LstmState<T> lstm_cell(const Vec<T>& x, const LstmState<T>& prev,
                       const Tensor<T>& W, const Tensor<T>& b) {
  check_lstm_shapes(W, b, x.size());
  const int H = hidden_width(b);
  if (prev.h.size() != H || prev.c.size() != H) {
    throw std::invalid_argument("LSTM state width mismatch");
  }
  const auto Wm = W.matrix();
  Vec<T> z = Wm.leftCols(x.size()) * x + Wm.rightCols(H) * prev.h + b.vector();
  activate_gates<T>(z, H);
  LstmState<T> next;
  next.c = z.segment(H, H).cwiseProduct(prev.c) +
           z.segment(0, H).cwiseProduct(z.segment(2 * H, H));
  next.h = z.segment(3 * H, H).cwiseProduct(next.c.array().tanh().matrix());
  return next;
}

template <typename T>
LstmState<T> LstmTrace<T>::final_state() const {
  const Eigen::Index last = reverse ? 0 : h.rows() - 1;
  return {h.row(last).transpose(), c.row(last).transpose()};
}

template <typename T>
LstmTrace<T> lstm_forward(const Mat<T>& x, const Tensor<T>& W,
                          const Tensor<T>& b, bool reverse,
                          const LstmState<T>* initial) {
  const Eigen::Index m = x.rows();
  const Eigen::Index in = x.cols();
  if (m == 0) throw std::invalid_argument("LSTM over an empty sequence");
  check_lstm_shapes(W, b, in);
  const int H = hidden_width(b);
  const auto Wm = W.matrix();

  LstmTrace<T> tr;
  tr.reverse = reverse;
  tr.x = x;
  tr.h0 = initial ? initial->h : Vec<T>::Zero(H);
  tr.c0 = initial ? initial->c : Vec<T>::Zero(H);
  if (tr.h0.size() != H || tr.c0.size() != H) {
    throw std::invalid_argument("LSTM initial state width mismatch");
  }
  tr.gates.resize(m, 4 * H);
  tr.c.resize(m, H);
  tr.tanh_c.resize(m, H);
  tr.h.resize(m, H);

  Mat<T> pre = x * Wm.leftCols(in).transpose();
  pre.rowwise() += b.vector().transpose();
  const auto Wh = Wm.rightCols(H);
  Vec<T> h = tr.h0;
  Vec<T> c = tr.c0;
  Vec<T> z(4 * H);
  for (Eigen::Index s = 0; s < m; ++s) {
    const Eigen::Index i = reverse ? m - 1 - s : s;
    z.noalias() = pre.row(i).transpose();
    z.noalias() += Wh * h;
    activate_gates<T>(z, H);
    c = z.segment(H, H).cwiseProduct(c) +
        z.segment(0, H).cwiseProduct(z.segment(2 * H, H));
    const Vec<T> tc = c.array().tanh().matrix();
    h = z.segment(3 * H, H).cwiseProduct(tc);
    tr.gates.row(i) = z.transpose();
    tr.c.row(i) = c.transpose();
    tr.tanh_c.row(i) = tc.transpose();
    tr.h.row(i) = h.transpose();
  }
  return tr;
}

template <typename T>
Mat<T> lstm_backward(const LstmTrace<T>& tr, const Tensor<T>& W,
                     const Mat<T>& d_h, Tensor<T>& dW, Tensor<T>& db,
                     LstmState<T>* d_initial) {
  const Eigen::Index m = tr.x.rows();
  const Eigen::Index in = tr.x.cols();
  const int H = static_cast<int>(tr.h.cols());
  const auto Wm = W.matrix();
  const auto Wh = Wm.rightCols(H);

  Mat<T> dZ(m, 4 * H);
  Mat<T> h_prev(m, H);
  Vec<T> dh_next = Vec<T>::Zero(H);
  Vec<T> dc_next = Vec<T>::Zero(H);
  Vec<T> dz(4 * H);
  for (Eigen::Index s = m - 1; s >= 0; --s) {
    const Eigen::Index i = tr.reverse ? m - 1 - s : s;
    const Eigen::Index prev = tr.reverse ? i + 1 : i - 1;
    const bool first = s == 0;
    const auto g = tr.gates.row(i).transpose();
    const auto ig = g.segment(0, H);
    const auto fg = g.segment(H, H);
    const auto cg = g.segment(2 * H, H);
    const auto og = g.segment(3 * H, H);
    const auto tc = tr.tanh_c.row(i).transpose();

    const Vec<T> dh = d_h.row(i).transpose() + dh_next;
    const Vec<T> dc =
        dc_next + dh.cwiseProduct(og).cwiseProduct(
                      (T{1} - tc.array().square()).matrix());
    const Vec<T> c_prev = first ? tr.c0 : Vec<T>(tr.c.row(prev).transpose());
    if (first) {
      h_prev.row(i) = tr.h0.transpose();
    } else {
      h_prev.row(i) = tr.h.row(prev);
    }

    dz.segment(0, H) = dc.cwiseProduct(cg).cwiseProduct(
        (ig.array() * (T{1} - ig.array())).matrix());
    dz.segment(H, H) = dc.cwiseProduct(c_prev).cwiseProduct(
        (fg.array() * (T{1} - fg.array())).matrix());
    dz.segment(2 * H, H) =
        dc.cwiseProduct(ig).cwiseProduct((T{1} - cg.array().square()).matrix());
    dz.segment(3 * H, H) = dh.cwiseProduct(tc).cwiseProduct(
        (og.array() * (T{1} - og.array())).matrix());
    dZ.row(i) = dz.transpose();

    dh_next.noalias() = Wh.transpose() * dz;
    dc_next = dc.cwiseProduct(fg);
  }
  if (d_initial) {
    d_initial->h = dh_next;
    d_initial->c = dc_next;
  }
  auto dWm = dW.matrix();
  dWm.leftCols(in).noalias() += dZ.transpose() * tr.x;
  dWm.rightCols(H).noalias() += dZ.transpose() * h_prev;
  db.vector() += dZ.colwise().sum().transpose();
  return dZ * Wm.leftCols(in);
}

template <typename T>
Vec<T> EncoderStates<T>::summary() const {
  const auto& fwd = final_states[2];
  const auto& bwd = final_states[3];
  Vec<T> out(fwd.h.size() + bwd.h.size());
  out << fwd.h, bwd.h;
  return out;
}

template <typename T>
EncoderStates<T> bilstm_encode(const Mat<T>& embeddings,
                               const ParamStore<T>& params) {
  if (embeddings.rows() == 0) {
    throw std::invalid_argument("cannot encode a zero-length sequence");
  }
  EncoderStates<T> out;
  Mat<T> x = embeddings;
  for (int layer = 0; layer < EncoderConfig::kLayers; ++layer) {
    for (int dir = 0; dir < 2; ++dir) {
      const bool bwd = dir == 1;
      auto& tr = out.traces[layer * 2 + dir];
      tr = lstm_forward<T>(x, params[encoder_param_name(layer, bwd, 'W')],
                           params[encoder_param_name(layer, bwd, 'b')], bwd);
      out.final_states[layer * 2 + dir] = tr.final_state();
    }
    const auto& f = out.traces[layer * 2].h;
    const auto& b = out.traces[layer * 2 + 1].h;
    Mat<T> next(x.rows(), f.cols() + b.cols());
    next << f, b;
    x = std::move(next);
  }
  out.h = std::move(x);
  return out;
}

template <typename T>
std::vector<EncoderStates<T>> encode_batch(const Batch& batch,
                                           const ParamStore<T>& params) {
  std::vector<EncoderStates<T>> out;
  out.reserve(static_cast<std::size_t>(batch.size));
  const auto& table = params[kEmbeddingParam];
  for (int b = 0; b < batch.size; ++b) {
    out.push_back(bilstm_encode<T>(embed<T>(batch.input_row(b), table), params));
  }
  return out;
}

template <typename T>
Mat<T> bilstm_backward(const EncoderStates<T>& states, const Mat<T>& d_h,
                       const ParamStore<T>& params, ParamStore<T>& grads) {
  Mat<T> d_out = d_h;
  for (int layer = EncoderConfig::kLayers - 1; layer >= 0; --layer) {
    const Eigen::Index H = states.traces[layer * 2].h.cols();
    Mat<T> d_in;
    for (int dir = 0; dir < 2; ++dir) {
      const bool bwd = dir == 1;
      const auto w = encoder_param_name(layer, bwd, 'W');
      const auto bias = encoder_param_name(layer, bwd, 'b');
      Mat<T> dx = lstm_backward<T>(states.traces[layer * 2 + dir], params[w],
                                   d_out.middleCols(dir * H, H), grads[w],
                                   grads[bias]);
      if (dir == 0) {
        d_in = std::move(dx);
      } else {
        d_in += dx;
      }
    }
    d_out = std::move(d_in);
  }
  return d_out;
}

#define MLR_INSTANTIATE_ENCODER(T)                                             \
  template void add_encoder_params<T>(ParamStore<T>&, const EncoderConfig&,    \
                                      std::uint64_t);                          \
  template Mat<T> embed<T>(std::span<const int>, const Tensor<T>&);            \
  template void embed_backward<T>(std::span<const int>, const Mat<T>&,         \
                                  Tensor<T>&);                                 \
  template double load_pretrained_embeddings<T>(const std::string&,            \
                                                const Vocab&, Tensor<T>&);     \
  template LstmState<T> lstm_cell<T>(const Vec<T>&, const LstmState<T>&,       \
                                     const Tensor<T>&, const Tensor<T>&);      \
  template struct LstmTrace<T>;                                                \
  template LstmTrace<T> lstm_forward<T>(const Mat<T>&, const Tensor<T>&,       \
                                        const Tensor<T>&, bool,                \
                                        const LstmState<T>*);                  \
  template Mat<T> lstm_backward<T>(const LstmTrace<T>&, const Tensor<T>&,      \
                                   const Mat<T>&, Tensor<T>&, Tensor<T>&,      \
                                   LstmState<T>*);                             \
  template struct EncoderStates<T>;                                            \
  template EncoderStates<T> bilstm_encode<T>(const Mat<T>&,                    \
                                             const ParamStore<T>&);            \
  template std::vector<EncoderStates<T>> encode_batch<T>(                      \
      const Batch&, const ParamStore<T>&);                                     \
  template Mat<T> bilstm_backward<T>(const EncoderStates<T>&, const Mat<T>&,   \
                                     const ParamStore<T>&, ParamStore<T>&);

MLR_INSTANTIATE_ENCODER(float)
MLR_INSTANTIATE_ENCODER(double)

#undef MLR_INSTANTIATE_ENCODER

}  // namespace mlr
