#include "facecap/weights_filter.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>
#include <random>
#include <string>

#include "binary_io.hpp"
#include "facecap/error.hpp"

namespace facecap {

namespace {

constexpr std::uint32_t kFilterVersion = 1;

struct LayerGrads {
  std::vector<Eigen::MatrixXd> W;
  std::vector<Eigen::VectorXd> b;
};

Eigen::MatrixXd stack_inputs(std::span<const FilterSample> s, std::size_t dim, bool raw) {
  Eigen::MatrixXd X(static_cast<Eigen::Index>(dim), static_cast<Eigen::Index>(s.size()));
  for (std::size_t j = 0; j < s.size(); ++j) X.col(static_cast<Eigen::Index>(j)) = raw ? s[j].raw : s[j].input;
  return X;
}

// Loss over a batch; fills per-layer gradients when `g` is non-null.
double batch_loss(const FilterModel& m, std::span<const FilterSample> batch, LayerGrads* g) {
  const std::size_t L = m.layer_count();
  const auto B = static_cast<Eigen::Index>(batch.size());
  std::vector<Eigen::MatrixXd> act(L + 1);
  act[0] = stack_inputs(batch, m.dims.front(), false);
  for (std::size_t l = 0; l < L; ++l) {
    act[l + 1] = m.weights[l] * act[l];
    act[l + 1].colwise() += m.biases[l];
    if (l + 1 < L) act[l + 1] = act[l + 1].array().tanh();
  }
  Eigen::MatrixXd diff = act[L] + stack_inputs(batch, m.shape_count, true);
  for (Eigen::Index j = 0; j < B; ++j) diff.col(j) -= batch[static_cast<std::size_t>(j)].target;
  const double denom = static_cast<double>(B) * static_cast<double>(m.shape_count);
  const double loss = diff.squaredNorm() / denom;
  if (!g) return loss;

  g->W.resize(L);
  g->b.resize(L);
  Eigen::MatrixXd delta = (2.0 / denom) * diff;
  for (std::size_t l = L; l-- > 0;) {
    g->W[l].noalias() = delta * act[l].transpose();
    g->b[l] = delta.rowwise().sum();
    if (l > 0) {
      Eigen::MatrixXd back = m.weights[l].transpose() * delta;
      delta = back.array() * (1.0 - act[l].array().square());
    }
  }
  return loss;
}

Eigen::VectorXd flatten(const FilterModel& m, const LayerGrads& g) {
  Eigen::VectorXd out(static_cast<Eigen::Index>(m.parameter_count()));
  Eigen::Index o = 0;
  for (std::size_t l = 0; l < m.layer_count(); ++l) {
    for (Eigen::Index r = 0; r < g.W[l].rows(); ++r) {
      out.segment(o, g.W[l].cols()) = g.W[l].row(r).transpose();
      o += g.W[l].cols();
    }
    out.segment(o, g.b[l].size()) = g.b[l];
    o += g.b[l].size();
  }
  return out;
}

void check_dims(const FilterModel& m, const Eigen::VectorXd& v, std::size_t expected, const char* what) {
  if (static_cast<std::size_t>(v.size()) != expected) {
    throw Error(std::string(what) + ": expected " + std::to_string(expected) + " values, got " + std::to_string(v.size()) +
                " (model K = " + std::to_string(m.shape_count) + ", n = " + std::to_string(m.history_len) + ")");
  }
}

}  // namespace

std::size_t FilterModel::parameter_count() const {
  std::size_t n = 0;
  for (std::size_t l = 0; l < weights.size(); ++l) n += static_cast<std::size_t>(weights[l].size() + biases[l].size());
  return n;
}

Eigen::VectorXd FilterModel::parameters() const {
  LayerGrads g{weights, biases};
  return flatten(*this, g);
}

void FilterModel::set_parameters(const Eigen::VectorXd& p) {
  if (static_cast<std::size_t>(p.size()) != parameter_count()) throw Error("FilterModel: parameter count mismatch");
  Eigen::Index o = 0;
  for (std::size_t l = 0; l < weights.size(); ++l) {
    for (Eigen::Index r = 0; r < weights[l].rows(); ++r) {
      weights[l].row(r) = p.segment(o, weights[l].cols()).transpose();
      o += weights[l].cols();
    }
    biases[l] = p.segment(o, biases[l].size());
    o += biases[l].size();
  }
}

void FilterModel::validate() const {
  if (shape_count == 0) throw Error("FilterModel: shape count must be positive");
  if (dims.size() < 2) throw Error("FilterModel: need at least an input and an output layer");
  if (dims.front() != (history_len + 1) * shape_count) throw Error("FilterModel: input dim must be (n+1)K");
  if (dims.back() != shape_count) throw Error("FilterModel: output dim must be K");
  if (weights.size() + 1 != dims.size() || biases.size() != weights.size()) throw Error("FilterModel: layer count mismatch");
  for (std::size_t l = 0; l < weights.size(); ++l) {
    if (weights[l].rows() != static_cast<Eigen::Index>(dims[l + 1]) || weights[l].cols() != static_cast<Eigen::Index>(dims[l]) ||
        biases[l].size() != static_cast<Eigen::Index>(dims[l + 1])) {
      throw Error("FilterModel: layer " + std::to_string(l) + " has wrong shape");
    }
    if (!weights[l].allFinite() || !biases[l].allFinite()) throw Error("FilterModel: non-finite parameter");
  }
}

FilterModel make_filter_model(std::size_t history_len, std::size_t shape_count, const std::vector<std::size_t>& hidden,
                              std::uint64_t seed) {
  FilterModel m;
  m.history_len = history_len;
  m.shape_count = shape_count;
  m.dims.push_back((history_len + 1) * shape_count);
  for (auto h : hidden) {
    if (h == 0) throw Error("make_filter_model: hidden width must be positive");
    m.dims.push_back(h);
  }
  m.dims.push_back(shape_count);
  std::mt19937_64 rng(seed);
  for (std::size_t l = 0; l + 1 < m.dims.size(); ++l) {
    const auto in = static_cast<Eigen::Index>(m.dims[l]);
    const auto out = static_cast<Eigen::Index>(m.dims[l + 1]);
    m.weights.emplace_back(Eigen::MatrixXd::Zero(out, in));
    m.biases.emplace_back(Eigen::VectorXd::Zero(out));
    if (l + 2 == m.dims.size()) continue;  // zero output layer
    std::uniform_real_distribution<double> u(-1.0, 1.0);
    const double limit = std::sqrt(6.0 / static_cast<double>(in + out));
    for (Eigen::Index r = 0; r < out; ++r) {
      for (Eigen::Index c = 0; c < in; ++c) m.weights.back()(r, c) = limit * u(rng);
    }
  }
  m.validate();
  return m;
}

Eigen::VectorXd filter_residual(const FilterModel& model, const Eigen::VectorXd& input) {
  check_dims(model, input, model.dims.front(), "filter_residual");
  Eigen::VectorXd a = input;
  for (std::size_t l = 0; l < model.layer_count(); ++l) {
    Eigen::VectorXd z = model.weights[l] * a + model.biases[l];
    a = l + 1 < model.layer_count() ? Eigen::VectorXd(z.array().tanh()) : z;
  }
  return a;
}

FrameWeights filter_frame(const FilterModel& model, const FrameWindow& window) {
  if (window.history.size() != model.history_len) {
    throw Error("filter_frame: window has " + std::to_string(window.history.size()) + " history frames, model expects " +
                std::to_string(model.history_len));
  }
  const std::size_t K = model.shape_count;
  check_dims(model, window.current_raw.weights, K, "filter_frame");
  Eigen::VectorXd x(static_cast<Eigen::Index>((model.history_len + 1) * K));
  for (std::size_t i = 0; i < window.history.size(); ++i) {
    check_dims(model, window.history[i].weights, K, "filter_frame history");
    x.segment(static_cast<Eigen::Index>(i * K), static_cast<Eigen::Index>(K)) = window.history[i].weights;
  }
  x.tail(static_cast<Eigen::Index>(K)) = window.current_raw.weights;
  FrameWeights out;
  out.frame_index = window.current_raw.frame_index;
  out.weights = (window.current_raw.weights + filter_residual(model, x)).cwiseMax(0.0).cwiseMin(1.0);
  return out;
}

std::vector<FilterSample> make_filter_samples(const Eigen::MatrixXd& raw, const Eigen::MatrixXd& truth,
                                              std::size_t history_len) {
  if (raw.rows() != truth.rows() || raw.cols() != truth.cols()) throw Error("make_filter_samples: raw/truth shape mismatch");
  const Eigen::Index K = raw.cols();
  const auto n = static_cast<Eigen::Index>(history_len);
  std::vector<FilterSample> out;
  for (Eigen::Index t = n; t < raw.rows(); ++t) {
    FilterSample s;
    s.input.resize((n + 1) * K);
    for (Eigen::Index i = 0; i < n; ++i) s.input.segment(i * K, K) = truth.row(t - n + i).transpose();
    s.input.tail(K) = raw.row(t).transpose();
    s.raw = raw.row(t).transpose();
    s.target = truth.row(t).transpose();
    out.push_back(std::move(s));
  }
  return out;
}

double filter_loss(const FilterModel& model, std::span<const FilterSample> samples, Eigen::VectorXd* grad) {
  model.validate();
  if (samples.empty()) throw Error("filter_loss: no samples");
  for (const auto& s : samples) {
    check_dims(model, s.input, model.dims.front(), "filter_loss input");
    check_dims(model, s.raw, model.shape_count, "filter_loss raw");
    check_dims(model, s.target, model.shape_count, "filter_loss target");
  }
  if (!grad) return batch_loss(model, samples, nullptr);
  LayerGrads g;
  const double loss = batch_loss(model, samples, &g);
  *grad = flatten(model, g);
  return loss;
}

FilterTrainResult train_filter(std::span<const FilterSample> samples, std::size_t history_len, std::size_t shape_count,
                               const FilterTrainParams& params, const FilterModel* initial) {
  if (samples.empty()) throw Error("train_filter: empty dataset");
  if (params.epochs < 0 || params.batch_size == 0 || !(params.learning_rate > 0.0) || !(params.history_noise >= 0.0)) {
    throw Error("train_filter: epochs >= 0, batch_size > 0, learning_rate > 0 and history_noise >= 0 required");
  }
  FilterTrainResult res;
  res.model = make_filter_model(history_len, shape_count, params.hidden, params.seed);
  if (initial) {
    if (initial->history_len != history_len || initial->shape_count != shape_count || initial->dims != res.model.dims) {
      throw Error("train_filter: initial model does not match n, K and hidden sizes");
    }
    res.model = *initial;
  }
  res.initial_loss = filter_loss(res.model, samples);

  std::mt19937_64 rng(params.seed ^ 0x9e3779b97f4a7c15ULL);
  std::vector<std::size_t> order(samples.size());
  std::iota(order.begin(), order.end(), std::size_t{0});
  Eigen::VectorXd p = res.model.parameters();
  Eigen::VectorXd m1 = Eigen::VectorXd::Zero(p.size());
  Eigen::VectorXd m2 = Eigen::VectorXd::Zero(p.size());
  std::normal_distribution<double> jitter(0.0, 1.0);
  const auto hist_len = static_cast<Eigen::Index>(history_len * shape_count);
  std::vector<FilterSample> batch;
  long step = 0;
  for (int epoch = 0; epoch < params.epochs; ++epoch) {
    std::shuffle(order.begin(), order.end(), rng);
    for (std::size_t start = 0; start < order.size(); start += params.batch_size) {
      batch.clear();
      for (std::size_t i = start; i < std::min(order.size(), start + params.batch_size); ++i) batch.push_back(samples[order[i]]);
      if (params.history_noise > 0.0) {
        for (auto& s : batch) {
          for (Eigen::Index k = 0; k < std::min(hist_len, s.input.size()); ++k) {
            s.input[k] = std::clamp(s.input[k] + params.history_noise * jitter(rng), 0.0, 1.0);
          }
        }
      }
      LayerGrads g;
      const double loss = batch_loss(res.model, batch, &g);
      if (!std::isfinite(loss)) throw Error("train_filter: non-finite loss in epoch " + std::to_string(epoch));
      const Eigen::VectorXd grad = flatten(res.model, g);
      ++step;
      m1 = params.beta1 * m1 + (1.0 - params.beta1) * grad;
      m2 = params.beta2 * m2 + (1.0 - params.beta2) * grad.cwiseProduct(grad);
      const double c1 = 1.0 - std::pow(params.beta1, static_cast<double>(step));
      const double c2 = 1.0 - std::pow(params.beta2, static_cast<double>(step));
      p.array() -= params.learning_rate * (m1.array() / c1) / ((m2.array() / c2).sqrt() + params.epsilon);
      res.model.set_parameters(p);
    }
    const double loss = filter_loss(res.model, samples);
    if (!std::isfinite(loss)) throw Error("train_filter: non-finite loss in epoch " + std::to_string(epoch));
    res.epoch_loss.push_back(loss);
  }
  res.final_loss = res.epoch_loss.empty() ? res.initial_loss : res.epoch_loss.back();
  return res;
}

Eigen::MatrixXd filter_sequence(const FilterModel& model, const Eigen::MatrixXd& raw) {
  model.validate();
  if (raw.cols() != static_cast<Eigen::Index>(model.shape_count)) throw Error("filter_sequence: K mismatch");
  Eigen::MatrixXd out = raw;
  const auto n = static_cast<Eigen::Index>(model.history_len);
  FrameWindow win;
  win.history.resize(model.history_len);
  for (Eigen::Index t = n; t < raw.rows(); ++t) {
    for (Eigen::Index i = 0; i < n; ++i) win.history[static_cast<std::size_t>(i)] = {t - n + i, out.row(t - n + i).transpose()};
    win.current_raw = {t, raw.row(t).transpose()};
    out.row(t) = filter_frame(model, win).weights.transpose();
  }
  return out;
}

void save_filter(const FilterModel& model, const std::filesystem::path& path) {
  model.validate();
  detail::BinaryWriter w;
  w.bytes("FCWF");
  w.le(kFilterVersion);
  w.le(static_cast<std::uint64_t>(model.history_len));
  w.le(static_cast<std::uint64_t>(model.shape_count));
  w.le(static_cast<std::uint64_t>(model.dims.size()));
  for (auto d : model.dims) w.le(static_cast<std::uint64_t>(d));
  const Eigen::VectorXd p = model.parameters();
  for (Eigen::Index i = 0; i < p.size(); ++i) w.le(p[i]);
  w.save(path);
}

FilterModel load_filter(const std::filesystem::path& path) {
  detail::BinaryReader r(path);
  r.expect("FCWF");
  const auto version = r.le<std::uint32_t>();
  if (version != kFilterVersion) throw Error(r.name() + ": unsupported filter version " + std::to_string(version));
  FilterModel m;
  m.history_len = r.le<std::uint64_t>();
  m.shape_count = r.le<std::uint64_t>();
  const auto layers = r.le<std::uint64_t>();
  r.need(8 * layers);
  if (layers < 2) throw Error(r.name() + ": filter needs at least two layer dims");
  std::size_t count = 0;
  for (std::uint64_t i = 0; i < layers; ++i) {
    m.dims.push_back(r.le<std::uint64_t>());
    if (m.dims.back() == 0 || m.dims.back() > (1u << 24)) throw Error(r.name() + ": bad layer dim");
    if (i > 0) count += m.dims[i] * m.dims[i - 1] + m.dims[i];
  }
  if (m.dims.front() != (m.history_len + 1) * m.shape_count || m.dims.back() != m.shape_count) {
    throw Error(r.name() + ": layer dims do not match n and K");
  }
  r.need(8 * count);
  for (std::size_t l = 0; l + 1 < m.dims.size(); ++l) {
    m.weights.emplace_back(static_cast<Eigen::Index>(m.dims[l + 1]), static_cast<Eigen::Index>(m.dims[l]));
    m.biases.emplace_back(static_cast<Eigen::Index>(m.dims[l + 1]));
  }
  Eigen::VectorXd p(static_cast<Eigen::Index>(count));
  for (Eigen::Index i = 0; i < p.size(); ++i) p[i] = r.le<double>();
  if (!r.at_end()) throw Error(r.name() + ": trailing bytes after filter");
  m.set_parameters(p);
  m.validate();
  return m;
}

}  // namespace facecap
