#include <doctest.h>

#include <cstring>
#include <fstream>
#include <random>

#include "facecap/error.hpp"
#include "facecap/synth.hpp"
#include "facecap/weights_filter.hpp"
#include "test_util.hpp"

using namespace facecap;

namespace {

FilterModel random_model(std::size_t n, std::size_t K, const std::vector<std::size_t>& hidden, std::uint64_t seed,
                         double scale = 0.5) {
  FilterModel m = make_filter_model(n, K, hidden, seed);
  std::mt19937_64 rng(seed + 1);
  std::normal_distribution<double> g(0.0, scale);
  Eigen::VectorXd p(static_cast<Eigen::Index>(m.parameter_count()));
  for (auto& x : p) x = g(rng);
  m.set_parameters(p);
  return m;
}

std::vector<FilterSample> random_samples(std::size_t count, std::size_t n, std::size_t K, std::uint64_t seed) {
  std::mt19937_64 rng(seed);
  std::uniform_real_distribution<double> u(0.0, 1.0);
  std::vector<FilterSample> out(count);
  for (auto& s : out) {
    s.input.resize(static_cast<Eigen::Index>((n + 1) * K));
    for (auto& x : s.input) x = u(rng);
    s.raw = s.input.tail(static_cast<Eigen::Index>(K));
    s.target.resize(static_cast<Eigen::Index>(K));
    for (auto& x : s.target) x = u(rng);
  }
  return out;
}

// Raw weights: truth shrunk toward zero plus seeded jitter, clamped to [0,1].
Eigen::MatrixXd corrupt(const Eigen::MatrixXd& truth, std::uint64_t seed) {
  std::mt19937_64 rng(seed);
  std::normal_distribution<double> g(0.0, 0.04);
  Eigen::MatrixXd raw = 0.85 * truth;
  for (auto& x : raw.reshaped()) x = std::clamp(x + g(rng), 0.0, 1.0);
  return raw;
}

}  // namespace

TEST_CASE("fresh filter model is the exact identity") {
  const FilterModel m = make_filter_model(3, 51);
  CHECK(m.dims == std::vector<std::size_t>{204, 128, 128, 51});
  std::mt19937_64 rng(3);
  std::uniform_real_distribution<double> u(0.0, 1.0);
  FrameWindow win;
  for (long i = 0; i < 3; ++i) {
    Eigen::VectorXd w(51);
    for (auto& x : w) x = u(rng);
    win.history.push_back({i, w});
  }
  win.current_raw.frame_index = 3;
  win.current_raw.weights.resize(51);
  for (auto& x : win.current_raw.weights) x = u(rng);
  const FrameWeights out = filter_frame(m, win);
  CHECK(out.frame_index == 3);
  CHECK(out.weights == win.current_raw.weights);

  const Eigen::MatrixXd raw = Eigen::MatrixXd::Random(20, 51).cwiseAbs();
  CHECK(filter_sequence(m, raw) == raw);
}

TEST_CASE("filter output stays in the unit box for any parameters") {
  for (std::uint64_t seed = 0; seed < 10; ++seed) {
    const FilterModel m = random_model(2, 5, {8}, seed, 5.0);
    const auto samples = random_samples(20, 2, 5, seed);
    for (const auto& s : samples) {
      FrameWindow win;
      win.history = {{0, s.input.segment(0, 5)}, {1, s.input.segment(5, 5)}};
      win.current_raw = {2, s.raw};
      const auto out = filter_frame(m, win);
      CHECK(out.weights.minCoeff() >= 0.0);
      CHECK(out.weights.maxCoeff() <= 1.0);
    }
  }
}

TEST_CASE("backprop gradient matches central differences") {
  // dims [6, 4, 2]: n = 2, K = 2, one hidden layer of width 4.
  for (std::uint64_t seed = 0; seed < 20; ++seed) {
    const FilterModel m = random_model(2, 2, {4}, seed);
    REQUIRE(m.dims == std::vector<std::size_t>{6, 4, 2});
    const auto samples = random_samples(5, 2, 2, 100 + seed);
    Eigen::VectorXd grad;
    filter_loss(m, samples, &grad);
    const Eigen::VectorXd p0 = m.parameters();
    double worst = 0.0;
    for (Eigen::Index i = 0; i < p0.size(); ++i) {
      const double h = 1e-6;
      FilterModel a = m, b = m;
      Eigen::VectorXd pa = p0, pb = p0;
      pa[i] += h;
      pb[i] -= h;
      a.set_parameters(pa);
      b.set_parameters(pb);
      const double fd = (filter_loss(a, samples) - filter_loss(b, samples)) / (2.0 * h);
      worst = std::max(worst, std::abs(fd - grad[i]) / std::max(1.0, std::abs(grad[i])));
    }
    CAPTURE(seed);
    CHECK(worst < 1e-5);
  }
}

TEST_CASE("two hidden layer gradient matches central differences") {
  const FilterModel m = random_model(3, 4, {7, 5}, 9);
  const auto samples = random_samples(8, 3, 4, 10);
  Eigen::VectorXd grad;
  filter_loss(m, samples, &grad);
  const Eigen::VectorXd p0 = m.parameters();
  std::mt19937_64 rng(1);
  std::uniform_int_distribution<Eigen::Index> pick(0, p0.size() - 1);
  for (int t = 0; t < 20; ++t) {
    const Eigen::Index i = pick(rng);
    FilterModel a = m, b = m;
    Eigen::VectorXd pa = p0, pb = p0;
    pa[i] += 1e-6;
    pb[i] -= 1e-6;
    a.set_parameters(pa);
    b.set_parameters(pb);
    const double fd = (filter_loss(a, samples) - filter_loss(b, samples)) / 2e-6;
    CHECK(std::abs(fd - grad[i]) <= 1e-5 * std::max(1.0, std::abs(grad[i])));
  }
}

TEST_CASE("parameter flattening round trips") {
  FilterModel m = random_model(1, 3, {4, 2}, 5);
  const Eigen::VectorXd p = m.parameters();
  CHECK(static_cast<std::size_t>(p.size()) == m.parameter_count());
  CHECK(p[0] == m.weights[0](0, 0));
  CHECK(p[1] == m.weights[0](0, 1));
  CHECK(p[6] == m.weights[0](1, 0));
  FilterModel z = make_filter_model(1, 3, {4, 2});
  z.set_parameters(p);
  CHECK(z.parameters() == p);
  CHECK_THROWS_AS(z.set_parameters(Eigen::VectorXd::Zero(3)), Error);
}

TEST_CASE("identity-optimal dataset keeps the residual at zero") {
  auto samples = random_samples(64, 2, 3, 4);
  for (auto& s : samples) s.target = s.raw;
  FilterTrainParams p;
  p.hidden = {16};
  p.epochs = 5;
  const auto res = train_filter(samples, 2, 3, p);
  CHECK(res.final_loss < 1e-20);
  for (const auto& s : samples) CHECK(filter_residual(res.model, s.input).cwiseAbs().maxCoeff() < 1e-10);
}

TEST_CASE("trained filter beats raw weights on held-out sequences") {
  const std::size_t K = 8;
  const std::size_t n = 3;
  std::vector<FilterSample> train;
  for (std::uint64_t s = 0; s < 12; ++s) {
    const Eigen::MatrixXd truth = make_weight_curves(120, K, 10 + s);
    const auto part = make_filter_samples(corrupt(truth, 500 + s), truth, n);
    train.insert(train.end(), part.begin(), part.end());
  }
  FilterTrainParams p;
  p.hidden = {32, 32};
  p.epochs = 30;
  p.seed = 2;
  p.history_noise = 0.05;  // on the scale of this corruption's jitter
  const auto res = train_filter(train, n, K, p);
  CHECK(res.final_loss < res.initial_loss);

  // Loss is non-increasing across most epochs.
  int ok = 0;
  double prev = res.initial_loss;
  for (double l : res.epoch_loss) {
    ok += l <= prev ? 1 : 0;
    prev = l;
  }
  CHECK(ok >= static_cast<int>(0.9 * static_cast<double>(res.epoch_loss.size())));

  double raw_mse = 0.0;
  double filt_mse = 0.0;
  for (std::uint64_t s = 100; s < 104; ++s) {
    const Eigen::MatrixXd truth = make_weight_curves(120, K, s);
    const Eigen::MatrixXd raw = corrupt(truth, 900 + s);
    const Eigen::MatrixXd filtered = filter_sequence(res.model, raw);
    const auto rows = static_cast<Eigen::Index>(n);
    raw_mse += (raw - truth).bottomRows(raw.rows() - rows).squaredNorm();
    filt_mse += (filtered - truth).bottomRows(raw.rows() - rows).squaredNorm();
  }
  MESSAGE("held-out sse raw " << raw_mse << " filtered " << filt_mse);
  CHECK(filt_mse < raw_mse);
}

TEST_CASE("training is deterministic per seed") {
  const auto samples = random_samples(50, 1, 3, 8);
  FilterTrainParams p;
  p.hidden = {6};
  p.epochs = 4;
  p.seed = 7;
  const auto a = train_filter(samples, 1, 3, p);
  const auto b = train_filter(samples, 1, 3, p);
  const Eigen::VectorXd pa = a.model.parameters();
  const Eigen::VectorXd pb = b.model.parameters();
  CHECK(std::memcmp(pa.data(), pb.data(), sizeof(double) * static_cast<std::size_t>(pa.size())) == 0);
  p.seed = 8;
  const auto c = train_filter(samples, 1, 3, p);
  CHECK(c.model.parameters() != pa);
}

TEST_CASE("training errors") {
  auto samples = random_samples(10, 1, 2, 1);
  CHECK_THROWS_AS(train_filter({}, 1, 2), Error);
  FilterTrainParams p;
  p.batch_size = 0;
  CHECK_THROWS_AS(train_filter(samples, 1, 2, p), Error);
  samples[3].target[0] = std::numeric_limits<double>::quiet_NaN();
  try {
    train_filter(samples, 1, 2);
    FAIL("expected an error");
  } catch (const Error& e) {
    CHECK(std::string(e.what()).find("epoch 0") != std::string::npos);
  }
  CHECK_THROWS_AS(train_filter(random_samples(10, 2, 2, 1), 1, 2), Error);
}

TEST_CASE("filter window dimension checks") {
  const FilterModel m = make_filter_model(2, 4, {8});
  FrameWindow win;
  win.history = {{0, Eigen::VectorXd::Zero(4)}};
  win.current_raw = {1, Eigen::VectorXd::Zero(4)};
  CHECK_THROWS_AS(filter_frame(m, win), Error);
  win.history.push_back({1, Eigen::VectorXd::Zero(3)});
  CHECK_THROWS_AS(filter_frame(m, win), Error);
  win.history[1].weights = Eigen::VectorXd::Zero(4);
  win.current_raw.weights = Eigen::VectorXd::Zero(5);
  CHECK_THROWS_AS(filter_frame(m, win), Error);
  CHECK_THROWS_AS(filter_sequence(m, Eigen::MatrixXd::Zero(5, 3)), Error);
}

TEST_CASE("filter file round trip and corruption") {
  const auto dir = test::temp_dir("filter");
  const FilterModel m = random_model(3, 5, {7, 6}, 4);
  save_filter(m, dir / "f.bin");
  const FilterModel r = load_filter(dir / "f.bin");
  CHECK(r.history_len == 3);
  CHECK(r.shape_count == 5);
  CHECK(r.dims == m.dims);
  const Eigen::VectorXd pa = m.parameters();
  const Eigen::VectorXd pb = r.parameters();
  REQUIRE(pa.size() == pb.size());
  CHECK(std::memcmp(pa.data(), pb.data(), sizeof(double) * static_cast<std::size_t>(pa.size())) == 0);

  std::ifstream in(dir / "f.bin", std::ios::binary);
  const std::string bytes((std::istreambuf_iterator<char>(in)), std::istreambuf_iterator<char>());
  const auto write = [&](const std::string& name, const std::string& data) {
    std::ofstream out(dir / name, std::ios::binary);
    out << data;
    return dir / name;
  };
  CHECK_THROWS_AS(load_filter(write("trunc.bin", bytes.substr(0, bytes.size() - 5))), Error);
  CHECK_THROWS_AS(load_filter(write("head.bin", bytes.substr(0, 10))), Error);
  CHECK_THROWS_AS(load_filter(write("magic.bin", "XXXX" + bytes.substr(4))), Error);
  std::string ver = bytes;
  ver[4] = 9;
  CHECK_THROWS_AS(load_filter(write("ver.bin", ver)), Error);
  std::string kbad = bytes;
  kbad[16] = 6;  // K field
  CHECK_THROWS_AS(load_filter(write("k.bin", kbad)), Error);
  CHECK_THROWS_AS(load_filter(write("extra.bin", bytes + "x")), Error);
  CHECK_THROWS_AS(load_filter(dir / "missing.bin"), Error);
}
