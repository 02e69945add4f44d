#pragma once

#include <cstddef>
#include <cstdint>
#include <filesystem>
#include <span>
#include <vector>

#include <Eigen/Core>

#include "facecap/blendshape_solver.hpp"

namespace facecap {

// Feed-forward residual network: input is the n history frames followed by
// the current raw weights ((n+1)K values), tanh hidden layers, linear output
// of K values added to the current raw weights.
struct FilterModel {
  std::size_t history_len = 3;
  std::size_t shape_count = 0;
  std::vector<std::size_t> dims;        // input, hidden..., output
  std::vector<Eigen::MatrixXd> weights;  // layer l maps dims[l] -> dims[l+1]
  std::vector<Eigen::VectorXd> biases;

  std::size_t layer_count() const { return weights.size(); }
  std::size_t parameter_count() const;
  // Layer by layer: W row-major, then b.
  Eigen::VectorXd parameters() const;
  void set_parameters(const Eigen::VectorXd& p);
  void validate() const;
};

// Glorot-uniform hidden layers and a zero output layer, so the fresh model
// is the identity filter.
FilterModel make_filter_model(std::size_t history_len, std::size_t shape_count,
                              const std::vector<std::size_t>& hidden = {128, 128}, std::uint64_t seed = 0);

// Network output f(x) (without the skip).
Eigen::VectorXd filter_residual(const FilterModel& model, const Eigen::VectorXd& input);

struct FrameWindow {
  std::vector<FrameWeights> history;  // oldest first, n entries
  FrameWeights current_raw;
};

// clamp01(current_raw + f(history, current_raw)).
FrameWeights filter_frame(const FilterModel& model, const FrameWindow& window);

struct FilterSample {
  Eigen::VectorXd input;   // (n+1)K
  Eigen::VectorXd raw;     // K, the current raw weights (the skip path)
  Eigen::VectorXd target;  // K
};

// Training samples from aligned T x K matrices; history rows come from
// `truth`, one sample per frame t >= n.
std::vector<FilterSample> make_filter_samples(const Eigen::MatrixXd& raw, const Eigen::MatrixXd& truth,
                                              std::size_t history_len);

// Mean over samples and coordinates of (raw + f(input) - target)^2, before
// clamping. Writes d loss / d parameters when `grad` is non-null.
double filter_loss(const FilterModel& model, std::span<const FilterSample> samples, Eigen::VectorXd* grad = nullptr);

struct FilterTrainParams {
  std::vector<std::size_t> hidden{128, 128};
  int epochs = 40;
  double learning_rate = 1e-3;  // Adam step size
  std::size_t batch_size = 32;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double epsilon = 1e-8;
  std::uint64_t seed = 0;
  // Gaussian jitter (clamped to [0,1]) on the history part of each batch
  // input. Training sees true history but inference feeds back filtered
  // outputs; without jitter the network trusts the history too much.
  double history_noise = 0.15;
};

struct FilterTrainResult {
  FilterModel model;
  std::vector<double> epoch_loss;  // full-set loss after each epoch
  double initial_loss = 0.0;
  double final_loss = 0.0;
};

FilterTrainResult train_filter(std::span<const FilterSample> samples, std::size_t history_len, std::size_t shape_count,
                               const FilterTrainParams& params = {}, const FilterModel* initial = nullptr);

// Runs the filter over a raw T x K sequence, feeding back its own filtered
// outputs as history; the first n frames pass through unchanged.
Eigen::MatrixXd filter_sequence(const FilterModel& model, const Eigen::MatrixXd& raw);

// Binary "FCWF" container, little-endian float64 parameters.
void save_filter(const FilterModel& model, const std::filesystem::path& path);
FilterModel load_filter(const std::filesystem::path& path);

}  // namespace facecap
