#pragma once

#include <cstddef>
#include <cstdint>
#include <filesystem>
#include <functional>
#include <optional>
#include <string>
#include <string_view>
#include <vector>

#include <Eigen/Core>

#include "facecap/blendshape_solver.hpp"
#include "facecap/eye_gaze.hpp"
#include "facecap/geometry.hpp"
#include "facecap/morphable_model.hpp"
#include "facecap/nicp.hpp"
#include "facecap/rig.hpp"
#include "facecap/synth.hpp"
#include "facecap/weights_filter.hpp"

namespace facecap {

struct PipelineConfig {
  // [identity]
  double alpha_3dmm = 0.1;
  int fit_iterations = 10;
  double fit_tolerance = 1e-7;
  double alpha_narap = 20.0;
  double alpha_nreg = 1.0;
  double nicp_gamma = 1.0;
  int nicp_outer_iterations = 15;
  int nicp_gn_iterations = 2;
  double identity_max_distance = 10.0;        // mm
  double identity_max_normal_angle_deg = 60.0;

  // [solver]
  double alpha_rmarks = 0.5;
  double alpha_rsmooth = 0.2;
  double alpha_rreg = 0.5;
  int correspondence_passes = 1;
  bool box_constraints = true;
  bool partition = true;
  double solver_max_distance = 10.0;
  double solver_max_normal_angle_deg = 60.0;

  // [gaze]
  bool gaze_enabled = true;
  double alpha_edis = 1.0;
  double alpha_esmooth = 0.5;
  double gaze_grid_step_deg = 5.0;
  double gaze_tolerance = 1e-4;
  int gaze_max_iterations = 500;
  // Eye centres in the rig frame.
  std::vector<double> left_eye_center{-32.0, 30.0, 65.0};
  std::vector<double> right_eye_center{32.0, 30.0, 65.0};
  double eye_radius = 12.0;
  double pupil_radius = 3.0;

  // [filter]
  std::string filter_model;  // empty: no filter
  int filter_history = 3;
  std::vector<double> filter_hidden{128.0, 128.0};
  int filter_epochs = 40;
  double filter_learning_rate = 1e-3;
  int filter_batch_size = 32;
  double filter_history_noise = 0.15;
  int filter_seed = 0;

  // [camera]
  double fx = 525.0;
  double fy = 525.0;
  double cx = 319.5;
  double cy = 239.5;
  int width = 640;
  int height = 480;
  double camera_distance = 500.0;  // mm along +z, looking at the origin
  double depth_noise = 0.5;        // mm along the ray

  // [synth]
  int synth_seed = 1;   // identity and rig
  int motion_seed = 0;  // weights, pose, gaze and sensor noise; 0 reuses synth_seed
  int frames = 300;
  int head_rings = 110;
  int head_segments = 146;
  int identity_modes = 8;
  int dense_count = 5000;
  std::string cloud_source = "rendered";  // or "vertices"
  double landmark_noise = 0.2;            // mm
  double eye_noise = 0.3;                 // px, iris centre
  double pose_rotation = 0.08;            // rad amplitude
  double pose_translation = 5.0;          // mm amplitude
  double gaze_amplitude = 0.3;            // rad
  double knot_spacing = 12.0;             // frames
  double active_fraction = 0.5;

  // [realtime]
  double budget_ms = 1000.0 / 30.0;
  bool record_timings = true;

  bool operator==(const PipelineConfig&) const = default;

  void validate() const;
  VirtualCamera camera() const;
  SolverParams solver_params() const;
  GazeParams gaze_params() const;
  FitParams fit_params() const;
  NicpParams nicp_params() const;
  FilterTrainParams filter_train_params() const;
  EyeModel left_eye() const;
  EyeModel right_eye() const;
};

// TOML-style text: [section] headers, `key = value` lines, # comments.
// Values are numbers, true/false, "strings" or [number, ...] arrays.
// Unknown sections or keys are errors; missing keys keep their defaults and
// are reported through `notes`.
PipelineConfig parse_config(std::string_view text, std::vector<std::string>* notes = nullptr,
                            const std::string& source_name = "<config>");
std::string serialize_config(const PipelineConfig& config);
PipelineConfig load_config(const std::filesystem::path& path, std::vector<std::string>* notes = nullptr);

struct EyeInput {
  std::optional<EyeObservation> left;
  std::optional<EyeObservation> right;
};

// One frame of sensor data; landmarks include the rig's anchor vertices.
struct FrameInput {
  long frame_index = 0;
  PointCloud cloud;
  std::vector<LandmarkObservation> landmarks;
  EyeInput eyes;
};

// One JSON object per line: {frame, cloud: "<ply path>", landmarks: [[v, x, y, z], ...],
// eyes: {left: {iris, pupil}, right: ...}}. Cloud paths are relative to `base_dir`.
std::string frame_input_to_json(const FrameInput& frame, const std::string& cloud_path);
FrameInput frame_input_from_json(std::string_view line, const std::filesystem::path& base_dir);

// {iris: [u, v], pupil: [[u, v], ...]}
std::string eye_observation_to_json(const EyeObservation& obs);
EyeObservation eye_observation_from_json(std::string_view text);

// rigid_align between neutral anchor positions and their observations.
RigidTransform estimate_head_pose(const BlendshapeRig& rig, std::span<const LandmarkObservation> landmarks);

// Ground truth and generated input of a synthetic capture.
struct SyntheticSubject {
  HeadFamily family;
  BlendshapeRig rig;
  Eigen::MatrixXd weights;  // frames x K
  std::vector<RigidTransform> poses;
  std::vector<EyeRotation> left_gaze;
  std::vector<EyeRotation> right_gaze;
};

SyntheticSubject make_synthetic_subject(const PipelineConfig& config);
// Frames are generated on demand so long sequences need not be held in memory.
FrameInput synthesize_frame(const PipelineConfig& config, const SyntheticSubject& subject, std::size_t t);

enum class StageStatus { ok, failed, skipped };
std::string_view stage_status_name(StageStatus s);

struct StageTimings {
  double pose = 0.0;
  double solve = 0.0;
  double filter = 0.0;
  double gaze = 0.0;
  double total = 0.0;
};

struct GazeResult {
  EyeRotation rotation;
  double energy = 0.0;
};

struct FrameResult {
  long frame_index = 0;
  RigidTransform head_pose;
  FrameWeights raw;
  FrameWeights filtered;
  FrameEnergies energies;
  std::optional<GazeResult> left_gaze;
  std::optional<GazeResult> right_gaze;
  StageStatus pose_status = StageStatus::skipped;
  StageStatus solve_status = StageStatus::skipped;
  StageStatus filter_status = StageStatus::skipped;
  StageStatus gaze_status = StageStatus::skipped;
  std::string failed_stage;  // first failed stage, empty if none
  std::string error;
  StageTimings timings_ms;
  bool met_budget = false;

  bool failed() const { return !failed_stage.empty(); }
};

// Timing fields are written only when `with_timings` is set, so logs of
// identical runs can be compared byte for byte.
std::string frame_result_to_json(const FrameResult& r, bool with_timings);
FrameResult frame_result_from_json(std::string_view line);

// Holds solver, filter and gaze state across frames.
class RealtimeLoop {
public:
  RealtimeLoop(const PipelineConfig& config, BlendshapeRig rig, std::optional<FilterModel> filter = std::nullopt);

  // Never throws for bad frame content: the failing stage is marked and the
  // histories restart at the next frame.
  FrameResult process(const FrameInput& frame);

  const BlendshapeSolver& solver() const { return solver_; }

private:
  void reset_history();

  PipelineConfig config_;
  BlendshapeSolver solver_;
  std::optional<FilterModel> filter_;
  Projection camera_;
  EyeModel left_eye_;
  EyeModel right_eye_;
  std::optional<long> last_frame_;
  SolverHistory solver_history_;
  std::vector<FrameWeights> filter_history_;
  GazeHistory left_history_;
  GazeHistory right_history_;
};

// Pulls frames from `source` until it returns nullopt and hands each result
// to `sink` in input order.
void run_realtime_loop(const PipelineConfig& config, const BlendshapeRig& rig,
                       const std::function<std::optional<FrameInput>()>& source,
                       const std::function<void(const FrameResult&)>& sink,
                       std::optional<FilterModel> filter = std::nullopt);
std::vector<FrameResult> run_realtime_loop(const PipelineConfig& config, const BlendshapeRig& rig,
                                           std::span<const FrameInput> frames,
                                           std::optional<FilterModel> filter = std::nullopt);

// Raw solver output next to the truth for one synthetic sequence (gaze off,
// pose from anchors), for filter training and evaluation.
struct TrainingSequence {
  Eigen::MatrixXd raw;    // frames x K
  Eigen::MatrixXd truth;  // frames x K
};
TrainingSequence make_training_sequence(const PipelineConfig& config);

struct IdentityResult {
  Eigen::VectorXd coeffs;
  TriMesh fitted;      // 3DMM reconstruction
  TriMesh registered;  // after non-rigid ICP
  AffineField transforms;
  FitResult fit;
  NicpResult nicp;
};

// Scans are merged (already in the model frame), fitted with the morphable
// model and refined by non-rigid ICP. Errors name the failing stage.
IdentityResult build_identity_pipeline(const PipelineConfig& config, const MorphableModel& model,
                                       std::span<const PointCloud> scans);
// fitted.obj, registered.obj, coeffs.json, energy_log.json
void save_identity_result(const IdentityResult& result, const std::filesystem::path& dir);

std::string fit_log_to_json(const FitResult& fit);
std::string nicp_log_to_json(const NicpResult& nicp);

// Aggregates FrameResult logs (and optional energy-log JSON files) to CSV
// rows: section,name,count,mean,p50,p90,p95,p99,max,first,last.
std::string make_report(std::span<const std::filesystem::path> frame_logs,
                        std::span<const std::filesystem::path> energy_logs = {});

// Nearest-rank percentile of unsorted values, q in [0, 100].
double percentile(std::vector<double> values, double q);

}  // namespace facecap
