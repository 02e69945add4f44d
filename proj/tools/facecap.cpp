#include <algorithm>
#include <chrono>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <optional>
#include <sstream>
#include <string>
#include <vector>

#include <CLI11.hpp>
#include <json.hpp>

#include "facecap/error.hpp"
#include "facecap/mesh_io.hpp"
#include "facecap/morphable_model.hpp"
#include "facecap/nicp.hpp"
#include "facecap/pipeline.hpp"
#include "facecap/rig.hpp"
#include "facecap/synth.hpp"
#include "facecap/weights_filter.hpp"

namespace fs = std::filesystem;
using namespace facecap;
using nlohmann::json;

namespace {

PipelineConfig read_config(const std::string& path) {
  if (path.empty()) return {};
  std::vector<std::string> notes;
  PipelineConfig cfg = load_config(path, &notes);
  for (const auto& n : notes) std::cerr << "config: " << n << "\n";
  return cfg;
}

std::vector<std::string> read_lines(const fs::path& path) {
  std::istringstream in(read_text_file(path));
  std::vector<std::string> lines;
  std::string line;
  while (std::getline(in, line)) {
    if (line.find_first_not_of(" \t\r") != std::string::npos) lines.push_back(line);
  }
  return lines;
}

// Writes to `path`, or stdout when empty.
class LineSink {
public:
  explicit LineSink(const std::string& path) {
    if (!path.empty()) {
      if (fs::path(path).has_parent_path()) fs::create_directories(fs::path(path).parent_path());
      file_.open(path, std::ios::binary);
      if (!file_) throw Error("cannot open '" + path + "' for writing");
    }
  }
  void write(const std::string& line) { (file_.is_open() ? static_cast<std::ostream&>(file_) : std::cout) << line << '\n'; }

private:
  std::ofstream file_;
};

json vec_json(const Eigen::VectorXd& v) { return json(std::vector<double>(v.data(), v.data() + v.size())); }

Eigen::VectorXd vec_from(const json& a) {
  const auto v = a.get<std::vector<double>>();
  return Eigen::Map<const Eigen::VectorXd>(v.data(), static_cast<Eigen::Index>(v.size()));
}

json rotation_json(const EyeRotation& r) { return json{{"yaw_rad", r.yaw}, {"pitch_rad", r.pitch}}; }

json pose_json(const RigidTransform& T) {
  std::vector<double> rot;
  for (int r = 0; r < 3; ++r)
    for (int c = 0; c < 3; ++c) rot.push_back(T.rotation(r, c));
  return json{{"rotation", rot}, {"translation", {T.translation.x(), T.translation.y(), T.translation.z()}}};
}

RigidTransform pose_from(const json& j) {
  const Eigen::VectorXd r = vec_from(j.at("rotation"));
  const Eigen::VectorXd t = vec_from(j.at("translation"));
  if (r.size() != 9 || t.size() != 3) throw Error("head_pose: expected 9 rotation and 3 translation values");
  RigidTransform T;
  for (int i = 0; i < 3; ++i)
    for (int c = 0; c < 3; ++c) T.rotation(i, c) = r[3 * i + c];
  T.translation = t;
  return T;
}

std::string frame_name(std::size_t t) {
  char buf[32];
  std::snprintf(buf, sizeof buf, "frame_%05zu.ply", t);
  return buf;
}

// ---- synth --------------------------------------------------------------

struct SynthArgs {
  std::string config, out;
  int training_sequences = 0;
  int training_frames = 200;
};

int cmd_synth(const SynthArgs& a) {
  const PipelineConfig cfg = read_config(a.config);
  const fs::path out = a.out;
  fs::create_directories(out / "frames");
  const SyntheticSubject s = make_synthetic_subject(cfg);
  const VirtualCamera cam = cfg.camera();

  save_mesh(s.family.heads[0], out / "head.obj");
  save_mesh(s.family.template_mesh, out / "template.obj");
  // The subject is held out of the model's training set.
  const std::vector<TriMesh> others(s.family.heads.begin() + 1, s.family.heads.end());
  save_model(build_pca(others, static_cast<std::size_t>(cfg.identity_modes)), out / "model.f3mm");
  save_cloud(render_depth_scan(s.family.heads[0], cam, static_cast<std::uint64_t>(cfg.synth_seed)).cloud,
             out / "scan.ply");
  save_rig(s.rig, out / "rig");

  LineSink frames((out / "frames.jsonl").string());
  LineSink truth((out / "truth.jsonl").string());
  for (std::size_t t = 0; t < static_cast<std::size_t>(cfg.frames); ++t) {
    const FrameInput f = synthesize_frame(cfg, s, t);
    const std::string name = "frames/" + frame_name(t);
    save_cloud(f.cloud, out / name);
    frames.write(frame_input_to_json(f, name));
    truth.write(json{{"frame", t},
                     {"weights", vec_json(s.weights.row(static_cast<Eigen::Index>(t)).transpose())},
                     {"head_pose", pose_json(s.poses[t])},
                     {"gaze", {{"left", rotation_json(s.left_gaze[t])}, {"right", rotation_json(s.right_gaze[t])}}}}
                    .dump());
  }

  if (a.training_sequences > 0) {
    fs::create_directories(out / "training");
    for (int i = 0; i < a.training_sequences; ++i) {
      PipelineConfig c = cfg;
      // Same subject and rig, fresh motion and noise.
      c.motion_seed = cfg.synth_seed + 1000 + i;
      c.frames = a.training_frames;
      const TrainingSequence seq = make_training_sequence(c);
      char buf[32];
      std::snprintf(buf, sizeof buf, "seq_%03d.jsonl", i);
      LineSink sink((out / "training" / buf).string());
      for (Eigen::Index t = 0; t < seq.raw.rows(); ++t) {
        sink.write(json{{"frame", t}, {"raw", vec_json(seq.raw.row(t).transpose())},
                        {"truth", vec_json(seq.truth.row(t).transpose())}}
                       .dump());
      }
    }
  }

  json manifest;
  manifest["seed"] = cfg.synth_seed;
  manifest["frames"] = cfg.frames;
  manifest["vertices"] = s.rig.vertex_count();
  manifest["shapes"] = s.rig.shape_count();
  manifest["dense_vertices"] = s.rig.dense_vertices.size();
  manifest["camera"] = {{"fx", cfg.fx}, {"fy", cfg.fy}, {"cx", cfg.cx}, {"cy", cfg.cy},
                        {"width", cfg.width}, {"height", cfg.height}, {"distance", cfg.camera_distance},
                        {"depth_noise", cfg.depth_noise}};
  manifest["config"] = serialize_config(cfg);
  manifest["files"] = {"head.obj", "template.obj", "model.f3mm", "scan.ply", "rig/", "frames.jsonl", "truth.jsonl"};
  write_text_file(out / "manifest.json", manifest.dump(1) + "\n");
  write_text_file(out / "config.toml", serialize_config(cfg));
  return 0;
}

// ---- identity -----------------------------------------------------------

int cmd_fit_identity(const std::string& config, const std::string& model_path, const std::string& scan,
                     const std::string& out) {
  const PipelineConfig cfg = read_config(config);
  const MorphableModel model = load_model(model_path);
  const FitResult fit = fit_3dmm(model, load_cloud(scan), cfg.fit_params());
  fs::create_directories(out);
  save_mesh(reconstruct(model, fit.coeffs), fs::path(out) / "fitted.obj");
  write_text_file(fs::path(out) / "coeffs.json", json{{"coeffs", vec_json(fit.coeffs)}}.dump(1) + "\n");
  write_text_file(fs::path(out) / "fit_log.json", fit_log_to_json(fit) + "\n");
  std::cerr << "fit-identity: " << fit.iterations << " iterations, " << (fit.converged ? "converged" : "not converged")
            << "\n";
  return 0;
}

int cmd_register(const std::string& config, const std::string& tmpl, const std::string& target, const std::string& out) {
  const PipelineConfig cfg = read_config(config);
  const NicpResult r = run_nicp(load_mesh(tmpl), load_cloud(target), cfg.nicp_params());
  fs::create_directories(out);
  save_mesh(r.mesh, fs::path(out) / "registered.obj");
  write_text_file(fs::path(out) / "energy_log.json", nicp_log_to_json(r) + "\n");
  if (!r.energy_log.empty()) std::cerr << "register: final energy " << r.energy_log.back().total << "\n";
  return 0;
}

int cmd_build_rig(const std::string& config, const std::string& head, const std::string& model_path,
                  const std::vector<std::string>& scans, const std::string& out) {
  const PipelineConfig cfg = read_config(config);
  TriMesh subject;
  if (!head.empty()) {
    subject = load_mesh(head);
  } else {
    if (model_path.empty() || scans.empty()) throw CLI::ValidationError("build-rig", "needs --head or --model with --scan");
    std::vector<PointCloud> clouds;
    for (const auto& s : scans) clouds.push_back(load_cloud(s));
    const IdentityResult id = build_identity_pipeline(cfg, load_model(model_path), clouds);
    save_identity_result(id, fs::path(out) / "identity");
    subject = id.registered;
  }
  RigConfig rc;
  rc.dense_count = static_cast<std::size_t>(cfg.dense_count);
  save_rig(make_rig_from_head(subject, static_cast<std::uint64_t>(cfg.synth_seed) + 1, rc), fs::path(out) / "rig");
  return 0;
}

// ---- per-frame stages ---------------------------------------------------

int cmd_solve(const std::string& config, const std::string& rig_dir, const std::string& frames_path,
              const std::string& out) {
  const PipelineConfig cfg = read_config(config);
  const BlendshapeSolver solver(load_rig(rig_dir), cfg.solver_params());
  const fs::path base = fs::path(frames_path).parent_path();
  LineSink sink(out);
  SolverHistory history;
  for (const auto& line : read_lines(frames_path)) {
    const FrameInput f = frame_input_from_json(line, base);
    const auto t0 = std::chrono::steady_clock::now();
    FrameObservation obs;
    obs.frame_index = f.frame_index;
    obs.cloud = f.cloud;
    obs.head_pose = estimate_head_pose(solver.rig(), f.landmarks);
    const auto& anchors = solver.rig().anchor_vertices;
    for (const auto& l : f.landmarks) {
      if (!std::binary_search(anchors.begin(), anchors.end(), l.vertex)) obs.landmarks.push_back(l);
    }
    if (history.prev && history.prev->frame_index != f.frame_index - 1) history = {};
    if (history.prev2 && history.prev2->frame_index != f.frame_index - 2) history.prev2.reset();
    const FrameSolution sol = solver.solve(obs, history);
    history.prev2 = history.prev;
    history.prev = sol.weights;
    const double ms = std::chrono::duration<double, std::milli>(std::chrono::steady_clock::now() - t0).count();
    json j{{"frame", f.frame_index},
           {"weights", vec_json(sol.weights.weights)},
           {"energies",
            {{"dense", sol.energies.dense}, {"marks", sol.energies.marks}, {"smooth", sol.energies.smooth},
             {"reg", sol.energies.reg}}}};
    if (cfg.record_timings) j["timings_ms"] = {{"solve", ms}};
    sink.write(j.dump());
  }
  return 0;
}

int cmd_filter(const std::string& model_path, const std::string& in, const std::string& out) {
  const FilterModel model = load_filter(model_path);
  LineSink sink(out);
  std::vector<FrameWeights> history;
  for (const auto& line : read_lines(in)) {
    const json j = json::parse(line);
    FrameWeights raw{j.at("frame").get<long>(), vec_from(j.at("weights"))};
    if (!history.empty() && history.back().frame_index != raw.frame_index - 1) history.clear();
    FrameWeights filtered = raw;
    if (history.size() == model.history_len) filtered = filter_frame(model, {history, raw});
    filtered.frame_index = raw.frame_index;
    if (model.history_len > 0) {
      history.push_back(filtered);
      if (history.size() > model.history_len) history.erase(history.begin());
    }
    sink.write(json{{"frame", raw.frame_index}, {"weights", vec_json(filtered.weights)}}.dump());
  }
  return 0;
}

int cmd_train_filter(const std::string& config, const std::string& data, const std::string& out) {
  const PipelineConfig cfg = read_config(config);
  std::vector<fs::path> files;
  for (const auto& e : fs::directory_iterator(data)) {
    if (e.path().extension() == ".jsonl") files.push_back(e.path());
  }
  std::sort(files.begin(), files.end());
  if (files.empty()) throw Error("train-filter: no .jsonl files in '" + data + "'");
  const auto n = static_cast<std::size_t>(cfg.filter_history);
  std::vector<FilterSample> samples;
  std::size_t K = 0;
  for (const auto& f : files) {
    std::vector<Eigen::VectorXd> raw, truth;
    for (const auto& line : read_lines(f)) {
      const json j = json::parse(line);
      raw.push_back(vec_from(j.at("raw")));
      truth.push_back(vec_from(j.at("truth")));
    }
    if (raw.empty()) continue;
    K = static_cast<std::size_t>(raw[0].size());
    Eigen::MatrixXd R(static_cast<Eigen::Index>(raw.size()), static_cast<Eigen::Index>(K));
    Eigen::MatrixXd T = R;
    for (std::size_t t = 0; t < raw.size(); ++t) {
      if (raw[t].size() != R.cols() || truth[t].size() != R.cols()) throw Error(f.string() + ": inconsistent K");
      R.row(static_cast<Eigen::Index>(t)) = raw[t].transpose();
      T.row(static_cast<Eigen::Index>(t)) = truth[t].transpose();
    }
    const auto s = make_filter_samples(R, T, n);
    samples.insert(samples.end(), s.begin(), s.end());
  }
  const FilterTrainResult r = train_filter(samples, n, K, cfg.filter_train_params());
  save_filter(r.model, out);
  std::cerr << "train-filter: " << samples.size() << " samples, loss " << r.initial_loss << " -> " << r.final_loss << "\n";
  return 0;
}

int cmd_gaze(const std::string& config, const std::string& eye, const std::string& in, const std::string& out) {
  const PipelineConfig cfg = read_config(config);
  const EyeModel model = eye == "right" ? cfg.right_eye() : cfg.left_eye();
  const Projection P = cfg.camera().projection();
  LineSink sink(out);
  GazeHistory history;
  std::optional<long> last;
  for (const auto& line : read_lines(in)) {
    const json j = json::parse(line);
    const long t = j.at("frame").get<long>();
    if (last && t != *last + 1) history = {};
    last = t;
    // Optional rig-to-camera pose; without it the eye model is in camera-world coordinates.
    Projection Pt = P;
    if (j.contains("head_pose")) Pt = P * pose_from(j.at("head_pose")).matrix();
    const GazeSolution g = solve_gaze(Pt, model, eye_observation_from_json(line), history, cfg.gaze_params());
    history.prev2 = history.prev;
    history.prev = g.rotation;
    sink.write(json{{"frame", t}, {"yaw_rad", g.rotation.yaw}, {"pitch_rad", g.rotation.pitch}, {"energy", g.energy.total}}
                   .dump());
  }
  return 0;
}

int cmd_run(const std::string& config, const std::string& rig_dir, const std::string& frames_path,
            const std::string& filter_path, const std::string& out) {
  const PipelineConfig cfg = read_config(config);
  std::optional<FilterModel> filter;
  const std::string fpath = filter_path.empty() ? cfg.filter_model : filter_path;
  if (!fpath.empty()) filter = load_filter(fpath);

  std::optional<SyntheticSubject> subject;
  BlendshapeRig rig;
  if (rig_dir.empty()) {
    if (!frames_path.empty()) throw CLI::ValidationError("run", "--frames needs --rig");
    subject = make_synthetic_subject(cfg);
    rig = subject->rig;
  } else {
    rig = load_rig(rig_dir);
  }

  std::vector<std::string> lines;
  if (!frames_path.empty()) lines = read_lines(frames_path);
  const fs::path base = fs::path(frames_path).parent_path();
  std::size_t next = 0;
  bool any_failed = false;
  LineSink sink(out);
  // A line that cannot be decoded still produces a frame result.
  const auto source = [&]() -> std::optional<FrameInput> {
    if (subject) {
      if (next >= static_cast<std::size_t>(cfg.frames)) return std::nullopt;
      return synthesize_frame(cfg, *subject, next++);
    }
    while (next < lines.size()) {
      const std::string& line = lines[next++];
      try {
        return frame_input_from_json(line, base);
      } catch (const std::exception& e) {
        FrameResult r;
        r.frame_index = static_cast<long>(next - 1);
        try {
          r.frame_index = json::parse(line).at("frame").get<long>();
        } catch (...) {
        }
        r.failed_stage = "input";
        r.error = e.what();
        sink.write(frame_result_to_json(r, false));
        any_failed = true;
      }
    }
    return std::nullopt;
  };
  run_realtime_loop(
      cfg, rig, source,
      [&](const FrameResult& r) {
        if (r.failed()) {
          any_failed = true;
          std::cerr << "frame " << r.frame_index << ": " << r.failed_stage << " failed: " << r.error << "\n";
        }
        sink.write(frame_result_to_json(r, cfg.record_timings));
      },
      std::move(filter));
  return any_failed ? 1 : 0;
}

int cmd_report(const std::vector<std::string>& logs, const std::vector<std::string>& energy_logs, const std::string& out) {
  const std::vector<fs::path> a(logs.begin(), logs.end());
  const std::vector<fs::path> b(energy_logs.begin(), energy_logs.end());
  const std::string csv = make_report(a, b);
  if (out.empty()) {
    std::cout << csv;
  } else {
    write_text_file(out, csv);
  }
  return 0;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"facecap: identity fitting, blendshape tracking and gaze estimation"};
  app.require_subcommand(1);

  std::string config, out, rig, frames, filter_path, model, scan, tmpl, target, head, data, eye = "left", in;
  std::vector<std::string> scans, logs, energy_logs;
  SynthArgs synth_args;

  auto* synth = app.add_subcommand("synth", "generate a synthetic subject, rig and frame sequence");
  synth->add_option("--config", synth_args.config, "config file")->check(CLI::ExistingFile);
  synth->add_option("--out", synth_args.out, "output directory")->required();
  synth->add_option("--training-sequences", synth_args.training_sequences, "also write raw/truth filter training sequences")
      ->check(CLI::NonNegativeNumber);
  synth->add_option("--training-frames", synth_args.training_frames, "frames per training sequence")
      ->check(CLI::PositiveNumber);

  auto* fit = app.add_subcommand("fit-identity", "fit the morphable model to a scan");
  fit->add_option("--config", config)->check(CLI::ExistingFile);
  fit->add_option("--model", model, "morphable model file")->required()->check(CLI::ExistingFile);
  fit->add_option("--scan", scan, "PLY scan with normals")->required()->check(CLI::ExistingFile);
  fit->add_option("--out", out, "output directory")->required();

  auto* reg = app.add_subcommand("register", "non-rigid ICP of a template onto a scan");
  reg->add_option("--config", config)->check(CLI::ExistingFile);
  reg->add_option("--template", tmpl, "template OBJ")->required()->check(CLI::ExistingFile);
  reg->add_option("--target", target, "PLY scan with normals")->required()->check(CLI::ExistingFile);
  reg->add_option("--out", out, "output directory")->required();

  auto* build = app.add_subcommand("build-rig", "build a blendshape rig from a head mesh or from scans");
  build->add_option("--config", config)->check(CLI::ExistingFile);
  build->add_option("--head", head, "registered head OBJ")->check(CLI::ExistingFile);
  build->add_option("--model", model, "morphable model file")->check(CLI::ExistingFile);
  build->add_option("--scan", scans, "PLY scans (repeatable)")->check(CLI::ExistingFile);
  build->add_option("--out", out, "output directory")->required();

  auto* solve = app.add_subcommand("solve", "per-frame blendshape weights");
  solve->add_option("--config", config)->check(CLI::ExistingFile);
  solve->add_option("--rig", rig, "rig directory")->required()->check(CLI::ExistingDirectory);
  solve->add_option("--frames", frames, "frame JSONL")->required()->check(CLI::ExistingFile);
  solve->add_option("--out", out, "output JSONL (default stdout)");

  auto* filt = app.add_subcommand("filter", "filter a weights JSONL stream");
  filt->add_option("--model", filter_path, "filter file")->required()->check(CLI::ExistingFile);
  filt->add_option("--in", in, "weights JSONL")->required()->check(CLI::ExistingFile);
  filt->add_option("--out", out, "output JSONL (default stdout)");

  auto* train = app.add_subcommand("train-filter", "train the weights filter on raw/truth sequences");
  train->add_option("--config", config)->check(CLI::ExistingFile);
  train->add_option("--data", data, "directory of JSONL sequences")->required()->check(CLI::ExistingDirectory);
  train->add_option("--out", out, "filter file")->required();

  auto* gaze = app.add_subcommand("gaze", "eye rotation from iris and pupil observations");
  gaze->add_option("--config", config)->check(CLI::ExistingFile);
  gaze->add_option("--eye", eye, "left or right")->check(CLI::IsMember({"left", "right"}));
  gaze->add_option("--in", in, "observation JSONL")->required()->check(CLI::ExistingFile);
  gaze->add_option("--out", out, "output JSONL (default stdout)");

  auto* run = app.add_subcommand("run", "real-time loop: pose, solve, filter, gaze");
  run->add_option("--config", config)->check(CLI::ExistingFile);
  run->add_option("--rig", rig, "rig directory (default: synthesize from the config)")->check(CLI::ExistingDirectory);
  run->add_option("--frames", frames, "frame JSONL (default: synthesize from the config)")->check(CLI::ExistingFile);
  run->add_option("--filter", filter_path, "filter file (overrides the config)")->check(CLI::ExistingFile);
  run->add_option("--out", out, "output JSONL (default stdout)");

  auto* report = app.add_subcommand("report", "latency and energy summary CSV");
  report->add_option("--log", logs, "frame result JSONL (repeatable)")->required()->check(CLI::ExistingFile);
  report->add_option("--energy-log", energy_logs, "energy log JSON (repeatable)")->check(CLI::ExistingFile);
  report->add_option("--out", out, "output CSV (default stdout)");

  CLI11_PARSE(app, argc, argv);

  try {
    if (*synth) return cmd_synth(synth_args);
    if (*fit) return cmd_fit_identity(config, model, scan, out);
    if (*reg) return cmd_register(config, tmpl, target, out);
    if (*build) return cmd_build_rig(config, head, model, scans, out);
    if (*solve) return cmd_solve(config, rig, frames, out);
    if (*filt) return cmd_filter(filter_path, in, out);
    if (*train) return cmd_train_filter(config, data, out);
    if (*gaze) return cmd_gaze(config, eye, in, out);
    if (*run) return cmd_run(config, rig, frames, filter_path, out);
    if (*report) return cmd_report(logs, energy_logs, out);
  } catch (const CLI::Error& e) {
    return app.exit(e);
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 1;
  }
  return 2;
}
