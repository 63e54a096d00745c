#include <CLI11.hpp>
#include <chrono>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <iostream>

#include "cape/manifest.hpp"
#include "cape/pipeline.hpp"
#include "cape/verify.hpp"

namespace {

using namespace cape;

double now_seconds() {
  return std::chrono::duration<double>(std::chrono::steady_clock::now().time_since_epoch()).count();
}

PoseMode parse_mode(const std::string& mode) {
  if (mode == "4dof") return PoseMode::FourDoF;
  if (mode == "6dof") return PoseMode::SixDoF;
  throw CLI::ValidationError("--mode must be 4dof or 6dof");
}

void write_manifest(const std::string& out_path, const Manifest& m) {
  m.write(out_path + ".manifest.txt");
}

std::vector<int> parse_int_list(const std::string& csv) {
  std::vector<int> out;
  std::size_t pos = 0;
  while (pos < csv.size()) {
    const auto comma = csv.find(',', pos);
    const std::string tok = csv.substr(pos, comma == std::string::npos ? csv.size() - pos
                                                                       : comma - pos);
    if (!tok.empty()) out.push_back(std::stoi(tok));
    if (comma == std::string::npos) break;
    pos = comma + 1;
  }
  if (out.empty()) throw CLI::ValidationError("expected a comma-separated integer list");
  return out;
}

struct CommonModelFlags {
  std::string mode = "4dof";
  int side = 32;
  int channels = 32;
  int token_dim = 64;
  int heads = 4;
  double r_min = 1.5, r_max = 4.0;
  double translation_scale = 0.001;

  ModelConfig to_config() const {
    ModelConfig cfg;
    cfg.image_side = side;
    cfg.base_channels = channels;
    cfg.token_dim = token_dim;
    cfg.heads = heads;
    cfg.cape = CapeConfig(parse_mode(mode), RadiusBounds(r_min, r_max), translation_scale);
    cfg.validate();
    return cfg;
  }
};

int cmd_datagen(const std::string& out, int scenes, int views, int side, const std::string& mode,
                std::uint64_t seed, double r_min, double r_max) {
  DatasetConfig cfg;
  cfg.scene_count = scenes;
  cfg.views_per_scene = views;
  cfg.image_side = side;
  cfg.pose_mode = parse_mode(mode);
  cfg.ranges.radius = RadiusBounds(r_min, r_max);
  cfg.seed = seed;
  generate_dataset(out, cfg);

  Manifest m;
  m.set("command", std::string("datagen"));
  m.set("out", out);
  m.set("scenes", static_cast<std::int64_t>(scenes));
  m.set("views_per_scene", static_cast<std::int64_t>(views));
  m.set("image_side", static_cast<std::int64_t>(side));
  m.set("pose_mode", mode);
  m.set("seed", static_cast<std::int64_t>(seed));
  m.set("r_min", r_min);
  m.set("r_max", r_max);
  write_manifest(out, m);
  std::printf("wrote %d scenes x %d views to %s\n", scenes, views, out.c_str());
  return 0;
}

int cmd_train(const std::string& data_path, const std::string& out,
              const CommonModelFlags& model_flags, const TrainConfig& tcfg, int schedule_steps) {
  const Dataset data = load_dataset(data_path);
  CommonModelFlags flags = model_flags;
  flags.side = data.image_side;
  flags.r_min = data.bounds.r_min;
  flags.r_max = data.bounds.r_max;
  flags.mode = data.pose_mode == PoseMode::FourDoF ? "4dof" : "6dof";
  const ModelConfig cfg = flags.to_config();

  Denoiser model(cfg, tcfg.seed);
  const NoiseSchedule schedule = NoiseSchedule::cosine(schedule_steps);
  const double t0 = now_seconds();
  const TrainResult result = train_model(model, data, schedule, tcfg, &std::cout);
  std::printf("trained %d steps in %.1f s; loss %.4f -> %.4f\n", tcfg.steps, now_seconds() - t0,
              result.mean_loss_first_25, result.mean_loss_last_25);
  save_checkpoint(out, model);

  Manifest m;
  m.set("command", std::string("train"));
  m.set("data", data_path);
  m.set("out", out);
  m.set("steps", static_cast<std::int64_t>(tcfg.steps));
  m.set("scenes_per_step", static_cast<std::int64_t>(tcfg.scenes_per_step));
  m.set("n_refs", static_cast<std::int64_t>(tcfg.n_refs));
  m.set("m_targets", static_cast<std::int64_t>(tcfg.m_targets));
  m.set("lr", tcfg.lr);
  m.set("seed", static_cast<std::int64_t>(tcfg.seed));
  m.set("schedule_steps", static_cast<std::int64_t>(schedule_steps));
  m.set("pose_mode", flags.mode);
  m.set("image_side", static_cast<std::int64_t>(flags.side));
  m.set("base_channels", static_cast<std::int64_t>(flags.channels));
  m.set("token_dim", static_cast<std::int64_t>(flags.token_dim));
  m.set("heads", static_cast<std::int64_t>(flags.heads));
  m.set("final_loss", result.mean_loss_last_25);
  write_manifest(out, m);
  return 0;
}

int cmd_sample(const std::string& ckpt, const std::string& data_path, int scene, int n_refs,
               const std::string& target_views, const std::string& out_dir, SamplerConfig sampler,
               int schedule_steps, const std::string& sampler_mode) {
  const Denoiser model = load_checkpoint(ckpt);
  const Dataset data = load_dataset(data_path);
  if (scene < 0 || scene >= data.scene_count) {
    throw std::runtime_error("scene index out of range (dataset has " +
                             std::to_string(data.scene_count) + " scenes)");
  }
  if (data.image_side != model.config().image_side) {
    throw std::runtime_error("dataset and checkpoint disagree on image side");
  }
  sampler.mode = sampler_mode == "autoregressive" ? SamplerMode::Autoregressive
                                                  : SamplerMode::Direct;

  const ViewSet all = data.scene_views(scene);
  const int pool = data.views_per_scene;
  std::vector<int> targets;
  if (target_views.empty()) {
    targets = {pool - 2, pool - 1};
  } else {
    targets = parse_int_list(target_views);
  }
  ViewSet refs;
  const int use = std::min(n_refs, pool);
  refs.images.assign(all.images.begin(), all.images.begin() + use);
  refs.poses.assign(all.poses.begin(), all.poses.begin() + use);
  std::vector<Pose> target_poses;
  for (int v : targets) {
    if (v < 0 || v >= pool) throw std::runtime_error("target view index out of range");
    target_poses.push_back(all.poses[static_cast<std::size_t>(v)]);
  }

  const NoiseSchedule schedule = NoiseSchedule::cosine(schedule_steps);
  const auto images = sampler.mode == SamplerMode::Autoregressive
                          ? sample_autoregressive(model, refs, target_poses, schedule, sampler)
                          : sample_direct(model, refs, target_poses, schedule, sampler);

  std::filesystem::create_directories(out_dir);
  for (std::size_t i = 0; i < images.size(); ++i) {
    const std::string path = out_dir + "/view_" + std::to_string(targets[i]) + ".ppm";
    write_ppm(path, images[i]);
    const double p = psnr(images[i], all.images[static_cast<std::size_t>(targets[i])]);
    std::printf("view %d -> %s (psnr vs ground truth: %.2f dB)\n", targets[i], path.c_str(), p);
  }

  Manifest m;
  m.set("command", std::string("sample"));
  m.set("checkpoint", ckpt);
  m.set("data", data_path);
  m.set("scene", static_cast<std::int64_t>(scene));
  m.set("n_refs", static_cast<std::int64_t>(n_refs));
  m.set("sampler_mode", sampler_mode);
  m.set("steps", static_cast<std::int64_t>(sampler.steps));
  m.set("deterministic", std::string(sampler.deterministic ? "true" : "false"));
  m.set("min_targets", static_cast<std::int64_t>(sampler.min_targets));
  m.set("seed", static_cast<std::int64_t>(sampler.seed));
  std::string tv;
  for (std::size_t i = 0; i < targets.size(); ++i) {
    if (i) tv += ",";
    tv += std::to_string(targets[i]);
  }
  m.set("target_views", tv);
  write_manifest(out_dir + "/run", m);
  return 0;
}

int cmd_eval(const std::string& ckpt, const std::string& data_path, const std::string& out,
             const std::string& ref_counts_csv, int targets_per_scene, SamplerConfig sampler,
             int schedule_steps, int max_scenes) {
  const Denoiser model = load_checkpoint(ckpt);
  const Dataset data = load_dataset(data_path);
  EvalConfig cfg;
  cfg.ref_counts = parse_int_list(ref_counts_csv);
  cfg.targets_per_scene = targets_per_scene;
  cfg.sampler = sampler;
  cfg.max_scenes = max_scenes;

  const NoiseSchedule schedule = NoiseSchedule::cosine(schedule_steps);
  const double t0 = now_seconds();
  const MetricReport report = evaluate_model(model, data, schedule, cfg);
  report.write_csv(out);
  const double baseline = baseline_mean_psnr(data, targets_per_scene, max_scenes);
  std::printf("evaluated in %.1f s; baseline (per-scene mean image) %.2f dB\n",
              now_seconds() - t0, baseline);
  for (int n : cfg.ref_counts) {
    std::printf("n_refs=%2d  mean PSNR %.2f dB  mean SSIM %.4f\n", n, report.mean_psnr(n),
                report.mean_ssim(n));
  }

  Manifest m;
  m.set("command", std::string("eval"));
  m.set("checkpoint", ckpt);
  m.set("data", data_path);
  m.set("out", out);
  m.set("ref_counts", ref_counts_csv);
  m.set("targets_per_scene", static_cast<std::int64_t>(targets_per_scene));
  m.set("sampler_steps", static_cast<std::int64_t>(sampler.steps));
  m.set("min_targets", static_cast<std::int64_t>(sampler.min_targets));
  m.set("seed", static_cast<std::int64_t>(sampler.seed));
  m.set("max_scenes", static_cast<std::int64_t>(max_scenes));
  m.set("baseline_mean_psnr", baseline);
  write_manifest(out, m);
  return 0;
}

int cmd_verify(std::uint64_t seed, const std::string& out) {
  const auto results = run_verify_suite(seed);
  int failures = 0;
  for (const auto& r : results) {
    std::printf("[%s] %-38s %s\n", r.passed ? "PASS" : "FAIL", r.name.c_str(), r.detail.c_str());
    if (!r.passed) ++failures;
  }
  std::printf("%zu properties, %d failed\n", results.size(), failures);
  if (!out.empty()) {
    std::ofstream os(out);
    for (const auto& r : results) {
      os << (r.passed ? "PASS " : "FAIL ") << r.name << " " << r.detail << "\n";
    }
    Manifest m;
    m.set("command", std::string("verify"));
    m.set("seed", static_cast<std::int64_t>(seed));
    write_manifest(out, m);
  }
  return failures == 0 ? 0 : 1;
}

int cmd_bench(const std::string& out, std::uint64_t seed) {
  std::ofstream os;
  std::ostream* report = &std::cout;
  if (!out.empty()) {
    os.open(out);
    if (!os) throw std::runtime_error("cannot open bench report: " + out);
    report = &os;
  }

  // Encoding-kernel throughput.
  {
    Rng rng(seed);
    const int d = 64, tokens = 4096, reps = 200;
    std::vector<float> buf(static_cast<std::size_t>(d * tokens));
    for (auto& x : buf) x = static_cast<float>(rng.normal());
    const CapeConfig cfg4 = CapeConfig::four_dof(RadiusBounds(1.5, 4.0));
    const Pose4 p4(1.0, 1.2, 0.3, 2.1);
    double t0 = now_seconds();
    for (int r = 0; r < reps; ++r) {
      for (int t = 0; t < tokens; ++t) {
        apply_cape_4dof<float>(std::span<float>(buf.data() + t * d, d), p4, cfg4);
      }
    }
    const double dt4 = now_seconds() - t0;
    const CapeConfig cfg6 = CapeConfig::six_dof();
    const Pose6 p6 = spherical_to_se3(p4, Eigen::Vector3d::Zero());
    t0 = now_seconds();
    for (int r = 0; r < reps; ++r) {
      for (int t = 0; t < tokens; ++t) {
        apply_cape_6dof<float>(std::span<float>(buf.data() + t * d, d), p6, AttentionRole::Key,
                               cfg6);
      }
    }
    const double dt6 = now_seconds() - t0;
    const double n = static_cast<double>(reps) * tokens;
    (*report) << "cape_4dof_ns_per_token " << dt4 / n * 1e9 << "\n";
    (*report) << "cape_6dof_ns_per_token " << dt6 / n * 1e9 << "\n";
  }

  // Direct vs autoregressive sampling cost as the target count grows.
  {
    ModelConfig cfg;
    cfg.image_side = 16;
    cfg.base_channels = 8;
    cfg.token_dim = 16;
    cfg.heads = 2;
    cfg.cape = CapeConfig::four_dof(RadiusBounds(1.5, 4.0));
    Denoiser model(cfg, seed);
    const NoiseSchedule schedule = NoiseSchedule::cosine(50);
    SamplerConfig sampler;
    sampler.steps = 5;
    sampler.pad = PadMode::Off;
    sampler.min_targets = 1;
    sampler.seed = seed;

    Rng rng(seed + 1);
    ViewSet refs;
    refs.images.push_back(Tensor::uniform({3, 16, 16}, rng, 0, 1));
    refs.poses.push_back(Pose::four_dof(Pose4(0.3, 1.4, 0, 2.0)));

    (*report) << "mode M self_pairs cross_pairs wall_seconds\n";
    for (int m : {1, 2, 4, 8}) {
      std::vector<Pose> poses;
      for (int i = 0; i < m; ++i) {
        poses.push_back(Pose::four_dof(
            Pose4(rng.uniform(0, kTwoPi), rng.uniform(0.7, 2.4), 0, rng.uniform(1.5, 4.0))));
      }
      AttentionStats::reset();
      double t0 = now_seconds();
      sample_direct(model, refs, poses, schedule, sampler);
      const double direct_time = now_seconds() - t0;
      const auto direct_self = AttentionStats::self_pairs.load();
      const auto direct_cross = AttentionStats::cross_pairs.load();

      AttentionStats::reset();
      t0 = now_seconds();
      sample_autoregressive(model, refs, poses, schedule, sampler);
      const double ar_time = now_seconds() - t0;
      (*report) << "direct " << m << " " << direct_self << " " << direct_cross << " "
                << direct_time << "\n";
      (*report) << "autoregressive " << m << " " << AttentionStats::self_pairs.load() << " "
                << AttentionStats::cross_pairs.load() << " " << ar_time << "\n";
    }
  }

  if (!out.empty()) {
    Manifest m;
    m.set("command", std::string("bench"));
    m.set("seed", static_cast<std::int64_t>(seed));
    m.set("out", out);
    write_manifest(out, m);
    std::printf("bench report written to %s\n", out.c_str());
  }
  return 0;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"camera-pose positional encoding and multi-view diffusion toolkit"};
  app.require_subcommand(1);

  app.set_config("--config", "",
                 "key = value file with one [subcommand] section per command; "
                 "flags take precedence; place --config before the subcommand");
  app.get_config_formatter_base()->comment('#');

  std::uint64_t seed = 0;
  auto common = [&seed](CLI::App* sub) {
    sub->add_option("--seed", seed, "Random seed")->capture_default_str();
  };

  // datagen
  auto* dg = app.add_subcommand("datagen", "Render a procedural posed-image dataset");
  common(dg);
  std::string dg_out = "dataset.bin";
  int dg_scenes = 10, dg_views = 12, dg_side = 32;
  std::string dg_mode = "4dof";
  double dg_rmin = 1.5, dg_rmax = 4.0;
  dg->add_option("--out", dg_out, "Output dataset file")->capture_default_str();
  dg->add_option("--scenes", dg_scenes, "Scene count")->capture_default_str();
  dg->add_option("--views", dg_views, "Views per scene")->capture_default_str();
  dg->add_option("--side", dg_side, "Image side in pixels")->capture_default_str();
  dg->add_option("--mode", dg_mode, "Pose mode: 4dof or 6dof")->capture_default_str();
  dg->add_option("--r-min", dg_rmin, "Minimum orbit radius")->capture_default_str();
  dg->add_option("--r-max", dg_rmax, "Maximum orbit radius")->capture_default_str();

  // train
  auto* tr = app.add_subcommand("train", "Train the denoiser on a dataset");
  common(tr);
  std::string tr_data = "dataset.bin", tr_out = "model.ckpt";
  CommonModelFlags tr_model;
  TrainConfig tr_cfg;
  int tr_schedule = 1000;
  tr->add_option("--data", tr_data, "Dataset file")->capture_default_str();
  tr->add_option("--out", tr_out, "Checkpoint output path")->capture_default_str();
  tr->add_option("--steps", tr_cfg.steps, "Optimizer steps")->capture_default_str();
  tr->add_option("--scenes-per-step", tr_cfg.scenes_per_step, "Scene batches accumulated per step")
      ->capture_default_str();
  tr->add_option("--n-refs", tr_cfg.n_refs, "Reference views per batch")->capture_default_str();
  tr->add_option("--m-targets", tr_cfg.m_targets, "Target views per batch")->capture_default_str();
  tr->add_option("--lr", tr_cfg.lr, "Peak learning rate")->capture_default_str();
  tr->add_option("--warmup", tr_cfg.warmup_steps, "Warmup steps")->capture_default_str();
  tr->add_option("--channels", tr_model.channels, "Base channel count")->capture_default_str();
  tr->add_option("--token-dim", tr_model.token_dim, "Attention token dimension")
      ->capture_default_str();
  tr->add_option("--heads", tr_model.heads, "Attention heads")->capture_default_str();
  tr->add_option("--translation-scale", tr_model.translation_scale,
                 "6 DoF translation rescale factor")
      ->capture_default_str();
  tr->add_option("--schedule-steps", tr_schedule, "Forward-process step count")
      ->capture_default_str();
  tr->add_option("--log-every", tr_cfg.log_every, "Loss log interval")->capture_default_str();

  // sample
  auto* sm = app.add_subcommand("sample", "Generate target views from a checkpoint");
  common(sm);
  std::string sm_ckpt = "model.ckpt", sm_data = "dataset.bin", sm_out = "samples";
  std::string sm_targets, sm_mode = "direct";
  int sm_scene = 0, sm_nrefs = 3, sm_schedule = 1000;
  SamplerConfig sm_sampler;
  sm->add_option("--ckpt", sm_ckpt, "Checkpoint")->capture_default_str();
  sm->add_option("--data", sm_data, "Dataset supplying reference views")->capture_default_str();
  sm->add_option("--scene", sm_scene, "Scene index")->capture_default_str();
  sm->add_option("--n-refs", sm_nrefs, "Reference view count")->capture_default_str();
  sm->add_option("--target-views", sm_targets, "Comma-separated view indices (default: last two)");
  sm->add_option("--out", sm_out, "Output directory")->capture_default_str();
  sm->add_option("--mode", sm_mode, "direct or autoregressive")->capture_default_str();
  sm->add_option("--steps", sm_sampler.steps, "Denoising steps")->capture_default_str();
  sm->add_option("--min-targets", sm_sampler.min_targets, "Joint-generation floor")
      ->capture_default_str();
  sm->add_flag("--stochastic", [&sm_sampler](std::int64_t) { sm_sampler.deterministic = false; },
               "Stochastic sampling instead of the deterministic rule");
  sm->add_option("--guidance", sm_sampler.guidance_scale, "Guidance scale (0 = off)")
      ->capture_default_str();
  sm->add_option("--schedule-steps", sm_schedule, "Forward-process step count")
      ->capture_default_str();

  // eval
  auto* ev = app.add_subcommand("eval", "Score held-out views against references");
  common(ev);
  std::string ev_ckpt = "model.ckpt", ev_data = "dataset.bin", ev_out = "report.csv";
  std::string ev_refs = "1,2,3,5,10";
  int ev_targets = 2, ev_schedule = 1000, ev_max_scenes = 0;
  SamplerConfig ev_sampler;
  ev_sampler.min_targets = 1;  // no padding during evaluation
  ev->add_option("--ckpt", ev_ckpt, "Checkpoint")->capture_default_str();
  ev->add_option("--data", ev_data, "Evaluation dataset")->capture_default_str();
  ev->add_option("--out", ev_out, "CSV report path")->capture_default_str();
  ev->add_option("--refs", ev_refs, "Reference counts to evaluate")->capture_default_str();
  ev->add_option("--targets-per-scene", ev_targets, "Held-out views per scene")
      ->capture_default_str();
  ev->add_option("--steps", ev_sampler.steps, "Denoising steps")->capture_default_str();
  ev->add_option("--min-targets", ev_sampler.min_targets, "Joint-generation floor")
      ->capture_default_str();
  ev->add_option("--max-scenes", ev_max_scenes, "Limit evaluated scenes (0 = all)")
      ->capture_default_str();
  ev->add_option("--schedule-steps", ev_schedule, "Forward-process step count")
      ->capture_default_str();

  // verify
  auto* vf = app.add_subcommand("verify", "Run the invariant property suite");
  common(vf);
  std::string vf_out;
  vf->add_option("--out", vf_out, "Optional report file");

  // bench
  auto* bn = app.add_subcommand("bench", "Encoding throughput and sampling cost trends");
  common(bn);
  std::string bn_out;
  bn->add_option("--out", bn_out, "Optional report file");

  CLI11_PARSE(app, argc, argv);

  try {
    if (dg->parsed()) {
      return cmd_datagen(dg_out, dg_scenes, dg_views, dg_side, dg_mode, seed, dg_rmin, dg_rmax);
    }
    if (tr->parsed()) {
      tr_cfg.seed = seed;
      return cmd_train(tr_data, tr_out, tr_model, tr_cfg, tr_schedule);
    }
    if (sm->parsed()) {
      sm_sampler.seed = seed;
      return cmd_sample(sm_ckpt, sm_data, sm_scene, sm_nrefs, sm_targets, sm_out, sm_sampler,
                        sm_schedule, sm_mode);
    }
    if (ev->parsed()) {
      ev_sampler.seed = seed;
      return cmd_eval(ev_ckpt, ev_data, ev_out, ev_refs, ev_targets, ev_sampler, ev_schedule,
                      ev_max_scenes);
    }
    if (vf->parsed()) return cmd_verify(seed, vf_out);
    if (bn->parsed()) return cmd_bench(bn_out, seed);
  } catch (const std::exception& e) {
    std::fprintf(stderr, "error: %s\n", e.what());
    return 1;
  }
  return 0;
}
