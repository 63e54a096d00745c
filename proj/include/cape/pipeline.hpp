#pragma once

#include <functional>
#include <ostream>

#include "cape/diffusion.hpp"
#include "cape/metrics.hpp"

namespace cape {

struct TrainConfig {
  int steps = 3000;
  int scenes_per_step = 2;  // scene batches accumulated per optimizer step
  int n_refs = 3;
  int m_targets = 3;
  double lr = 2e-3;
  double lr_floor_fraction = 0.1;  // cosine decay target
  int warmup_steps = 100;
  std::uint64_t seed = 0;
  int log_every = 100;
};

struct TrainLogEntry {
  int step;
  double loss;
};

struct TrainResult {
  std::vector<TrainLogEntry> log;
  double mean_loss_first_25 = 0;
  double mean_loss_last_25 = 0;
};

/// Optimizes the model in place. Each step accumulates gradients over
/// `scenes_per_step` independently sampled scene batches (workers run in
/// parallel, reduction order is fixed) and applies one Adam update with
/// linear warmup and cosine decay.
inline TrainResult train_model(Denoiser& model, const Dataset& data,
                               const NoiseSchedule& schedule, const TrainConfig& cfg,
                               std::ostream* log_stream = nullptr,
                               const std::function<void(int)>& on_step = nullptr) {
  if (cfg.steps < 1) throw std::invalid_argument("train: steps must be >= 1");
  if (cfg.scenes_per_step < 1) throw std::invalid_argument("train: scenes_per_step must be >= 1");
  AdamT<float> opt(model.params());
  TrainResult result;
  double first = 0, last = 0;
  int first_n = 0;
  std::vector<double> tail;

  for (int step = 0; step < cfg.steps; ++step) {
    // Draw all scene batches for this step up front (deterministic order).
    std::vector<TrainBatch> batches;
    for (int k = 0; k < cfg.scenes_per_step; ++k) {
      Rng rng(Rng::mix(cfg.seed, 0x626174ULL + static_cast<std::uint64_t>(step) * 131 +
                                      static_cast<std::uint64_t>(k)));
      batches.push_back(sample_batch(data, cfg.n_refs, cfg.m_targets, rng));
    }

    std::vector<std::vector<Tensor>> grads(static_cast<std::size_t>(cfg.scenes_per_step));
    std::vector<double> losses(static_cast<std::size_t>(cfg.scenes_per_step), 0.0);
    parallel_for(cfg.scenes_per_step, [&](int k) {
      Rng rng(Rng::mix(cfg.seed, 0x737465ULL + static_cast<std::uint64_t>(step) * 131 +
                                      static_cast<std::uint64_t>(k)));
      losses[static_cast<std::size_t>(k)] =
          training_step(model, batches[static_cast<std::size_t>(k)].references,
                        batches[static_cast<std::size_t>(k)].targets, schedule, rng,
                        &grads[static_cast<std::size_t>(k)]);
    });

    model.params().zero_grads();
    double loss = 0;
    for (int k = 0; k < cfg.scenes_per_step; ++k) {
      loss += losses[static_cast<std::size_t>(k)];
      for (int i = 0; i < model.params().count(); ++i) {
        auto& dst = model.params().grad(i);
        const auto& src = grads[static_cast<std::size_t>(k)][static_cast<std::size_t>(i)];
        const float inv = 1.0f / static_cast<float>(cfg.scenes_per_step);
        for (std::int64_t j = 0; j < dst.numel(); ++j) dst.at(j) += src.at(j) * inv;
      }
    }
    loss /= cfg.scenes_per_step;

    double lr = cfg.lr;
    if (step < cfg.warmup_steps) {
      lr = cfg.lr * (step + 1) / cfg.warmup_steps;
    } else if (cfg.steps > cfg.warmup_steps) {
      const double progress =
          static_cast<double>(step - cfg.warmup_steps) / (cfg.steps - cfg.warmup_steps);
      const double floor = cfg.lr * cfg.lr_floor_fraction;
      lr = floor + (cfg.lr - floor) * 0.5 * (1.0 + std::cos(kPi * progress));
    }
    opt.step(model.params(), lr);

    if (step < 25) {
      first += loss;
      ++first_n;
    }
    tail.push_back(loss);
    if (tail.size() > 25) tail.erase(tail.begin());

    if (cfg.log_every > 0 && (step % cfg.log_every == 0 || step + 1 == cfg.steps)) {
      result.log.push_back({step, loss});
      if (log_stream) {
        (*log_stream) << "step " << step << " loss " << loss << " lr " << lr << "\n";
        log_stream->flush();
      }
    }
    if (on_step) on_step(step);
  }
  result.mean_loss_first_25 = first_n ? first / first_n : 0;
  for (double l : tail) last += l;
  result.mean_loss_last_25 = tail.empty() ? 0 : last / static_cast<double>(tail.size());
  return result;
}

struct EvalConfig {
  std::vector<int> ref_counts = {1, 2, 3, 5, 10};
  int targets_per_scene = 2;  // the last views of each scene are held out
  SamplerConfig sampler;
  int max_scenes = 0;  // 0 = every scene in the dataset
};

/// Conditions on the first n views of each scene and scores generated images
/// at the held-out target poses. Scenes run in parallel; the report order is
/// fixed by (scene, n_refs, view).
inline MetricReport evaluate_model(const Denoiser& model, const Dataset& data,
                                   const NoiseSchedule& schedule, const EvalConfig& cfg) {
  const int scenes = cfg.max_scenes > 0 ? std::min(cfg.max_scenes, data.scene_count)
                                        : data.scene_count;
  const int targets = cfg.targets_per_scene;
  if (targets < 1 || targets >= data.views_per_scene) {
    throw std::invalid_argument("evaluate: targets_per_scene out of range");
  }
  const int pool = data.views_per_scene - targets;

  struct SceneRows {
    std::vector<MetricRow> rows;
  };
  std::vector<SceneRows> per_scene(static_cast<std::size_t>(scenes));

  parallel_for(scenes, [&](int scene) {
    const ViewSet all = data.scene_views(scene);
    std::vector<Pose> target_poses(all.poses.end() - targets, all.poses.end());
    std::vector<Tensor> target_images(all.images.end() - targets, all.images.end());
    for (int n : cfg.ref_counts) {
      const int use = std::min(n, pool);
      ViewSet refs;
      refs.images.assign(all.images.begin(), all.images.begin() + use);
      refs.poses.assign(all.poses.begin(), all.poses.begin() + use);
      SamplerConfig sampler = cfg.sampler;
      sampler.seed = Rng::mix(cfg.sampler.seed, static_cast<std::uint64_t>(scene) * 1009 +
                                                     static_cast<std::uint64_t>(n));
      const auto generated =
          cfg.sampler.mode == SamplerMode::Autoregressive
              ? sample_autoregressive(model, refs, target_poses, schedule, sampler)
              : sample_direct(model, refs, target_poses, schedule, sampler);
      for (int v = 0; v < targets; ++v) {
        per_scene[static_cast<std::size_t>(scene)].rows.push_back(
            {scene, n, v, psnr(generated[static_cast<std::size_t>(v)], target_images[static_cast<std::size_t>(v)]),
             ssim(generated[static_cast<std::size_t>(v)], target_images[static_cast<std::size_t>(v)])});
      }
    }
  });

  MetricReport report;
  for (const auto& s : per_scene) {
    for (const auto& r : s.rows) report.rows.push_back(r);
  }
  return report;
}

/// Pose-blind baseline: predict each held-out target with the mean of the
/// scene's reference-pool images.
inline double baseline_mean_psnr(const Dataset& data, int targets_per_scene, int max_scenes = 0) {
  const int scenes = max_scenes > 0 ? std::min(max_scenes, data.scene_count) : data.scene_count;
  const int targets = targets_per_scene;
  const int pool = data.views_per_scene - targets;
  double sum = 0;
  int count = 0;
  for (int scene = 0; scene < scenes; ++scene) {
    const ViewSet all = data.scene_views(scene);
    Tensor mean(all.images[0].shape);
    for (int v = 0; v < pool; ++v) {
      for (std::int64_t i = 0; i < mean.numel(); ++i) {
        mean.at(i) += all.images[static_cast<std::size_t>(v)].at(i);
      }
    }
    for (std::int64_t i = 0; i < mean.numel(); ++i) mean.at(i) /= static_cast<float>(pool);
    for (int v = pool; v < data.views_per_scene; ++v) {
      const double p = psnr(mean, all.images[static_cast<std::size_t>(v)]);
      if (!std::isinf(p)) {
        sum += p;
        ++count;
      }
    }
  }
  return count ? sum / count : 0.0;
}

}  // namespace cape
