#pragma once

#include <algorithm>
#include <cstring>
#include <functional>

#include "cape/datagen.hpp"
#include "cape/model.hpp"
#include "cape/threading.hpp"

namespace cape {

/// Cumulative signal coefficients of a cosine forward process.
/// alpha_bar[0] = 1 exactly, alpha_bar[T] ~ 0, strictly decreasing.
struct NoiseSchedule {
  int steps = 1000;
  std::vector<double> alpha_bar;  // size steps + 1

  static NoiseSchedule cosine(int steps = 1000) {
    if (steps < 1) throw std::invalid_argument("NoiseSchedule: steps must be >= 1");
    NoiseSchedule s;
    s.steps = steps;
    s.alpha_bar.resize(static_cast<std::size_t>(steps) + 1);
    const double offset = 0.008;
    auto f = [&](double t) {
      const double x = (t / steps + offset) / (1.0 + offset) * (kPi / 2.0);
      return std::cos(x) * std::cos(x);
    };
    const double f0 = f(0.0);
    s.alpha_bar[0] = 1.0;
    double prev = 1.0;
    for (int t = 1; t <= steps; ++t) {
      double v = f(static_cast<double>(t)) / f0;
      v = std::min(v, prev * (1.0 - 1e-8));  // enforce strict decrease
      v = std::max(v, 1e-12);
      s.alpha_bar[static_cast<std::size_t>(t)] = v;
      prev = v;
    }
    return s;
  }

  double at(int t) const {
    if (t < 0 || t > steps) throw std::invalid_argument("NoiseSchedule: t out of range");
    return alpha_bar[static_cast<std::size_t>(t)];
  }
};

/// x_t = sqrt(alpha_bar_t) x0 + sqrt(1 - alpha_bar_t) eps.
template <typename S>
TensorT<S> forward_noise(const TensorT<S>& x0, int t, const TensorT<S>& eps,
                         const NoiseSchedule& schedule) {
  if (!x0.same_shape(eps)) throw std::invalid_argument("forward_noise: shape mismatch");
  const double ab = schedule.at(t);
  const S a = static_cast<S>(std::sqrt(ab));
  const S b = static_cast<S>(std::sqrt(1.0 - ab));
  TensorT<S> out(x0.shape);
  for (std::int64_t i = 0; i < out.numel(); ++i) out.at(i) = a * x0.at(i) + b * eps.at(i);
  return out;
}

namespace diffusion_detail {

template <typename S>
TensorT<S> to_signed(const TensorT<S>& img01) {
  TensorT<S> out(img01.shape);
  for (std::int64_t i = 0; i < out.numel(); ++i) out.at(i) = S(2) * img01.at(i) - S(1);
  return out;
}

template <typename S>
TensorT<S> to_unit(const TensorT<S>& imgpm1) {
  TensorT<S> out(imgpm1.shape);
  for (std::int64_t i = 0; i < out.numel(); ++i) {
    out.at(i) = std::clamp((imgpm1.at(i) + S(1)) / S(2), S(0), S(1));
  }
  return out;
}

inline std::uint64_t pose_hash(const Pose& p) {
  std::uint64_t h = 0xcbf29ce484222325ULL;
  auto mix_double = [&h](double v) {
    std::uint64_t u;
    std::memcpy(&u, &v, 8);
    h ^= u;
    h *= 0x100000001b3ULL;
  };
  if (p.mode == PoseMode::FourDoF) {
    mix_double(1.0);
    mix_double(p.p4.azimuth());
    mix_double(p.p4.elevation());
    mix_double(p.p4.roll());
    mix_double(p.p4.radius());
  } else {
    mix_double(2.0);
    for (int i = 0; i < 3; ++i)
      for (int j = 0; j < 3; ++j) mix_double(p.p6.rotation()(i, j));
    for (int i = 0; i < 3; ++i) mix_double(p.p6.translation()(i));
  }
  return h;
}

/// Noise keyed by (seed, pose, salt): duplicate target poses receive
/// identical noise, which makes padded duplicates track their originals and
/// target permutations exactly permute the outputs.
template <typename S>
TensorT<S> pose_keyed_noise(std::uint64_t seed, const Pose& pose, std::uint64_t salt,
                            const std::vector<std::int64_t>& shape) {
  Rng rng(Rng::mix(Rng::mix(seed, pose_hash(pose)), salt));
  return TensorT<S>::randn(shape, rng);
}

}  // namespace diffusion_detail

/// One training unit: noise the scene's target views at a shared uniformly
/// sampled timestep, predict the noise, and accumulate parameter gradients.
/// Returns the scalar loss. `grad_out`, when given, receives the gradients
/// instead of the model's own buffers (used for multi-worker accumulation).
template <typename S>
S training_step(DenoiserT<S>& model, const ViewSet& references, const ViewSet& targets,
                const NoiseSchedule& schedule, Rng& rng,
                std::vector<TensorT<S>>* grad_out = nullptr) {
  if (references.size() == 0 || targets.size() == 0) {
    throw std::invalid_argument("training_step: need at least one reference and one target");
  }
  const int t = 1 + static_cast<int>(rng.uniform_index(static_cast<std::uint64_t>(schedule.steps)));

  nn::TapeT<S> tape;
  const auto params = model.leaf_params(tape, true);

  std::vector<nn::TapeView> ref_tokens;
  for (std::size_t i = 0; i < references.size(); ++i) {
    const TensorT<S> img = diffusion_detail::to_signed(references.images[i].template cast<S>());
    const int tok = model.build_encoder(tape, params, tape.leaf(img));
    ref_tokens.push_back({tok, references.poses[i]});
  }

  std::vector<int> noisy_ids;
  std::vector<Pose> poses;
  std::vector<std::shared_ptr<const TensorT<S>>> noise;
  for (std::size_t i = 0; i < targets.size(); ++i) {
    const TensorT<S> x0 = diffusion_detail::to_signed(targets.images[i].template cast<S>());
    TensorT<S> eps(x0.shape);
    for (std::int64_t k = 0; k < eps.numel(); ++k) eps.at(k) = static_cast<S>(rng.normal());
    noisy_ids.push_back(tape.leaf(forward_noise(x0, t, eps, schedule)));
    poses.push_back(targets.poses[i]);
    noise.push_back(std::make_shared<const TensorT<S>>(std::move(eps)));
  }

  const auto preds = model.build_denoiser(tape, params, noisy_ids, poses, t, ref_tokens);
  int loss = -1;
  for (std::size_t i = 0; i < preds.size(); ++i) {
    const int l = nn::mse_vs_const(tape, preds[i], noise[i]);
    loss = (loss < 0) ? l : nn::add(tape, loss, l);
  }
  loss = nn::scale(tape, loss, 1.0 / static_cast<double>(preds.size()));

  const S loss_value = tape.val(loss).at(0);
  if (!std::isfinite(static_cast<double>(loss_value))) {
    throw std::runtime_error("training_step: non-finite loss at t=" + std::to_string(t));
  }
  tape.backward(loss);
  if (grad_out) {
    grad_out->clear();
    for (int i = 0; i < model.params().count(); ++i) {
      if (tape.has_grad(params[static_cast<std::size_t>(i)])) {
        grad_out->push_back(tape.grad(params[static_cast<std::size_t>(i)]));
      } else {
        grad_out->push_back(TensorT<S>(model.params().value(i).shape));
      }
    }
  } else {
    model.collect_grads(tape, params);
  }
  return loss_value;
}

/// Adam with optional cosine learning-rate decay handled by the caller.
template <typename S>
class AdamT {
 public:
  explicit AdamT(const ParamStoreT<S>& store, double beta1 = 0.9, double beta2 = 0.999,
                 double eps = 1e-8)
      : beta1_(beta1), beta2_(beta2), eps_(eps) {
    for (int i = 0; i < store.count(); ++i) {
      m_.emplace_back(store.value(i).shape);
      v_.emplace_back(store.value(i).shape);
    }
  }

  void step(ParamStoreT<S>& store, double lr) {
    ++t_;
    const double bc1 = 1.0 - std::pow(beta1_, t_);
    const double bc2 = 1.0 - std::pow(beta2_, t_);
    for (int i = 0; i < store.count(); ++i) {
      auto& w = store.value(i);
      auto& g = store.grad(i);
      auto& m = m_[static_cast<std::size_t>(i)];
      auto& v = v_[static_cast<std::size_t>(i)];
      for (std::int64_t k = 0; k < w.numel(); ++k) {
        const double gk = static_cast<double>(g.at(k));
        const double mk = beta1_ * static_cast<double>(m.at(k)) + (1.0 - beta1_) * gk;
        const double vk = beta2_ * static_cast<double>(v.at(k)) + (1.0 - beta2_) * gk * gk;
        m.at(k) = static_cast<S>(mk);
        v.at(k) = static_cast<S>(vk);
        const double mhat = mk / bc1;
        const double vhat = vk / bc2;
        w.at(k) -= static_cast<S>(lr * mhat / (std::sqrt(vhat) + eps_));
      }
    }
  }

 private:
  double beta1_, beta2_, eps_;
  int t_ = 0;
  std::vector<TensorT<S>> m_;
  std::vector<TensorT<S>> v_;
};

enum class SamplerMode { Direct, Autoregressive };
enum class PadMode { Duplicate, RandomPoses, Off };

struct SamplerConfig {
  SamplerMode mode = SamplerMode::Direct;
  int steps = 50;
  bool deterministic = true;  // eta = 0; false enables the stochastic update
  int min_targets = 15;       // joint-generation floor; requests are padded up to it
  PadMode pad = PadMode::Duplicate;
  std::uint64_t seed = 0;
  double guidance_scale = 0.0;  // hook; 0 disables the second pass
  bool clip_denoised = true;
  PoseRanges pose_ranges;  // prior for PadMode::RandomPoses
};

struct SampleTrace {
  std::vector<int> reference_counts;  // cross-attention pool size per generated view
};

namespace diffusion_detail {

/// Denoises `xs` (signed space) jointly over the DDIM sub-schedule.
template <typename S>
void ddim_loop(const DenoiserT<S>& model, std::vector<TensorT<S>>& xs,
               const std::vector<Pose>& poses, const std::vector<ViewTokensT<S>>& refs,
               const NoiseSchedule& schedule, const SamplerConfig& sampler) {
  const int ratio = std::max(1, schedule.steps / std::max(1, sampler.steps));
  std::vector<int> times;
  for (int t = 0; t < schedule.steps; t += ratio) times.push_back(t);
  // descending, starting below T so the first signal coefficient is nonzero
  std::vector<int> order(times.rbegin(), times.rend());

  for (std::size_t si = 0; si < order.size(); ++si) {
    const int t = order[si];
    const int t_prev = (si + 1 < order.size()) ? order[si + 1] : 0;
    const double ab_t = schedule.at(t);
    const double ab_prev = (t == 0) ? 1.0 : schedule.at(t_prev);

    std::vector<TensorT<S>> eps = model.denoise(xs, poses, t, refs);
    if (sampler.guidance_scale > 0.0) {
      // Unconditional pass: zeroed reference tokens at the same poses.
      std::vector<ViewTokensT<S>> null_refs = refs;
      for (auto& r : null_refs) r.tokens.fill(S(0));
      const auto eps_u = model.denoise(xs, poses, t, null_refs);
      for (std::size_t v = 0; v < eps.size(); ++v) {
        for (std::int64_t k = 0; k < eps[v].numel(); ++k) {
          eps[v].at(k) = static_cast<S>(
              eps_u[v].at(k) +
              sampler.guidance_scale * (eps[v].at(k) - eps_u[v].at(k)));
        }
      }
    }

    const double sq_t = std::sqrt(ab_t), sq_1mt = std::sqrt(1.0 - ab_t);
    double sigma = 0.0;
    if (!sampler.deterministic && t > 0) {
      sigma = std::sqrt((1.0 - ab_prev) / (1.0 - ab_t)) * std::sqrt(1.0 - ab_t / ab_prev);
    }
    const double dir_coeff = std::sqrt(std::max(0.0, 1.0 - ab_prev - sigma * sigma));
    const double sq_prev = std::sqrt(ab_prev);

    for (std::size_t v = 0; v < xs.size(); ++v) {
      TensorT<S> z;
      if (sigma > 0.0) {
        z = pose_keyed_noise<S>(sampler.seed, poses[v],
                                0x73746570ULL + static_cast<std::uint64_t>(t), xs[v].shape);
      }
      for (std::int64_t k = 0; k < xs[v].numel(); ++k) {
        const double xk = xs[v].at(k);
        const double ek = eps[v].at(k);
        double x0 = (xk - sq_1mt * ek) / sq_t;
        if (sampler.clip_denoised) x0 = std::clamp(x0, -1.0, 1.0);
        double next = sq_prev * x0 + dir_coeff * ek;
        if (sigma > 0.0) next += sigma * z.at(k);
        xs[v].at(k) = static_cast<S>(next);
      }
    }
  }
}

inline std::vector<double> pose_sort_key(const Pose& p) {
  std::vector<double> k;
  if (p.mode == PoseMode::FourDoF) {
    k = {0.0, p.p4.azimuth(), p.p4.elevation(), p.p4.roll(), p.p4.radius()};
  } else {
    k.push_back(1.0);
    for (int i = 0; i < 3; ++i)
      for (int j = 0; j < 3; ++j) k.push_back(p.p6.rotation()(i, j));
    for (int i = 0; i < 3; ++i) k.push_back(p.p6.translation()(i));
  }
  return k;
}

inline std::vector<Pose> pad_poses(const std::vector<Pose>& requested, const SamplerConfig& s,
                                   PoseMode mode) {
  std::vector<Pose> padded = requested;
  if (s.pad == PadMode::Off) return padded;
  Rng rng(Rng::mix(s.seed, 0x706164ULL));
  // Duplicates cycle through a canonically ordered copy of the requests so
  // the padded pose multiset does not depend on the caller's list order.
  std::vector<Pose> cycle = requested;
  std::stable_sort(cycle.begin(), cycle.end(), [](const Pose& a, const Pose& b) {
    return pose_sort_key(a) < pose_sort_key(b);
  });
  std::size_t k = 0;
  while (padded.size() < static_cast<std::size_t>(s.min_targets)) {
    if (s.pad == PadMode::Duplicate) {
      padded.push_back(cycle[k % cycle.size()]);
      ++k;
    } else {
      const Pose4 p = sample_pose4(s.pose_ranges, rng);
      padded.push_back(mode == PoseMode::FourDoF
                           ? Pose::four_dof(p)
                           : Pose::six_dof(spherical_to_se3(p, Eigen::Vector3d::Zero())));
    }
  }
  return padded;
}

}  // namespace diffusion_detail

/// Joint generation: every requested target view is denoised together over
/// the full DDIM trajectory. Fewer than min_targets requests are padded
/// (duplicates by default) and the extra outputs dropped.
template <typename S>
std::vector<TensorT<S>> sample_direct(const DenoiserT<S>& model, const ViewSet& references,
                                      const std::vector<Pose>& target_poses,
                                      const NoiseSchedule& schedule, const SamplerConfig& sampler,
                                      SampleTrace* trace = nullptr) {
  if (target_poses.empty()) throw std::invalid_argument("sample_direct: no target poses");
  if (references.size() == 0) throw std::invalid_argument("sample_direct: no reference views");

  std::vector<TensorT<S>> ref_imgs;
  for (const auto& img : references.images) {
    ref_imgs.push_back(diffusion_detail::to_signed(img.template cast<S>()));
  }
  const auto refs = model.encode_references(ref_imgs, references.poses);

  const auto padded = diffusion_detail::pad_poses(target_poses, sampler, model.config().cape.mode);
  std::vector<TensorT<S>> xs;
  const std::vector<std::int64_t> shape = {3, model.config().image_side, model.config().image_side};
  for (const auto& pose : padded) {
    xs.push_back(diffusion_detail::pose_keyed_noise<S>(sampler.seed, pose, 0x696e6974ULL, shape));
  }

  diffusion_detail::ddim_loop(model, xs, padded, refs, schedule, sampler);
  if (trace) {
    for (std::size_t i = 0; i < target_poses.size(); ++i) {
      trace->reference_counts.push_back(static_cast<int>(refs.size()));
    }
  }

  std::vector<TensorT<S>> out;
  for (std::size_t i = 0; i < target_poses.size(); ++i) {
    out.push_back(diffusion_detail::to_unit(xs[i]));
  }
  return out;
}

/// Sequential generation: each target is generated alone (padded as in
/// direct mode), then appended to the reference set for the views after it.
template <typename S>
std::vector<TensorT<S>> sample_autoregressive(const DenoiserT<S>& model, const ViewSet& references,
                                              const std::vector<Pose>& target_poses,
                                              const NoiseSchedule& schedule,
                                              const SamplerConfig& sampler,
                                              SampleTrace* trace = nullptr) {
  if (target_poses.empty()) throw std::invalid_argument("sample_autoregressive: no target poses");
  ViewSet grown = references;
  std::vector<TensorT<S>> out;
  for (const auto& pose : target_poses) {
    if (trace) trace->reference_counts.push_back(static_cast<int>(grown.size()));
    auto imgs = sample_direct(model, grown, {pose}, schedule, sampler);
    grown.images.push_back(imgs[0].template cast<float>());
    grown.poses.push_back(pose);
    out.push_back(std::move(imgs[0]));
  }
  return out;
}

}  // namespace cape
