#pragma once
// Orchestration: staged training with resume semantics, manifest writing, and
// segment-autoregressive video generation with overlap conditioning and
// per-region prompt chaining.
#include <cstdint>
#include <map>
#include <string>
#include <vector>

#include "arlon/ar_model.hpp"
#include "arlon/dit.hpp"
#include "arlon/eval.hpp"
#include "arlon/injection.hpp"
#include "arlon/latent_vqvae.hpp"
#include "arlon/synth_data.hpp"
#include "arlon/tensor.hpp"
#include "arlon/video_vae.hpp"

namespace arlon::pipe {

// Optimizer steps, learning rates and batch sizes per training stage. The
// autoencoder stage decays its rate to 0.3x at 62% and 0.1x at 81% of its
// step budget; the other stages run at a constant rate.
struct TrainSchedule {
  int64_t vae_steps = 4200;
  double vae_lr = 1e-3;
  int64_t vae_batch = 2;
  int64_t vae_clip_frames = 8; // training clips cut from full videos

  int64_t vq_steps = 600;
  double vq_lr = 1e-3;
  int64_t vq_batch = 4;

  int64_t ar_steps = 900;
  double ar_lr = 3e-4;
  int64_t ar_batch = 4;

  int64_t dit_steps = 1400;
  double dit_lr = 3e-4;

  int64_t inject_steps = 900;
  double inject_lr = 3e-4;

  std::string to_json() const;
  static TrainSchedule from_json(const std::string& text);
  void validate() const;
};

// Everything one run needs: data and artifact locations, per-stage model
// configs, the long-video segmentation scheme, sampling knobs and the master
// seed every stage seed derives from.
struct RunConfig {
  std::string data_root = "data/corpus";
  std::string run_dir = "runs/toy";

  data::CorpusConfig corpus;
  data::TextConfig text;
  vae::VideoVaeConfig vae;
  vq::VqVaeConfig vq_fine = vq::VqVaeConfig::fine();
  vq::VqVaeConfig vq_coarse = vq::VqVaeConfig::coarse();
  ar::ARConfig ar;
  dit::DiTConfig dit;
  inject::InjectionConfig injection;
  TrainSchedule train;

  int64_t seg_frames = 12; // latent frames per generation segment
  int64_t overlap = 3;     // conditioning latent frames carried between segments
  int denoise_steps = 30;
  double ar_temperature = 1.0;
  int64_t ar_top_k = 0; // 0 = full distribution
  uint64_t master_seed = 7;

  std::string to_json() const;
  static RunConfig from_json(const std::string& text);
  // Validates every stage config plus the cross-stage invariants (channel
  // widths, code-grid geometry, text dims, 0 < overlap < seg_frames).
  void validate() const;
  std::string config_hash() const; // over the serialized form
};

// ---- generation planning ----

// Half-open range of latent frames one prompt governs.
struct PromptRegion {
  std::string prompt;
  int64_t begin = 0, end = 0;
};

// One diffusion call: latents [begin, end) are denoised; for segments after
// the first, the first `overlap` frames are clamped to the previous output
// (the conditioning range) and only [keep_begin, end) enters the final video.
struct SegmentPlan {
  int index = 0;
  int64_t begin = 0, end = 0;
  int64_t keep_begin = 0;
  int64_t cond_begin = 0, cond_end = 0; // empty for the first segment
  int64_t code_begin = 0, code_end = 0; // discrete code frames informing this segment
  int prompt_index = 0;
};

struct GenerationPlan {
  int64_t total_frames = 0; // latent frames
  int64_t seg_frames = 0, overlap = 0;
  std::vector<PromptRegion> regions;
  std::vector<SegmentPlan> segments;
  bool truncated_tail = false; // a region tail was shorter than a full segment

  // Rewrites every segment's code range from latent frames to discrete code
  // frames (floor/ceil of the latent range over the stride). Plans are built
  // with stride-1 ranges; the generation engine reassigns with the fine
  // quantizer's temporal stride. Region boundaries and the total must be
  // stride-aligned.
  void assign_code_ranges(int64_t code_stride);

  // Checks the tiling contract: kept ranges cover [0, total) exactly once,
  // conditioning ranges consume exactly `overlap` tail frames of the
  // predecessor, code ranges cover the code stream without gaps.
  void validate(int64_t code_stride) const;
  std::string to_json() const;
};

// Segment arithmetic for a single prompt: n = 1 + (total - seg) / (seg -
// overlap) segments at stride seg - overlap. Errors when overlap >= seg,
// total < seg, or the division does not come out even (unless
// `allow_truncate`, which clips the final segment).
GenerationPlan plan_segments(int64_t total_frames, int64_t seg_frames, int64_t overlap,
                             bool allow_truncate = false);

// Multi-prompt planning: each region re-anchors the segment grid at
// region.begin - overlap, so every prompt change starts a fresh segment
// conditioned on the previous region's tail. Adjacent regions with the same
// prompt are merged first (an unchanged prompt is no boundary), which makes
// identical-prompt progressive generation coincide with plan_segments.
// Region tails that fall short of a full segment are clipped.
GenerationPlan plan_regions(const std::vector<PromptRegion>& regions, int64_t seg_frames,
                            int64_t overlap);

// ---- staged training ----

// data, vae, vq_fine, vq_coarse, ar, dit, injection — in dependency order.
const std::vector<std::string>& stage_names();
std::string checkpoint_path(const RunConfig& cfg, const std::string& stage);
std::string manifest_path(const RunConfig& cfg, const std::string& stage);

struct StageResult {
  std::string stage;
  bool retrained = false;
  double wall_seconds = 0.0;
  std::string checkpoint_hash;
  std::map<std::string, double> metrics;
};

// Runs one named stage unconditionally, writes its checkpoint and manifest
// (config hash, stage seed, wall clock, metrics, checkpoint hash) and
// returns the result. Failures surface as StageError naming the stage.
StageResult run_stage(const RunConfig& cfg, const std::string& stage);

// Runs every stage in order. With `resume`, a stage is skipped when its
// checkpoint and manifest exist, the manifest's config hash matches, and no
// earlier stage retrained this run; anything else (missing artifact, stale
// config, retrained upstream) retrains that stage and everything after it.
std::vector<StageResult> train_all(const RunConfig& cfg, bool resume);

// Persistence for the text encoder (trained jointly with the sequence model,
// then frozen for the diffusion stages).
void save_text_encoder(const std::string& path, const data::TextEncoder& enc);
data::TextEncoder load_text_encoder(const std::string& path);

// ---- generation ----

// The full frozen system. Loading verifies every checkpoint and names the
// missing stage in its error.
struct ModelBundle {
  data::TextEncoder text;
  vae::VideoVae vae;
  vq::VqVae vq_fine, vq_coarse;
  ar::ARModel ar;
  dit::DiT dit;
  inject::Injector injector;

  static ModelBundle load(const RunConfig& cfg);
};

struct Generation {
  Tensor video;        // (T_px, H, W, 3) in [0, 1]
  Tensor latents;      // stitched latent stream the video decodes
  Tensor condition;    // full-horizon condition features from the code stream
  Tensor coarse_video; // condition decoded to pixels — the layout reference
  vq::IndexGrid codes; // the sampled code stream
  GenerationPlan plan;
  int dit_calls = 0; // one per planned segment

  std::string manifest_json(const RunConfig& cfg, uint64_t seed, int steps) const;
};

// Single-prompt short video covering exactly one corpus-shaped clip (one
// segment, no conditioning). Deterministic per (config, seed).
Generation generate_short(const ModelBundle& models, const RunConfig& cfg,
                          const std::string& prompt, uint64_t seed, int steps,
                          bool injected = true);

// Segment-autoregressive long video: one code stream for the whole horizon,
// decoded once to condition features; each segment after the first clamps
// its first `overlap` latent frames to the previous segment's output.
Generation generate_long(const ModelBundle& models, const RunConfig& cfg,
                         const std::string& prompt, int64_t total_latent_frames, uint64_t seed,
                         int steps, bool injected = true);

// Progressive prompts: the code stream chains across prompt regions (each
// region's first code frame is forced to the previous region's last), and
// the segment grid re-anchors at every prompt change with overlap
// conditioning carried across the boundary.
Generation generate_progressive(const ModelBundle& models, const RunConfig& cfg,
                                const std::vector<std::string>& prompts,
                                int64_t latent_frames_per_prompt, uint64_t seed, int steps,
                                bool injected = true);

// Generation over an explicit plan (the engine behind the three fronts).
Generation generate_planned(const ModelBundle& models, const RunConfig& cfg,
                            const GenerationPlan& plan, uint64_t seed, int steps,
                            bool injected);

// Adapter for the quality-vs-steps sweep: generates a short video per
// (prompt, seed, steps, injected) cell and pairs it with its own coarse
// layout reference.
eval::SweepGenerator make_sweep_generator(const ModelBundle& models, const RunConfig& cfg);

} // namespace arlon::pipe
