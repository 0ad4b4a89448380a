#pragma once

#include <cstdint>
#include <functional>
#include <map>
#include <string>
#include <vector>

#include "arlon/tensor.hpp"

// Desk-scale evaluation metrics and the quality-vs-denoising-steps sweep.
// Every metric here is a pure function of its inputs: same tensors and
// thresholds in, same numbers out, no hidden state.
namespace arlon::eval {

// Peak signal-to-noise ratio in dB between two equal-shape videos with values
// in [0, 1]: 10 * log10(1 / MSE). A zero MSE (bit-identical inputs) is
// reported as the cap value 99 dB rather than infinity. Symmetric in (a, b).
double psnr(const Tensor& a, const Tensor& b);

// exp(entropy) of the empirical code-usage distribution; ranges from 1
// (a single entry carries all hits) to K (uniform usage over K entries).
// All-zero counts are a usage-tracking bug upstream and raise an error.
double codebook_perplexity(const std::vector<int64_t>& counts);

struct TemporalConsistency {
  double value = 0.0;        // mean cosine similarity over scored pairs
  int64_t skipped_pairs = 0; // adjacent pairs dropped because a frame had zero norm
};

// Mean cosine similarity of adjacent flattened frames of a (T,H,W,C) video,
// in [-1, 1]. Static content scores 1, sign-alternating content -1,
// zero-mean noise ~0. Pairs containing a zero-norm frame have no defined
// angle; they are skipped and counted in `skipped_pairs`.
TemporalConsistency temporal_consistency(const Tensor& video);

// Mean absolute per-pixel difference between adjacent frames of a (T,H,W,C)
// video; 0 for static content, growing with object speed.
double dynamic_degree(const Tensor& video);

// Per-pixel luminance (channel mean) of one (H,W,C) frame or a whole
// (T,H,W,C) video, dropping the channel axis.
Tensor luminance(const Tensor& video);

// Binary foreground mask of a (T,H,W,C) video: a pixel is foreground when
// its luminance differs from the frame background by more than `threshold`.
// The background level is estimated per frame as the median luminance, which
// is robust here because the scenes are dominated by background.
Tensor foreground_mask(const Tensor& video, double threshold);

struct LayoutIou {
  double value = 0.0;
  bool empty_masks = false; // no frame had any foreground in either video
};

// Layout agreement between two equal-shape videos: binarize both with
// foreground_mask at `threshold`, then average the per-frame
// intersection-over-union of the masks. Frames where both masks are empty
// carry no layout signal and are skipped; if that happens on every frame the
// result is 0 with `empty_masks` set.
LayoutIou layout_iou(const Tensor& coarse_decode, const Tensor& generated,
                     double threshold = 0.15);

// Threshold calibration against ground-truth masks: for each candidate
// threshold, binarize each video with foreground_mask and score the mean
// per-frame IoU against its (T,H,W) reference mask video; returns the
// candidate with the highest mean score (ties to the lower threshold).
double calibrate_layout_threshold(const std::vector<Tensor>& videos,
                                  const std::vector<Tensor>& mask_videos,
                                  const std::vector<double>& thresholds);

// One generated sample for the steps sweep: the finished video plus the
// layout reference it should be compared against (the decoded coarse tokens
// for the same prompt and seed, upsampled to pixel shape).
struct SweepSample {
  Tensor video;
  Tensor reference;
};

// Produces the sample for one (prompt, seed, step count, injection on/off)
// cell; supplied by the orchestration layer that owns the trained models.
using SweepGenerator = std::function<SweepSample(
    const std::string& prompt, uint64_t seed, int steps, bool injected)>;

struct SweepPoint {
  int steps = 0;
  bool injected = false;
  double temporal_consistency = 0.0;
  double layout_iou = 0.0;
  double dynamic_degree = 0.0;
};

struct SweepCurve {
  std::vector<SweepPoint> points; // one per (step count, condition), averaged over pairs

  // Tab-separated table with a header row, one row per point.
  std::string to_tsv() const;
  // Self-contained SVG line plot: one panel per metric, solid lines with
  // injection, dashed without.
  std::string to_svg() const;
  // Writes `<base>.tsv` and `<base>.svg`.
  void write(const std::string& base_path) const;
};

// Quality-vs-denoising-steps sweep: for every step count, generate each
// (prompt, seed) pair with and without injection and average the three
// metrics per condition. `prompts` and `seeds` are parallel vectors pairing
// one seed with one prompt. Deterministic given a deterministic generator.
SweepCurve steps_sweep(const std::vector<std::string>& prompts,
                       const std::vector<uint64_t>& seeds,
                       const std::vector<int>& step_counts,
                       const SweepGenerator& generate,
                       double layout_threshold = 0.15);

// Named metric bundle for one evaluation run, serializable for manifests.
struct MetricReport {
  std::map<std::string, double> metrics;       // name -> value, all finite
  std::string config_hash;                     // hash of the run config
  std::vector<uint64_t> seeds;                 // seeds the run consumed
  std::map<std::string, double> stage_seconds; // wall-clock per stage

  void set(const std::string& name, double value); // rejects non-finite values
  std::string to_json() const;
  static MetricReport from_json(const std::string& text);
};

} // namespace arlon::eval
