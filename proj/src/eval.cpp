#include "arlon/eval.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <sstream>

#include <json.hpp>

#include "arlon/errors.hpp"

using nlohmann::json;

namespace arlon::eval {

namespace {

void require_video(const Tensor& v, const char* what) {
  require_that(v.rank() == 4, std::string(what) + ": expected a (T,H,W,C) video, got " +
                                  v.shape_str());
  require_that(v.shape[0] >= 1, std::string(what) + ": video has no frames");
}

int64_t frame_elems(const Tensor& v) { return v.shape[1] * v.shape[2] * v.shape[3]; }

} // namespace

double psnr(const Tensor& a, const Tensor& b) {
  require_that(a.shape == b.shape, "psnr: shape mismatch " + a.shape_str() + " vs " +
                                       b.shape_str());
  require_that(a.numel() > 0, "psnr: empty tensors");
  double sq = 0.0;
  for (int64_t i = 0; i < a.numel(); ++i) {
    const double d = a.data[i] - b.data[i];
    sq += d * d;
  }
  const double mse = sq / static_cast<double>(a.numel());
  if (mse == 0.0) return 99.0; // identical inputs: report the cap, not infinity
  return 10.0 * std::log10(1.0 / mse);
}

double codebook_perplexity(const std::vector<int64_t>& counts) {
  require_that(!counts.empty(), "perplexity: empty count vector");
  int64_t total = 0;
  for (int64_t c : counts) {
    require_that(c >= 0, "perplexity: negative count");
    total += c;
  }
  require_that(total > 0, "perplexity: all usage counts are zero");
  double entropy = 0.0;
  for (int64_t c : counts) {
    if (c == 0) continue;
    const double p = static_cast<double>(c) / static_cast<double>(total);
    entropy -= p * std::log(p);
  }
  return std::exp(entropy);
}

TemporalConsistency temporal_consistency(const Tensor& video) {
  require_video(video, "temporal consistency");
  require_that(video.shape[0] >= 2, "temporal consistency: needs at least 2 frames, got " +
                                        std::to_string(video.shape[0]));
  const int64_t n = frame_elems(video);
  TemporalConsistency out;
  double sum = 0.0;
  int64_t pairs = 0;
  for (int64_t t = 0; t + 1 < video.shape[0]; ++t) {
    const double* f0 = video.data.data() + t * n;
    const double* f1 = f0 + n;
    double dot = 0.0, n0 = 0.0, n1 = 0.0;
    for (int64_t i = 0; i < n; ++i) {
      dot += f0[i] * f1[i];
      n0 += f0[i] * f0[i];
      n1 += f1[i] * f1[i];
    }
    if (n0 == 0.0 || n1 == 0.0) {
      ++out.skipped_pairs; // no defined angle against an all-zero frame
      continue;
    }
    sum += dot / std::sqrt(n0 * n1);
    ++pairs;
  }
  out.value = pairs > 0 ? sum / static_cast<double>(pairs) : 0.0;
  return out;
}

double dynamic_degree(const Tensor& video) {
  require_video(video, "dynamic degree");
  require_that(video.shape[0] >= 2,
               "dynamic degree: needs at least 2 frames, got " + std::to_string(video.shape[0]));
  const int64_t n = frame_elems(video);
  double sum = 0.0;
  for (int64_t t = 0; t + 1 < video.shape[0]; ++t) {
    const double* f0 = video.data.data() + t * n;
    const double* f1 = f0 + n;
    for (int64_t i = 0; i < n; ++i) sum += std::abs(f1[i] - f0[i]);
  }
  return sum / static_cast<double>((video.shape[0] - 1) * n);
}

Tensor luminance(const Tensor& video) {
  require_video(video, "luminance");
  const int64_t t = video.shape[0], h = video.shape[1], w = video.shape[2], c = video.shape[3];
  Tensor out({t, h, w});
  for (int64_t i = 0; i < t * h * w; ++i) {
    double s = 0.0;
    for (int64_t k = 0; k < c; ++k) s += video.data[i * c + k];
    out.data[i] = s / static_cast<double>(c);
  }
  return out;
}

Tensor foreground_mask(const Tensor& video, double threshold) {
  require_that(threshold > 0.0, "foreground mask: threshold must be positive");
  Tensor lum = luminance(video);
  const int64_t t = lum.shape[0], hw = lum.shape[1] * lum.shape[2];
  Tensor mask(lum.shape);
  std::vector<double> scratch(static_cast<size_t>(hw));
  for (int64_t f = 0; f < t; ++f) {
    const double* frame = lum.data.data() + f * hw;
    std::copy(frame, frame + hw, scratch.begin());
    auto mid = scratch.begin() + hw / 2;
    std::nth_element(scratch.begin(), mid, scratch.end());
    const double background = *mid;
    double* m = mask.data.data() + f * hw;
    for (int64_t i = 0; i < hw; ++i)
      m[i] = std::abs(frame[i] - background) > threshold ? 1.0 : 0.0;
  }
  return mask;
}

LayoutIou layout_iou(const Tensor& coarse_decode, const Tensor& generated, double threshold) {
  require_that(coarse_decode.shape == generated.shape,
               "layout iou: shape mismatch " + coarse_decode.shape_str() + " vs " +
                   generated.shape_str());
  Tensor ma = foreground_mask(coarse_decode, threshold);
  Tensor mb = foreground_mask(generated, threshold);
  const int64_t t = ma.shape[0], hw = ma.shape[1] * ma.shape[2];
  double sum = 0.0;
  int64_t scored = 0;
  for (int64_t f = 0; f < t; ++f) {
    const double* a = ma.data.data() + f * hw;
    const double* b = mb.data.data() + f * hw;
    int64_t inter = 0, uni = 0;
    for (int64_t i = 0; i < hw; ++i) {
      const bool fa = a[i] != 0.0, fb = b[i] != 0.0;
      inter += fa && fb;
      uni += fa || fb;
    }
    if (uni == 0) continue; // both masks empty: no layout signal in this frame
    sum += static_cast<double>(inter) / static_cast<double>(uni);
    ++scored;
  }
  LayoutIou out;
  if (scored == 0) {
    out.empty_masks = true;
    return out;
  }
  out.value = sum / static_cast<double>(scored);
  return out;
}

double calibrate_layout_threshold(const std::vector<Tensor>& videos,
                                  const std::vector<Tensor>& mask_videos,
                                  const std::vector<double>& thresholds) {
  require_that(!videos.empty() && videos.size() == mask_videos.size(),
               "calibrate: need matching non-empty video and mask lists");
  require_that(!thresholds.empty(), "calibrate: no candidate thresholds");
  double best_score = -1.0, best_threshold = thresholds.front();
  for (double th : thresholds) {
    double sum = 0.0;
    int64_t scored = 0;
    for (size_t v = 0; v < videos.size(); ++v) {
      const Tensor& truth = mask_videos[v];
      require_that(truth.rank() == 3 && truth.shape[0] == videos[v].shape[0] &&
                       truth.shape[1] == videos[v].shape[1] &&
                       truth.shape[2] == videos[v].shape[2],
                   "calibrate: mask video must be (T,H,W) matching its video, got " +
                       truth.shape_str() + " vs " + videos[v].shape_str());
      Tensor got = foreground_mask(videos[v], th);
      const int64_t t = got.shape[0], hw = got.shape[1] * got.shape[2];
      for (int64_t f = 0; f < t; ++f) {
        const double* a = got.data.data() + f * hw;
        const double* b = truth.data.data() + f * hw;
        int64_t inter = 0, uni = 0;
        for (int64_t i = 0; i < hw; ++i) {
          const bool fa = a[i] != 0.0, fb = b[i] != 0.0;
          inter += fa && fb;
          uni += fa || fb;
        }
        if (uni == 0) continue;
        sum += static_cast<double>(inter) / static_cast<double>(uni);
        ++scored;
      }
    }
    const double score = scored > 0 ? sum / static_cast<double>(scored) : 0.0;
    if (score > best_score) {
      best_score = score;
      best_threshold = th;
    }
  }
  return best_threshold;
}

std::string SweepCurve::to_tsv() const {
  std::ostringstream out;
  out << "steps\tinjected\ttemporal_consistency\tlayout_iou\tdynamic_degree\n";
  for (const auto& p : points) {
    out << p.steps << '\t' << (p.injected ? 1 : 0) << '\t' << p.temporal_consistency << '\t'
        << p.layout_iou << '\t' << p.dynamic_degree << '\n';
  }
  return out.str();
}

namespace {

struct Panel {
  const char* title;
  double lo, hi;
  double SweepPoint::* field;
};

} // namespace

std::string SweepCurve::to_svg() const {
  // Three fixed panels (one per metric), two polylines each: solid for the
  // injected condition, dashed for the baseline.
  const Panel panels[] = {
      {"temporal_consistency", 0.0, 1.0, &SweepPoint::temporal_consistency},
      {"layout_iou", 0.0, 1.0, &SweepPoint::layout_iou},
      {"dynamic_degree", 0.0, 0.0, &SweepPoint::dynamic_degree}, // hi picked from data
  };
  const int pw = 280, ph = 220, pad = 46, gap = 24;
  const int width = 3 * pw + 2 * gap + 20, height = ph + 60;

  std::vector<int> steps;
  for (const auto& p : points)
    if (std::find(steps.begin(), steps.end(), p.steps) == steps.end()) steps.push_back(p.steps);
  std::sort(steps.begin(), steps.end());
  const double xmin = steps.empty() ? 0.0 : steps.front();
  const double xmax = steps.empty() ? 1.0 : steps.back();
  const double xspan = xmax > xmin ? xmax - xmin : 1.0;

  std::ostringstream svg;
  svg << "<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"" << width << "\" height=\""
      << height << "\" font-family=\"sans-serif\" font-size=\"11\">\n"
      << "<rect width=\"100%\" height=\"100%\" fill=\"white\"/>\n";
  for (int pi = 0; pi < 3; ++pi) {
    const Panel& panel = panels[pi];
    double lo = panel.lo, hi = panel.hi;
    if (hi <= lo) { // data-driven axis for the unbounded metric
      hi = 1e-6;
      for (const auto& p : points) hi = std::max(hi, p.*panel.field * 1.1);
      lo = 0.0;
    }
    const int x0 = 10 + pi * (pw + gap) + pad, y0 = 16, x1 = 10 + (pi + 1) * pw + pi * gap,
              y1 = ph;
    auto sx = [&](double v) { return x0 + (v - xmin) / xspan * (x1 - x0); };
    auto sy = [&](double v) { return y1 - (v - lo) / (hi - lo) * (y1 - y0); };
    svg << "<rect x=\"" << x0 << "\" y=\"" << y0 << "\" width=\"" << x1 - x0 << "\" height=\""
        << y1 - y0 << "\" fill=\"none\" stroke=\"#888\"/>\n"
        << "<text x=\"" << (x0 + x1) / 2 << "\" y=\"12\" text-anchor=\"middle\">" << panel.title
        << "</text>\n"
        << "<text x=\"" << (x0 + x1) / 2 << "\" y=\"" << ph + 34
        << "\" text-anchor=\"middle\">denoising steps</text>\n"
        << "<text x=\"" << x0 - 4 << "\" y=\"" << y1 << "\" text-anchor=\"end\">" << lo
        << "</text>\n"
        << "<text x=\"" << x0 - 4 << "\" y=\"" << y0 + 8 << "\" text-anchor=\"end\">" << hi
        << "</text>\n";
    for (int s : steps)
      svg << "<text x=\"" << sx(s) << "\" y=\"" << ph + 16 << "\" text-anchor=\"middle\">" << s
          << "</text>\n";
    for (int injected = 1; injected >= 0; --injected) {
      std::ostringstream pts;
      for (int s : steps)
        for (const auto& p : points)
          if (p.steps == s && p.injected == (injected != 0))
            pts << sx(s) << ',' << sy(p.*panel.field) << ' ';
      svg << "<polyline fill=\"none\" stroke=\"" << (injected ? "#1f6fb2" : "#c05a2e")
          << "\" stroke-width=\"1.6\"" << (injected ? "" : " stroke-dasharray=\"5,4\"")
          << " points=\"" << pts.str() << "\"/>\n";
    }
  }
  svg << "<text x=\"10\" y=\"" << height - 6
      << "\">solid: with injection &#8212; dashed: without</text>\n</svg>\n";
  return svg.str();
}

void SweepCurve::write(const std::string& base_path) const {
  {
    std::ofstream tsv(base_path + ".tsv");
    require_that(tsv.good(), "sweep: cannot open " + base_path + ".tsv for writing");
    tsv << to_tsv();
  }
  std::ofstream svg(base_path + ".svg");
  require_that(svg.good(), "sweep: cannot open " + base_path + ".svg for writing");
  svg << to_svg();
}

SweepCurve steps_sweep(const std::vector<std::string>& prompts,
                       const std::vector<uint64_t>& seeds,
                       const std::vector<int>& step_counts, const SweepGenerator& generate,
                       double layout_threshold) {
  require_that(!prompts.empty() && prompts.size() == seeds.size(),
               "sweep: prompts and seeds must be parallel non-empty vectors");
  require_that(!step_counts.empty(), "sweep: no step counts");
  require_that(static_cast<bool>(generate), "sweep: missing generator");
  SweepCurve curve;
  for (int steps : step_counts) {
    require_that(steps >= 1, "sweep: step count must be >= 1");
    for (bool injected : {true, false}) {
      SweepPoint point;
      point.steps = steps;
      point.injected = injected;
      for (size_t i = 0; i < prompts.size(); ++i) {
        SweepSample sample = generate(prompts[i], seeds[i], steps, injected);
        point.temporal_consistency += temporal_consistency(sample.video).value;
        point.layout_iou += layout_iou(sample.reference, sample.video, layout_threshold).value;
        point.dynamic_degree += dynamic_degree(sample.video);
      }
      const double n = static_cast<double>(prompts.size());
      point.temporal_consistency /= n;
      point.layout_iou /= n;
      point.dynamic_degree /= n;
      curve.points.push_back(point);
    }
  }
  return curve;
}

void MetricReport::set(const std::string& name, double value) {
  require_that(std::isfinite(value), "metric report: non-finite value for '" + name + "'");
  metrics[name] = value;
}

std::string MetricReport::to_json() const {
  json j;
  j["metrics"] = metrics;
  j["config_hash"] = config_hash;
  j["seeds"] = seeds;
  j["stage_seconds"] = stage_seconds;
  return j.dump(2);
}

MetricReport MetricReport::from_json(const std::string& text) {
  json j = json::parse(text);
  MetricReport r;
  r.metrics = j.at("metrics").get<std::map<std::string, double>>();
  r.config_hash = j.at("config_hash").get<std::string>();
  r.seeds = j.at("seeds").get<std::vector<uint64_t>>();
  r.stage_seconds = j.at("stage_seconds").get<std::map<std::string, double>>();
  for (const auto& [name, value] : r.metrics)
    require_that(std::isfinite(value), "metric report: non-finite value for '" + name + "'");
  return r;
}

} // namespace arlon::eval
