#include "arlon/pipeline.hpp"

#include <algorithm>
#include <chrono>
#include <cstdio>
#include <filesystem>
#include <map>
#include <memory>
#include <numeric>

#include <json.hpp>

#include "arlon/errors.hpp"
#include "arlon/io.hpp"

using nlohmann::json;

namespace arlon::pipe {

// ---------------------------------------------------------------- configs

namespace {

json render_to_json(const data::RenderConfig& c) {
  return {{"frames", c.frames},
          {"height", c.height},
          {"width", c.width},
          {"shape_size", c.shape_size},
          {"margin", c.margin}};
}

data::RenderConfig render_from_json(const json& j) {
  data::RenderConfig c;
  c.frames = j.at("frames").get<int>();
  c.height = j.at("height").get<int>();
  c.width = j.at("width").get<int>();
  c.shape_size = j.at("shape_size").get<int>();
  c.margin = j.at("margin").get<int>();
  return c;
}

json corpus_to_json(const data::CorpusConfig& c) {
  return {{"render", render_to_json(c.render)},
          {"per_motion", c.per_motion},
          {"holdout_fraction", c.holdout_fraction},
          {"moving_speed", c.moving_speed},
          {"master_seed", c.master_seed}};
}

data::CorpusConfig corpus_from_json(const json& j) {
  data::CorpusConfig c;
  c.render = render_from_json(j.at("render"));
  c.per_motion = j.at("per_motion").get<int>();
  c.holdout_fraction = j.at("holdout_fraction").get<double>();
  c.moving_speed = j.at("moving_speed").get<int>();
  c.master_seed = j.at("master_seed").get<uint64_t>();
  return c;
}

bool corpus_config_equal(const data::CorpusConfig& a, const data::CorpusConfig& b) {
  return corpus_to_json(a) == corpus_to_json(b);
}

json text_to_json(const data::TextConfig& c) {
  return {{"max_tokens", c.max_tokens}, {"dim", c.dim}};
}

data::TextConfig text_from_json(const json& j) {
  data::TextConfig c;
  c.max_tokens = j.at("max_tokens").get<int64_t>();
  c.dim = j.at("dim").get<int64_t>();
  return c;
}

} // namespace

std::string TrainSchedule::to_json() const {
  json j{{"vae_steps", vae_steps},     {"vae_lr", vae_lr},
         {"vae_batch", vae_batch},     {"vae_clip_frames", vae_clip_frames},
         {"vq_steps", vq_steps},       {"vq_lr", vq_lr},
         {"vq_batch", vq_batch},       {"ar_steps", ar_steps},
         {"ar_lr", ar_lr},             {"ar_batch", ar_batch},
         {"dit_steps", dit_steps},     {"dit_lr", dit_lr},
         {"inject_steps", inject_steps}, {"inject_lr", inject_lr}};
  return j.dump();
}

TrainSchedule TrainSchedule::from_json(const std::string& text) {
  json j = json::parse(text);
  TrainSchedule s;
  s.vae_steps = j.at("vae_steps").get<int64_t>();
  s.vae_lr = j.at("vae_lr").get<double>();
  s.vae_batch = j.at("vae_batch").get<int64_t>();
  s.vae_clip_frames = j.at("vae_clip_frames").get<int64_t>();
  s.vq_steps = j.at("vq_steps").get<int64_t>();
  s.vq_lr = j.at("vq_lr").get<double>();
  s.vq_batch = j.at("vq_batch").get<int64_t>();
  s.ar_steps = j.at("ar_steps").get<int64_t>();
  s.ar_lr = j.at("ar_lr").get<double>();
  s.ar_batch = j.at("ar_batch").get<int64_t>();
  s.dit_steps = j.at("dit_steps").get<int64_t>();
  s.dit_lr = j.at("dit_lr").get<double>();
  s.inject_steps = j.at("inject_steps").get<int64_t>();
  s.inject_lr = j.at("inject_lr").get<double>();
  return s;
}

void TrainSchedule::validate() const {
  require_that(vae_steps > 0 && vq_steps > 0 && ar_steps > 0 && dit_steps > 0 &&
                   inject_steps > 0,
               "schedule: every stage needs a positive step count");
  require_that(vae_lr > 0 && vq_lr > 0 && ar_lr > 0 && dit_lr > 0 && inject_lr > 0,
               "schedule: every stage needs a positive learning rate");
  require_that(vae_batch > 0 && vq_batch > 0 && ar_batch > 0,
               "schedule: batch sizes must be positive");
  require_that(vae_clip_frames >= 2, "schedule: autoencoder clips need at least 2 frames");
}

std::string RunConfig::to_json() const {
  json j;
  j["data_root"] = data_root;
  j["run_dir"] = run_dir;
  j["corpus"] = corpus_to_json(corpus);
  j["text"] = text_to_json(text);
  j["vae"] = json::parse(vae.to_json());
  j["vq_fine"] = json::parse(vq_fine.to_json());
  j["vq_coarse"] = json::parse(vq_coarse.to_json());
  j["ar"] = json::parse(ar.to_json());
  j["dit"] = json::parse(dit.to_json());
  j["injection"] = json::parse(injection.to_json());
  j["train"] = json::parse(train.to_json());
  j["seg_frames"] = seg_frames;
  j["overlap"] = overlap;
  j["denoise_steps"] = denoise_steps;
  j["ar_temperature"] = ar_temperature;
  j["ar_top_k"] = ar_top_k;
  j["master_seed"] = master_seed;
  return j.dump(2);
}

RunConfig RunConfig::from_json(const std::string& text_in) {
  json j = json::parse(text_in);
  RunConfig c;
  c.data_root = j.at("data_root").get<std::string>();
  c.run_dir = j.at("run_dir").get<std::string>();
  c.corpus = corpus_from_json(j.at("corpus"));
  c.text = text_from_json(j.at("text"));
  c.vae = vae::VideoVaeConfig::from_json(j.at("vae").dump());
  c.vq_fine = vq::VqVaeConfig::from_json(j.at("vq_fine").dump());
  c.vq_coarse = vq::VqVaeConfig::from_json(j.at("vq_coarse").dump());
  c.ar = ar::ARConfig::from_json(j.at("ar").dump());
  c.dit = dit::DiTConfig::from_json(j.at("dit").dump());
  c.injection = inject::InjectionConfig::from_json(j.at("injection").dump());
  c.train = TrainSchedule::from_json(j.at("train").dump());
  c.seg_frames = j.at("seg_frames").get<int64_t>();
  c.overlap = j.at("overlap").get<int64_t>();
  c.denoise_steps = j.at("denoise_steps").get<int>();
  c.ar_temperature = j.at("ar_temperature").get<double>();
  c.ar_top_k = j.at("ar_top_k").get<int64_t>();
  c.master_seed = j.at("master_seed").get<uint64_t>();
  return c;
}

void RunConfig::validate() const {
  require_that(!data_root.empty() && !run_dir.empty(),
               "run config: data_root and run_dir must be set");
  vae.validate();
  vq_fine.validate();
  vq_coarse.validate();
  ar.validate();
  dit.validate();
  injection.validate(dit.depth);
  train.validate();

  const auto& r = corpus.render;
  require_that(r.frames % vae.temporal_stride == 0 && r.height % vae.spatial_stride == 0 &&
                   r.width % vae.spatial_stride == 0,
               "run config: video shape must divide the autoencoder strides");
  const int64_t lt = r.frames / vae.temporal_stride;
  const int64_t lh = r.height / vae.spatial_stride;
  const int64_t lw = r.width / vae.spatial_stride;

  for (const auto* q : {&vq_fine, &vq_coarse}) {
    require_that(q->input_channels == vae.latent_channels,
                 "run config: quantizer input channels must match the latent width");
    require_that(lt % q->compression[0] == 0 && lh % q->compression[1] == 0 &&
                     lw % q->compression[2] == 0,
                 "run config: latent grid must divide the quantizer compression");
  }
  require_that(ar.codebook_size == vq_fine.codebook_size,
               "run config: sequence-model vocabulary must match the fine codebook");
  require_that(ar.compression == vq_fine.compression,
               "run config: sequence-model compression must match the fine quantizer");
  require_that(ar.frame_h == lh / vq_fine.compression[1] &&
                   ar.frame_w == lw / vq_fine.compression[2],
               "run config: sequence-model frame grid must match the fine code grid");
  require_that((ar.max_seq - 2) / (ar.frame_tokens() + 1) >= 2,
               "run config: the position table must fit at least two code frames per window");
  require_that(ar.text_dim == text.dim && dit.text_dim == text.dim,
               "run config: text embedding width must agree across stages");
  require_that(dit.latent_channels == vae.latent_channels,
               "run config: diffusion latent channels must match the autoencoder");
  require_that(injection.cond_channels == vae.latent_channels,
               "run config: injection condition channels must match the latent width");
  require_that(train.vae_clip_frames % vae.temporal_stride == 0,
               "run config: autoencoder training clips must divide the temporal stride");
  require_that(overlap > 0 && overlap < seg_frames,
               "run config: overlap must satisfy 0 < overlap < seg_frames");
  require_that(denoise_steps >= 1 && denoise_steps <= dit.t_diff,
               "run config: denoise steps must lie in [1, t_diff]");
  require_that(ar_temperature >= 0.0 && ar_top_k >= 0,
               "run config: sampling knobs must be non-negative");
}

std::string RunConfig::config_hash() const {
  const std::string s = to_json();
  return io::hex64(io::fnv1a64(s.data(), s.size()));
}

// ---------------------------------------------------------------- planning

namespace {

void append_region_segments(GenerationPlan& plan, int region_index) {
  const PromptRegion& region = plan.regions[static_cast<size_t>(region_index)];
  const int64_t seg = plan.seg_frames, overlap = plan.overlap;
  int64_t begin = region_index == 0 ? 0 : region.begin - overlap;
  while (true) {
    SegmentPlan s;
    s.index = static_cast<int>(plan.segments.size());
    s.begin = begin;
    s.end = std::min(begin + seg, region.end);
    s.keep_begin = begin == 0 ? 0 : begin + overlap;
    if (begin > 0) {
      s.cond_begin = begin;
      s.cond_end = begin + overlap;
    }
    s.code_begin = s.begin; // latent-frame granularity until a stride is assigned
    s.code_end = s.end;
    s.prompt_index = region_index;
    if (s.end < begin + seg) plan.truncated_tail = true;
    plan.segments.push_back(s);
    if (s.end >= region.end) break;
    begin += seg - overlap;
  }
}

} // namespace

GenerationPlan plan_regions(const std::vector<PromptRegion>& regions_in, int64_t seg_frames,
                            int64_t overlap) {
  require_that(!regions_in.empty(), "plan: no prompt regions");
  require_that(overlap >= 1, "plan: overlap must be at least 1");
  require_that(overlap < seg_frames,
               "plan: overlap " + std::to_string(overlap) + " must be smaller than the segment "
                   "length " + std::to_string(seg_frames));

  GenerationPlan plan;
  plan.seg_frames = seg_frames;
  plan.overlap = overlap;

  // An unchanged prompt is no boundary: merge adjacent identical prompts so
  // identical-prompt progressive generation degenerates to the single-prompt
  // plan (and the single-prompt chain).
  for (const auto& r : regions_in) {
    require_that(r.end > r.begin, "plan: empty prompt region");
    const int64_t expected = plan.regions.empty() ? 0 : plan.regions.back().end;
    require_that(r.begin == expected, "plan: prompt regions must be contiguous from frame 0");
    if (!plan.regions.empty() && plan.regions.back().prompt == r.prompt)
      plan.regions.back().end = r.end;
    else
      plan.regions.push_back(r);
  }
  plan.total_frames = plan.regions.back().end;
  require_that(plan.regions.front().end >= std::min(seg_frames, plan.total_frames),
               "plan: the first prompt region is shorter than one segment");
  for (size_t i = 1; i < plan.regions.size(); ++i)
    require_that(plan.regions[i].end - plan.regions[i].begin > overlap,
                 "plan: prompt region " + std::to_string(i) +
                     " must be longer than the overlap");

  for (int r = 0; r < static_cast<int>(plan.regions.size()); ++r)
    append_region_segments(plan, r);
  return plan;
}

GenerationPlan plan_segments(int64_t total_frames, int64_t seg_frames, int64_t overlap,
                             bool allow_truncate) {
  require_that(overlap < seg_frames,
               "plan: overlap " + std::to_string(overlap) +
                   " must be smaller than the segment length " + std::to_string(seg_frames));
  require_that(total_frames >= seg_frames,
               "plan: total " + std::to_string(total_frames) + " is shorter than one segment");
  const int64_t stride = seg_frames - overlap;
  if (!allow_truncate)
    require_that((total_frames - seg_frames) % stride == 0,
                 "plan: total " + std::to_string(total_frames) +
                     " does not tile with segment " + std::to_string(seg_frames) +
                     " and overlap " + std::to_string(overlap) +
                     " (enable tail truncation or adjust the horizon)");
  return plan_regions({{std::string(), 0, total_frames}}, seg_frames, overlap);
}

void GenerationPlan::assign_code_ranges(int64_t code_stride) {
  require_that(code_stride >= 1, "plan: code stride must be positive");
  require_that(total_frames % code_stride == 0,
               "plan: total frames must align with the code stride");
  for (const auto& r : regions)
    require_that(r.begin % code_stride == 0,
                 "plan: prompt region boundary at frame " + std::to_string(r.begin) +
                     " does not align with the code stride " + std::to_string(code_stride));
  for (auto& s : segments) {
    s.code_begin = s.begin / code_stride;
    s.code_end = (s.end + code_stride - 1) / code_stride;
  }
}

void GenerationPlan::validate(int64_t code_stride) const {
  require_that(total_frames > 0 && seg_frames > 0 && overlap > 0 && overlap < seg_frames,
               "plan: inconsistent geometry");
  require_that(!regions.empty() && !segments.empty(), "plan: empty plan");
  int64_t expected_region = 0;
  for (const auto& r : regions) {
    require_that(r.begin == expected_region && r.end > r.begin,
                 "plan: regions must tile the horizon");
    expected_region = r.end;
  }
  require_that(expected_region == total_frames, "plan: regions do not cover the horizon");

  int64_t expected = 0;
  for (const auto& s : segments) {
    require_that(s.keep_begin == expected,
                 "plan: segment " + std::to_string(s.index) + " breaks the kept-range tiling");
    require_that(s.end > s.keep_begin && s.begin <= s.keep_begin,
                 "plan: segment " + std::to_string(s.index) + " keeps nothing");
    if (s.index == 0) {
      require_that(s.begin == 0 && s.keep_begin == 0 && s.cond_begin == s.cond_end,
                   "plan: the first segment must start clean at frame 0");
    } else {
      require_that(s.cond_begin == s.begin && s.cond_end == s.begin + overlap &&
                       s.keep_begin == s.begin + overlap,
                   "plan: segment " + std::to_string(s.index) +
                       " must condition on exactly the overlap");
    }
    require_that(s.prompt_index >= 0 && s.prompt_index < static_cast<int>(regions.size()),
                 "plan: segment prompt index out of range");
    const auto& region = regions[static_cast<size_t>(s.prompt_index)];
    require_that(s.keep_begin >= region.begin && s.end <= region.end,
                 "plan: segment " + std::to_string(s.index) + " bleeds outside its region");
    require_that(s.code_begin == s.begin / code_stride &&
                     s.code_end == (s.end + code_stride - 1) / code_stride,
                 "plan: segment " + std::to_string(s.index) +
                     " code range disagrees with the stride");
    expected = s.end;
  }
  require_that(expected == total_frames, "plan: kept ranges do not reach the horizon");
  for (size_t i = 1; i < segments.size(); ++i)
    require_that(segments[i].code_begin <= segments[i - 1].code_end,
                 "plan: gap in the code-range tiling");
}

std::string GenerationPlan::to_json() const {
  json j;
  j["total_frames"] = total_frames;
  j["seg_frames"] = seg_frames;
  j["overlap"] = overlap;
  j["truncated_tail"] = truncated_tail;
  j["regions"] = json::array();
  for (const auto& r : regions)
    j["regions"].push_back({{"prompt", r.prompt}, {"begin", r.begin}, {"end", r.end}});
  j["segments"] = json::array();
  for (const auto& s : segments)
    j["segments"].push_back({{"index", s.index},
                             {"begin", s.begin},
                             {"end", s.end},
                             {"keep_begin", s.keep_begin},
                             {"cond", {s.cond_begin, s.cond_end}},
                             {"codes", {s.code_begin, s.code_end}},
                             {"prompt_index", s.prompt_index}});
  return j.dump(2);
}

// ---------------------------------------------------------------- artifacts

const std::vector<std::string>& stage_names() {
  static const std::vector<std::string> names = {"data",    "vae", "vq_fine", "vq_coarse",
                                                 "ar",      "dit", "injection"};
  return names;
}

namespace {

int stage_index(const std::string& stage) {
  const auto& names = stage_names();
  for (size_t i = 0; i < names.size(); ++i)
    if (names[i] == stage) return static_cast<int>(i);
  throw ValidationError("unknown stage '" + stage + "'");
}

uint64_t stage_seed(const RunConfig& cfg, const std::string& stage) {
  return derive_seed(cfg.master_seed, 0x5747 + static_cast<uint64_t>(stage_index(stage)));
}

std::string text_encoder_path(const RunConfig& cfg) {
  return cfg.run_dir + "/text_encoder.ckpt";
}

std::vector<std::string> stage_artifacts(const RunConfig& cfg, const std::string& stage) {
  if (stage == "data") return {cfg.data_root + "/manifest.json"};
  if (stage == "ar") return {checkpoint_path(cfg, "ar"), text_encoder_path(cfg)};
  return {checkpoint_path(cfg, stage)};
}

std::string format_metrics(const std::map<std::string, double>& metrics) {
  if (metrics.empty()) return "none";
  std::string out;
  for (const auto& [k, v] : metrics) {
    if (!out.empty()) out += ", ";
    out += k + "=" + std::to_string(v);
  }
  return out;
}

} // namespace

std::string checkpoint_path(const RunConfig& cfg, const std::string& stage) {
  if (stage == "data") return cfg.data_root + "/manifest.json";
  stage_index(stage); // validates the name
  return cfg.run_dir + "/" + stage + ".ckpt";
}

std::string manifest_path(const RunConfig& cfg, const std::string& stage) {
  stage_index(stage);
  return cfg.run_dir + "/" + stage + ".manifest.json";
}

// ------------------------------------------------------------- stage data

namespace {

struct VideoSet {
  data::Corpus corpus;
  std::vector<Tensor> train, holdout;
  std::vector<std::string> train_captions, holdout_captions;
};

struct LatentPack {
  std::vector<Tensor> train, holdout;
};

data::Corpus ensure_corpus(const RunConfig& cfg, bool* rebuilt) {
  const std::string manifest = cfg.data_root + "/manifest.json";
  if (io::file_exists(manifest)) {
    data::Corpus c = data::load_corpus(cfg.data_root);
    if (corpus_config_equal(c.cfg, cfg.corpus)) {
      if (rebuilt) *rebuilt = false;
      return c;
    }
  }
  if (rebuilt) *rebuilt = true;
  return data::build_corpus(cfg.data_root, cfg.corpus);
}

// Process-lifetime caches keyed by content hashes, so repeated stages (and
// the shared acceptance run) do not re-encode the corpus per stage.
std::shared_ptr<const VideoSet> corpus_videos(const RunConfig& cfg) {
  static std::map<std::string, std::shared_ptr<const VideoSet>> cache;
  const std::string manifest = cfg.data_root + "/manifest.json";
  require_that(io::file_exists(manifest),
               "stage data: corpus manifest missing at " + manifest + "; build the dataset first");
  const std::string key = cfg.data_root + "#" + io::hex64(io::fnv1a64_file(manifest));
  if (auto it = cache.find(key); it != cache.end()) return it->second;

  auto set = std::make_shared<VideoSet>();
  set->corpus = data::load_corpus(cfg.data_root);
  for (const auto& item : set->corpus.items) {
    Tensor video = data::load_video(set->corpus, item);
    if (item.split == "train") {
      set->train.push_back(std::move(video));
      set->train_captions.push_back(item.caption);
    } else {
      set->holdout.push_back(std::move(video));
      set->holdout_captions.push_back(item.caption);
    }
  }
  require_that(!set->train.empty() && !set->holdout.empty(),
               "stage data: corpus needs both train and holdout items");
  cache[key] = set;
  return set;
}

std::shared_ptr<const LatentPack> corpus_latents(const RunConfig& cfg,
                                                const vae::VideoVae& model) {
  static std::map<std::string, std::shared_ptr<const LatentPack>> cache;
  const std::string vae_ckpt = checkpoint_path(cfg, "vae");
  const std::string key = cfg.data_root + "#" +
                          io::hex64(io::fnv1a64_file(cfg.data_root + "/manifest.json")) + "#" +
                          io::hex64(io::fnv1a64_file(vae_ckpt));
  if (auto it = cache.find(key); it != cache.end()) return it->second;

  auto videos = corpus_videos(cfg);
  auto pack = std::make_shared<LatentPack>();
  for (const auto& v : videos->train) pack->train.push_back(model.encode(v));
  for (const auto& v : videos->holdout) pack->holdout.push_back(model.encode(v));
  cache[key] = pack;
  return pack;
}

vae::VideoVae require_vae(const RunConfig& cfg) {
  const std::string path = checkpoint_path(cfg, "vae");
  require_that(io::file_exists(path),
               "stage data: autoencoder checkpoint missing at " + path + "; run the vae stage");
  return vae::VideoVae::load(path);
}

void progress(const char* stage, int64_t step, int64_t total, double loss) {
  const int64_t every = std::max<int64_t>(1, total / 10);
  if (step % every == 0 || step == total)
    std::fprintf(stderr, "[%s] step %lld/%lld loss %.6f\n", stage,
                 static_cast<long long>(step), static_cast<long long>(total), loss);
}

// Mean of the most recent window of per-step losses.
struct LossWindow {
  std::vector<double> buf;
  size_t next = 0;
  explicit LossWindow(size_t n) : buf(), next(0) { buf.reserve(n); cap = n; }
  size_t cap;
  void push(double v) {
    if (buf.size() < cap) buf.push_back(v);
    else {
      buf[next] = v;
      next = (next + 1) % cap;
    }
  }
  double mean() const {
    if (buf.empty()) return 0.0;
    return std::accumulate(buf.begin(), buf.end(), 0.0) / static_cast<double>(buf.size());
  }
};

Tensor slice_frames(const Tensor& t, int64_t begin, int64_t end) {
  require_that(t.rank() >= 1 && begin >= 0 && end <= t.shape[0] && begin < end,
               "slice: frame range [" + std::to_string(begin) + ", " + std::to_string(end) +
                   ") outside " + t.shape_str());
  std::vector<int64_t> shape = t.shape;
  shape[0] = end - begin;
  Tensor out(shape);
  const int64_t row = t.numel() / t.shape[0];
  std::copy(t.data.begin() + begin * row, t.data.begin() + end * row, out.data.begin());
  return out;
}

void write_frames(Tensor& dst, int64_t begin, const Tensor& src) {
  const int64_t row = dst.numel() / dst.shape[0];
  require_that(src.numel() / src.shape[0] == row && begin + src.shape[0] <= dst.shape[0],
               "write: frame block does not fit the destination");
  std::copy(src.data.begin(), src.data.end(), dst.data.begin() + begin * row);
}

// ------------------------------------------------------------ stage bodies

using MetricsMap = std::map<std::string, double>;

void train_vae_stage(const RunConfig& cfg, MetricsMap& metrics) {
  auto videos = corpus_videos(cfg);
  const TrainSchedule& s = cfg.train;
  Rng rng(stage_seed(cfg, "vae"));
  vae::VideoVae model = vae::VideoVae::create(cfg.vae, rng);
  nn::AdamConfig ac;
  ac.lr = s.vae_lr;
  nn::Adam opt(model.params().ptrs(), ac);

  const int64_t n = s.vae_steps;
  const int64_t drop1 = n * 62 / 100, drop2 = n * 81 / 100;
  const int64_t frames = videos->train.front().shape[0];
  const int64_t clip = std::min(s.vae_clip_frames, frames);
  LossWindow window(50);
  for (int64_t step = 1; step <= n; ++step) {
    if (step == drop1 + 1) opt.set_lr(s.vae_lr * 0.3);
    if (step == drop2 + 1) opt.set_lr(s.vae_lr * 0.1);
    std::vector<Tensor> clips;
    std::vector<const Tensor*> batch;
    for (int64_t b = 0; b < s.vae_batch; ++b) {
      const auto& video = videos->train[static_cast<size_t>(
          rng.randint(0, static_cast<int64_t>(videos->train.size())))];
      const int64_t t0 = rng.randint(0, video.shape[0] - clip + 1);
      clips.push_back(slice_frames(video, t0, t0 + clip));
    }
    for (const auto& c : clips) batch.push_back(&c);
    const double loss = model.train_step(batch, opt, rng);
    window.push(loss);
    metrics["final_loss"] = window.mean();
    progress("vae", step, n, loss);
  }

  double psnr_sum = 0.0;
  for (const auto& v : videos->holdout) psnr_sum += eval::psnr(v, model.decode(model.encode(v)));
  metrics["holdout_psnr"] = psnr_sum / static_cast<double>(videos->holdout.size());
  metrics["steps"] = static_cast<double>(n);
  model.save(checkpoint_path(cfg, "vae"));
}

void train_vq_stage(const RunConfig& cfg, bool fine, MetricsMap& metrics) {
  const std::string stage = fine ? "vq_fine" : "vq_coarse";
  vae::VideoVae outer = require_vae(cfg);
  auto videos = corpus_videos(cfg);
  auto latents = corpus_latents(cfg, outer);
  const TrainSchedule& s = cfg.train;
  Rng rng(stage_seed(cfg, stage));
  vq::VqVae model = vq::VqVae::create(fine ? cfg.vq_fine : cfg.vq_coarse, rng);
  nn::AdamConfig ac;
  ac.lr = s.vq_lr;
  nn::Adam opt(model.params().ptrs(), ac);

  std::vector<const Tensor*> all;
  for (const auto& z : latents->train) all.push_back(&z);

  LossWindow window(50);
  for (int64_t step = 1; step <= s.vq_steps; ++step) {
    std::vector<const Tensor*> batch;
    for (int64_t b = 0; b < s.vq_batch; ++b)
      batch.push_back(all[static_cast<size_t>(rng.randint(0, static_cast<int64_t>(all.size())))]);
    const vq::VqLosses losses = model.train_step(batch, opt);
    window.push(losses.total);
    metrics["final_loss"] = window.mean();
    metrics["reconstruction"] = losses.reconstruction;
    // Early dead-code revival keeps the book healthy while assignments churn.
    if (step % 50 == 0 && step * 2 <= s.vq_steps) model.revive_dead_entries(all, rng);
    progress(stage.c_str(), step, s.vq_steps, losses.total);
  }

  model.codebook.reset_usage();
  for (const auto* z : all) model.tokenize_latent(*z);
  metrics["perplexity"] = eval::codebook_perplexity(model.codebook.usage_counts);

  double psnr_sum = 0.0;
  for (size_t i = 0; i < latents->holdout.size(); ++i) {
    const Tensor recon_latent = model.decode_indices(model.tokenize_latent(latents->holdout[i]));
    psnr_sum += eval::psnr(videos->holdout[i], outer.decode(recon_latent));
  }
  metrics["vq_path_psnr"] = psnr_sum / static_cast<double>(latents->holdout.size());
  metrics["steps"] = static_cast<double>(s.vq_steps);
  model.save(checkpoint_path(cfg, stage));
}

void train_ar_stage(const RunConfig& cfg, MetricsMap& metrics) {
  vae::VideoVae outer = require_vae(cfg);
  const std::string fine_path = checkpoint_path(cfg, "vq_fine");
  require_that(io::file_exists(fine_path),
               "stage data: fine quantizer checkpoint missing at " + fine_path);
  vq::VqVae quant = vq::VqVae::load(fine_path);
  auto videos = corpus_videos(cfg);
  auto latents = corpus_latents(cfg, outer);

  std::vector<ar::TokenSequence> sequences;
  for (const auto& z : latents->train)
    sequences.push_back(ar::flatten_grid(quant.tokenize_latent(z), cfg.ar));

  const TrainSchedule& s = cfg.train;
  Rng rng(stage_seed(cfg, "ar"));
  data::TextEncoder text_enc = data::TextEncoder::create(cfg.text, rng);
  ar::ARModel model = ar::ARModel::create(cfg.ar, rng);
  nn::ParamRegistry joint;
  model.reg(joint);
  text_enc.reg(joint, "text");
  nn::AdamConfig ac;
  ac.lr = s.ar_lr;
  nn::Adam opt(joint.ptrs(), ac);

  LossWindow window(50);
  for (int64_t step = 1; step <= s.ar_steps; ++step) {
    std::vector<std::pair<const ar::TokenSequence*, std::string>> batch;
    for (int64_t b = 0; b < s.ar_batch; ++b) {
      const auto i = static_cast<size_t>(rng.randint(0, static_cast<int64_t>(sequences.size())));
      batch.emplace_back(&sequences[i], videos->train_captions[i]);
    }
    const double loss = model.train_step(batch, text_enc, opt, rng);
    window.push(loss);
    metrics["final_loss"] = window.mean();
    progress("ar", step, s.ar_steps, loss);
  }
  metrics["steps"] = static_cast<double>(s.ar_steps);
  model.save(checkpoint_path(cfg, "ar"));
  save_text_encoder(text_encoder_path(cfg), text_enc);
}

void train_dit_stage(const RunConfig& cfg, MetricsMap& metrics) {
  vae::VideoVae outer = require_vae(cfg);
  require_that(io::file_exists(text_encoder_path(cfg)),
               "stage data: text encoder checkpoint missing at " + text_encoder_path(cfg));
  data::TextEncoder text_enc = load_text_encoder(text_encoder_path(cfg));
  auto videos = corpus_videos(cfg);
  auto latents = corpus_latents(cfg, outer);

  std::vector<Tensor> text_cache;
  for (const auto& caption : videos->train_captions)
    text_cache.push_back(text_enc.encode_const(caption));

  const TrainSchedule& s = cfg.train;
  Rng rng(stage_seed(cfg, "dit"));
  dit::DiT model = dit::DiT::create(cfg.dit, rng);
  nn::AdamConfig ac;
  ac.lr = s.dit_lr;
  nn::Adam opt(model.params().ptrs(), ac);

  LossWindow window(100);
  for (int64_t step = 1; step <= s.dit_steps; ++step) {
    const auto i = static_cast<size_t>(rng.randint(0, static_cast<int64_t>(latents->train.size())));
    const Tensor& z0 = latents->train[i];
    const dit::FrameMask mask = dit::sample_train_mask(z0.shape[0], rng);
    opt.zero_grad();
    ag::NodePtr loss = model.diffusion_loss(z0, ag::constant(text_cache[i]), mask, rng);
    const double value = loss->val.data[0];
    if (!std::isfinite(value))
      throw StageError("dit: non-finite loss at step " + std::to_string(step));
    ag::backward(loss);
    opt.step();
    window.push(value);
    metrics["final_loss"] = window.mean();
    progress("dit", step, s.dit_steps, value);
  }
  metrics["steps"] = static_cast<double>(s.dit_steps);
  model.save(checkpoint_path(cfg, "dit"));
}

uint64_t params_hash(const nn::ParamRegistry& reg) {
  uint64_t h = 14695981039346656037ull;
  for (const auto& [name, p] : reg.items) {
    const uint64_t hn = io::fnv1a64(name.data(), name.size());
    const uint64_t hv = io::fnv1a64(p->val.data.data(), p->val.data.size() * sizeof(double));
    h ^= hn + 0x9e3779b97f4a7c15ull + (h << 6) + (h >> 2);
    h ^= hv + 0x9e3779b97f4a7c15ull + (h << 6) + (h >> 2);
  }
  return h;
}

void train_injection_stage(const RunConfig& cfg, MetricsMap& metrics) {
  vae::VideoVae outer = require_vae(cfg);
  const std::string dit_path = checkpoint_path(cfg, "dit");
  require_that(io::file_exists(dit_path),
               "stage data: diffusion checkpoint missing at " + dit_path);
  dit::DiT model = dit::DiT::load(dit_path);
  const std::string coarse_path = checkpoint_path(cfg, "vq_coarse");
  require_that(io::file_exists(coarse_path),
               "stage data: coarse quantizer checkpoint missing at " + coarse_path);
  vq::VqVae coarse = vq::VqVae::load(coarse_path);
  data::TextEncoder text_enc = load_text_encoder(text_encoder_path(cfg));
  auto videos = corpus_videos(cfg);
  auto latents = corpus_latents(cfg, outer);

  // Precompute the per-item condition: the coarse quantizer's reconstruction
  // of each training latent (the coarser-token strategy at train time).
  std::vector<Tensor> conditions, text_cache;
  for (const auto& z : latents->train)
    conditions.push_back(coarse.decode_indices(coarse.tokenize_latent(z)));
  for (const auto& caption : videos->train_captions)
    text_cache.push_back(text_enc.encode_const(caption));

  const TrainSchedule& s = cfg.train;
  Rng rng(stage_seed(cfg, "injection"));
  inject::Injector injector = inject::Injector::create(cfg.injection, cfg.dit, rng);

  nn::ParamRegistry backbone = model.params();
  const uint64_t backbone_before = params_hash(backbone);
  std::vector<ag::NodePtr> all = backbone.ptrs();
  for (const auto& p : injector.params().ptrs()) all.push_back(p);
  nn::AdamConfig ac;
  ac.lr = s.inject_lr;
  nn::Adam opt(injector.params().ptrs(), ac);

  LossWindow window(100);
  for (int64_t step = 1; step <= s.inject_steps; ++step) {
    const auto i = static_cast<size_t>(rng.randint(0, static_cast<int64_t>(latents->train.size())));
    const Tensor& z0 = latents->train[i];
    const dit::FrameMask mask = dit::sample_train_mask(z0.shape[0], rng);
    const dit::BlockHook hook = injector.make_hook(conditions[i], /*train=*/true, &rng);
    ag::zero_grad(all); // gradients reach frozen backbone params; clear them too
    ag::NodePtr loss = model.diffusion_loss(z0, ag::constant(text_cache[i]), mask, rng, hook);
    const double value = loss->val.data[0];
    if (!std::isfinite(value))
      throw StageError("injection: non-finite loss at step " + std::to_string(step));
    ag::backward(loss);
    opt.step();
    window.push(value);
    metrics["final_loss"] = window.mean();
    progress("injection", step, s.inject_steps, value);
  }

  if (params_hash(backbone) != backbone_before)
    throw StageError("injection: backbone parameters drifted during adapter training");
  metrics["backbone_frozen"] = 1.0;
  metrics["steps"] = static_cast<double>(s.inject_steps);
  injector.save(checkpoint_path(cfg, "injection"));
}

void run_stage_body(const RunConfig& cfg, const std::string& stage, MetricsMap& metrics,
                    bool& changed) {
  changed = true;
  if (stage == "data") {
    bool rebuilt = false;
    data::Corpus c = ensure_corpus(cfg, &rebuilt);
    changed = rebuilt;
    metrics["items"] = static_cast<double>(c.items.size());
    metrics["train_items"] = static_cast<double>(c.split_items("train").size());
    metrics["holdout_items"] = static_cast<double>(c.split_items("holdout").size());
  } else if (stage == "vae") {
    train_vae_stage(cfg, metrics);
  } else if (stage == "vq_fine") {
    train_vq_stage(cfg, true, metrics);
  } else if (stage == "vq_coarse") {
    train_vq_stage(cfg, false, metrics);
  } else if (stage == "ar") {
    train_ar_stage(cfg, metrics);
  } else if (stage == "dit") {
    train_dit_stage(cfg, metrics);
  } else if (stage == "injection") {
    train_injection_stage(cfg, metrics);
  } else {
    throw ValidationError("unknown stage '" + stage + "'");
  }
}

} // namespace

StageResult run_stage(const RunConfig& cfg, const std::string& stage) {
  cfg.validate();
  std::filesystem::create_directories(cfg.run_dir);
  const auto t0 = std::chrono::steady_clock::now();
  MetricsMap metrics;
  bool changed = true;
  try {
    run_stage_body(cfg, stage, metrics, changed);
  } catch (const std::exception& e) {
    throw StageError("stage '" + stage + "' failed: " + e.what() +
                     " (last metrics: " + format_metrics(metrics) + ")");
  }
  StageResult result;
  result.stage = stage;
  result.retrained = changed;
  result.wall_seconds =
      std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
  result.metrics = metrics;
  result.checkpoint_hash =
      io::hex64(io::fnv1a64_file(stage_artifacts(cfg, stage).front()));

  json manifest;
  manifest["stage"] = stage;
  manifest["config_hash"] = cfg.config_hash();
  manifest["seed"] = stage_seed(cfg, stage);
  manifest["wall_seconds"] = result.wall_seconds;
  manifest["checkpoint"] = stage_artifacts(cfg, stage).front();
  manifest["checkpoint_hash"] = result.checkpoint_hash;
  manifest["metrics"] = metrics;
  io::write_text_file(manifest_path(cfg, stage), manifest.dump(2));
  return result;
}

std::vector<StageResult> train_all(const RunConfig& cfg, bool resume) {
  cfg.validate();
  std::filesystem::create_directories(cfg.run_dir);
  const auto t0 = std::chrono::steady_clock::now();
  std::vector<StageResult> results;
  bool upstream_retrained = false;

  for (const auto& stage : stage_names()) {
    bool can_skip = resume && !upstream_retrained;
    if (can_skip)
      for (const auto& artifact : stage_artifacts(cfg, stage))
        can_skip = can_skip && io::file_exists(artifact);
    std::string manifest_text;
    if (can_skip && io::file_exists(manifest_path(cfg, stage))) {
      manifest_text = io::read_text_file(manifest_path(cfg, stage));
      const json m = json::parse(manifest_text, nullptr, /*allow_exceptions=*/false);
      can_skip = !m.is_discarded() && m.value("config_hash", "") == cfg.config_hash();
    } else {
      can_skip = false;
    }

    if (can_skip) {
      const json m = json::parse(manifest_text);
      StageResult r;
      r.stage = stage;
      r.retrained = false;
      r.checkpoint_hash = m.value("checkpoint_hash", "");
      if (m.contains("metrics")) r.metrics = m.at("metrics").get<MetricsMap>();
      results.push_back(std::move(r));
      std::fprintf(stderr, "[%s] up to date, skipped\n", stage.c_str());
      continue;
    }

    StageResult r = run_stage(cfg, stage);
    upstream_retrained = upstream_retrained || r.retrained;
    results.push_back(std::move(r));
  }

  json summary;
  summary["config_hash"] = cfg.config_hash();
  summary["total_seconds"] =
      std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
  summary["stages"] = json::array();
  for (const auto& r : results)
    summary["stages"].push_back({{"stage", r.stage},
                                 {"retrained", r.retrained},
                                 {"wall_seconds", r.wall_seconds},
                                 {"checkpoint_hash", r.checkpoint_hash}});
  io::write_text_file(cfg.run_dir + "/train_all.manifest.json", summary.dump(2));
  return results;
}

void save_text_encoder(const std::string& path, const data::TextEncoder& enc) {
  nn::ParamRegistry r;
  enc.reg(r, "text");
  io::save_checkpoint(path, text_to_json(enc.cfg).dump(), r);
}

data::TextEncoder load_text_encoder(const std::string& path) {
  const io::Checkpoint ckpt = io::load_checkpoint(path);
  Rng rng(0); // shapes only; every value is restored from the checkpoint
  data::TextEncoder enc =
      data::TextEncoder::create(text_from_json(json::parse(ckpt.config_json)), rng);
  nn::ParamRegistry r;
  enc.reg(r, "text");
  io::restore_params(ckpt, r);
  return enc;
}

// ------------------------------------------------------------- generation

ModelBundle ModelBundle::load(const RunConfig& cfg) {
  const std::vector<std::pair<std::string, std::string>> needed = {
      {"vae", checkpoint_path(cfg, "vae")},
      {"vq_fine", checkpoint_path(cfg, "vq_fine")},
      {"vq_coarse", checkpoint_path(cfg, "vq_coarse")},
      {"ar", checkpoint_path(cfg, "ar")},
      {"text encoder (ar stage)", text_encoder_path(cfg)},
      {"dit", checkpoint_path(cfg, "dit")},
      {"injection", checkpoint_path(cfg, "injection")},
  };
  for (const auto& [stage, path] : needed)
    require_that(io::file_exists(path), "generation requires the '" + stage +
                                            "' checkpoint at " + path +
                                            "; run train-all first");
  return ModelBundle{load_text_encoder(text_encoder_path(cfg)),
                     vae::VideoVae::load(checkpoint_path(cfg, "vae")),
                     vq::VqVae::load(checkpoint_path(cfg, "vq_fine")),
                     vq::VqVae::load(checkpoint_path(cfg, "vq_coarse")),
                     ar::ARModel::load(checkpoint_path(cfg, "ar")),
                     dit::DiT::load(checkpoint_path(cfg, "dit")),
                     inject::Injector::load(checkpoint_path(cfg, "injection"))};
}

namespace {

std::vector<uint16_t> last_code_frame(const vq::IndexGrid& g) {
  const size_t frame = static_cast<size_t>(g.grid[1]) * g.grid[2];
  require_that(g.indices.size() >= frame, "code stream: no complete frame to continue from");
  return {g.indices.end() - static_cast<std::ptrdiff_t>(frame), g.indices.end()};
}

// One continuous code stream across all prompt regions: the first window is
// sampled from scratch; every later window (within or across regions) is
// forced to start at the previous window's final frame.
vq::IndexGrid sample_code_stream(const ModelBundle& models, const RunConfig& cfg,
                                 const GenerationPlan& plan, int64_t stride, Rng& rng) {
  const int64_t frame_tokens = cfg.ar.frame_tokens();
  // A window holds BOS + per-frame (marker + codes) + EOS within max_seq.
  const int64_t window_cap = (cfg.ar.max_seq - 2) / (frame_tokens + 1);
  require_that(window_cap >= 2, "code stream: position table too small to chain windows");

  vq::IndexGrid stream;
  stream.compression = {static_cast<uint32_t>(cfg.vq_fine.compression[0]),
                        static_cast<uint32_t>(cfg.vq_fine.compression[1]),
                        static_cast<uint32_t>(cfg.vq_fine.compression[2])};
  stream.grid = {0, static_cast<uint32_t>(cfg.ar.frame_h),
                 static_cast<uint32_t>(cfg.ar.frame_w)};
  stream.codebook_size = static_cast<uint32_t>(cfg.ar.codebook_size);

  std::vector<uint16_t> last;
  for (const auto& region : plan.regions) {
    const Tensor text = models.text.encode_const(region.prompt);
    int64_t need = (region.end - region.begin) / stride;
    while (need > 0) {
      ar::SampleResult res;
      int64_t fresh = 0;
      if (stream.grid[0] == 0) {
        fresh = std::min(window_cap, need);
        res = models.ar.sample(text, fresh, cfg.ar_temperature, cfg.ar_top_k, rng);
      } else {
        fresh = std::min(window_cap - 1, need);
        res = models.ar.sample_continued(text, last, fresh + 1, cfg.ar_temperature,
                                         cfg.ar_top_k, rng);
      }
      require_that(!res.truncated, "code stream: sampling window did not fit");
      const size_t frame = static_cast<size_t>(res.grid.grid[1]) * res.grid.grid[2];
      const size_t skip = stream.grid[0] == 0 ? 0 : frame; // drop the forced frame copy
      stream.indices.insert(stream.indices.end(), res.grid.indices.begin() + skip,
                            res.grid.indices.end());
      stream.grid[0] += static_cast<uint32_t>(fresh);
      last = last_code_frame(res.grid);
      need -= fresh;
    }
  }
  require_that(static_cast<int64_t>(stream.grid[0]) * stride == plan.total_frames,
               "code stream: sampled frame count disagrees with the plan");
  return stream;
}

} // namespace

Generation generate_planned(const ModelBundle& models, const RunConfig& cfg,
                            const GenerationPlan& plan_in, uint64_t seed, int steps,
                            bool injected) {
  require_that(steps >= 1 && steps <= cfg.dit.t_diff,
               "generate: steps must lie in [1, t_diff]");
  const int64_t stride = cfg.vq_fine.compression[0];
  GenerationPlan plan = plan_in;
  plan.assign_code_ranges(stride);
  plan.validate(stride);

  Rng rng_ar(derive_seed(seed, 11));
  Generation out;
  out.plan = plan;
  out.codes = sample_code_stream(models, cfg, plan, stride, rng_ar);
  out.condition = models.vq_fine.decode_indices(out.codes);
  require_that(out.condition.shape[0] == plan.total_frames,
               "generate: decoded condition does not span the plan");
  out.coarse_video = models.vae.decode(out.condition);

  Tensor latents(out.condition.shape);
  for (const auto& seg : plan.segments) {
    const Tensor cond_features = slice_frames(out.condition, seg.begin, seg.end);
    const Tensor text = models.text.encode_const(plan.regions[seg.prompt_index].prompt);
    const dit::BlockHook hook =
        injected ? models.injector.make_hook(cond_features, /*train=*/false, nullptr)
                 : dit::BlockHook{};
    const auto predict = [&](const Tensor& z_t, int64_t t) {
      return models.dit.predict_noise(z_t, t, text, hook);
    };
    Rng rng_seg(derive_seed(seed, 1000 + static_cast<uint64_t>(seg.index)));
    const std::vector<int64_t> shape = {seg.end - seg.begin, latents.shape[1],
                                        latents.shape[2], latents.shape[3]};
    Tensor z;
    if (seg.cond_end > seg.cond_begin) {
      dit::FrameMask mask;
      mask.conditioning.assign(static_cast<size_t>(shape[0]), 0);
      for (int64_t f = 0; f < plan.overlap; ++f) mask.conditioning[static_cast<size_t>(f)] = 1;
      Tensor clamp(shape);
      write_frames(clamp, 0, slice_frames(latents, seg.cond_begin, seg.cond_end));
      z = dit::ddim_sample(predict, models.dit.sched, shape, steps, &mask, &clamp, rng_seg);
    } else {
      z = dit::ddim_sample(predict, models.dit.sched, shape, steps, nullptr, nullptr, rng_seg);
    }
    ++out.dit_calls;
    write_frames(latents, seg.keep_begin, slice_frames(z, seg.keep_begin - seg.begin, shape[0]));
  }
  out.latents = latents;
  out.video = models.vae.decode(latents);
  return out;
}

Generation generate_short(const ModelBundle& models, const RunConfig& cfg,
                          const std::string& prompt, uint64_t seed, int steps, bool injected) {
  const int64_t total = cfg.corpus.render.frames / cfg.vae.temporal_stride;
  require_that(cfg.overlap < total,
               "generate: overlap does not fit one clip-sized segment");
  GenerationPlan plan = plan_segments(total, total, cfg.overlap);
  plan.regions.front().prompt = prompt;
  return generate_planned(models, cfg, plan, seed, steps, injected);
}

Generation generate_long(const ModelBundle& models, const RunConfig& cfg,
                         const std::string& prompt, int64_t total_latent_frames, uint64_t seed,
                         int steps, bool injected) {
  GenerationPlan plan = plan_segments(total_latent_frames, cfg.seg_frames, cfg.overlap);
  plan.regions.front().prompt = prompt;
  return generate_planned(models, cfg, plan, seed, steps, injected);
}

Generation generate_progressive(const ModelBundle& models, const RunConfig& cfg,
                                const std::vector<std::string>& prompts,
                                int64_t latent_frames_per_prompt, uint64_t seed, int steps,
                                bool injected) {
  require_that(prompts.size() >= 2, "progressive generation needs at least two prompts");
  require_that(latent_frames_per_prompt >= 1, "progressive: empty prompt regions");
  std::vector<PromptRegion> regions;
  for (size_t i = 0; i < prompts.size(); ++i)
    regions.push_back({prompts[i], static_cast<int64_t>(i) * latent_frames_per_prompt,
                       static_cast<int64_t>(i + 1) * latent_frames_per_prompt});
  const GenerationPlan plan = plan_regions(regions, cfg.seg_frames, cfg.overlap);
  return generate_planned(models, cfg, plan, seed, steps, injected);
}

std::string Generation::manifest_json(const RunConfig& cfg, uint64_t seed, int steps) const {
  json j;
  j["config_hash"] = cfg.config_hash();
  j["seed"] = seed;
  j["steps"] = steps;
  j["dit_calls"] = dit_calls;
  j["plan"] = json::parse(plan.to_json());
  j["prompts"] = json::array();
  for (const auto& r : plan.regions) j["prompts"].push_back(r.prompt);
  j["checkpoints"] = json::object();
  for (const auto& stage : stage_names()) {
    const std::string path = checkpoint_path(cfg, stage);
    if (io::file_exists(path)) j["checkpoints"][stage] = io::hex64(io::fnv1a64_file(path));
  }
  return j.dump(2);
}

eval::SweepGenerator make_sweep_generator(const ModelBundle& models, const RunConfig& cfg) {
  const ModelBundle* m = &models;
  const RunConfig* c = &cfg;
  return [m, c](const std::string& prompt, uint64_t seed, int steps, bool injected) {
    const Generation g = generate_short(*m, *c, prompt, seed, steps, injected);
    return eval::SweepSample{g.video, g.coarse_video};
  };
}

} // namespace arlon::pipe
