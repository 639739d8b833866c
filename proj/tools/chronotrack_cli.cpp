// chronotrack command-line tool.
//
// Exit codes: 0 success, 2 usage or input error, 3 runtime or numeric failure.
// Settings resolve as: command-line flag, then --config file, then built-in
// default. The resolved settings are echoed into checkpoint metadata.

#include <CLI11.hpp>

#include <cstdio>
#include <filesystem>
#include <iostream>
#include <map>
#include <string>
#include <vector>

#include "chronotrack/chronotrack.hpp"

namespace fs = std::filesystem;
using namespace chronotrack;

namespace {

constexpr int kUsage = 2;
constexpr int kRuntime = 3;

struct UsageError : std::runtime_error {
  using std::runtime_error::runtime_error;
};
struct RuntimeFailure : std::runtime_error {
  using std::runtime_error::runtime_error;
};

// One overridable setting: config key, flag name, default, help text.
struct Setting {
  std::string key;
  std::string flag;
  std::string fallback;
  std::string help;
};

class Settings {
 public:
  void add(CLI::App* app, std::vector<Setting> list) {
    for (auto& s : list) {
      auto* opt = app->add_option("--" + s.flag, cli_[s.key], s.help + " [" + s.fallback + "]");
      options_[s.key] = opt;
      defaults_[s.key] = s.fallback;
    }
    app->add_option("--config", config_path_, "key = value settings file");
  }

  KeyValues resolve() const {
    KeyValues kv = defaults_;
    if (!config_path_.empty()) {
      for (const auto& [k, v] : load_key_values(config_path_)) {
        if (!defaults_.count(k)) throw ConfigError(config_path_ + ": unknown key '" + k + "'");
        kv[k] = v;
      }
    }
    for (const auto& [k, opt] : options_) {
      if (opt->count() > 0) kv[k] = cli_.at(k);
    }
    return kv;
  }

 private:
  std::map<std::string, std::string> cli_;
  std::map<std::string, CLI::Option*> options_;
  KeyValues defaults_;
  std::string config_path_;
};

const std::vector<Setting> kTrainSettings = {
    {"train.lr", "lr", "0.0001", "peak learning rate"},
    {"train.weight_decay", "weight-decay", "0.0001", "AdamW decoupled weight decay"},
    {"train.iters", "iters", "2000", "optimizer steps"},
    {"train.warmup_iters", "warmup", "100", "linear warmup steps"},
    {"train.batch_clips", "batch-clips", "1", "clips per step"},
    {"train.queries_per_batch", "queries-per-batch", "64", "query points per clip"},
    {"train.huber_delta", "huber-delta", "1", "Huber threshold in pixels"},
    {"train.seed", "seed", "0", "training seed"},
};

const std::vector<Setting> kTrackerSettings = {
    {"tracker.tau", "tau", "20", "soft-argmax temperature"},
    {"tracker.mask_radius", "mask-radius", "5", "soft-argmax radius in grid cells"},
};

const std::vector<Setting> kBackboneSettings = {
    {"backbone.patch", "patch", "8", "patch size in pixels"},
    {"backbone.dim", "dim", "64", "token width"},
    {"backbone.depth", "depth", "4", "transformer blocks"},
    {"backbone.heads", "heads", "4", "attention heads"},
    {"backbone.mlp_ratio", "mlp-ratio", "4", "MLP hidden width over token width"},
    {"train.subclip_frames", "subclip-frames", "2", "frames per pretraining sample"},
};

const std::vector<Setting> kAdapterSettings = {
    {"adapter.aggregation", "aggregation", "attn1d", "attn1d, conv1d or conv3d"},
    {"adapter.placement", "placement", "all", "all, early, later, alternating or explicit"},
    {"adapter.slots", "slots", "", "comma-separated slots for explicit placement"},
    {"adapter.window", "window", "13", "temporal window N (odd)"},
    {"adapter.stride", "stride", "2", "spatial downsampling s"},
    {"adapter.c_out", "c-out", "16", "bottleneck width"},
    {"adapter.temporal_bias", "temporal-bias", "0", "learned per-offset attention bias (0 or 1)"},
};

std::vector<Setting> concat(std::initializer_list<std::vector<Setting>> parts) {
  std::vector<Setting> out;
  for (const auto& p : parts) out.insert(out.end(), p.begin(), p.end());
  return out;
}

bool kv_flag(const KeyValues& kv, const std::string& key) {
  const std::string& v = kv_get(kv, key);
  if (v == "1" || v == "true") return true;
  if (v == "0" || v == "false") return false;
  throw ConfigError("key '" + key + "': expected 0 or 1, got '" + v + "'");
}

TrainConfig train_config(const KeyValues& kv) {
  TrainConfig c;
  c.lr = kv_real(kv, "train.lr");
  c.weight_decay = kv_real(kv, "train.weight_decay");
  c.iters = kv_size(kv, "train.iters");
  c.warmup_iters = kv_size(kv, "train.warmup_iters");
  c.batch_clips = kv_size(kv, "train.batch_clips");
  c.queries_per_batch = kv_size(kv, "train.queries_per_batch");
  c.huber_delta = kv_real(kv, "train.huber_delta");
  c.seed = kv_size(kv, "train.seed");
  if (kv.count("train.subclip_frames")) c.subclip_frames = kv_size(kv, "train.subclip_frames");
  c.tracker.tau = kv_real(kv, "tracker.tau");
  c.tracker.mask_radius = kv_real(kv, "tracker.mask_radius");
  c.validate();
  return c;
}

TrackerConfig tracker_config(const KeyValues& kv) {
  TrackerConfig t;
  t.tau = kv_real(kv, "tracker.tau");
  t.mask_radius = kv_real(kv, "tracker.mask_radius");
  if (!(t.tau > 0.0) || !(t.mask_radius >= 0.0)) throw ConfigError("tracker: tau must be > 0 and mask radius >= 0");
  return t;
}

Dataset load_data(const std::string& path) {
  if (!fs::exists(path)) throw UsageError("dataset not found: " + path);
  return load_dataset(path);
}

Model<float> load_model(const std::string& path) {
  if (!fs::exists(path)) throw UsageError("checkpoint not found: " + path);
  return model_from_checkpoint<float>(load_checkpoint(path));
}

std::vector<const Clip*> select_clips(const Dataset& d, const std::string& split, std::size_t max_clips) {
  std::vector<const Clip*> out;
  if (split == "all") {
    for (const auto& c : d.clips) out.push_back(&c);
  } else if (split == "train" || split == "heldout") {
    out = d.split(split == "heldout");
  } else {
    throw ConfigError("unknown split '" + split + "' (train, heldout, all)");
  }
  if (max_clips > 0 && out.size() > max_clips) out.resize(max_clips);
  if (out.empty()) throw UsageError("no clips in the '" + split + "' split");
  return out;
}

const Clip& pick_clip(const Dataset& d, std::size_t index) {
  if (index >= d.clips.size()) {
    throw UsageError("clip index " + std::to_string(index) + " out of range (dataset has " +
                     std::to_string(d.clips.size()) + " clips)");
  }
  return d.clips[index];
}

void check_geometry(const BackboneConfig& bc, const Clip& clip) {
  if (clip.video.height != bc.image_h || clip.video.width != bc.image_w) {
    throw ConfigError("clip is " + std::to_string(clip.video.height) + "x" + std::to_string(clip.video.width) +
                      " but the model expects " + std::to_string(bc.image_h) + "x" + std::to_string(bc.image_w));
  }
}

void write_loss_log(const std::string& path, const std::vector<LossRecord>& log) {
  std::string s;
  for (const auto& r : log) s += std::to_string(r.iter) + " " + format_real(r.lr) + " " + format_real(r.loss) + "\n";
  write_file(path, s);
}

ProgressFn progress_printer(std::size_t total, bool quiet) {
  if (quiet) return {};
  const std::size_t every = std::max<std::size_t>(1, total / 20);
  return [total, every](const LossRecord& r) {
    if ((r.iter + 1) % every == 0 || r.iter + 1 == total) {
      std::fprintf(stderr, "iter %zu/%zu lr %.3g loss %.4f\n", r.iter + 1, total, r.lr, r.loss);
    }
  };
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"chronotrack: temporal-adapter point tracking on synthetic video"};
  app.require_subcommand(1);
  app.set_version_flag("--version", "chronotrack 1.0");

  // generate-data
  auto* gen = app.add_subcommand("generate-data", "render a synthetic sprite dataset");
  std::size_t n_clips = 400;
  std::uint64_t data_seed = 0;
  SceneSpec spec;
  std::string gen_out;
  gen->add_option("--n-clips", n_clips, "number of clips; even seeds train, odd seeds held out")->capture_default_str();
  gen->add_option("--seed", data_seed, "seed of the first clip")->capture_default_str();
  gen->add_option("--frames", spec.frames, "frames per clip")->capture_default_str();
  gen->add_option("--height", spec.height, "frame height")->capture_default_str();
  gen->add_option("--width", spec.width, "frame width")->capture_default_str();
  gen->add_option("--sprites", spec.sprites, "sprites per clip")->capture_default_str();
  gen->add_option("--tracks", spec.tracks, "ground-truth tracks per clip")->capture_default_str();
  gen->add_option("--size-min", spec.size_min, "smallest sprite side")->capture_default_str();
  gen->add_option("--size-max", spec.size_max, "largest sprite side")->capture_default_str();
  gen->add_option("--speed-max", spec.speed_max, "max speed per axis, px/frame")->capture_default_str();
  gen->add_option("--spin-max", spec.spin_max, "max angular speed, rad/frame")->capture_default_str();
  gen->add_option("--texture-cell", spec.texture_cell, "value-noise lattice spacing, px")->capture_default_str();
  gen->add_option("--out", gen_out, "output dataset file")->required();

  // pretrain
  auto* pre = app.add_subcommand("pretrain", "stage A: train the per-frame backbone");
  Settings pre_settings;
  pre_settings.add(pre, concat({kTrainSettings, kTrackerSettings, kBackboneSettings}));
  std::string pre_data, pre_out, pre_log;
  std::size_t pre_max = 0;
  bool pre_quiet = false;
  pre->add_option("--data", pre_data, "dataset file")->required();
  pre->add_option("--out", pre_out, "output checkpoint")->required();
  pre->add_option("--log", pre_log, "loss log (default: <out>.loss)");
  pre->add_option("--max-clips", pre_max, "use at most this many training clips (0: all)");
  pre->add_flag("--quiet", pre_quiet, "no progress output");

  // train-adapter
  auto* tad = app.add_subcommand("train-adapter", "stage B: train temporal adapters on a frozen backbone");
  Settings tad_settings;
  tad_settings.add(tad, concat({kTrainSettings, kTrackerSettings, kAdapterSettings}));
  std::string tad_data, tad_ckpt, tad_out, tad_log;
  std::size_t tad_max = 0;
  bool tad_quiet = false, tad_fresh = false;
  tad->add_option("--data", tad_data, "dataset file")->required();
  tad->add_option("--checkpoint", tad_ckpt, "stage A checkpoint")->required();
  tad->add_option("--out", tad_out, "output checkpoint")->required();
  tad->add_option("--log", tad_log, "loss log (default: <out>.loss)");
  tad->add_option("--max-clips", tad_max, "use at most this many training clips (0: all)");
  tad->add_flag("--fresh-clips", tad_fresh,
                "draw a newly generated training clip every step (even seeds past the dataset's)");
  tad->add_flag("--quiet", tad_quiet, "no progress output");

  // track
  auto* trk = app.add_subcommand("track", "track query points through one clip");
  Settings trk_settings;
  trk_settings.add(trk, kTrackerSettings);
  std::string trk_ckpt, trk_data, trk_queries, trk_out;
  std::size_t trk_clip = 0, trk_grid = 0;
  trk->add_option("--checkpoint", trk_ckpt, "model checkpoint")->required();
  trk->add_option("--data", trk_data, "dataset file")->required();
  trk->add_option("--clip", trk_clip, "clip index within the dataset file");
  auto* q_opt = trk->add_option("--queries", trk_queries, "file of 't x y' lines or a trajectory file");
  auto* g_opt = trk->add_option("--grid", trk_grid, "G: track a GxG grid of points from frame 0");
  q_opt->excludes(g_opt);
  trk->add_option("--out", trk_out, "output trajectory file")->required();

  // evaluate
  auto* ev = app.add_subcommand("evaluate", "delta-accuracy and jitter on a dataset split");
  Settings ev_settings;
  ev_settings.add(ev, kTrackerSettings);
  std::string ev_ckpt, ev_data, ev_mode = "strided", ev_out, ev_split = "heldout", ev_traj;
  std::size_t ev_max = 50;
  bool ev_oracle = false;
  auto* ck_opt = ev->add_option("--checkpoint", ev_ckpt, "model checkpoint");
  auto* or_opt = ev->add_flag("--oracle", ev_oracle, "use ground truth as predictions (harness self-test)");
  ck_opt->excludes(or_opt);
  ev->add_option("--data", ev_data, "dataset file")->required();
  ev->add_option("--mode", ev_mode, "strided or first")->capture_default_str();
  ev->add_option("--split", ev_split, "heldout, train or all")->capture_default_str();
  ev->add_option("--max-clips", ev_max, "evaluate the first N clips of the split (0: all)")->capture_default_str();
  ev->add_option("--out", ev_out, "report file");
  ev->add_option("--trajectories", ev_traj, "directory for per-clip trajectory files");

  // dump-features
  auto* dmp = app.add_subcommand("dump-features", "PCA images of one clip's features");
  std::string dmp_ckpt, dmp_data, dmp_out;
  std::size_t dmp_clip = 0;
  dmp->add_option("--checkpoint", dmp_ckpt, "model checkpoint")->required();
  dmp->add_option("--data", dmp_data, "dataset file")->required();
  dmp->add_option("--clip", dmp_clip, "clip index within the dataset file");
  dmp->add_option("--out", dmp_out, "output directory")->required();

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    const int code = app.exit(e);
    return code == 0 ? 0 : kUsage;
  }

  try {
    if (*gen) {
      if (n_clips < 1) throw UsageError("--n-clips must be at least 1");
      save_dataset(gen_out, generate_dataset(n_clips, data_seed, spec));
      std::printf("clips\tframes\theight\twidth\ttracks\n%zu\t%u\t%u\t%u\t%u\n", n_clips, spec.frames, spec.height,
                  spec.width, spec.tracks);
    } else if (*pre) {
      const KeyValues kv = pre_settings.resolve();
      const TrainConfig tc = train_config(kv);
      const Dataset d = load_data(pre_data);
      const auto clips = select_clips(d, "train", pre_max);
      BackboneConfig bc;
      bc.image_h = clips.front()->video.height;
      bc.image_w = clips.front()->video.width;
      bc.patch = kv_size(kv, "backbone.patch");
      bc.dim = kv_size(kv, "backbone.dim");
      bc.depth = kv_size(kv, "backbone.depth");
      bc.heads = kv_size(kv, "backbone.heads");
      bc.mlp_ratio = kv_real(kv, "backbone.mlp_ratio");
      bc.validate();
      for (const Clip* c : clips) check_geometry(bc, *c);
      auto r = train_stage_a<float>(clips, bc, tc, progress_printer(tc.iters, pre_quiet));
      KeyValues meta = kv;
      meta["stage"] = "a";
      meta["train.clips"] = std::to_string(clips.size());
      save_checkpoint(pre_out, make_checkpoint(r.model, meta));
      write_loss_log(pre_log.empty() ? pre_out + ".loss" : pre_log, r.log);
      std::printf("stage\titers\tfinal_loss\na\t%zu\t%s\n", tc.iters, format_real(r.log.back().loss).c_str());
    } else if (*tad) {
      const KeyValues kv = tad_settings.resolve();
      const TrainConfig tc = train_config(kv);
      const Model<float> base = load_model(tad_ckpt);
      if (base.adapters) throw UsageError(tad_ckpt + " already has adapters; pass a stage A checkpoint");
      const Dataset d = load_data(tad_data);
      const auto clips = select_clips(d, "train", tad_max);
      for (const Clip* c : clips) check_geometry(base.backbone.config(), *c);
      AdapterConfig ac;
      ac.aggregation = parse_aggregation(kv_get(kv, "adapter.aggregation"));
      ac.placement = parse_placement(kv_get(kv, "adapter.placement"));
      if (ac.placement == Placement::explicit_slots) ac.slots = parse_slots(kv_get(kv, "adapter.slots"));
      ac.window = kv_size(kv, "adapter.window");
      ac.stride = kv_size(kv, "adapter.stride");
      ac.c_out = kv_size(kv, "adapter.c_out");
      ac.temporal_bias = kv_flag(kv, "adapter.temporal_bias");
      KeyValues meta = kv;
      meta["stage"] = "b";
      TrainResult<float> r = [&] {
        if (!tad_fresh) {
          meta["train.clips"] = std::to_string(clips.size());
          return train_stage_b<float>(base.backbone, clips, ac, tc, progress_printer(tc.iters, tad_quiet));
        }
        std::uint64_t first = 0;
        for (const Clip& c : d.clips) first = std::max(first, c.spec.seed + 1);
        first += first % 2;
        meta["train.clips"] = "fresh";
        meta["train.first_seed"] = std::to_string(first);
        return train_stage_b<float>(base.backbone, fresh_clips(clips.front()->spec, first), ac, tc,
                                    progress_printer(tc.iters, tad_quiet));
      }();
      for (const auto& [k, v] : checkpoint_metadata(load_checkpoint(tad_ckpt))) {
        if (k.rfind("train.", 0) == 0) meta["pretrain." + k.substr(6)] = v;
      }
      save_checkpoint(tad_out, make_checkpoint(r.model, meta));
      write_loss_log(tad_log.empty() ? tad_out + ".loss" : tad_log, r.log);
      std::printf("stage\titers\tslots\tfinal_loss\nb\t%zu\t%s\t%s\n", tc.iters,
                  join_slots(r.model.adapters->slots()).c_str(), format_real(r.log.back().loss).c_str());
    } else if (*trk) {
      const TrackerConfig tcfg = tracker_config(trk_settings.resolve());
      if (trk_queries.empty() && trk_grid == 0) throw UsageError("track: pass --queries FILE or --grid G");
      const Model<float> m = load_model(trk_ckpt);
      const Dataset d = load_data(trk_data);
      const Clip& clip = pick_clip(d, trk_clip);
      check_geometry(m.backbone.config(), clip);
      std::vector<QueryPoint> qs;
      TrajectoryFile f;
      f.clip = trk_clip;
      f.frames = clip.video.frames;
      if (trk_grid > 0) {
        f.mode = "grid";
        for (std::size_t j = 0; j < trk_grid; ++j)
          for (std::size_t i = 0; i < trk_grid; ++i) {
            qs.push_back({(static_cast<double>(i) + 0.5) * static_cast<double>(clip.video.width) / static_cast<double>(trk_grid),
                          (static_cast<double>(j) + 0.5) * static_cast<double>(clip.video.height) / static_cast<double>(trk_grid), 0});
          }
      } else {
        if (!fs::exists(trk_queries)) throw UsageError("queries file not found: " + trk_queries);
        const Bytes b = read_file(trk_queries);
        const std::string text(b.begin(), b.end());
        qs = parse_queries(text);
        f.mode = text.rfind("chronotrack-trajectories", 0) == 0 ? parse_trajectories(text).mode : "queries";
      }
      f.tracks = track(m, clip.video, qs, tcfg);
      write_file(trk_out, format_trajectories(f));
      std::printf("clip\tqueries\tframes\n%zu\t%zu\t%zu\n", trk_clip, qs.size(), f.frames);
    } else if (*ev) {
      const TrackerConfig tcfg = tracker_config(ev_settings.resolve());
      const QueryMode mode = parse_query_mode(ev_mode);
      if (ev_ckpt.empty() && !ev_oracle) throw UsageError("evaluate: pass --checkpoint FILE or --oracle");
      std::optional<Model<float>> m;
      if (!ev_oracle) m = load_model(ev_ckpt);
      const Dataset d = load_data(ev_data);
      const auto clips = select_clips(d, ev_split, ev_max);
      if (m) {
        for (const Clip* c : clips) check_geometry(m->backbone.config(), *c);
      }
      std::size_t total = 0;
      for (const Clip* c : clips) total += clip_queries(*c, mode).queries.size();
      if (total == 0) throw RuntimeFailure("evaluate: the selected clips yield no queries");
      PredictionSink sink;
      if (!ev_traj.empty()) {
        fs::create_directories(ev_traj);
        sink = [&](std::size_t i, const std::vector<TrackPrediction>& preds) {
          const Clip* c = clips[i];
          TrajectoryFile f;
          f.clip = static_cast<std::size_t>(c - d.clips.data());
          f.mode = to_string(mode);
          f.frames = c->video.frames;
          f.tracks = preds;
          char name[32];
          std::snprintf(name, sizeof name, "clip_%03zu.traj", f.clip);
          write_file(fs::path(ev_traj) / name, format_trajectories(f));
        };
      }
      EvalReport r = evaluate(m ? &*m : nullptr, clips, mode, tcfg, sink);
      r.config["split"] = ev_split;
      r.config["max_clips"] = std::to_string(ev_max);
      if (m) {
        const KeyValues meta = checkpoint_metadata(load_checkpoint(ev_ckpt));
        if (meta.count("stage")) r.config["checkpoint_stage"] = meta.at("stage");
      }
      if (!ev_out.empty()) write_file(ev_out, r.to_text());
      std::fputs(r.table().c_str(), stdout);
    } else if (*dmp) {
      const Model<float> m = load_model(dmp_ckpt);
      const Dataset d = load_data(dmp_data);
      const Clip& clip = pick_clip(d, dmp_clip);
      check_geometry(m.backbone.config(), clip);
      const auto paths = pca_dump(m.features(clip.video.to_tensor<float>()), dmp_out);
      std::printf("clip\timages\n%zu\t%zu\n", dmp_clip, paths.size());
    }
  } catch (const UsageError& e) {
    std::fprintf(stderr, "error: %s\n", e.what());
    return kUsage;
  } catch (const ConfigError& e) {
    std::fprintf(stderr, "config error: %s\n", e.what());
    return kUsage;
  } catch (const ArgumentError& e) {
    std::fprintf(stderr, "input error: %s\n", e.what());
    return kUsage;
  } catch (const DimensionError& e) {
    std::fprintf(stderr, "input error: %s\n", e.what());
    return kUsage;
  } catch (const IoError& e) {
    std::fprintf(stderr, "i/o error: %s\n", e.what());
    return kUsage;
  } catch (const NumericError& e) {
    std::fprintf(stderr, "numeric failure: %s\n", e.what());
    return kRuntime;
  } catch (const std::exception& e) {
    std::fprintf(stderr, "failure: %s\n", e.what());
    return kRuntime;
  }
  return 0;
}
