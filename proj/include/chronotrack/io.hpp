#pragma once

// On-disk formats, all little-endian:
//   checkpoint  "CHRN" u32 version, u32-length metadata text, u32 tensor count,
//               per tensor: u32-length name, u8 dtype, u8 rank, u64 extents, data
//   dataset     "CHRD" u32 version, u32 clip count, per clip: scene spec, u8 frames,
//               u32 track count, per track: f32 positions, u8 visibility, i32 sprite, f32 local u/v
//   trajectory  text; see format_trajectories
// plus the key = value config text used for metadata and config files.

#include <bit>
#include <cstdint>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <iterator>
#include <map>
#include <sstream>
#include <string>
#include <vector>

#include "chronotrack/eval.hpp"
#include "chronotrack/format.hpp"
#include "chronotrack/model.hpp"
#include "chronotrack/synthdata.hpp"

namespace chronotrack {

using Bytes = std::vector<std::uint8_t>;
using KeyValues = std::map<std::string, std::string>;

inline constexpr std::uint32_t kCheckpointVersion = 1;
inline constexpr std::uint32_t kDatasetVersion = 1;

class ByteWriter {
 public:
  void u8(std::uint8_t v) { out_.push_back(v); }
  void u32(std::uint32_t v) {
    for (int i = 0; i < 4; ++i) out_.push_back(static_cast<std::uint8_t>(v >> (8 * i)));
  }
  void u64(std::uint64_t v) {
    for (int i = 0; i < 8; ++i) out_.push_back(static_cast<std::uint8_t>(v >> (8 * i)));
  }
  void i32(std::int32_t v) { u32(static_cast<std::uint32_t>(v)); }
  void f32(float v) { u32(std::bit_cast<std::uint32_t>(v)); }
  void f64(double v) { u64(std::bit_cast<std::uint64_t>(v)); }
  void raw(const void* p, std::size_t n) {
    const auto* b = static_cast<const std::uint8_t*>(p);
    out_.insert(out_.end(), b, b + n);
  }
  void str(const std::string& s) {
    u32(static_cast<std::uint32_t>(s.size()));
    raw(s.data(), s.size());
  }
  const Bytes& bytes() const { return out_; }
  Bytes take() { return std::move(out_); }

 private:
  Bytes out_;
};

class ByteReader {
 public:
  ByteReader(const Bytes& b, std::string what) : b_(b), what_(std::move(what)) {}

  std::uint8_t u8() { return need(1)[0]; }
  std::uint32_t u32() {
    const std::uint8_t* p = need(4);
    std::uint32_t v = 0;
    for (int i = 0; i < 4; ++i) v |= static_cast<std::uint32_t>(p[i]) << (8 * i);
    return v;
  }
  std::uint64_t u64() {
    const std::uint8_t* p = need(8);
    std::uint64_t v = 0;
    for (int i = 0; i < 8; ++i) v |= static_cast<std::uint64_t>(p[i]) << (8 * i);
    return v;
  }
  std::int32_t i32() { return static_cast<std::int32_t>(u32()); }
  float f32() { return std::bit_cast<float>(u32()); }
  double f64() { return std::bit_cast<double>(u64()); }
  const std::uint8_t* raw(std::size_t n) { return need(n); }
  std::string str() {
    const std::uint32_t n = u32();
    const std::uint8_t* p = need(n);
    return std::string(reinterpret_cast<const char*>(p), n);
  }
  void magic(const char* m) {
    if (std::memcmp(need(4), m, 4) != 0) throw IoError(what_ + ": bad magic (expected " + m + ")");
  }
  bool done() const { return pos_ == b_.size(); }

 private:
  const std::uint8_t* need(std::size_t n) {
    if (n > b_.size() - pos_) throw IoError(what_ + ": truncated at byte " + std::to_string(pos_));
    const std::uint8_t* p = b_.data() + pos_;
    pos_ += n;
    return p;
  }
  const Bytes& b_;
  std::string what_;
  std::size_t pos_ = 0;
};

inline Bytes read_file(const std::filesystem::path& path) {
  std::ifstream f(path, std::ios::binary);
  if (!f) throw IoError("cannot open " + path.string());
  return Bytes(std::istreambuf_iterator<char>(f), std::istreambuf_iterator<char>());
}

inline void write_file(const std::filesystem::path& path, const void* data, std::size_t n) {
  std::ofstream f(path, std::ios::binary | std::ios::trunc);
  if (!f) throw IoError("cannot write " + path.string());
  f.write(static_cast<const char*>(data), static_cast<std::streamsize>(n));
  if (!f) throw IoError("write failed: " + path.string());
}

inline void write_file(const std::filesystem::path& path, const Bytes& b) { write_file(path, b.data(), b.size()); }
inline void write_file(const std::filesystem::path& path, const std::string& s) { write_file(path, s.data(), s.size()); }

// ---- key = value text ----

inline std::string trim(const std::string& s) {
  const auto b = s.find_first_not_of(" \t\r");
  if (b == std::string::npos) return "";
  const auto e = s.find_last_not_of(" \t\r");
  return s.substr(b, e - b + 1);
}

inline KeyValues parse_key_values(const std::string& text, const std::string& what = "config") {
  KeyValues kv;
  std::istringstream in(text);
  std::string line;
  std::size_t n = 0;
  while (std::getline(in, line)) {
    ++n;
    const auto hash = line.find('#');
    if (hash != std::string::npos) line.resize(hash);
    line = trim(line);
    if (line.empty()) continue;
    const auto eq = line.find('=');
    if (eq == std::string::npos) {
      throw ConfigError(what + ":" + std::to_string(n) + ": expected 'key = value'");
    }
    kv[trim(line.substr(0, eq))] = trim(line.substr(eq + 1));
  }
  return kv;
}

inline std::string format_key_values(const KeyValues& kv) {
  std::string out;
  for (const auto& [k, v] : kv) out += k + " = " + v + "\n";
  return out;
}

inline KeyValues load_key_values(const std::filesystem::path& path) {
  const Bytes b = read_file(path);
  return parse_key_values(std::string(b.begin(), b.end()), path.string());
}

inline const std::string& kv_get(const KeyValues& kv, const std::string& key) {
  auto it = kv.find(key);
  if (it == kv.end()) throw ConfigError("missing key '" + key + "'");
  return it->second;
}

inline std::size_t kv_size(const KeyValues& kv, const std::string& key) {
  const std::string& s = kv_get(kv, key);
  std::size_t v = 0;
  auto res = std::from_chars(s.data(), s.data() + s.size(), v);
  if (res.ec != std::errc() || res.ptr != s.data() + s.size()) {
    throw ConfigError("key '" + key + "': expected a non-negative integer, got '" + s + "'");
  }
  return v;
}

inline double kv_real(const KeyValues& kv, const std::string& key) {
  double v = 0;
  if (!parse_real(kv_get(kv, key), v)) throw ConfigError("key '" + key + "': expected a number");
  return v;
}

// ---- checkpoint ----

struct StoredTensor {
  std::string name;
  DType dtype = DType::f32;
  Shape shape;
  Bytes data;  // little-endian payload
};

struct Checkpoint {
  std::string metadata;
  std::vector<StoredTensor> tensors;

  const StoredTensor* find(const std::string& name) const {
    for (const auto& t : tensors)
      if (t.name == name) return &t;
    return nullptr;
  }
};

template <typename T>
StoredTensor store_tensor(const std::string& name, const Tensor<T>& t) {
  ByteWriter w;
  for (T v : t.data()) {
    if constexpr (std::is_same_v<T, float>) w.f32(v);
    else w.f64(v);
  }
  return {name, dtype_of<T>(), t.shape(), w.take()};
}

// Copies a stored tensor into `dst` (shape must match), converting dtype.
template <typename T>
void load_tensor(const StoredTensor& s, Tensor<T>& dst) {
  if (s.shape != dst.shape()) {
    throw DimensionError("checkpoint tensor '" + s.name + "' has shape " + shape_str(s.shape) + ", expected " +
                         shape_str(dst.shape()));
  }
  ByteReader r(s.data, "tensor " + s.name);
  auto& v = dst.values();
  for (auto& x : v) x = s.dtype == DType::f32 ? static_cast<T>(r.f32()) : static_cast<T>(r.f64());
}

inline Bytes encode_checkpoint(const Checkpoint& c) {
  ByteWriter w;
  w.raw("CHRN", 4);
  w.u32(kCheckpointVersion);
  w.str(c.metadata);
  w.u32(static_cast<std::uint32_t>(c.tensors.size()));
  for (const auto& t : c.tensors) {
    w.str(t.name);
    w.u8(static_cast<std::uint8_t>(t.dtype));
    w.u8(static_cast<std::uint8_t>(t.shape.size()));
    for (std::size_t e : t.shape) w.u64(e);
    w.raw(t.data.data(), t.data.size());
  }
  return w.take();
}

inline Checkpoint decode_checkpoint(const Bytes& b) {
  ByteReader r(b, "checkpoint");
  r.magic("CHRN");
  const std::uint32_t version = r.u32();
  if (version != kCheckpointVersion) throw IoError("checkpoint: unsupported version " + std::to_string(version));
  Checkpoint c;
  c.metadata = r.str();
  const std::uint32_t n = r.u32();
  for (std::uint32_t i = 0; i < n; ++i) {
    StoredTensor t;
    t.name = r.str();
    const std::uint8_t dt = r.u8();
    if (dt > 1) throw IoError("checkpoint: tensor '" + t.name + "' has unknown dtype tag " + std::to_string(dt));
    t.dtype = static_cast<DType>(dt);
    const std::uint8_t rank = r.u8();
    for (std::uint8_t k = 0; k < rank; ++k) t.shape.push_back(r.u64());
    const std::size_t bytes = numel(t.shape) * (t.dtype == DType::f32 ? 4 : 8);
    const std::uint8_t* p = r.raw(bytes);
    t.data.assign(p, p + bytes);
    if (c.find(t.name)) throw IoError("checkpoint: duplicate tensor '" + t.name + "'");
    c.tensors.push_back(std::move(t));
  }
  if (!r.done()) throw IoError("checkpoint: trailing bytes");
  return c;
}

inline void save_checkpoint(const std::filesystem::path& path, const Checkpoint& c) {
  write_file(path, encode_checkpoint(c));
}

inline Checkpoint load_checkpoint(const std::filesystem::path& path) {
  try {
    return decode_checkpoint(read_file(path));
  } catch (const IoError& e) {
    throw IoError(path.string() + ": " + e.what());
  }
}

inline void echo_backbone_config(const BackboneConfig& c, KeyValues& kv) {
  kv["backbone.image_h"] = std::to_string(c.image_h);
  kv["backbone.image_w"] = std::to_string(c.image_w);
  kv["backbone.patch"] = std::to_string(c.patch);
  kv["backbone.dim"] = std::to_string(c.dim);
  kv["backbone.depth"] = std::to_string(c.depth);
  kv["backbone.heads"] = std::to_string(c.heads);
  kv["backbone.mlp_ratio"] = format_real(c.mlp_ratio);
}

inline BackboneConfig backbone_config_from(const KeyValues& kv) {
  BackboneConfig c;
  c.image_h = kv_size(kv, "backbone.image_h");
  c.image_w = kv_size(kv, "backbone.image_w");
  c.patch = kv_size(kv, "backbone.patch");
  c.dim = kv_size(kv, "backbone.dim");
  c.depth = kv_size(kv, "backbone.depth");
  c.heads = kv_size(kv, "backbone.heads");
  c.mlp_ratio = kv_real(kv, "backbone.mlp_ratio");
  return c;
}

inline std::string join_slots(const std::vector<std::size_t>& slots) {
  std::string s;
  for (std::size_t i = 0; i < slots.size(); ++i) s += (i ? "," : "") + std::to_string(slots[i]);
  return s;
}

inline std::vector<std::size_t> parse_slots(const std::string& s) {
  std::vector<std::size_t> out;
  std::istringstream in(s);
  std::string item;
  while (std::getline(in, item, ',')) {
    item = trim(item);
    if (item.empty()) continue;
    std::size_t v = 0;
    auto res = std::from_chars(item.data(), item.data() + item.size(), v);
    if (res.ec != std::errc() || res.ptr != item.data() + item.size()) {
      throw ConfigError("bad slot list '" + s + "'");
    }
    out.push_back(v);
  }
  return out;
}

template <typename T>
void echo_adapter_config(const AdapterSet<T>& a, KeyValues& kv) {
  const AdapterConfig& c = a.config();
  kv["adapter.stride"] = std::to_string(c.stride);
  kv["adapter.window"] = std::to_string(c.window);
  kv["adapter.c_in"] = std::to_string(c.c_in);
  kv["adapter.c_out"] = std::to_string(c.c_out);
  kv["adapter.aggregation"] = std::string(to_string(c.aggregation));
  kv["adapter.placement"] = std::string(to_string(c.placement));
  kv["adapter.slots"] = join_slots(a.slots());
  kv["adapter.temporal_bias"] = c.temporal_bias ? "1" : "0";
}

template <typename T>
Checkpoint make_checkpoint(const Model<T>& model, KeyValues metadata) {
  echo_backbone_config(model.backbone.config(), metadata);
  if (model.adapters) echo_adapter_config(*model.adapters, metadata);
  Checkpoint c;
  c.metadata = format_key_values(metadata);
  for (const auto& p : model.parameters()) c.tensors.push_back(store_tensor(p.name, p.tensor));
  return c;
}

// Rebuilds the model described by the metadata and fills every parameter by
// name. The backbone comes back frozen.
template <typename T>
Model<T> model_from_checkpoint(const Checkpoint& c) {
  const KeyValues kv = parse_key_values(c.metadata, "checkpoint metadata");
  Model<T> m;
  const BackboneConfig bc = backbone_config_from(kv);
  m.backbone = Backbone<T>::init(bc, 0);
  if (kv.count("adapter.aggregation")) {
    AdapterConfig a;
    a.stride = kv_size(kv, "adapter.stride");
    a.window = kv_size(kv, "adapter.window");
    a.c_in = kv_size(kv, "adapter.c_in");
    a.c_out = kv_size(kv, "adapter.c_out");
    a.aggregation = parse_aggregation(kv_get(kv, "adapter.aggregation"));
    a.placement = parse_placement(kv_get(kv, "adapter.placement"));
    const auto slots = parse_slots(kv_get(kv, "adapter.slots"));
    if (a.placement == Placement::explicit_slots) a.slots = slots;
    a.temporal_bias = kv_get(kv, "adapter.temporal_bias") == "1";
    m.adapters = AdapterSet<T>::init(a, bc.depth, bc.grid_h(), bc.grid_w(), 0);
    if (m.adapters->slots() != slots) throw IoError("checkpoint: adapter slots do not match placement");
  }
  auto params = m.parameters();
  for (auto& p : params) {
    const StoredTensor* s = c.find(p.name);
    if (!s) throw IoError("checkpoint is missing tensor '" + p.name + "'");
    load_tensor(*s, p.tensor);
  }
  if (params.size() != c.tensors.size()) {
    for (const auto& t : c.tensors) {
      bool known = false;
      for (const auto& p : params) known = known || p.name == t.name;
      if (!known) throw IoError("checkpoint has unexpected tensor '" + t.name + "'");
    }
  }
  m.backbone.set_frozen(true);
  return m;
}

inline KeyValues checkpoint_metadata(const Checkpoint& c) {
  return parse_key_values(c.metadata, "checkpoint metadata");
}

// ---- dataset ----

inline void encode_spec(ByteWriter& w, const SceneSpec& s) {
  w.u64(s.seed);
  w.u32(s.frames);
  w.u32(s.height);
  w.u32(s.width);
  w.u32(s.sprites);
  w.u32(s.tracks);
  w.f32(s.size_min);
  w.f32(s.size_max);
  w.f32(s.speed_max);
  w.f32(s.spin_max);
  w.f32(s.texture_cell);
  w.u64(s.background_seed);
}

inline SceneSpec decode_spec(ByteReader& r) {
  SceneSpec s;
  s.seed = r.u64();
  s.frames = r.u32();
  s.height = r.u32();
  s.width = r.u32();
  s.sprites = r.u32();
  s.tracks = r.u32();
  s.size_min = r.f32();
  s.size_max = r.f32();
  s.speed_max = r.f32();
  s.spin_max = r.f32();
  s.texture_cell = r.f32();
  s.background_seed = r.u64();
  return s;
}

inline Bytes encode_dataset(const Dataset& d) {
  ByteWriter w;
  w.raw("CHRD", 4);
  w.u32(kDatasetVersion);
  w.u32(static_cast<std::uint32_t>(d.clips.size()));
  for (const Clip& c : d.clips) {
    encode_spec(w, c.spec);
    w.raw(c.video.pixels.data(), c.video.pixels.size());
    w.u32(static_cast<std::uint32_t>(c.tracks.size()));
    for (const auto& t : c.tracks) {
      for (const auto& p : t.positions) {
        w.f32(static_cast<float>(p.x));
        w.f32(static_cast<float>(p.y));
      }
      w.raw(t.visible.data(), t.visible.size());
      w.i32(t.sprite);
      w.f32(static_cast<float>(t.local.x));
      w.f32(static_cast<float>(t.local.y));
    }
  }
  return w.take();
}

inline Dataset decode_dataset(const Bytes& b) {
  ByteReader r(b, "dataset");
  r.magic("CHRD");
  const std::uint32_t version = r.u32();
  if (version != kDatasetVersion) throw IoError("dataset: unsupported version " + std::to_string(version));
  Dataset d;
  const std::uint32_t n = r.u32();
  for (std::uint32_t i = 0; i < n; ++i) {
    Clip c;
    c.spec = decode_spec(r);
    c.video.frames = c.spec.frames;
    c.video.height = c.spec.height;
    c.video.width = c.spec.width;
    const std::size_t npix = c.video.frames * c.video.height * c.video.width * 3;
    const std::uint8_t* p = r.raw(npix);
    c.video.pixels.assign(p, p + npix);
    const std::uint32_t nt = r.u32();
    for (std::uint32_t k = 0; k < nt; ++k) {
      GroundTruthTrack t;
      for (std::size_t f = 0; f < c.video.frames; ++f) {
        const double x = r.f32(), y = r.f32();
        if (!std::isfinite(x) || !std::isfinite(y)) throw IoError("dataset: non-finite track position");
        t.positions.push_back({x, y});
      }
      const std::uint8_t* v = r.raw(c.video.frames);
      t.visible.assign(v, v + c.video.frames);
      t.sprite = r.i32();
      t.local.x = r.f32();
      t.local.y = r.f32();
      c.tracks.push_back(std::move(t));
    }
    d.clips.push_back(std::move(c));
  }
  if (!r.done()) throw IoError("dataset: trailing bytes");
  return d;
}

inline void save_dataset(const std::filesystem::path& path, const Dataset& d) { write_file(path, encode_dataset(d)); }

inline Dataset load_dataset(const std::filesystem::path& path) {
  try {
    return decode_dataset(read_file(path));
  } catch (const IoError& e) {
    throw IoError(path.string() + ": " + e.what());
  }
}

// ---- trajectories ----
//
//   chronotrack-trajectories 1
//   clip <id>
//   mode <mode>
//   frames <T>
//   queries <Q>
//   query <t_q> <x_q> <y_q>     then T lines "<t> <x> <y>", repeated Q times

struct TrajectoryFile {
  std::size_t clip = 0;
  std::string mode;
  std::size_t frames = 0;
  std::vector<TrackPrediction> tracks;
};

inline std::string format_trajectories(const TrajectoryFile& f) {
  std::string s = "chronotrack-trajectories 1\n";
  s += "clip " + std::to_string(f.clip) + "\n";
  s += "mode " + f.mode + "\n";
  s += "frames " + std::to_string(f.frames) + "\n";
  s += "queries " + std::to_string(f.tracks.size()) + "\n";
  for (const auto& tr : f.tracks) {
    if (tr.positions.size() != f.frames) throw DimensionError("trajectory record length differs from frame count");
    s += "query " + std::to_string(tr.query.t) + " " + format_real(tr.query.x) + " " + format_real(tr.query.y) + "\n";
    for (std::size_t t = 0; t < tr.positions.size(); ++t) {
      s += std::to_string(t) + " " + format_real(tr.positions[t].x) + " " + format_real(tr.positions[t].y) + "\n";
    }
  }
  return s;
}

inline TrajectoryFile parse_trajectories(const std::string& text) {
  std::istringstream in(text);
  TrajectoryFile f;
  std::string word, magic;
  std::size_t version = 0, nq = 0;
  auto fail = [](const std::string& why) { throw IoError("trajectory file: " + why); };
  if (!(in >> magic >> version) || magic != "chronotrack-trajectories" || version != 1) fail("bad header");
  if (!(in >> word >> f.clip) || word != "clip") fail("expected 'clip'");
  if (!(in >> word >> f.mode) || word != "mode") fail("expected 'mode'");
  if (!(in >> word >> f.frames) || word != "frames") fail("expected 'frames'");
  if (!(in >> word >> nq) || word != "queries") fail("expected 'queries'");
  auto real = [&](double& v) {
    std::string tok;
    if (!(in >> tok) || !parse_real(tok, v)) fail("bad number");
  };
  for (std::size_t i = 0; i < nq; ++i) {
    TrackPrediction tr;
    if (!(in >> word >> tr.query.t) || word != "query") fail("expected 'query' record " + std::to_string(i));
    real(tr.query.x);
    real(tr.query.y);
    for (std::size_t t = 0; t < f.frames; ++t) {
      std::size_t tt = 0;
      Vec2 p;
      if (!(in >> tt) || tt != t) fail("expected frame line " + std::to_string(t));
      real(p.x);
      real(p.y);
      tr.positions.push_back(p);
    }
    f.tracks.push_back(std::move(tr));
  }
  if (in >> word) fail("trailing content");
  return f;
}

// Query list: one "t x y" per line, '#' comments. A trajectory file is also
// accepted, in which case its query records are used.
inline std::vector<QueryPoint> parse_queries(const std::string& text) {
  if (text.rfind("chronotrack-trajectories", 0) == 0) {
    std::vector<QueryPoint> qs;
    for (const auto& tr : parse_trajectories(text).tracks) qs.push_back(tr.query);
    return qs;
  }
  std::vector<QueryPoint> out;
  std::istringstream in(text);
  std::string line;
  std::size_t n = 0;
  while (std::getline(in, line)) {
    ++n;
    const auto hash = line.find('#');
    if (hash != std::string::npos) line.resize(hash);
    std::istringstream ls(line);
    std::string a, b, c, extra;
    if (!(ls >> a)) continue;
    QueryPoint q;
    if (!(ls >> b >> c) || (ls >> extra)) throw IoError("queries:" + std::to_string(n) + ": expected 't x y'");
    std::size_t t = 0;
    auto res = std::from_chars(a.data(), a.data() + a.size(), t);
    if (res.ec != std::errc() || res.ptr != a.data() + a.size() || !parse_real(b, q.x) || !parse_real(c, q.y)) {
      throw IoError("queries:" + std::to_string(n) + ": expected 't x y'");
    }
    q.t = t;
    out.push_back(q);
  }
  return out;
}

}  // namespace chronotrack
