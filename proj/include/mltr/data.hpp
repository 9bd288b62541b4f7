#pragma once

// Synthetic multi-label data: parametric colored glyphs placed on a canvas,
// engineered so small objects, near-identical class pairs, and strongly
// co-occurring pairs all appear at desk scale. Also: cutout augmentation,
// dataset persistence (manifest + raw tensors), a COCO-style annotation
// reader, and the seeded train/val split.

#include <algorithm>
#include <array>
#include <cstdint>
#include <filesystem>
#include <fstream>
#include <functional>
#include <map>
#include <set>
#include <sstream>
#include <string>
#include <vector>

#include <json.hpp>

#include "mltr/image_io.hpp"
#include "mltr/tensor.hpp"

namespace mltr {

enum class SizeTier { kSmall, kMedium, kLarge };

enum class GlyphKind { kDisk, kRing, kSquare, kFrame, kTriangle, kPlus, kCross, kBars };

struct CoOccurrence {
  std::size_t trigger = 0;  // a
  std::size_t target = 0;   // b
  double prob = 0.0;        // P(b present | a present)
};

/// Specification of the synthetic generator. Rendering is a pure function of
/// (spec, count): per-sample RNG streams derive from (seed, index).
struct SynthSpec {
  std::size_t n_classes = 8;
  std::size_t canvas = 32;
  std::uint64_t seed = 1;
  double base_rate = 0.35;
  double noise_std = 0.0;
  std::size_t instances_min = 1, instances_max = 1;
  std::vector<SizeTier> tiers;                    // per class; cycled defaults
  std::vector<std::pair<std::size_t, std::size_t>> similar_pairs;
  std::vector<CoOccurrence> cooccurrence;

  SizeTier tier_of(std::size_t cls) const {
    if (cls < tiers.size()) return tiers[cls];
    switch (cls % 3) {
      case 0: return SizeTier::kSmall;
      case 1: return SizeTier::kMedium;
      default: return SizeTier::kLarge;
    }
  }

  GlyphKind glyph_of(std::size_t cls) const {
    for (auto [a, b] : similar_pairs)
      if (cls == b) return static_cast<GlyphKind>(a % 8);
    return static_cast<GlyphKind>(cls % 8);
  }

  /// Distinct hue per class; a similar pair shares its base color, with the
  /// copy blended 30% toward white as the single distinguishing attribute.
  std::array<double, 3> color_of(std::size_t cls) const {
    auto hsv = [](double hue) {
      double h6 = hue * 6.0;
      int i = static_cast<int>(h6) % 6;
      double f = h6 - static_cast<int>(h6);
      double v = 0.9, s = 0.9;
      double p = v * (1 - s), q = v * (1 - s * f), t = v * (1 - s * (1 - f));
      switch (i) {
        case 0: return std::array<double, 3>{v, t, p};
        case 1: return std::array<double, 3>{q, v, p};
        case 2: return std::array<double, 3>{p, v, t};
        case 3: return std::array<double, 3>{p, q, v};
        case 4: return std::array<double, 3>{t, p, v};
        default: return std::array<double, 3>{v, p, q};
      }
    };
    for (auto [a, b] : similar_pairs)
      if (cls == b) {
        auto base = hsv(double(a) / double(n_classes));
        for (auto& c : base) c = 0.7 * c + 0.3;
        return base;
      }
    return hsv(double(cls) / double(n_classes));
  }

  std::pair<std::size_t, std::size_t> tier_range(SizeTier tier) const {
    // Small glyphs stay under 1% of the canvas area.
    std::size_t small_hi = std::max<std::size_t>(3, canvas / 12);
    switch (tier) {
      case SizeTier::kSmall: return {3, small_hi};
      case SizeTier::kMedium:
        return {std::max<std::size_t>(4, canvas / 8), std::max<std::size_t>(5, canvas / 5)};
      default:
        return {std::max<std::size_t>(6, canvas / 4), std::max<std::size_t>(7, canvas / 3)};
    }
  }

  void validate() const {
    if (n_classes == 0 || canvas < 8) throw ConfigError("synthetic spec: need classes and canvas >= 8");
    if (instances_min == 0 || instances_max < instances_min)
      throw ConfigError("synthetic spec: bad instance range");
    std::set<std::size_t> targets;
    for (const auto& co : cooccurrence) {
      if (co.trigger >= n_classes || co.target >= n_classes || co.trigger == co.target)
        throw ConfigError("co-occurrence pair out of range");
      if (co.prob < 0 || co.prob > 1) throw ConfigError("co-occurrence prob must be in [0,1]");
      if (!targets.insert(co.target).second)
        throw ConfigError("a class may be the target of at most one co-occurrence rule");
    }
    // Reject cycles: repeatedly peel classes with no unresolved trigger.
    std::map<std::size_t, std::size_t> parent;
    for (const auto& co : cooccurrence) parent[co.target] = co.trigger;
    for (auto [tgt, trg] : parent) {
      std::size_t cur = trg;
      std::size_t steps = 0;
      while (parent.count(cur)) {
        cur = parent.at(cur);
        if (++steps > parent.size()) throw ConfigError("co-occurrence rules form a cycle");
      }
    }
    for (auto [a, b] : similar_pairs)
      if (a >= n_classes || b >= n_classes || a == b)
        throw ConfigError("similar pair out of range");
  }
};

struct Sample {
  Tensor image;                     // [3,H,W] in [0,1]
  std::vector<std::uint8_t> labels; // multi-hot, length n_classes
  std::size_t z = 0;                // distinct-class count

  Tensor label_tensor() const {
    Tensor y({labels.size()});
    for (std::size_t j = 0; j < labels.size(); ++j) y.data()[j] = labels[j] ? 1.0 : 0.0;
    return y;
  }
};

struct Dataset {
  std::size_t n_classes = 0;
  std::size_t canvas = 0;
  std::vector<Sample> samples;
};

namespace detail {

struct Box {
  std::size_t r0, q0, side;
  bool overlaps_too_much(const Box& other, double max_frac) const {
    std::size_t r1 = r0 + side, q1 = q0 + side;
    std::size_t or1 = other.r0 + other.side, oq1 = other.q0 + other.side;
    std::size_t rlo = std::max(r0, other.r0), rhi = std::min(r1, or1);
    std::size_t qlo = std::max(q0, other.q0), qhi = std::min(q1, oq1);
    if (rhi <= rlo || qhi <= qlo) return false;
    double inter = double(rhi - rlo) * double(qhi - qlo);
    double smaller = double(std::min(side * side, other.side * other.side));
    return inter / smaller > max_frac;
  }
};

inline bool glyph_mask(GlyphKind kind, std::size_t side, std::size_t y, std::size_t x) {
  double s = double(side);
  double cy = (s - 1) / 2, cx = (s - 1) / 2;
  double dy = y - cy, dx = x - cx;
  double r = s / 2 - 0.1;
  double thick = std::max(0.6, s / 6.0);
  switch (kind) {
    case GlyphKind::kDisk: return dy * dy + dx * dx <= r * r;
    case GlyphKind::kRing: {
      double inner = std::max(0.4, r - std::max(1.0, s / 4.0));
      double d2 = dy * dy + dx * dx;
      return d2 <= r * r && d2 >= inner * inner;
    }
    case GlyphKind::kSquare: return true;
    case GlyphKind::kFrame: {
      std::size_t t = std::max<std::size_t>(1, side / 5);
      return y < t || y >= side - t || x < t || x >= side - t;
    }
    case GlyphKind::kTriangle: return std::abs(dx) <= (double(y) + 0.5) / 2.0;
    case GlyphKind::kPlus: return std::abs(dx) <= thick || std::abs(dy) <= thick;
    case GlyphKind::kCross:
      return std::abs(double(y) - double(x)) <= thick ||
             std::abs(double(y) + double(x) - (s - 1)) <= thick;
    case GlyphKind::kBars:
      return (y >= side / 5 && y < 2 * side / 5) || (y >= 3 * side / 5 && y < 4 * side / 5);
  }
  return false;
}

}  // namespace detail

/// Presence sampling: classes without an incoming co-occurrence rule draw from
/// the base rate; a rule (a -> b, p) makes P(b | a present) exactly p and
/// P(b | a absent) the base rate.
inline std::vector<std::uint8_t> sample_presence(const SynthSpec& spec, Rng& rng) {
  std::vector<std::uint8_t> present(spec.n_classes, 0);
  std::map<std::size_t, const CoOccurrence*> rule_for;
  for (const auto& co : spec.cooccurrence) rule_for[co.target] = &co;

  std::vector<std::uint8_t> decided(spec.n_classes, 0);
  // Triggers resolve before targets; rules are acyclic by validation.
  std::function<void(std::size_t)> decide = [&](std::size_t cls) {
    if (decided[cls]) return;
    decided[cls] = 1;  // mark first: cycle guard
    auto it = rule_for.find(cls);
    if (it == rule_for.end()) {
      present[cls] = rng.uniform() < spec.base_rate ? 1 : 0;
      return;
    }
    decide(it->second->trigger);
    double p = present[it->second->trigger] ? it->second->prob : spec.base_rate;
    present[cls] = rng.uniform() < p ? 1 : 0;
  };
  for (std::size_t cls = 0; cls < spec.n_classes; ++cls) decide(cls);
  return present;
}

/// Renders one sample. Returns false when placement failed and the sample
/// should be redrawn from a fresh stream.
inline bool render_sample(const SynthSpec& spec, Rng& rng, Sample& out) {
  std::size_t n = spec.canvas;
  out.image = Tensor({3, n, n}, 0.0);
  out.labels.assign(spec.n_classes, 0);

  std::vector<std::uint8_t> present = sample_presence(spec, rng);
  std::vector<detail::Box> placed;

  // Large glyphs first so small ones can still find room.
  std::vector<std::size_t> order;
  for (std::size_t cls = 0; cls < spec.n_classes; ++cls)
    if (present[cls]) order.push_back(cls);
  std::stable_sort(order.begin(), order.end(), [&](std::size_t a, std::size_t b) {
    return spec.tier_range(spec.tier_of(a)).second > spec.tier_range(spec.tier_of(b)).second;
  });

  for (std::size_t cls : order) {
    auto [lo, hi] = spec.tier_range(spec.tier_of(cls));
    std::size_t instances =
        spec.instances_min +
        std::size_t(rng.uniform_int(0, long(spec.instances_max - spec.instances_min)));
    for (std::size_t inst = 0; inst < instances; ++inst) {
      std::size_t side = lo + std::size_t(rng.uniform_int(0, long(hi - lo)));
      side = std::min(side, n - 1);
      bool ok = false;
      for (int attempt = 0; attempt < 100 && !ok; ++attempt) {
        detail::Box box{std::size_t(rng.uniform_int(0, long(n - side))),
                        std::size_t(rng.uniform_int(0, long(n - side))), side};
        ok = true;
        for (const auto& other : placed)
          if (box.overlaps_too_much(other, 0.25)) {
            ok = false;
            break;
          }
        if (!ok) continue;
        placed.push_back(box);
        auto color = spec.color_of(cls);
        for (std::size_t y = 0; y < side; ++y)
          for (std::size_t x = 0; x < side; ++x)
            if (detail::glyph_mask(spec.glyph_of(cls), side, y, x))
              for (std::size_t c = 0; c < 3; ++c)
                out.image.data()[(c * n + box.r0 + y) * n + box.q0 + x] = color[c];
      }
      if (!ok && inst == 0) return false;  // class could not be drawn at all
    }
    out.labels[cls] = 1;
  }

  if (spec.noise_std > 0)
    for (auto& v : out.image.data())
      v = std::min(1.0, std::max(0.0, v + rng.normal(0, spec.noise_std)));

  out.z = 0;
  for (auto b : out.labels) out.z += b;
  return true;
}

/// Deterministic synthetic dataset: sample i comes from RNG stream (seed, i);
/// infeasible placements are skipped and redrawn from sub-streams, logged.
inline Dataset generate(const SynthSpec& spec, std::size_t count) {
  spec.validate();
  Dataset ds;
  ds.n_classes = spec.n_classes;
  ds.canvas = spec.canvas;
  ds.samples.resize(count);
  for (std::size_t i = 0; i < count; ++i) {
    bool done = false;
    for (std::uint64_t attempt = 0; attempt < 20 && !done; ++attempt) {
      Rng rng = Rng::stream(spec.seed, i * 32 + attempt);
      done = render_sample(spec, rng, ds.samples[i]);
      if (!done)
        MLTR_LOG_INFO("sample %zu: placement infeasible, resampling (attempt %llu)", i,
                      static_cast<unsigned long long>(attempt + 1));
    }
    if (!done) throw DataError(strfmt("sample %zu: placement infeasible after retries", i));
  }
  return ds;
}

/// Zeroes one random size x size square, fully inside the canvas.
template <class S>
TensorT<S> cutout(const TensorT<S>& image, std::size_t size, std::uint64_t seed) {
  if (image.ndim() != 3) throw ShapeError("cutout expects [3,H,W]");
  std::size_t h = image.shape()[1], w = image.shape()[2];
  if (size > h || size > w) throw ConfigError("cutout size exceeds the canvas");
  TensorT<S> out(image.shape(), image.data());
  if (size == 0) return out;
  Rng rng(seed);
  std::size_t r0 = std::size_t(rng.uniform_int(0, long(h - size)));
  std::size_t q0 = std::size_t(rng.uniform_int(0, long(w - size)));
  for (std::size_t c = 0; c < image.shape()[0]; ++c)
    for (std::size_t r = r0; r < r0 + size; ++r)
      for (std::size_t q = q0; q < q0 + size; ++q)
        out.data()[(c * h + r) * w + q] = S(0);
  return out;
}

// ---------------------------------------------------------------------------
// Persistence: manifest + one raw tensor file per sample.
// ---------------------------------------------------------------------------

namespace detail {

// On disk, tensor payloads are always little-endian f64 whatever the build's
// scalar type is.
inline void write_tensor_file(const std::string& path, const Tensor& t) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw DataError("cannot write " + path);
  out.write("MLTEN1\n", 7);
  std::uint32_t nd = static_cast<std::uint32_t>(t.ndim());
  out.write(reinterpret_cast<const char*>(&nd), 4);
  for (auto d : t.shape()) {
    std::uint64_t v = d;
    out.write(reinterpret_cast<const char*>(&v), 8);
  }
  std::vector<double> payload(t.data().begin(), t.data().end());
  out.write(reinterpret_cast<const char*>(payload.data()),
            static_cast<std::streamsize>(payload.size() * sizeof(double)));
}

inline Tensor read_tensor_file(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw DataError("cannot read " + path);
  char magic[7];
  in.read(magic, 7);
  if (!in || std::memcmp(magic, "MLTEN1\n", 7) != 0)
    throw DataError("bad tensor file magic in " + path);
  std::uint32_t nd = 0;
  in.read(reinterpret_cast<char*>(&nd), 4);
  Shape shape(nd);
  for (auto& d : shape) {
    std::uint64_t v = 0;
    in.read(reinterpret_cast<char*>(&v), 8);
    d = static_cast<std::size_t>(v);
  }
  std::vector<double> payload(shape_size(shape));
  in.read(reinterpret_cast<char*>(payload.data()),
          static_cast<std::streamsize>(payload.size() * sizeof(double)));
  if (!in) throw DataError("truncated tensor file " + path);
  Tensor t(shape);
  for (std::size_t i = 0; i < payload.size(); ++i) t.data()[i] = real_t(payload[i]);
  return t;
}

}  // namespace detail

/// Layout: <dir>/manifest.txt with `key value` header lines, then one line per
/// sample: `<file> <z> <y_0> ... <y_{n-1}>`; images live in MLTEN1 raw tensor
/// files beside it.
inline void save_dataset(const std::string& dir, const Dataset& ds) {
  namespace fs = std::filesystem;
  fs::create_directories(dir);
  std::ofstream manifest(dir + "/manifest.txt");
  if (!manifest) throw DataError("cannot write manifest in " + dir);
  manifest << "mltr-synth 1\n";
  manifest << "n_classes " << ds.n_classes << "\n";
  manifest << "canvas " << ds.canvas << "\n";
  manifest << "count " << ds.samples.size() << "\n";
  manifest << "samples:\n";
  for (std::size_t i = 0; i < ds.samples.size(); ++i) {
    std::string name = strfmt("sample_%05zu.ten", i);
    detail::write_tensor_file(dir + "/" + name, ds.samples[i].image);
    manifest << name << " " << ds.samples[i].z;
    for (auto b : ds.samples[i].labels) manifest << " " << int(b);
    manifest << "\n";
  }
}

inline Dataset load_dataset(const std::string& dir) {
  std::ifstream manifest(dir + "/manifest.txt");
  if (!manifest) throw DataError("no manifest.txt in " + dir);
  std::string tag;
  int version;
  manifest >> tag >> version;
  if (tag != "mltr-synth" || version != 1) throw DataError("unknown manifest format in " + dir);
  Dataset ds;
  std::string key;
  std::size_t count = 0;
  while (manifest >> key) {
    if (key == "n_classes") manifest >> ds.n_classes;
    else if (key == "canvas") manifest >> ds.canvas;
    else if (key == "count") manifest >> count;
    else if (key == "samples:") break;
    else throw DataError("unknown manifest key '" + key + "'");
  }
  ds.samples.resize(count);
  for (std::size_t i = 0; i < count; ++i) {
    std::string file;
    manifest >> file >> ds.samples[i].z;
    ds.samples[i].labels.resize(ds.n_classes);
    for (auto& b : ds.samples[i].labels) {
      int v;
      manifest >> v;
      b = static_cast<std::uint8_t>(v);
    }
    if (!manifest) throw DataError("truncated manifest in " + dir);
    ds.samples[i].image = detail::read_tensor_file(dir + "/" + file);
  }
  return ds;
}

// ---------------------------------------------------------------------------
// COCO-style annotation reader.
// ---------------------------------------------------------------------------

struct LoadReport {
  std::vector<std::string> issues;
  std::size_t loaded = 0, skipped = 0;
};

/// Reads `{"images":[{id,file_name}], "annotations":[{image_id,category_id}],
/// "categories":[{id,...}]}`. Category ids map to class indices in ascending
/// id order. Images are resized (bilinear) to `resolution` and scaled to
/// [0,1]. Non-strict mode skips problem records and itemizes them in the
/// report; strict mode throws a DataError carrying the same list.
inline Dataset load_annotations(const std::string& images_dir,
                                const std::string& annotation_file,
                                std::size_t resolution, bool strict,
                                LoadReport* report = nullptr) {
  LoadReport local;
  LoadReport& rep = report ? *report : local;

  std::ifstream in(annotation_file);
  if (!in) throw DataError("cannot open annotation file " + annotation_file);
  nlohmann::json doc;
  try {
    in >> doc;
  } catch (const nlohmann::json::exception& e) {
    throw DataError(strfmt("malformed annotation JSON: %s", e.what()));
  }

  std::vector<long long> cat_ids;
  for (const auto& cat : doc.value("categories", nlohmann::json::array())) {
    if (!cat.contains("id")) {
      rep.issues.push_back("category without id");
      continue;
    }
    cat_ids.push_back(cat["id"].get<long long>());
  }
  std::sort(cat_ids.begin(), cat_ids.end());
  cat_ids.erase(std::unique(cat_ids.begin(), cat_ids.end()), cat_ids.end());
  std::map<long long, std::size_t> cat_index;
  for (std::size_t i = 0; i < cat_ids.size(); ++i) cat_index[cat_ids[i]] = i;

  std::map<long long, std::vector<std::size_t>> image_classes;
  for (const auto& ann : doc.value("annotations", nlohmann::json::array())) {
    if (!ann.contains("image_id") || !ann.contains("category_id")) {
      rep.issues.push_back("malformed annotation record: " + ann.dump());
      continue;
    }
    long long cat = ann["category_id"].get<long long>();
    auto it = cat_index.find(cat);
    if (it == cat_index.end()) {
      rep.issues.push_back(strfmt("unknown category id %lld", cat));
      continue;
    }
    image_classes[ann["image_id"].get<long long>()].push_back(it->second);
  }

  Dataset ds;
  ds.n_classes = cat_ids.size();
  ds.canvas = resolution;
  for (const auto& img : doc.value("images", nlohmann::json::array())) {
    if (!img.contains("id") || !img.contains("file_name")) {
      rep.issues.push_back("malformed image record: " + img.dump());
      ++rep.skipped;
      continue;
    }
    std::string path = images_dir + "/" + img["file_name"].get<std::string>();
    Sample sample;
    try {
      Tensor raw = image_to_tensor(read_image(path));
      sample.image = resize_bilinear(raw, resolution, resolution);
    } catch (const DataError& e) {
      rep.issues.push_back(e.what());
      ++rep.skipped;
      continue;
    }
    sample.labels.assign(ds.n_classes, 0);
    auto it = image_classes.find(img["id"].get<long long>());
    if (it != image_classes.end())
      for (std::size_t cls : it->second) sample.labels[cls] = 1;  // duplicates idempotent
    sample.z = 0;
    for (auto b : sample.labels) sample.z += b;
    ds.samples.push_back(std::move(sample));
    ++rep.loaded;
  }

  if (strict && !rep.issues.empty()) {
    std::string msg = "annotation load found problems:";
    for (const auto& issue : rep.issues) msg += "\n  - " + issue;
    throw DataError(msg);
  }
  return ds;
}

/// Seeded 90/10-style split by per-index hash; independent of sample order.
inline void split_indices(std::size_t count, double val_fraction, std::uint64_t seed,
                          std::vector<std::size_t>& train, std::vector<std::size_t>& val) {
  train.clear();
  val.clear();
  for (std::size_t i = 0; i < count; ++i) {
    if (Rng::stream(seed, i).uniform() < val_fraction)
      val.push_back(i);
    else
      train.push_back(i);
  }
}

}  // namespace mltr
