#include "sgba/datasets.hpp"

#include <zlib.h>

#include <algorithm>
#include <cmath>
#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <map>
#include <numeric>
#include <random>
#include <sstream>

namespace sgba::data {

namespace fs = std::filesystem;

namespace {

struct Registered {
  Shape shape;
  int classes;
};

const std::map<std::string, Registered>& registry() {
  static const std::map<std::string, Registered> reg = {
      {"mnist", {{28, 28, 1}, 10}},
      {"cifar10", {{32, 32, 3}, 10}},
      {"gtsrb", {{32, 32, 3}, 43}},
      {"synthetic", {{28, 28, 1}, 10}},
  };
  return reg;
}

std::string lower(std::string s) {
  std::transform(s.begin(), s.end(), s.begin(), [](unsigned char c) { return std::tolower(c); });
  return s;
}

// gzopen reads plain and gzip-compressed files alike.
std::vector<unsigned char> read_maybe_gz(const std::string& path) {
  std::string actual = path;
  if (!fs::exists(actual) && fs::exists(path + ".gz")) actual = path + ".gz";
  if (!fs::exists(actual)) {
    throw Error(ErrorCode::kDataUnavailable, "missing data file: " + path + " (fetch the dataset)");
  }
  gzFile f = gzopen(actual.c_str(), "rb");
  if (!f) throw Error(ErrorCode::kDataUnavailable, "cannot open data file: " + actual);
  std::vector<unsigned char> out;
  unsigned char buf[1 << 16];
  int n;
  while ((n = gzread(f, buf, sizeof buf)) > 0) out.insert(out.end(), buf, buf + n);
  gzclose(f);
  if (n < 0) throw Error(ErrorCode::kDataUnavailable, "corrupt data file: " + actual);
  return out;
}

std::uint32_t be32(const unsigned char* p) {
  return (std::uint32_t{p[0]} << 24) | (std::uint32_t{p[1]} << 16) | (std::uint32_t{p[2]} << 8) | p[3];
}

// --- synthetic shapes -------------------------------------------------------------

float seg_dist(float px, float py, float ax, float ay, float bx, float by) {
  const float vx = bx - ax, vy = by - ay;
  const float wx = px - ax, wy = py - ay;
  const float len2 = vx * vx + vy * vy;
  const float t = len2 > 0 ? std::clamp((wx * vx + wy * vy) / len2, 0.f, 1.f) : 0.f;
  const float dx = px - (ax + t * vx), dy = py - (ay + t * vy);
  return std::sqrt(dx * dx + dy * dy);
}

// Distance from (x, y) to the stroke skeleton of class `label`, in a frame centered
// on the shape with scale s.
float shape_dist(int label, float x, float y, float s) {
  auto seg = [&](float ax, float ay, float bx, float by) {
    return seg_dist(x, y, ax * s, ay * s, bx * s, by * s);
  };
  const float r = std::sqrt(x * x + y * y);
  switch (label) {
    case 0: return std::abs(r - 7.f * s);  // ring
    case 1: return seg(0, -8, 0, 8);       // vertical bar
    case 2: return seg(-8, 0, 8, 0);       // horizontal bar
    case 3:                                 // square outline
      return std::min({seg(-6, -6, 6, -6), seg(6, -6, 6, 6), seg(6, 6, -6, 6), seg(-6, 6, -6, -6)});
    case 4: {                               // filled square
      const float e = 4.f * s;
      const float dx = std::max(std::abs(x) - e, 0.f), dy = std::max(std::abs(y) - e, 0.f);
      return std::sqrt(dx * dx + dy * dy);
    }
    case 5: return std::min(seg(0, -8, 0, 8), seg(-8, 0, 8, 0));    // plus
    case 6: return std::min(seg(-6, -6, 6, 6), seg(-6, 6, 6, -6));  // diagonal cross
    case 7:                                                         // triangle
      return std::min({seg(0, -7, 7, 6), seg(7, 6, -7, 6), seg(-7, 6, 0, -7)});
    case 8: {                                                       // two dots
      const float d1 = std::sqrt((x + 5 * s) * (x + 5 * s) + y * y) - 2.5f * s;
      const float d2 = std::sqrt((x - 5 * s) * (x - 5 * s) + y * y) - 2.5f * s;
      return std::max(std::min(d1, d2), 0.f);
    }
    default:                                                        // L shape
      return std::min(seg(-5, -8, -5, 7), seg(-5, 7, 6, 7));
  }
}

}  // namespace

LabeledImages make_synthetic(int count, std::uint64_t seed) {
  LabeledImages out;
  out.shape = {28, 28, 1};
  out.pixels.reserve(static_cast<std::size_t>(count) * 784);
  std::mt19937_64 rng(seed);
  std::uniform_real_distribution<float> u01(0.f, 1.f);
  std::vector<float> img(784);
  for (int i = 0; i < count; ++i) {
    const int label = i % 10;
    const float cx = 13.5f + (u01(rng) - 0.5f) * 6.f;
    const float cy = 13.5f + (u01(rng) - 0.5f) * 6.f;
    const float scale = 0.85f + 0.3f * u01(rng);
    const float ink = 0.7f + 0.3f * u01(rng);
    const float thick = 1.0f + 0.6f * u01(rng);
    const float noise = 0.1f + 0.15f * u01(rng);
    for (int r = 0; r < 28; ++r) {
      for (int c = 0; c < 28; ++c) {
        const float d = shape_dist(label, c - cx, r - cy, scale);
        const float stroke = std::clamp(thick - d + 0.5f, 0.f, 1.f);
        const float bg = noise * u01(rng);
        img[r * 28 + c] = std::clamp(bg + stroke * ink, 0.f, 1.f);
      }
    }
    out.push_back(img, label);
  }
  // Interleaved labels are shuffled so index order carries no class information.
  std::vector<std::size_t> perm(count);
  std::iota(perm.begin(), perm.end(), 0);
  std::shuffle(perm.begin(), perm.end(), rng);
  return out.subset(perm);
}

LabeledImages read_idx(const std::string& images_path, const std::string& labels_path) {
  const auto img = read_maybe_gz(images_path);
  const auto lab = read_maybe_gz(labels_path);
  if (img.size() < 16 || be32(img.data()) != 0x00000803) {
    throw Error(ErrorCode::kDataUnavailable, "bad IDX image header: " + images_path);
  }
  if (lab.size() < 8 || be32(lab.data()) != 0x00000801) {
    throw Error(ErrorCode::kDataUnavailable, "bad IDX label header: " + labels_path);
  }
  const std::uint32_t n = be32(img.data() + 4), h = be32(img.data() + 8), w = be32(img.data() + 12);
  if (be32(lab.data() + 4) != n || img.size() < 16 + std::size_t{n} * h * w || lab.size() < 8 + n) {
    throw Error(ErrorCode::kDataUnavailable, "IDX image/label files disagree: " + images_path);
  }
  LabeledImages out;
  out.shape = {static_cast<int>(h), static_cast<int>(w), 1};
  out.pixels.resize(std::size_t{n} * h * w);
  for (std::size_t k = 0; k < out.pixels.size(); ++k) out.pixels[k] = img[16 + k] / 255.0f;
  out.labels.assign(lab.begin() + 8, lab.begin() + 8 + n);
  return out;
}

LabeledImages read_cifar_batches(const std::vector<std::string>& paths) {
  LabeledImages out;
  out.shape = {32, 32, 3};
  constexpr std::size_t kRecord = 1 + 3072;
  std::vector<float> img(3072);
  for (const auto& p : paths) {
    const auto bytes = read_maybe_gz(p);
    if (bytes.size() % kRecord != 0) throw Error(ErrorCode::kDataUnavailable, "bad CIFAR batch: " + p);
    for (std::size_t off = 0; off < bytes.size(); off += kRecord) {
      const unsigned char* rec = bytes.data() + off;
      // stored planar RGB; convert to HWC
      for (int c = 0; c < 3; ++c) {
        for (int k = 0; k < 1024; ++k) img[k * 3 + c] = rec[1 + c * 1024 + k] / 255.0f;
      }
      out.push_back(img, rec[0]);
    }
  }
  return out;
}

std::vector<float> resize_bilinear(const std::vector<float>& src, Shape from, Shape to) {
  if (from.channels != to.channels || src.size() != from.size()) {
    throw Error(ErrorCode::kShapeMismatch, "resize shape mismatch");
  }
  std::vector<float> dst(to.size());
  const float sy = static_cast<float>(from.height) / to.height;
  const float sx = static_cast<float>(from.width) / to.width;
  for (int r = 0; r < to.height; ++r) {
    const float fy = std::clamp((r + 0.5f) * sy - 0.5f, 0.f, from.height - 1.f);
    const int y0 = static_cast<int>(fy), y1 = std::min(y0 + 1, from.height - 1);
    const float ty = fy - y0;
    for (int c = 0; c < to.width; ++c) {
      const float fx = std::clamp((c + 0.5f) * sx - 0.5f, 0.f, from.width - 1.f);
      const int x0 = static_cast<int>(fx), x1 = std::min(x0 + 1, from.width - 1);
      const float tx = fx - x0;
      for (int ch = 0; ch < to.channels; ++ch) {
        auto at = [&](int y, int x) { return src[(static_cast<std::size_t>(y) * from.width + x) * from.channels + ch]; };
        const float top = at(y0, x0) * (1 - tx) + at(y0, x1) * tx;
        const float bot = at(y1, x0) * (1 - tx) + at(y1, x1) * tx;
        dst[(static_cast<std::size_t>(r) * to.width + c) * to.channels + ch] = top * (1 - ty) + bot * ty;
      }
    }
  }
  return dst;
}

namespace {

std::vector<float> read_ppm(const fs::path& path, Shape& shape) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw Error(ErrorCode::kDataUnavailable, "cannot open " + path.string());
  std::string magic;
  in >> magic;
  auto next_int = [&]() {
    int v;
    while (in >> std::ws && in.peek() == '#') {
      std::string skip;
      std::getline(in, skip);
    }
    in >> v;
    return v;
  };
  if (magic != "P6") throw Error(ErrorCode::kDataUnavailable, "not a binary PPM: " + path.string());
  const int w = next_int(), h = next_int(), maxv = next_int();
  in.get();
  std::vector<unsigned char> raw(static_cast<std::size_t>(w) * h * 3);
  in.read(reinterpret_cast<char*>(raw.data()), static_cast<std::streamsize>(raw.size()));
  if (!in || maxv <= 0) throw Error(ErrorCode::kDataUnavailable, "truncated PPM: " + path.string());
  shape = {h, w, 3};
  std::vector<float> out(raw.size());
  for (std::size_t k = 0; k < raw.size(); ++k) out[k] = raw[k] / static_cast<float>(maxv);
  return out;
}

// GTSRB CSV: Filename;Width;Height;Roi.X1;Roi.Y1;Roi.X2;Roi.Y2;ClassId
void read_gtsrb_csv(const fs::path& csv, const fs::path& dir, LabeledImages& out) {
  std::ifstream in(csv);
  if (!in) throw Error(ErrorCode::kDataUnavailable, "missing GTSRB annotations: " + csv.string());
  std::string line;
  std::getline(in, line);
  while (std::getline(in, line)) {
    if (line.empty()) continue;
    std::vector<std::string> f;
    std::stringstream ss(line);
    std::string tok;
    while (std::getline(ss, tok, ';')) f.push_back(tok);
    if (f.size() < 8) continue;
    Shape s;
    auto px = read_ppm(dir / f[0], s);
    const int x1 = std::stoi(f[3]), y1 = std::stoi(f[4]), x2 = std::stoi(f[5]), y2 = std::stoi(f[6]);
    const int cw = std::max(1, std::min(x2, s.width - 1) - x1 + 1);
    const int ch = std::max(1, std::min(y2, s.height - 1) - y1 + 1);
    std::vector<float> crop(static_cast<std::size_t>(cw) * ch * 3);
    for (int r = 0; r < ch; ++r) {
      for (int c = 0; c < cw; ++c) {
        for (int k = 0; k < 3; ++k) {
          crop[(static_cast<std::size_t>(r) * cw + c) * 3 + k] =
              px[(static_cast<std::size_t>(r + y1) * s.width + c + x1) * 3 + k];
        }
      }
    }
    out.push_back(resize_bilinear(crop, {ch, cw, 3}, {32, 32, 3}), std::stoi(f[7]));
  }
}

std::pair<LabeledImages, LabeledImages> read_gtsrb(const fs::path& root) {
  LabeledImages train, test;
  train.shape = test.shape = {32, 32, 3};
  const fs::path tr = root / "Final_Training" / "Images";
  if (!fs::exists(tr)) throw Error(ErrorCode::kDataUnavailable, "missing GTSRB directory: " + tr.string());
  for (int c = 0; c < 43; ++c) {
    char name[16];
    std::snprintf(name, sizeof name, "%05d", c);
    read_gtsrb_csv(tr / name / ("GT-" + std::string(name) + ".csv"), tr / name, train);
  }
  read_gtsrb_csv(root / "GT-final_test.csv", root / "Final_Test" / "Images", test);
  return {std::move(train), std::move(test)};
}

std::pair<LabeledImages, LabeledImages> load_sources(const std::string& name, std::uint64_t seed,
                                                     const DataOptions& opts) {
  if (name == "synthetic") {
    if (opts.synthetic_train < 10 || opts.synthetic_test < 10) {
      throw Error(ErrorCode::kInvalidArgument, "synthetic split sizes must be >= 10");
    }
    return {make_synthetic(opts.synthetic_train, mix_seed(seed, 1)),
            make_synthetic(opts.synthetic_test, mix_seed(seed, 2))};
  }
  const fs::path root = resolve_data_root(opts);
  if (name == "mnist") {
    const fs::path d = root / "mnist";
    return {read_idx((d / "train-images-idx3-ubyte").string(), (d / "train-labels-idx1-ubyte").string()),
            read_idx((d / "t10k-images-idx3-ubyte").string(), (d / "t10k-labels-idx1-ubyte").string())};
  }
  if (name == "cifar10") {
    fs::path d = root / "cifar10";
    if (fs::exists(d / "cifar-10-batches-bin")) d /= "cifar-10-batches-bin";
    std::vector<std::string> tr;
    for (int k = 1; k <= 5; ++k) tr.push_back((d / ("data_batch_" + std::to_string(k) + ".bin")).string());
    return {read_cifar_batches(tr), read_cifar_batches({(d / "test_batch.bin").string()})};
  }
  if (name == "gtsrb") return read_gtsrb(root / "gtsrb");
  throw Error(ErrorCode::kNotFound, "unknown dataset: " + name);
}

}  // namespace

std::string resolve_data_root(const DataOptions& opts) {
  if (const char* env = std::getenv(kDataRootEnv); env && *env) return env;
  return opts.root;
}

std::vector<int> DatasetHandle::train_labels() const {
  std::vector<int> out;
  out.reserve(train_indices.size());
  for (auto i : train_indices) out.push_back(train_source->labels[i]);
  return out;
}

std::vector<std::size_t> DatasetHandle::class_counts() const {
  std::vector<std::size_t> counts(num_classes, 0);
  for (auto i : train_indices) ++counts.at(train_source->labels[i]);
  return counts;
}

std::vector<std::string> registered_datasets() {
  std::vector<std::string> names;
  for (const auto& [k, v] : registry()) names.push_back(k);
  return names;
}

Shape registered_shape(const std::string& name) {
  auto it = registry().find(lower(name));
  if (it == registry().end()) throw Error(ErrorCode::kNotFound, "unknown dataset: " + name);
  return it->second.shape;
}

int registered_classes(const std::string& name) {
  auto it = registry().find(lower(name));
  if (it == registry().end()) throw Error(ErrorCode::kNotFound, "unknown dataset: " + name);
  return it->second.classes;
}

std::vector<std::size_t> stratified_select(const std::vector<int>& labels,
                                           const std::vector<std::size_t>& candidates,
                                           double fraction, std::uint64_t seed) {
  if (!(fraction > 0.0 && fraction <= 1.0)) {
    throw Error(ErrorCode::kInvalidArgument, "fraction must lie in (0,1]");
  }
  std::map<int, std::vector<std::size_t>> by_class;
  for (auto i : candidates) by_class[labels.at(i)].push_back(i);

  // largest remainder so that sum(take) == round(fraction * n)
  const auto total = static_cast<std::size_t>(std::llround(fraction * candidates.size()));
  std::vector<std::pair<int, double>> rema;
  std::map<int, std::size_t> take;
  std::size_t assigned = 0;
  for (const auto& [c, idx] : by_class) {
    const double exact = fraction * idx.size();
    take[c] = static_cast<std::size_t>(std::floor(exact));
    assigned += take[c];
    rema.emplace_back(c, exact - std::floor(exact));
  }
  std::stable_sort(rema.begin(), rema.end(), [](auto& a, auto& b) { return a.second > b.second; });
  for (std::size_t k = 0; assigned < total && k < rema.size(); ++k, ++assigned) ++take[rema[k].first];

  std::mt19937_64 rng(seed);
  std::vector<std::size_t> out;
  for (auto& [c, idx] : by_class) {
    if (take[c] == 0) {
      throw Error(ErrorCode::kInvalidArgument, "subsample leaves class " + std::to_string(c) + " empty");
    }
    std::shuffle(idx.begin(), idx.end(), rng);
    out.insert(out.end(), idx.begin(), idx.begin() + static_cast<std::ptrdiff_t>(take[c]));
  }
  std::sort(out.begin(), out.end());
  return out;
}

DatasetHandle load_dataset(const std::string& name, std::uint64_t seed, double subsample_fraction,
                           const DataOptions& opts) {
  const std::string key = lower(name);
  if (!registry().count(key)) throw Error(ErrorCode::kNotFound, "unknown dataset: " + name);
  if (!(subsample_fraction > 0.0 && subsample_fraction <= 1.0)) {
    throw Error(ErrorCode::kInvalidArgument, "subsample_fraction must lie in (0,1]");
  }
  auto [train, test] = load_sources(key, seed, opts);
  const auto& reg = registry().at(key);
  if (train.shape != reg.shape || test.shape != reg.shape) {
    throw Error(ErrorCode::kShapeMismatch, "on-disk images do not match the registered input shape");
  }
  DatasetHandle h;
  h.name = key;
  h.input_shape = reg.shape;
  h.num_classes = reg.classes;
  h.seed = seed;
  for (int l : train.labels) {
    if (l < 0 || l >= reg.classes) throw Error(ErrorCode::kDataUnavailable, "label out of range in " + name);
  }
  h.train_source = std::make_shared<const LabeledImages>(std::move(train));
  h.test_source = std::make_shared<const LabeledImages>(std::move(test));
  h.train_indices.resize(h.train_source->size());
  std::iota(h.train_indices.begin(), h.train_indices.end(), 0);
  h.test_indices.resize(h.test_source->size());
  std::iota(h.test_indices.begin(), h.test_indices.end(), 0);
  if (subsample_fraction < 1.0) {
    h.train_indices = stratified_select(h.train_source->labels, h.train_indices, subsample_fraction,
                                        mix_seed(seed, 11));
  }
  return h;
}

DatasetHandle defender_holdout(const DatasetHandle& handle, double fraction) {
  if (!(fraction > 0.0 && fraction <= 0.1)) {
    throw Error(ErrorCode::kInvalidArgument, "holdout fraction must lie in (0, 0.1]");
  }
  DatasetHandle h = handle;
  h.train_indices = stratified_select(handle.train_source->labels, handle.train_indices, fraction,
                                      mix_seed(handle.seed, 23));
  return h;
}

DatasetHandle without(const DatasetHandle& handle, const DatasetHandle& removed) {
  if (handle.train_source != removed.train_source) {
    throw Error(ErrorCode::kInvalidArgument, "handles do not share a train source");
  }
  std::vector<std::size_t> drop = removed.train_indices;
  std::sort(drop.begin(), drop.end());
  DatasetHandle h = handle;
  h.train_indices.clear();
  for (auto i : handle.train_indices) {
    if (!std::binary_search(drop.begin(), drop.end(), i)) h.train_indices.push_back(i);
  }
  return h;
}

nlohmann::json split_manifest(const DatasetHandle& handle) {
  return {{"name", handle.name},
          {"seed", handle.seed},
          {"input_shape", {handle.input_shape.height, handle.input_shape.width, handle.input_shape.channels}},
          {"num_classes", handle.num_classes},
          {"train_indices", handle.train_indices},
          {"test_indices", handle.test_indices}};
}

DatasetHandle from_split_manifest(const nlohmann::json& manifest, const DataOptions& opts) {
  DatasetHandle h = load_dataset(manifest.at("name").get<std::string>(),
                                 manifest.at("seed").get<std::uint64_t>(), 1.0, opts);
  h.train_indices = manifest.at("train_indices").get<std::vector<std::size_t>>();
  h.test_indices = manifest.at("test_indices").get<std::vector<std::size_t>>();
  for (auto i : h.train_indices) {
    if (i >= h.train_source->size()) throw Error(ErrorCode::kInvalidArgument, "manifest index out of range");
  }
  for (auto i : h.test_indices) {
    if (i >= h.test_source->size()) throw Error(ErrorCode::kInvalidArgument, "manifest index out of range");
  }
  return h;
}

}  // namespace sgba::data
