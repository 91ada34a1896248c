#include "sgba/modelkit.hpp"

#include <algorithm>
#include <cmath>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <numeric>
#include <random>

namespace sgba {

namespace {

constexpr char kMagic[4] = {'S', 'G', 'B', 'W'};
constexpr std::uint32_t kFormatVersion = 1;
constexpr int kEvalChunk = 256;

template <typename T>
void put(std::ofstream& out, const T& v) {
  out.write(reinterpret_cast<const char*>(&v), sizeof v);
}

template <typename T>
T get(std::ifstream& in) {
  T v{};
  in.read(reinterpret_cast<char*>(&v), sizeof v);
  if (!in) throw Error(ErrorCode::kIo, "truncated checkpoint");
  return v;
}

void put_floats(std::ofstream& out, const std::vector<float>& v) {
  put<std::uint64_t>(out, v.size());
  out.write(reinterpret_cast<const char*>(v.data()), static_cast<std::streamsize>(v.size() * sizeof(float)));
}

std::vector<float> get_floats(std::ifstream& in) {
  const auto n = get<std::uint64_t>(in);
  if (n > (std::uint64_t{1} << 32)) throw Error(ErrorCode::kIo, "corrupt checkpoint length");
  std::vector<float> v(n);
  in.read(reinterpret_cast<char*>(v.data()), static_cast<std::streamsize>(n * sizeof(float)));
  if (!in) throw Error(ErrorCode::kIo, "truncated checkpoint");
  return v;
}

void check_data(const ModelRecord& model, const LabeledImages& data) {
  if (data.shape != model.arch().input) {
    throw Error(ErrorCode::kShapeMismatch, "data shape does not match architecture " + model.arch().name);
  }
  if (data.pixels.size() != data.size() * data.shape.size()) {
    throw Error(ErrorCode::kShapeMismatch, "pixel buffer does not match label count");
  }
}

}  // namespace

std::string_view to_string(Provenance p) {
  switch (p) {
    case Provenance::kUnset: return "unset";
    case Provenance::kBenign: return "benign";
    case Provenance::kBadNets: return "badnets";
    case Provenance::kSgba: return "sgba";
    case Provenance::kTrojM: return "trojM";
    case Provenance::kTrojB: return "trojB";
  }
  return "unset";
}

Provenance provenance_from_string(std::string_view s) {
  for (auto p : {Provenance::kUnset, Provenance::kBenign, Provenance::kBadNets, Provenance::kSgba,
                 Provenance::kTrojM, Provenance::kTrojB}) {
    if (to_string(p) == s) return p;
  }
  throw Error(ErrorCode::kInvalidArgument, "unknown provenance: " + std::string(s));
}

bool is_malicious(Provenance p) {
  return p == Provenance::kBadNets || p == Provenance::kSgba || p == Provenance::kTrojM ||
         p == Provenance::kTrojB;
}

ModelRecord::ModelRecord(nn::ArchitectureId arch, nn::Params params, std::uint64_t init_seed)
    : arch_(std::move(arch)), params_(std::move(params)), init_seed_(init_seed) {
  refresh_stats();
}

void ModelRecord::refresh_stats() { layer_stats_ = compute_layer_stats(params_); }

void ModelRecord::set_provenance(Provenance p) {
  if (provenance_ != Provenance::kUnset && provenance_ != p) {
    throw Error(ErrorCode::kInvalidArgument, "provenance is immutable once assigned");
  }
  provenance_ = p;
}

std::uint64_t ModelRecord::weights_hash() const {
  std::uint64_t h = fnv1a(arch_.name);
  for (const auto& lp : params_) {
    h = fnv1a(lp.weight, h);
    h = fnv1a(lp.bias, h);
  }
  return h;
}

ModelRecord build_model(const nn::ArchitectureId& arch, std::uint64_t init_seed) {
  return ModelRecord(arch, nn::init_params(arch, init_seed), init_seed);
}

ModelRecord build_model(const std::string& arch_name, std::uint64_t init_seed) {
  return build_model(nn::find_architecture(arch_name), init_seed);
}

ModelRecord train(ModelRecord model, const LabeledImages& data, const TrainOptions& opts,
                  const StepHook& step_hook) {
  if (data.empty()) throw Error(ErrorCode::kInvalidArgument, "training data is empty");
  check_data(model, data);
  const int classes = model.arch().num_classes();
  for (int l : data.labels) {
    if (l < 0 || l >= classes) throw Error(ErrorCode::kShapeMismatch, "label outside architecture output width");
  }
  if (opts.epochs < 1 || opts.batch_size < 1) {
    throw Error(ErrorCode::kInvalidArgument, "epochs and batch size must be positive");
  }

  nn::Network net(model.arch());
  nn::Params& params = model.mutable_params();
  nn::Params grads = nn::zeros_like(params);
  nn::Adam adam({opts.lr});
  std::mt19937_64 rng(opts.seed);
  std::vector<std::size_t> order(data.size());
  std::iota(order.begin(), order.end(), 0);
  std::vector<float> batch_px;
  std::vector<int> batch_lab;
  std::vector<float> dlogits;
  const std::size_t img = data.shape.size();

  double epoch_loss = 0.0;
  for (int epoch = 0; epoch < opts.epochs; ++epoch) {
    std::shuffle(order.begin(), order.end(), rng);
    double loss_sum = 0.0;
    std::size_t seen = 0;
    for (std::size_t start = 0; start < order.size(); start += opts.batch_size) {
      const std::size_t end = std::min(order.size(), start + opts.batch_size);
      const int n = static_cast<int>(end - start);
      batch_px.resize(n * img);
      batch_lab.resize(n);
      for (int k = 0; k < n; ++k) {
        const auto src = data.image(order[start + k]);
        std::copy(src.begin(), src.end(), batch_px.begin() + k * img);
        batch_lab[k] = data.labels[order[start + k]];
      }
      auto logits = net.forward(batch_px, n, params, nn::Mode::kTrain, &rng);
      const double loss = nn::softmax_cross_entropy(logits, classes, n, batch_lab, &dlogits);
      if (!std::isfinite(loss)) {
        throw Error(ErrorCode::kDivergence, "non-finite training loss at epoch " + std::to_string(epoch));
      }
      for (auto& g : grads) {
        std::fill(g.weight.begin(), g.weight.end(), 0.f);
        std::fill(g.bias.begin(), g.bias.end(), 0.f);
      }
      net.backward(dlogits, params, &grads, nullptr);
      adam.step(params, grads);
      if (step_hook) step_hook(params);
      loss_sum += loss * n;
      seen += n;
    }
    epoch_loss = loss_sum / static_cast<double>(seen);
    model.epochs_trained = epoch + 1;
    if (opts.loss_threshold && epoch_loss < *opts.loss_threshold) break;
  }

  model.final_loss = epoch_loss;
  model.set_training_seed(opts.seed);
  model.set_provenance(opts.provenance);
  model.refresh_stats();
  if (opts.eval) model.accuracy = evaluate(model, *opts.eval);
  return model;
}

std::vector<int> predict(const ModelRecord& model, const LabeledImages& images) {
  check_data(model, images);
  nn::Network net(model.arch());
  const int classes = model.arch().num_classes();
  std::vector<int> out;
  out.reserve(images.size());
  const std::size_t img = images.shape.size();
  for (std::size_t start = 0; start < images.size(); start += kEvalChunk) {
    const int n = static_cast<int>(std::min<std::size_t>(kEvalChunk, images.size() - start));
    std::span<const float> px(images.pixels.data() + start * img, n * img);
    auto logits = net.forward(px, n, model.params());
    auto pred = nn::argmax_columns(logits, classes, n);
    out.insert(out.end(), pred.begin(), pred.end());
  }
  return out;
}

std::vector<float> predict_proba(const ModelRecord& model, std::span<const float> images, int batch) {
  nn::Network net(model.arch());
  const int classes = model.arch().num_classes();
  auto logits = net.forward(images, batch, model.params());
  auto probs = nn::softmax(logits, classes, batch);
  std::vector<float> rows(probs.size());
  for (int n = 0; n < batch; ++n) {
    for (int k = 0; k < classes; ++k) rows[n * classes + k] = probs[k * batch + n];
  }
  return rows;
}

double evaluate(const ModelRecord& model, const LabeledImages& data) {
  if (data.empty()) throw Error(ErrorCode::kInvalidArgument, "evaluation data is empty");
  const auto pred = predict(model, data);
  std::size_t hit = 0;
  for (std::size_t i = 0; i < pred.size(); ++i) hit += pred[i] == data.labels[i];
  return static_cast<double>(hit) / static_cast<double>(pred.size());
}

std::vector<LayerStats> compute_layer_stats(const nn::Params& params) {
  std::vector<LayerStats> out;
  for (const auto& lp : params) {
    LayerStats s;
    s.layer = lp.name;
    if (!lp.weight.empty()) {
      double sum = 0.0;
      for (float w : lp.weight) sum += w;
      s.mean = sum / static_cast<double>(lp.weight.size());
      double sq = 0.0;
      for (float w : lp.weight) sq += (w - s.mean) * (w - s.mean);
      s.variance = sq / static_cast<double>(lp.weight.size());
    }
    out.push_back(s);
  }
  return out;
}

std::vector<double> layer_weight_variance(const nn::Params& params) {
  std::vector<double> out;
  for (const auto& s : compute_layer_stats(params)) out.push_back(s.variance);
  return out;
}

std::vector<double> layer_weight_variance(const ModelRecord& model) {
  return layer_weight_variance(model.params());
}

nlohmann::json manifest_of(const ModelRecord& model) {
  nlohmann::json stats = nlohmann::json::array();
  for (const auto& s : model.layer_stats()) {
    stats.push_back({{"layer", s.layer}, {"mean", s.mean}, {"variance", s.variance}});
  }
  nlohmann::json j = {{"arch", model.arch().name},
                      {"provenance", to_string(model.provenance())},
                      {"seeds", {{"init", model.init_seed()}, {"training", model.training_seed()}}},
                      {"epochs_trained", model.epochs_trained},
                      {"layer_stats", stats},
                      {"weights_hash", hex64(model.weights_hash())}};
  nlohmann::json metrics = nlohmann::json::object();
  if (model.accuracy) metrics["accuracy"] = *model.accuracy;
  if (model.final_loss) metrics["final_loss"] = *model.final_loss;
  j["metrics"] = metrics;
  return j;
}

void save_checkpoint(const ModelRecord& model, const std::string& stem, const nlohmann::json& extra) {
  const std::filesystem::path p(stem);
  if (p.has_parent_path()) std::filesystem::create_directories(p.parent_path());
  {
    std::ofstream out(stem + ".weights", std::ios::binary | std::ios::trunc);
    if (!out) throw Error(ErrorCode::kIo, "cannot write " + stem + ".weights");
    out.write(kMagic, 4);
    put<std::uint32_t>(out, kFormatVersion);
    put<std::uint32_t>(out, static_cast<std::uint32_t>(model.params().size()));
    for (const auto& lp : model.params()) {
      put<std::uint32_t>(out, static_cast<std::uint32_t>(lp.name.size()));
      out.write(lp.name.data(), static_cast<std::streamsize>(lp.name.size()));
      put<std::uint32_t>(out, static_cast<std::uint32_t>(lp.weight_dims.size()));
      for (int d : lp.weight_dims) put<std::int32_t>(out, d);
      put_floats(out, lp.weight);
      put_floats(out, lp.bias);
    }
    if (!out) throw Error(ErrorCode::kIo, "write failed: " + stem + ".weights");
  }
  nlohmann::json j = manifest_of(model);
  for (auto it = extra.begin(); extra.is_object() && it != extra.end(); ++it) j[it.key()] = it.value();
  std::ofstream out(stem + ".json", std::ios::trunc);
  if (!out) throw Error(ErrorCode::kIo, "cannot write " + stem + ".json");
  out << j.dump(2) << '\n';
}

nlohmann::json load_manifest(const std::string& stem) {
  std::ifstream in(stem + ".json");
  if (!in) throw Error(ErrorCode::kNotFound, "missing manifest " + stem + ".json");
  return nlohmann::json::parse(in);
}

ModelRecord load_checkpoint(const std::string& stem) {
  const auto manifest = load_manifest(stem);
  std::ifstream in(stem + ".weights", std::ios::binary);
  if (!in) throw Error(ErrorCode::kNotFound, "missing weights " + stem + ".weights");
  char magic[4];
  in.read(magic, 4);
  if (!in || std::memcmp(magic, kMagic, 4) != 0) throw Error(ErrorCode::kIo, "not a weights file: " + stem);
  if (get<std::uint32_t>(in) != kFormatVersion) throw Error(ErrorCode::kIo, "unsupported weights version");
  const auto layers = get<std::uint32_t>(in);
  nn::Params params;
  for (std::uint32_t i = 0; i < layers; ++i) {
    nn::LayerParams lp;
    lp.name.resize(get<std::uint32_t>(in));
    in.read(lp.name.data(), static_cast<std::streamsize>(lp.name.size()));
    const auto dims = get<std::uint32_t>(in);
    for (std::uint32_t d = 0; d < dims; ++d) lp.weight_dims.push_back(get<std::int32_t>(in));
    lp.weight = get_floats(in);
    lp.bias = get_floats(in);
    params.push_back(std::move(lp));
  }
  const auto& arch = nn::find_architecture(manifest.at("arch").get<std::string>());
  ModelRecord m(arch, std::move(params), manifest.at("seeds").at("init").get<std::uint64_t>());
  // Validates parameter shapes against the architecture.
  nn::Network(arch).forward(std::vector<float>(arch.input.size(), 0.f), 1, m.params());
  m.set_training_seed(manifest.at("seeds").at("training").get<std::uint64_t>());
  m.set_provenance(provenance_from_string(manifest.at("provenance").get<std::string>()));
  m.epochs_trained = manifest.value("epochs_trained", 0);
  const auto& metrics = manifest.at("metrics");
  if (metrics.contains("accuracy")) m.accuracy = metrics["accuracy"].get<double>();
  if (metrics.contains("final_loss")) m.final_loss = metrics["final_loss"].get<double>();
  return m;
}

}  // namespace sgba
