#include "sgba/nn.hpp"

#include <Eigen/Core>

#include <algorithm>
#include <cmath>
#include <limits>
#include <map>

namespace sgba::nn {

namespace {

using MatR = Eigen::Matrix<float, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
using MapR = Eigen::Map<MatR>;
using CMapR = Eigen::Map<const MatR>;

LayerSpec conv(int filters, int kernel, Padding pad, bool dropout = false) {
  return {LayerKind::kConv2d, filters, kernel, 1, pad, Activation::kRelu, dropout};
}
LayerSpec pool(bool dropout = false) {
  return {LayerKind::kMaxPool, 0, 2, 2, Padding::kValid, Activation::kNone, dropout};
}
LayerSpec linear(int units, Activation act, bool dropout = false) {
  return {LayerKind::kLinear, units, 0, 1, Padding::kValid, act, dropout};
}

std::map<std::string, ArchitectureId> make_registry() {
  std::map<std::string, ArchitectureId> reg;
  const auto V = Padding::kValid;
  const auto S = Padding::kSame;
  reg["mnist"] = {"mnist",
                  {28, 28, 1},
                  {conv(32, 5, V, true), pool(), conv(64, 5, V, true), pool(),
                   linear(512, Activation::kRelu, true), linear(10, Activation::kSoftmax)},
                  0.5f};
  reg["cifar10"] = {"cifar10",
                    {32, 32, 3},
                    {conv(32, 3, V), conv(32, 3, V), pool(), conv(64, 3, V), conv(64, 3, V), pool(),
                     linear(256, Activation::kRelu), linear(256, Activation::kRelu, true),
                     linear(10, Activation::kSoftmax)},
                    0.5f};
  reg["gtsrb"] = {"gtsrb",
                  {32, 32, 3},
                  {conv(32, 3, S), conv(32, 3, S), pool(true), conv(64, 3, S), conv(64, 3, S),
                   pool(true), conv(128, 3, S), conv(128, 3, S), pool(true),
                   linear(512, Activation::kRelu, true), linear(43, Activation::kSoftmax)},
                  0.5f};
  // Same topology as "mnist" with narrower layers; the desk-scale default.
  reg["mnist-lite"] = {"mnist-lite",
                       {28, 28, 1},
                       {conv(8, 5, V, true), pool(), conv(16, 5, V, true), pool(),
                        linear(64, Activation::kRelu, true), linear(10, Activation::kSoftmax)},
                       0.1f};
  return reg;
}

const std::map<std::string, ArchitectureId>& registry() {
  static const auto reg = make_registry();
  return reg;
}

// Plain left-to-right sums: vectorized reductions peel on pointer alignment, which
// would make gradients depend on where the heap placed a buffer.
template <class M>
void add_row_sums(const M& m, std::vector<float>& out) {
  for (Eigen::Index r = 0; r < m.rows(); ++r) {
    const float* row = m.data() + r * m.cols();
    float acc = 0.f;
    for (Eigen::Index c = 0; c < m.cols(); ++c) acc += row[c];
    out[r] += acc;
  }
}

struct Dims {
  int c = 0, h = 0, w = 0;
  std::size_t size() const { return static_cast<std::size_t>(c) * h * w; }
};

enum class OpKind { kConv, kPool, kRelu, kDropout, kFlatten, kLinear };

struct Op {
  OpKind kind;
  Dims in, out;
  int param = -1;
  int kernel = 0, stride = 1, pad = 0;
  float drop_rate = 0.f;
};

}  // namespace

int ArchitectureId::num_classes() const {
  for (auto it = layers.rbegin(); it != layers.rend(); ++it) {
    if (it->kind == LayerKind::kLinear) return it->filters;
  }
  return 0;
}

std::vector<std::string> ArchitectureId::parameter_layer_names() const {
  std::vector<std::string> names;
  int convs = 0, fcs = 0, total_fc = 0;
  for (const auto& l : layers) total_fc += l.kind == LayerKind::kLinear;
  for (const auto& l : layers) {
    if (l.kind == LayerKind::kConv2d) {
      names.push_back("conv" + std::to_string(++convs));
    } else if (l.kind == LayerKind::kLinear) {
      ++fcs;
      if (fcs == total_fc) {
        names.emplace_back("output");
      } else {
        names.push_back(total_fc == 2 ? std::string("fc") : "fc" + std::to_string(fcs));
      }
    }
  }
  return names;
}

const ArchitectureId& find_architecture(const std::string& name) {
  const auto& reg = registry();
  auto it = reg.find(name);
  if (it == reg.end()) throw Error(ErrorCode::kNotFound, "unknown architecture: " + name);
  return it->second;
}

std::vector<std::string> registered_architectures() {
  std::vector<std::string> names;
  for (const auto& [k, v] : registry()) names.push_back(k);
  return names;
}

namespace {

std::vector<Op> compile(const ArchitectureId& arch) {
  std::vector<Op> ops;
  Dims cur{arch.input.channels, arch.input.height, arch.input.width};
  int param = 0;
  bool flat = false;
  for (const auto& l : arch.layers) {
    switch (l.kind) {
      case LayerKind::kConv2d: {
        if (flat) throw Error(ErrorCode::kInvalidArgument, "conv layer after linear layer");
        Op op{OpKind::kConv, cur, {}, param++, l.kernel, l.stride, 0, 0.f};
        op.pad = l.padding == Padding::kSame ? (l.kernel - 1) / 2 : 0;
        op.out = {l.filters, (cur.h + 2 * op.pad - l.kernel) / l.stride + 1,
                  (cur.w + 2 * op.pad - l.kernel) / l.stride + 1};
        if (op.out.h <= 0 || op.out.w <= 0) {
          throw Error(ErrorCode::kInvalidArgument, "conv layer shrinks input to nothing");
        }
        ops.push_back(op);
        cur = op.out;
        break;
      }
      case LayerKind::kMaxPool: {
        Op op{OpKind::kPool, cur, {}, -1, l.kernel, l.stride, 0, 0.f};
        op.out = {cur.c, (cur.h - l.kernel) / l.stride + 1, (cur.w - l.kernel) / l.stride + 1};
        if (op.out.h <= 0 || op.out.w <= 0) {
          throw Error(ErrorCode::kInvalidArgument, "pool layer shrinks input to nothing");
        }
        ops.push_back(op);
        cur = op.out;
        break;
      }
      case LayerKind::kLinear: {
        if (!flat) {
          Op f{OpKind::kFlatten, cur, {static_cast<int>(cur.size()), 1, 1}};
          ops.push_back(f);
          cur = f.out;
          flat = true;
        }
        Op op{OpKind::kLinear, cur, {l.filters, 1, 1}, param++};
        ops.push_back(op);
        cur = op.out;
        break;
      }
    }
    if (l.activation == Activation::kRelu) ops.push_back({OpKind::kRelu, cur, cur});
    if (l.dropout) {
      Op d{OpKind::kDropout, cur, cur};
      d.drop_rate = arch.dropout_rate;
      ops.push_back(d);
    }
  }
  return ops;
}

std::pair<std::size_t, std::size_t> param_sizes(const Op& op, const ArchitectureId& arch) {
  (void)arch;
  if (op.kind == OpKind::kConv) {
    return {static_cast<std::size_t>(op.out.c) * op.in.c * op.kernel * op.kernel,
            static_cast<std::size_t>(op.out.c)};
  }
  return {static_cast<std::size_t>(op.out.c) * op.in.c, static_cast<std::size_t>(op.out.c)};
}

}  // namespace

Params init_params(const ArchitectureId& arch, std::uint64_t seed) {
  const auto ops = compile(arch);
  const auto names = arch.parameter_layer_names();
  std::mt19937_64 rng(seed);
  Params params;
  for (const auto& op : ops) {
    if (op.param < 0) continue;
    LayerParams lp;
    lp.name = names.at(op.param);
    auto [nw, nb] = param_sizes(op, arch);
    const int fan_in = static_cast<int>(nw / op.out.c);
    lp.weight_dims = op.kind == OpKind::kConv
                         ? std::vector<int>{op.out.c, op.in.c, op.kernel, op.kernel}
                         : std::vector<int>{op.out.c, op.in.c};
    const float bound = 1.0f / std::sqrt(static_cast<float>(fan_in));
    std::uniform_real_distribution<float> dist(-bound, bound);
    lp.weight.resize(nw);
    for (auto& w : lp.weight) w = dist(rng);
    lp.bias.resize(nb);
    for (auto& b : lp.bias) b = dist(rng);
    params.push_back(std::move(lp));
  }
  return params;
}

Params zeros_like(const Params& like) {
  Params out = like;
  for (auto& lp : out) {
    std::fill(lp.weight.begin(), lp.weight.end(), 0.f);
    std::fill(lp.bias.begin(), lp.bias.end(), 0.f);
  }
  return out;
}

struct Network::Impl {
  ArchitectureId arch;
  std::vector<Op> ops;
  int batch = 0;
  std::vector<std::vector<float>> acts;   // acts[i] = input of op i; acts.back() = logits
  std::vector<std::vector<float>> cols;   // per conv op
  std::vector<std::vector<int>> argmax;   // per pool op
  std::vector<std::vector<float>> masks;  // per dropout op
  std::vector<float> grad_a, grad_b, dcols;

  void check_params(const Params& params) const {
    std::size_t expected = 0;
    for (const auto& op : ops) {
      if (op.param < 0) continue;
      ++expected;
      auto [nw, nb] = param_sizes(op, arch);
      if (static_cast<std::size_t>(op.param) >= params.size() ||
          params[op.param].weight.size() != nw || params[op.param].bias.size() != nb) {
        throw Error(ErrorCode::kShapeMismatch, "parameters do not match architecture " + arch.name);
      }
    }
    if (expected != params.size()) {
      throw Error(ErrorCode::kShapeMismatch, "parameter layer count does not match architecture");
    }
  }

  void im2col(const Op& op, const float* in, float* out) const {
    const int N = batch, C = op.in.c, H = op.in.h, W = op.in.w;
    const int K = op.kernel, S = op.stride, P = op.pad, OH = op.out.h, OW = op.out.w;
    const std::size_t cols_n = static_cast<std::size_t>(N) * OH * OW;
    for (int c = 0; c < C; ++c) {
      for (int ki = 0; ki < K; ++ki) {
        for (int kj = 0; kj < K; ++kj) {
          float* row = out + ((static_cast<std::size_t>(c) * K + ki) * K + kj) * cols_n;
          for (int n = 0; n < N; ++n) {
            const float* plane = in + (static_cast<std::size_t>(c) * N + n) * H * W;
            for (int oh = 0; oh < OH; ++oh) {
              const int ih = oh * S + ki - P;
              float* dst = row + (static_cast<std::size_t>(n) * OH + oh) * OW;
              if (ih < 0 || ih >= H) {
                std::fill(dst, dst + OW, 0.f);
                continue;
              }
              const float* src = plane + static_cast<std::size_t>(ih) * W;
              for (int ow = 0; ow < OW; ++ow) {
                const int iw = ow * S + kj - P;
                dst[ow] = (iw >= 0 && iw < W) ? src[iw] : 0.f;
              }
            }
          }
        }
      }
    }
  }

  void col2im(const Op& op, const float* cols_in, float* out) const {
    const int N = batch, C = op.in.c, H = op.in.h, W = op.in.w;
    const int K = op.kernel, S = op.stride, P = op.pad, OH = op.out.h, OW = op.out.w;
    const std::size_t cols_n = static_cast<std::size_t>(N) * OH * OW;
    std::fill(out, out + static_cast<std::size_t>(C) * N * H * W, 0.f);
    for (int c = 0; c < C; ++c) {
      for (int ki = 0; ki < K; ++ki) {
        for (int kj = 0; kj < K; ++kj) {
          const float* row = cols_in + ((static_cast<std::size_t>(c) * K + ki) * K + kj) * cols_n;
          for (int n = 0; n < N; ++n) {
            float* plane = out + (static_cast<std::size_t>(c) * N + n) * H * W;
            for (int oh = 0; oh < OH; ++oh) {
              const int ih = oh * S + ki - P;
              if (ih < 0 || ih >= H) continue;
              const float* src = row + (static_cast<std::size_t>(n) * OH + oh) * OW;
              float* dst = plane + static_cast<std::size_t>(ih) * W;
              for (int ow = 0; ow < OW; ++ow) {
                const int iw = ow * S + kj - P;
                if (iw >= 0 && iw < W) dst[iw] += src[ow];
              }
            }
          }
        }
      }
    }
  }
};

Network::Network(const ArchitectureId& arch) : impl_(std::make_unique<Impl>()) {
  impl_->arch = arch;
  impl_->ops = compile(arch);
  impl_->acts.resize(impl_->ops.size() + 1);
  impl_->cols.resize(impl_->ops.size());
  impl_->argmax.resize(impl_->ops.size());
  impl_->masks.resize(impl_->ops.size());
}

Network::~Network() = default;
Network::Network(Network&&) noexcept = default;
Network& Network::operator=(Network&&) noexcept = default;

const ArchitectureId& Network::arch() const { return impl_->arch; }

std::span<const float> Network::forward(std::span<const float> inputs, int batch,
                                        const Params& params, Mode mode, std::mt19937_64* rng) {
  auto& s = *impl_;
  const Shape& in_shape = s.arch.input;
  if (batch <= 0 || inputs.size() != static_cast<std::size_t>(batch) * in_shape.size()) {
    throw Error(ErrorCode::kShapeMismatch, "input batch does not match architecture input shape");
  }
  s.check_params(params);
  s.batch = batch;
  const int N = batch;

  // HWC per image -> [C][N][H][W]
  auto& a0 = s.acts[0];
  a0.resize(inputs.size());
  const int C = in_shape.channels;
  const std::size_t HW = in_shape.pixels();
  for (int n = 0; n < N; ++n) {
    const float* img = inputs.data() + n * in_shape.size();
    for (std::size_t p = 0; p < HW; ++p) {
      for (int c = 0; c < C; ++c) a0[(static_cast<std::size_t>(c) * N + n) * HW + p] = img[p * C + c];
    }
  }

  for (std::size_t i = 0; i < s.ops.size(); ++i) {
    const Op& op = s.ops[i];
    const auto& in = s.acts[i];
    auto& out = s.acts[i + 1];
    const std::size_t out_n = op.out.size() * N;
    out.resize(out_n);
    switch (op.kind) {
      case OpKind::kConv: {
        const auto& lp = params[op.param];
        const int ckk = op.in.c * op.kernel * op.kernel;
        const int cols_n = N * op.out.h * op.out.w;
        auto& cols = s.cols[i];
        cols.resize(static_cast<std::size_t>(ckk) * cols_n);
        s.im2col(op, in.data(), cols.data());
        CMapR w(lp.weight.data(), op.out.c, ckk);
        CMapR x(cols.data(), ckk, cols_n);
        MapR y(out.data(), op.out.c, cols_n);
        y.noalias() = w * x;
        for (int f = 0; f < op.out.c; ++f) y.row(f).array() += lp.bias[f];
        break;
      }
      case OpKind::kLinear: {
        const auto& lp = params[op.param];
        CMapR w(lp.weight.data(), op.out.c, op.in.c);
        CMapR x(in.data(), op.in.c, N);
        MapR y(out.data(), op.out.c, N);
        y.noalias() = w * x;
        for (int f = 0; f < op.out.c; ++f) y.row(f).array() += lp.bias[f];
        break;
      }
      case OpKind::kPool: {
        auto& am = s.argmax[i];
        am.resize(out_n);
        const int H = op.in.h, W = op.in.w, OH = op.out.h, OW = op.out.w;
        for (int cn = 0; cn < op.in.c * N; ++cn) {
          const float* plane = in.data() + static_cast<std::size_t>(cn) * H * W;
          for (int oh = 0; oh < OH; ++oh) {
            for (int ow = 0; ow < OW; ++ow) {
              float best = -std::numeric_limits<float>::infinity();
              int best_idx = 0;
              for (int ki = 0; ki < op.kernel; ++ki) {
                for (int kj = 0; kj < op.kernel; ++kj) {
                  const int idx = (oh * op.stride + ki) * W + ow * op.stride + kj;
                  if (plane[idx] > best) {
                    best = plane[idx];
                    best_idx = idx;
                  }
                }
              }
              const std::size_t o = (static_cast<std::size_t>(cn) * OH + oh) * OW + ow;
              out[o] = best;
              am[o] = best_idx;
            }
          }
        }
        break;
      }
      case OpKind::kRelu:
        for (std::size_t k = 0; k < out_n; ++k) out[k] = in[k] > 0.f ? in[k] : 0.f;
        break;
      case OpKind::kDropout: {
        if (mode == Mode::kTrain && op.drop_rate > 0.f) {
          if (!rng) throw Error(ErrorCode::kInvalidArgument, "training forward needs an rng");
          auto& mask = s.masks[i];
          mask.resize(out_n);
          std::bernoulli_distribution keep(1.0 - op.drop_rate);
          const float scale = 1.0f / (1.0f - op.drop_rate);
          for (std::size_t k = 0; k < out_n; ++k) {
            mask[k] = keep(*rng) ? scale : 0.f;
            out[k] = in[k] * mask[k];
          }
        } else {
          s.masks[i].clear();
          std::copy(in.begin(), in.end(), out.begin());
        }
        break;
      }
      case OpKind::kFlatten: {
        const std::size_t hw = static_cast<std::size_t>(op.in.h) * op.in.w;
        for (int c = 0; c < op.in.c; ++c) {
          for (int n = 0; n < N; ++n) {
            const float* src = in.data() + (static_cast<std::size_t>(c) * N + n) * hw;
            for (std::size_t p = 0; p < hw; ++p) out[(c * hw + p) * N + n] = src[p];
          }
        }
        break;
      }
    }
  }
  return s.acts.back();
}

void Network::backward(std::span<const float> logits_grad, const Params& params, Params* grads,
                       std::vector<float>* input_grad) {
  auto& s = *impl_;
  const int N = s.batch;
  if (N == 0) throw Error(ErrorCode::kInvalidArgument, "backward called before forward");
  if (logits_grad.size() != s.acts.back().size()) {
    throw Error(ErrorCode::kShapeMismatch, "logit gradient size mismatch");
  }
  if (grads && grads->size() != params.size()) {
    throw Error(ErrorCode::kShapeMismatch, "gradient buffer does not match parameters");
  }
  auto& g = s.grad_a;
  auto& gin = s.grad_b;
  g.assign(logits_grad.begin(), logits_grad.end());

  // Ops before the first parameterized op only need a gradient when input_grad is wanted.
  std::size_t first_needed = 0;
  if (!input_grad) {
    while (first_needed < s.ops.size() && s.ops[first_needed].param < 0) ++first_needed;
  }

  for (std::size_t ii = s.ops.size(); ii-- > first_needed;) {
    const Op& op = s.ops[ii];
    const auto& in = s.acts[ii];
    const bool need_input = ii > first_needed || input_grad;
    const std::size_t in_n = op.in.size() * N;
    switch (op.kind) {
      case OpKind::kConv: {
        const auto& lp = params[op.param];
        const int ckk = op.in.c * op.kernel * op.kernel;
        const int cols_n = N * op.out.h * op.out.w;
        CMapR dy(g.data(), op.out.c, cols_n);
        if (grads) {
          auto& gp = (*grads)[op.param];
          MapR dw(gp.weight.data(), op.out.c, ckk);
          CMapR x(s.cols[ii].data(), ckk, cols_n);
          dw.noalias() += dy * x.transpose();
          add_row_sums(dy, gp.bias);
        }
        if (need_input) {
          s.dcols.resize(static_cast<std::size_t>(ckk) * cols_n);
          CMapR w(lp.weight.data(), op.out.c, ckk);
          MapR dx(s.dcols.data(), ckk, cols_n);
          dx.noalias() = w.transpose() * dy;
          gin.resize(in_n);
          s.col2im(op, s.dcols.data(), gin.data());
        }
        break;
      }
      case OpKind::kLinear: {
        const auto& lp = params[op.param];
        CMapR dy(g.data(), op.out.c, N);
        if (grads) {
          auto& gp = (*grads)[op.param];
          MapR dw(gp.weight.data(), op.out.c, op.in.c);
          CMapR x(in.data(), op.in.c, N);
          dw.noalias() += dy * x.transpose();
          add_row_sums(dy, gp.bias);
        }
        if (need_input) {
          gin.resize(in_n);
          CMapR w(lp.weight.data(), op.out.c, op.in.c);
          MapR dx(gin.data(), op.in.c, N);
          dx.noalias() = w.transpose() * dy;
        }
        break;
      }
      case OpKind::kPool: {
        gin.assign(in_n, 0.f);
        const auto& am = s.argmax[ii];
        const std::size_t plane_in = static_cast<std::size_t>(op.in.h) * op.in.w;
        const std::size_t plane_out = static_cast<std::size_t>(op.out.h) * op.out.w;
        for (std::size_t cn = 0; cn < static_cast<std::size_t>(op.in.c) * N; ++cn) {
          for (std::size_t p = 0; p < plane_out; ++p) {
            const std::size_t o = cn * plane_out + p;
            gin[cn * plane_in + am[o]] += g[o];
          }
        }
        break;
      }
      case OpKind::kRelu: {
        gin.resize(in_n);
        for (std::size_t k = 0; k < in_n; ++k) gin[k] = in[k] > 0.f ? g[k] : 0.f;
        break;
      }
      case OpKind::kDropout: {
        const auto& mask = s.masks[ii];
        gin.resize(in_n);
        if (mask.empty()) {
          std::copy(g.begin(), g.begin() + in_n, gin.begin());
        } else {
          for (std::size_t k = 0; k < in_n; ++k) gin[k] = g[k] * mask[k];
        }
        break;
      }
      case OpKind::kFlatten: {
        gin.resize(in_n);
        const std::size_t hw = static_cast<std::size_t>(op.in.h) * op.in.w;
        for (int c = 0; c < op.in.c; ++c) {
          for (int n = 0; n < N; ++n) {
            float* dst = gin.data() + (static_cast<std::size_t>(c) * N + n) * hw;
            for (std::size_t p = 0; p < hw; ++p) dst[p] = g[(c * hw + p) * N + n];
          }
        }
        break;
      }
    }
    if (!need_input) break;
    std::swap(g, gin);
  }

  if (input_grad) {
    const Shape& sh = s.arch.input;
    const std::size_t HW = sh.pixels();
    const int C = sh.channels;
    input_grad->resize(static_cast<std::size_t>(N) * sh.size());
    for (int n = 0; n < N; ++n) {
      float* img = input_grad->data() + n * sh.size();
      for (std::size_t p = 0; p < HW; ++p) {
        for (int c = 0; c < C; ++c) img[p * C + c] = g[(static_cast<std::size_t>(c) * N + n) * HW + p];
      }
    }
  }
}

double softmax_cross_entropy(std::span<const float> logits, int classes, int batch,
                             std::span<const int> targets, std::vector<float>* logits_grad) {
  if (logits.size() != static_cast<std::size_t>(classes) * batch ||
      targets.size() != static_cast<std::size_t>(batch)) {
    throw Error(ErrorCode::kShapeMismatch, "cross-entropy inputs disagree in size");
  }
  if (logits_grad) logits_grad->assign(logits.size(), 0.f);
  double total = 0.0;
  for (int n = 0; n < batch; ++n) {
    const int t = targets[n];
    if (t < 0 || t >= classes) throw Error(ErrorCode::kInvalidArgument, "label out of range");
    double mx = -std::numeric_limits<double>::infinity();
    for (int k = 0; k < classes; ++k) mx = std::max(mx, static_cast<double>(logits[k * batch + n]));
    double z = 0.0;
    for (int k = 0; k < classes; ++k) z += std::exp(logits[k * batch + n] - mx);
    const double log_z = mx + std::log(z);
    total += log_z - logits[t * batch + n];
    if (logits_grad) {
      for (int k = 0; k < classes; ++k) {
        const double p = std::exp(logits[k * batch + n] - log_z);
        (*logits_grad)[k * batch + n] = static_cast<float>((p - (k == t ? 1.0 : 0.0)) / batch);
      }
    }
  }
  return total / batch;
}

std::vector<float> softmax(std::span<const float> logits, int classes, int batch) {
  std::vector<float> out(logits.size());
  for (int n = 0; n < batch; ++n) {
    float mx = -std::numeric_limits<float>::infinity();
    for (int k = 0; k < classes; ++k) mx = std::max(mx, logits[k * batch + n]);
    double z = 0.0;
    for (int k = 0; k < classes; ++k) z += std::exp(static_cast<double>(logits[k * batch + n] - mx));
    for (int k = 0; k < classes; ++k) {
      out[k * batch + n] = static_cast<float>(std::exp(static_cast<double>(logits[k * batch + n] - mx)) / z);
    }
  }
  return out;
}

std::vector<int> argmax_columns(std::span<const float> logits, int classes, int batch) {
  std::vector<int> out(batch, 0);
  for (int n = 0; n < batch; ++n) {
    float best = logits[n];
    for (int k = 1; k < classes; ++k) {
      if (logits[k * batch + n] > best) {
        best = logits[k * batch + n];
        out[n] = k;
      }
    }
  }
  return out;
}

void Adam::step(std::span<const std::span<float>> values,
                std::span<const std::span<const float>> grads) {
  if (values.size() != grads.size()) throw Error(ErrorCode::kShapeMismatch, "adam buffer count");
  if (m_.empty()) {
    for (const auto& v : values) {
      m_.emplace_back(v.size(), 0.f);
      v_.emplace_back(v.size(), 0.f);
    }
  }
  if (m_.size() != values.size()) throw Error(ErrorCode::kShapeMismatch, "adam buffer count changed");
  ++t_;
  const double b1 = opts_.beta1, b2 = opts_.beta2;
  const double c1 = 1.0 - std::pow(b1, static_cast<double>(t_));
  const double c2 = 1.0 - std::pow(b2, static_cast<double>(t_));
  const float step = static_cast<float>(opts_.lr / c1);
  const float inv_c2 = static_cast<float>(1.0 / c2);
  const float eps = static_cast<float>(opts_.eps);
  const float fb1 = static_cast<float>(b1), fb2 = static_cast<float>(b2);
  for (std::size_t b = 0; b < values.size(); ++b) {
    auto val = values[b];
    auto grd = grads[b];
    if (val.size() != grd.size() || val.size() != m_[b].size()) {
      throw Error(ErrorCode::kShapeMismatch, "adam buffer size");
    }
    float* m = m_[b].data();
    float* v = v_[b].data();
    for (std::size_t k = 0; k < val.size(); ++k) {
      const float gk = grd[k];
      m[k] = fb1 * m[k] + (1.f - fb1) * gk;
      v[k] = fb2 * v[k] + (1.f - fb2) * gk * gk;
      val[k] -= step * m[k] / (std::sqrt(v[k] * inv_c2) + eps);
    }
  }
}

void Adam::step(Params& params, const Params& grads) {
  std::vector<std::span<float>> vals;
  std::vector<std::span<const float>> grds;
  for (std::size_t i = 0; i < params.size(); ++i) {
    vals.emplace_back(params[i].weight);
    vals.emplace_back(params[i].bias);
    grds.emplace_back(grads[i].weight);
    grds.emplace_back(grads[i].bias);
  }
  step(vals, grds);
}

}  // namespace sgba::nn
