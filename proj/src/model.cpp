#include "model.hpp"

#include <algorithm>
#include <bit>
#include <cmath>
#include <cstring>
#include <fstream>
#include <numeric>

namespace fedlora {

static_assert(std::endian::native == std::endian::little, "checkpoint format assumes little-endian");

namespace {

constexpr double kGeluC0 = 0.7978845608028654;  // sqrt(2/pi)
constexpr double kGeluC1 = 0.044715;
constexpr double kLnEps = 1e-5;

inline double gelu(double x) {
  const double u = kGeluC0 * (x + kGeluC1 * x * x * x);
  return 0.5 * x * (1.0 + std::tanh(u));
}

inline double gelu_deriv(double x) {
  const double u = kGeluC0 * (x + kGeluC1 * x * x * x);
  const double t = std::tanh(u);
  const double du = kGeluC0 * (1.0 + 3.0 * kGeluC1 * x * x);
  return 0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * du;
}

}  // namespace

void ModelConfig::validate() const {
  if (image_h < 1 || image_w < 1 || channels < 1) throw ConfigError("model.image: dimensions must be positive");
  if (classes < 2) throw ConfigError("model.classes must be >= 2");
  if (activation != "gelu_tanh") throw ConfigError("model.activation: unknown activation " + activation);
  if (backbone == Backbone::kTinyTransformer) {
    if (patch < 1) throw ConfigError("model.patch must be positive");
    if (image_h % patch != 0 || image_w % patch != 0)
      throw ConfigError("model.patch: image dimensions must be divisible by patch size");
    if (dim < 1 || heads < 1) throw ConfigError("model.dim and model.heads must be positive");
    if (dim % heads != 0) throw ConfigError("model.heads: dim must be divisible by heads");
    if (blocks < 1 || blocks > 2) throw ConfigError("model.blocks must be 1 or 2");
    if (mlp_ratio < 1) throw ConfigError("model.mlp_ratio must be >= 1");
  } else {
    if (mlp_hidden.empty()) throw ConfigError("model.mlp_hidden must name at least one layer");
    for (int h : mlp_hidden)
      if (h < 1) throw ConfigError("model.mlp_hidden: layer widths must be positive");
  }
}

void Batch::validate(const ModelConfig& cfg) const {
  if (static_cast<size_t>(n) * cfg.pixels() != images.size())
    throw InvalidInputError("batch: image buffer does not match config shape");
  if (labels.size() != static_cast<size_t>(n)) throw InvalidInputError("batch: labels/images length mismatch");
  for (int y : labels)
    if (y < 0 || y >= cfg.classes) throw InvalidInputError("batch: label out of range");
}

int ModelParams::index_of(const std::string& name) const {
  for (size_t i = 0; i < tensors.size(); ++i)
    if (tensors[i].name == name) return static_cast<int>(i);
  return -1;
}

const Matrix& ModelParams::tensor(const std::string& name) const {
  const int i = index_of(name);
  if (i < 0) throw InvalidInputError("unknown tensor " + name);
  return tensors[i].value;
}

Matrix& ModelParams::tensor(const std::string& name) {
  const int i = index_of(name);
  if (i < 0) throw InvalidInputError("unknown tensor " + name);
  return tensors[i].value;
}

size_t ModelParams::total_count() const {
  size_t total = 0;
  for (const auto& t : tensors) total += t.value.size();
  return total;
}

std::vector<double> ModelParams::flatten() const {
  std::vector<double> flat;
  flat.reserve(total_count());
  for (const auto& t : tensors) flat.insert(flat.end(), t.value.data.begin(), t.value.data.end());
  return flat;
}

void ModelParams::unflatten(const std::vector<double>& flat) {
  if (flat.size() != total_count()) throw InvalidInputError("unflatten: length mismatch");
  size_t off = 0;
  for (auto& t : tensors) {
    std::copy(flat.begin() + off, flat.begin() + off + t.value.size(), t.value.data.begin());
    off += t.value.size();
  }
}

// ---------------------------------------------------------------------------
// Construction

namespace {

void push_normal(ModelParams& p, const std::string& name, int rows, int cols, RngStream& rng) {
  Matrix m(rows, cols);
  const double scale = 1.0 / std::sqrt(static_cast<double>(rows));
  for (double& x : m.data) x = rng.next_normal() * scale;
  p.tensors.push_back({name, std::move(m)});
}

void push_const(ModelParams& p, const std::string& name, int rows, int cols, double value) {
  Matrix m(rows, cols);
  std::fill(m.data.begin(), m.data.end(), value);
  p.tensors.push_back({name, std::move(m)});
}

}  // namespace

ModelParams build(const ModelConfig& config, RngStream rng) {
  config.validate();
  ModelParams p;
  p.config = config;
  if (config.backbone == Backbone::kTinyTransformer) {
    const int d = config.dim;
    push_normal(p, "patch_embed.w", config.patch_dim(), d, rng);
    push_const(p, "patch_embed.b", 1, d, 0.0);
    {
      Matrix pos(config.tokens(), d);
      const double scale = 1.0 / std::sqrt(static_cast<double>(d));
      for (double& x : pos.data) x = rng.next_normal() * scale;
      p.tensors.push_back({"pos_embed", std::move(pos)});
    }
    for (int b = 0; b < config.blocks; ++b) {
      const std::string pre = "blk" + std::to_string(b) + ".";
      push_const(p, pre + "ln1.g", 1, d, 1.0);
      push_const(p, pre + "ln1.b", 1, d, 0.0);
      for (const char* w : {"wq", "wk", "wv", "wo"}) {
        push_normal(p, pre + "attn." + w, d, d, rng);
        push_const(p, pre + "attn.b" + std::string(1, w[1]), 1, d, 0.0);
      }
      push_const(p, pre + "ln2.g", 1, d, 1.0);
      push_const(p, pre + "ln2.b", 1, d, 0.0);
      push_normal(p, pre + "mlp.w1", d, config.mlp_ratio * d, rng);
      push_const(p, pre + "mlp.b1", 1, config.mlp_ratio * d, 0.0);
      push_normal(p, pre + "mlp.w2", config.mlp_ratio * d, d, rng);
      push_const(p, pre + "mlp.b2", 1, d, 0.0);
    }
    push_const(p, "ln_f.g", 1, d, 1.0);
    push_const(p, "ln_f.b", 1, d, 0.0);
    push_normal(p, "head.w", d, config.classes, rng);
    push_const(p, "head.b", 1, config.classes, 0.0);
  } else {
    int in = config.pixels();
    for (size_t i = 0; i < config.mlp_hidden.size(); ++i) {
      const std::string pre = "fc" + std::to_string(i) + ".";
      push_normal(p, pre + "w", in, config.mlp_hidden[i], rng);
      push_const(p, pre + "b", 1, config.mlp_hidden[i], 0.0);
      in = config.mlp_hidden[i];
    }
    push_normal(p, "head.w", in, config.classes, rng);
    push_const(p, "head.b", 1, config.classes, 0.0);
  }
  return p;
}

std::vector<std::string> lora_target_names(const ModelConfig& config, const std::string& targets_spec) {
  std::vector<std::string> names;
  if (config.backbone == Backbone::kTinyTransformer) {
    if (targets_spec != "qv" && targets_spec != "qv_mlp")
      throw ConfigError("lora.targets: expected qv or qv_mlp, got " + targets_spec);
    for (int b = 0; b < config.blocks; ++b) {
      const std::string pre = "blk" + std::to_string(b) + ".";
      names.push_back(pre + "attn.wq");
      names.push_back(pre + "attn.wv");
      if (targets_spec == "qv_mlp") {
        names.push_back(pre + "mlp.w1");
        names.push_back(pre + "mlp.w2");
      }
    }
  } else {
    if (targets_spec != "hidden")
      throw ConfigError("lora.targets: expected hidden for mlp backbone, got " + targets_spec);
    for (size_t i = 0; i < config.mlp_hidden.size(); ++i) names.push_back("fc" + std::to_string(i) + ".w");
  }
  return names;
}

// ---------------------------------------------------------------------------
// Trainable layout

TrainableLayout TrainableLayout::make(const ModelParams& params, const LoraAdapterSet* adapters) {
  TrainableLayout layout;
  size_t off = 0;
  auto push = [&](Kind kind, int index, size_t count) {
    layout.segments.push_back({kind, index, off, count});
    off += count;
  };
  if (adapters == nullptr || adapters->empty()) {
    for (size_t i = 0; i < params.tensors.size(); ++i)
      push(Kind::kBase, static_cast<int>(i), params.tensors[i].value.size());
  } else {
    for (size_t i = 0; i < adapters->adapters.size(); ++i) {
      const auto& ad = adapters->adapters[i];
      push(Kind::kLoraA, static_cast<int>(i), ad.a.size());
      push(Kind::kLoraB, static_cast<int>(i), ad.b.size());
    }
    if (params.config.train_head) {
      push(Kind::kBase, params.index_of("head.w"), params.tensor("head.w").size());
      push(Kind::kBase, params.index_of("head.b"), params.tensor("head.b").size());
    }
    if (params.config.train_layernorm) {
      for (size_t i = 0; i < params.tensors.size(); ++i) {
        const std::string& name = params.tensors[i].name;
        if (name.find("ln") != std::string::npos)
          push(Kind::kBase, static_cast<int>(i), params.tensors[i].value.size());
      }
    }
  }
  layout.dim = off;
  return layout;
}

std::vector<double> TrainableLayout::gather(const ModelParams& params, const LoraAdapterSet* adapters) const {
  std::vector<double> flat(dim);
  for (const auto& seg : segments) {
    const std::vector<double>* src = nullptr;
    switch (seg.kind) {
      case Kind::kBase: src = &params.tensors[seg.index].value.data; break;
      case Kind::kLoraA: src = &adapters->adapters[seg.index].a.data; break;
      case Kind::kLoraB: src = &adapters->adapters[seg.index].b.data; break;
    }
    std::copy(src->begin(), src->end(), flat.begin() + seg.offset);
  }
  return flat;
}

void TrainableLayout::scatter(const std::vector<double>& flat, ModelParams& params,
                              LoraAdapterSet* adapters) const {
  if (flat.size() != dim) throw InvalidInputError("layout scatter: length mismatch");
  for (const auto& seg : segments) {
    std::vector<double>* dst = nullptr;
    switch (seg.kind) {
      case Kind::kBase: dst = &params.tensors[seg.index].value.data; break;
      case Kind::kLoraA: dst = &adapters->adapters[seg.index].a.data; break;
      case Kind::kLoraB: dst = &adapters->adapters[seg.index].b.data; break;
    }
    std::copy(flat.begin() + seg.offset, flat.begin() + seg.offset + seg.count, dst->begin());
  }
}

// ---------------------------------------------------------------------------
// Forward / backward

namespace {

// Per-tensor weight resolution: adapted tensors are evaluated as w_res + a*b.
struct WeightView {
  std::vector<Matrix> owned;
  std::vector<const Matrix*> ptr;
  std::vector<int> adapter_of;  // adapter index per tensor, -1 when unadapted

  WeightView(const ModelParams& params, const LoraAdapterSet* adapters) {
    const size_t n = params.tensors.size();
    ptr.resize(n);
    adapter_of.assign(n, -1);
    size_t adapted = adapters ? adapters->adapters.size() : 0;
    owned.reserve(adapted);
    for (size_t i = 0; i < n; ++i) {
      const LoraAdapter* ad = nullptr;
      int ad_index = -1;
      if (adapters) {
        for (size_t j = 0; j < adapters->adapters.size(); ++j) {
          if (adapters->adapters[j].target == params.tensors[i].name) {
            ad = &adapters->adapters[j];
            ad_index = static_cast<int>(j);
            break;
          }
        }
      }
      if (ad) {
        owned.push_back(effective_weight(*ad));
        ptr[i] = &owned.back();
        adapter_of[i] = ad_index;
      } else {
        ptr[i] = &params.tensors[i].value;
      }
    }
  }
};

void add_bias_rows(Matrix& x, const Matrix& bias) {
  for (int r = 0; r < x.rows; ++r) {
    double* row = &x.data[static_cast<size_t>(r) * x.cols];
    for (int c = 0; c < x.cols; ++c) row[c] += bias.data[c];
  }
}

// y = xhat*g + b rowwise; caches xhat and 1/std per row
void layernorm_forward(const Matrix& x, const Matrix& g, const Matrix& b, Matrix& xhat,
                       std::vector<double>& inv_std, Matrix& out) {
  const int n = x.rows, d = x.cols;
  xhat = Matrix(n, d);
  out = Matrix(n, d);
  inv_std.resize(n);
  for (int r = 0; r < n; ++r) {
    const double* row = &x.data[static_cast<size_t>(r) * d];
    double mean = 0.0;
    for (int c = 0; c < d; ++c) mean += row[c];
    mean /= d;
    double var = 0.0;
    for (int c = 0; c < d; ++c) var += (row[c] - mean) * (row[c] - mean);
    var /= d;
    const double inv = 1.0 / std::sqrt(var + kLnEps);
    inv_std[r] = inv;
    double* xh = &xhat.data[static_cast<size_t>(r) * d];
    double* o = &out.data[static_cast<size_t>(r) * d];
    for (int c = 0; c < d; ++c) {
      xh[c] = (row[c] - mean) * inv;
      o[c] = xh[c] * g.data[c] + b.data[c];
    }
  }
}

void layernorm_backward(const Matrix& dout, const Matrix& xhat, const std::vector<double>& inv_std,
                        const Matrix& g, Matrix& dx, Matrix* dg, Matrix* db) {
  const int n = dout.rows, d = dout.cols;
  dx = Matrix(n, d);
  for (int r = 0; r < n; ++r) {
    const double* dy = &dout.data[static_cast<size_t>(r) * d];
    const double* xh = &xhat.data[static_cast<size_t>(r) * d];
    double mean_h = 0.0, mean_hx = 0.0;
    for (int c = 0; c < d; ++c) {
      const double h = dy[c] * g.data[c];
      mean_h += h;
      mean_hx += h * xh[c];
    }
    mean_h /= d;
    mean_hx /= d;
    double* out = &dx.data[static_cast<size_t>(r) * d];
    for (int c = 0; c < d; ++c) {
      const double h = dy[c] * g.data[c];
      out[c] = (h - mean_h - xh[c] * mean_hx) * inv_std[r];
    }
    if (dg)
      for (int c = 0; c < d; ++c) dg->data[c] += dy[c] * xh[c];
    if (db)
      for (int c = 0; c < d; ++c) db->data[c] += dy[c];
  }
}

Matrix colsum(const Matrix& x) {
  Matrix s(1, x.cols);
  for (int r = 0; r < x.rows; ++r)
    for (int c = 0; c < x.cols; ++c) s.data[c] += x.at(r, c);
  return s;
}

Matrix extract_patches(const ModelConfig& cfg, const Batch& batch) {
  const int P = cfg.patch, C = cfg.channels, W = cfg.image_w;
  const int tx = cfg.image_w / P, ty = cfg.image_h / P;
  const int tokens = tx * ty, pd = cfg.patch_dim();
  Matrix patches(batch.n * tokens, pd);
  for (int s = 0; s < batch.n; ++s) {
    const double* img = &batch.images[static_cast<size_t>(s) * cfg.pixels()];
    for (int py = 0; py < ty; ++py) {
      for (int px = 0; px < tx; ++px) {
        double* row = &patches.data[static_cast<size_t>(s * tokens + py * tx + px) * pd];
        for (int dy = 0; dy < P; ++dy)
          for (int dx = 0; dx < P; ++dx)
            for (int c = 0; c < C; ++c)
              row[(dy * P + dx) * C + c] = img[((py * P + dy) * W + (px * P + dx)) * C + c];
      }
    }
  }
  return patches;
}

void scatter_patches(const ModelConfig& cfg, const Matrix& dpatches, std::vector<double>& dimages) {
  const int P = cfg.patch, C = cfg.channels, W = cfg.image_w;
  const int tx = cfg.image_w / P, ty = cfg.image_h / P;
  const int tokens = tx * ty, pd = cfg.patch_dim();
  const int n = dpatches.rows / tokens;
  dimages.assign(static_cast<size_t>(n) * cfg.pixels(), 0.0);
  for (int s = 0; s < n; ++s) {
    double* img = &dimages[static_cast<size_t>(s) * cfg.pixels()];
    for (int py = 0; py < ty; ++py)
      for (int px = 0; px < tx; ++px) {
        const double* row = &dpatches.data[static_cast<size_t>(s * tokens + py * tx + px) * pd];
        for (int dy = 0; dy < P; ++dy)
          for (int dx = 0; dx < P; ++dx)
            for (int c = 0; c < C; ++c)
              img[((py * P + dy) * W + (px * P + dx)) * C + c] = row[(dy * P + dx) * C + c];
      }
  }
}

struct BlockCache {
  Matrix ln1_xhat, ln1_out;
  std::vector<double> ln1_inv;
  Matrix q, k, v;
  std::vector<double> attn;  // B*heads*T*T row-softmax probabilities
  Matrix z;
  Matrix x_attn;
  Matrix ln2_xhat, ln2_out;
  std::vector<double> ln2_inv;
  Matrix m1;  // pre-activation
  Matrix m1_act;
  Matrix x_out;
};

struct TransformerCache {
  Matrix patches;
  Matrix x0;
  std::vector<BlockCache> blocks;
  Matrix f_xhat, f_out;
  std::vector<double> f_inv;
  Matrix pooled;
  Matrix logits;
};

struct MlpCache {
  Matrix input;                  // B x pixels
  std::vector<Matrix> pre;       // pre-activations per hidden layer
  std::vector<Matrix> act;       // activations per hidden layer
  Matrix logits;
};

void attention_forward(const ModelConfig& cfg, int batch_n, BlockCache& bc) {
  const int T = cfg.tokens(), d = cfg.dim, nh = cfg.heads, dh = d / nh;
  const double scale = 1.0 / std::sqrt(static_cast<double>(dh));
  bc.z = Matrix(batch_n * T, d);
  bc.attn.assign(static_cast<size_t>(batch_n) * nh * T * T, 0.0);
  std::vector<double> scores(static_cast<size_t>(T) * T);
  for (int s = 0; s < batch_n; ++s) {
    const int base = s * T;
    for (int h = 0; h < nh; ++h) {
      const int hoff = h * dh;
      // scores = Qh Kh^T * scale
      for (int i = 0; i < T; ++i) {
        const double* qi = &bc.q.data[static_cast<size_t>(base + i) * d + hoff];
        for (int j = 0; j < T; ++j) {
          const double* kj = &bc.k.data[static_cast<size_t>(base + j) * d + hoff];
          double acc = 0.0;
          for (int c = 0; c < dh; ++c) acc += qi[c] * kj[c];
          scores[static_cast<size_t>(i) * T + j] = acc * scale;
        }
      }
      double* probs = &bc.attn[(static_cast<size_t>(s) * nh + h) * T * T];
      for (int i = 0; i < T; ++i) {
        double* prow = probs + static_cast<size_t>(i) * T;
        const double* srow = &scores[static_cast<size_t>(i) * T];
        double mx = srow[0];
        for (int j = 1; j < T; ++j) mx = std::max(mx, srow[j]);
        double z = 0.0;
        for (int j = 0; j < T; ++j) {
          prow[j] = std::exp(srow[j] - mx);
          z += prow[j];
        }
        for (int j = 0; j < T; ++j) prow[j] /= z;
      }
      // z = probs * Vh
      for (int i = 0; i < T; ++i) {
        double* zi = &bc.z.data[static_cast<size_t>(base + i) * d + hoff];
        const double* prow = probs + static_cast<size_t>(i) * T;
        for (int j = 0; j < T; ++j) {
          const double p = prow[j];
          const double* vj = &bc.v.data[static_cast<size_t>(base + j) * d + hoff];
          for (int c = 0; c < dh; ++c) zi[c] += p * vj[c];
        }
      }
    }
  }
}

void attention_backward(const ModelConfig& cfg, int batch_n, const BlockCache& bc, const Matrix& dz,
                        Matrix& dq, Matrix& dk, Matrix& dv) {
  const int T = cfg.tokens(), d = cfg.dim, nh = cfg.heads, dh = d / nh;
  const double scale = 1.0 / std::sqrt(static_cast<double>(dh));
  dq = Matrix(batch_n * T, d);
  dk = Matrix(batch_n * T, d);
  dv = Matrix(batch_n * T, d);
  std::vector<double> dprobs(static_cast<size_t>(T) * T);
  std::vector<double> dscores(static_cast<size_t>(T) * T);
  for (int s = 0; s < batch_n; ++s) {
    const int base = s * T;
    for (int h = 0; h < nh; ++h) {
      const int hoff = h * dh;
      const double* probs = &bc.attn[(static_cast<size_t>(s) * nh + h) * T * T];
      // dP = dZh Vh^T ; dVh = P^T dZh
      for (int i = 0; i < T; ++i) {
        const double* dzi = &dz.data[static_cast<size_t>(base + i) * d + hoff];
        for (int j = 0; j < T; ++j) {
          const double* vj = &bc.v.data[static_cast<size_t>(base + j) * d + hoff];
          double acc = 0.0;
          for (int c = 0; c < dh; ++c) acc += dzi[c] * vj[c];
          dprobs[static_cast<size_t>(i) * T + j] = acc;
        }
        const double* prow = probs + static_cast<size_t>(i) * T;
        for (int j = 0; j < T; ++j) {
          double* dvj = &dv.data[static_cast<size_t>(base + j) * d + hoff];
          const double p = prow[j];
          for (int c = 0; c < dh; ++c) dvj[c] += p * dzi[c];
        }
      }
      // softmax backward per row
      for (int i = 0; i < T; ++i) {
        const double* prow = probs + static_cast<size_t>(i) * T;
        const double* dprow = &dprobs[static_cast<size_t>(i) * T];
        double inner = 0.0;
        for (int j = 0; j < T; ++j) inner += prow[j] * dprow[j];
        double* dsrow = &dscores[static_cast<size_t>(i) * T];
        for (int j = 0; j < T; ++j) dsrow[j] = prow[j] * (dprow[j] - inner);
      }
      // dQh = dS Kh * scale ; dKh = dS^T Qh * scale
      for (int i = 0; i < T; ++i) {
        double* dqi = &dq.data[static_cast<size_t>(base + i) * d + hoff];
        const double* dsrow = &dscores[static_cast<size_t>(i) * T];
        for (int j = 0; j < T; ++j) {
          const double w = dsrow[j] * scale;
          const double* kj = &bc.k.data[static_cast<size_t>(base + j) * d + hoff];
          double* dkj = &dk.data[static_cast<size_t>(base + j) * d + hoff];
          const double* qi = &bc.q.data[static_cast<size_t>(base + i) * d + hoff];
          for (int c = 0; c < dh; ++c) {
            dqi[c] += w * kj[c];
            dkj[c] += w * qi[c];
          }
        }
      }
    }
  }
}

TransformerCache transformer_forward(const ModelParams& params, const WeightView& wv, const Batch& batch) {
  const ModelConfig& cfg = params.config;
  const int T = cfg.tokens(), d = cfg.dim;
  TransformerCache tc;
  tc.patches = extract_patches(cfg, batch);
  tc.x0 = matmul(tc.patches, *wv.ptr[params.index_of("patch_embed.w")]);
  add_bias_rows(tc.x0, *wv.ptr[params.index_of("patch_embed.b")]);
  const Matrix& pos = *wv.ptr[params.index_of("pos_embed")];
  for (int s = 0; s < batch.n; ++s)
    for (int t = 0; t < T; ++t)
      for (int c = 0; c < d; ++c) tc.x0.at(s * T + t, c) += pos.at(t, c);

  const Matrix* x = &tc.x0;
  tc.blocks.resize(cfg.blocks);
  for (int b = 0; b < cfg.blocks; ++b) {
    BlockCache& bc = tc.blocks[b];
    const std::string pre = "blk" + std::to_string(b) + ".";
    layernorm_forward(*x, *wv.ptr[params.index_of(pre + "ln1.g")], *wv.ptr[params.index_of(pre + "ln1.b")],
                      bc.ln1_xhat, bc.ln1_inv, bc.ln1_out);
    bc.q = matmul(bc.ln1_out, *wv.ptr[params.index_of(pre + "attn.wq")]);
    add_bias_rows(bc.q, *wv.ptr[params.index_of(pre + "attn.bq")]);
    bc.k = matmul(bc.ln1_out, *wv.ptr[params.index_of(pre + "attn.wk")]);
    add_bias_rows(bc.k, *wv.ptr[params.index_of(pre + "attn.bk")]);
    bc.v = matmul(bc.ln1_out, *wv.ptr[params.index_of(pre + "attn.wv")]);
    add_bias_rows(bc.v, *wv.ptr[params.index_of(pre + "attn.bv")]);
    attention_forward(cfg, batch.n, bc);
    Matrix o = matmul(bc.z, *wv.ptr[params.index_of(pre + "attn.wo")]);
    add_bias_rows(o, *wv.ptr[params.index_of(pre + "attn.bo")]);
    bc.x_attn = *x;
    add_scaled(bc.x_attn, o, 1.0);
    layernorm_forward(bc.x_attn, *wv.ptr[params.index_of(pre + "ln2.g")],
                      *wv.ptr[params.index_of(pre + "ln2.b")], bc.ln2_xhat, bc.ln2_inv, bc.ln2_out);
    bc.m1 = matmul(bc.ln2_out, *wv.ptr[params.index_of(pre + "mlp.w1")]);
    add_bias_rows(bc.m1, *wv.ptr[params.index_of(pre + "mlp.b1")]);
    bc.m1_act = bc.m1;
    for (double& v : bc.m1_act.data) v = gelu(v);
    Matrix m2 = matmul(bc.m1_act, *wv.ptr[params.index_of(pre + "mlp.w2")]);
    add_bias_rows(m2, *wv.ptr[params.index_of(pre + "mlp.b2")]);
    bc.x_out = bc.x_attn;
    add_scaled(bc.x_out, m2, 1.0);
    x = &bc.x_out;
  }

  layernorm_forward(*x, *wv.ptr[params.index_of("ln_f.g")], *wv.ptr[params.index_of("ln_f.b")], tc.f_xhat,
                    tc.f_inv, tc.f_out);
  tc.pooled = Matrix(batch.n, d);
  for (int s = 0; s < batch.n; ++s)
    for (int t = 0; t < T; ++t)
      for (int c = 0; c < d; ++c) tc.pooled.at(s, c) += tc.f_out.at(s * T + t, c) / T;
  tc.logits = matmul(tc.pooled, *wv.ptr[params.index_of("head.w")]);
  add_bias_rows(tc.logits, *wv.ptr[params.index_of("head.b")]);
  return tc;
}

MlpCache mlp_forward(const ModelParams& params, const WeightView& wv, const Batch& batch) {
  const ModelConfig& cfg = params.config;
  MlpCache mc;
  mc.input = Matrix(batch.n, cfg.pixels(), batch.images);
  const Matrix* x = &mc.input;
  for (size_t i = 0; i < cfg.mlp_hidden.size(); ++i) {
    const std::string pre = "fc" + std::to_string(i) + ".";
    Matrix z = matmul(*x, *wv.ptr[params.index_of(pre + "w")]);
    add_bias_rows(z, *wv.ptr[params.index_of(pre + "b")]);
    mc.pre.push_back(z);
    Matrix a = z;
    for (double& v : a.data) v = gelu(v);
    mc.act.push_back(std::move(a));
    x = &mc.act.back();
  }
  mc.logits = matmul(*x, *wv.ptr[params.index_of("head.w")]);
  add_bias_rows(mc.logits, *wv.ptr[params.index_of("head.b")]);
  return mc;
}

// mean cross-entropy and dlogits; labels may be overridden by a fixed target
double softmax_ce(const Matrix& logits, const std::vector<int>& labels, int forced_target, Matrix* dlogits) {
  const int n = logits.rows, k = logits.cols;
  if (dlogits) *dlogits = Matrix(n, k);
  double loss = 0.0;
  for (int r = 0; r < n; ++r) {
    const double* row = &logits.data[static_cast<size_t>(r) * k];
    const int y = forced_target >= 0 ? forced_target : labels[r];
    double mx = row[0];
    for (int c = 1; c < k; ++c) mx = std::max(mx, row[c]);
    double z = 0.0;
    for (int c = 0; c < k; ++c) z += std::exp(row[c] - mx);
    loss += std::log(z) - (row[y] - mx);
    if (dlogits) {
      double* drow = &dlogits->data[static_cast<size_t>(r) * k];
      for (int c = 0; c < k; ++c) drow[c] = std::exp(row[c] - mx) / z / n;
      drow[y] -= 1.0 / n;
    }
  }
  return loss / n;
}

struct BackwardOutput {
  std::vector<Matrix> tensor_grads;  // per tensor index (empty when unused)
  std::vector<double> input_grad;    // filled when requested
};

}  // namespace

ForwardResult forward(const ModelParams& params, const LoraAdapterSet* adapters, const Batch& batch) {
  batch.validate(params.config);
  WeightView wv(params, adapters);
  ForwardResult out;
  if (params.config.backbone == Backbone::kTinyTransformer) {
    TransformerCache tc = transformer_forward(params, wv, batch);
    out.logits = std::move(tc.logits);
    out.features = std::move(tc.pooled);
  } else {
    MlpCache mc = mlp_forward(params, wv, batch);
    out.logits = std::move(mc.logits);
    out.features = mc.act.empty() ? mc.input : std::move(mc.act.back());
  }
  return out;
}

namespace {

// Shared backward driver. Computes tensor/adapter gradients for everything in
// `need_weight_grad` plus the pixel gradient when `want_input` is set.
BackwardOutput backward(const ModelParams& params, const WeightView& wv, const Batch& batch,
                        int forced_target, const std::vector<bool>& need_weight_grad, bool want_input,
                        double* loss_out) {
  const ModelConfig& cfg = params.config;
  BackwardOutput out;
  out.tensor_grads.resize(params.tensors.size());

  auto want = [&](int idx) { return need_weight_grad[idx] || wv.adapter_of[idx] >= 0; };
  auto grad_of = [&](int idx) -> Matrix& {
    if (out.tensor_grads[idx].size() == 0)
      out.tensor_grads[idx] = Matrix(params.tensors[idx].value.rows, params.tensors[idx].value.cols);
    return out.tensor_grads[idx];
  };

  if (cfg.backbone == Backbone::kTinyTransformer) {
    TransformerCache tc = transformer_forward(params, wv, batch);
    Matrix dlogits;
    *loss_out = softmax_ce(tc.logits, batch.labels, forced_target, &dlogits);

    const int T = cfg.tokens(), d = cfg.dim;
    const int head_w = params.index_of("head.w"), head_b = params.index_of("head.b");
    if (want(head_w)) grad_of(head_w) = matmul_tn(tc.pooled, dlogits);
    if (want(head_b)) grad_of(head_b) = colsum(dlogits);
    Matrix dpooled = matmul_nt(dlogits, *wv.ptr[head_w]);

    Matrix df(batch.n * T, d);
    for (int s = 0; s < batch.n; ++s)
      for (int t = 0; t < T; ++t)
        for (int c = 0; c < d; ++c) df.at(s * T + t, c) = dpooled.at(s, c) / T;

    const int lnf_g = params.index_of("ln_f.g"), lnf_b = params.index_of("ln_f.b");
    Matrix dx;
    layernorm_backward(df, tc.f_xhat, tc.f_inv, *wv.ptr[lnf_g], dx,
                       want(lnf_g) ? &grad_of(lnf_g) : nullptr, want(lnf_b) ? &grad_of(lnf_b) : nullptr);

    for (int b = cfg.blocks - 1; b >= 0; --b) {
      const BlockCache& bc = tc.blocks[b];
      const std::string pre = "blk" + std::to_string(b) + ".";
      const int w1 = params.index_of(pre + "mlp.w1"), b1 = params.index_of(pre + "mlp.b1");
      const int w2 = params.index_of(pre + "mlp.w2"), b2 = params.index_of(pre + "mlp.b2");
      const int ln2g = params.index_of(pre + "ln2.g"), ln2b = params.index_of(pre + "ln2.b");
      const int ln1g = params.index_of(pre + "ln1.g"), ln1b = params.index_of(pre + "ln1.b");
      const int wq = params.index_of(pre + "attn.wq"), bq = params.index_of(pre + "attn.bq");
      const int wk = params.index_of(pre + "attn.wk"), bk = params.index_of(pre + "attn.bk");
      const int wvi = params.index_of(pre + "attn.wv"), bv = params.index_of(pre + "attn.bv");
      const int wo = params.index_of(pre + "attn.wo"), bo = params.index_of(pre + "attn.bo");

      // MLP sub-block: dx is the gradient at x_out = x_attn + mlp(ln2(x_attn))
      const Matrix& dm2 = dx;
      if (want(w2)) grad_of(w2) = matmul_tn(bc.m1_act, dm2);
      if (want(b2)) grad_of(b2) = colsum(dm2);
      Matrix dact = matmul_nt(dm2, *wv.ptr[w2]);
      for (size_t i = 0; i < dact.data.size(); ++i) dact.data[i] *= gelu_deriv(bc.m1.data[i]);
      if (want(w1)) grad_of(w1) = matmul_tn(bc.ln2_out, dact);
      if (want(b1)) grad_of(b1) = colsum(dact);
      Matrix da2 = matmul_nt(dact, *wv.ptr[w1]);
      Matrix dx_ln2;
      layernorm_backward(da2, bc.ln2_xhat, bc.ln2_inv, *wv.ptr[ln2g], dx_ln2,
                         want(ln2g) ? &grad_of(ln2g) : nullptr, want(ln2b) ? &grad_of(ln2b) : nullptr);
      Matrix dx_attn = dx;  // residual path
      add_scaled(dx_attn, dx_ln2, 1.0);

      // attention sub-block
      const Matrix& do_ = dx_attn;
      if (want(wo)) grad_of(wo) = matmul_tn(bc.z, do_);
      if (want(bo)) grad_of(bo) = colsum(do_);
      Matrix dz = matmul_nt(do_, *wv.ptr[wo]);
      Matrix dq, dk, dv;
      attention_backward(cfg, batch.n, bc, dz, dq, dk, dv);
      if (want(wq)) grad_of(wq) = matmul_tn(bc.ln1_out, dq);
      if (want(bq)) grad_of(bq) = colsum(dq);
      if (want(wk)) grad_of(wk) = matmul_tn(bc.ln1_out, dk);
      if (want(bk)) grad_of(bk) = colsum(dk);
      if (want(wvi)) grad_of(wvi) = matmul_tn(bc.ln1_out, dv);
      if (want(bv)) grad_of(bv) = colsum(dv);
      Matrix da1 = matmul_nt(dq, *wv.ptr[wq]);
      add_scaled(da1, matmul_nt(dk, *wv.ptr[wk]), 1.0);
      add_scaled(da1, matmul_nt(dv, *wv.ptr[wvi]), 1.0);
      Matrix dx_ln1;
      layernorm_backward(da1, bc.ln1_xhat, bc.ln1_inv, *wv.ptr[ln1g], dx_ln1,
                         want(ln1g) ? &grad_of(ln1g) : nullptr, want(ln1b) ? &grad_of(ln1b) : nullptr);
      dx = dx_attn;  // residual into the block input
      add_scaled(dx, dx_ln1, 1.0);
    }

    const int pe_w = params.index_of("patch_embed.w"), pe_b = params.index_of("patch_embed.b");
    const int pos = params.index_of("pos_embed");
    if (want(pos)) {
      Matrix& dpos = grad_of(pos);
      for (int s = 0; s < batch.n; ++s)
        for (int t = 0; t < T; ++t)
          for (int c = 0; c < d; ++c) dpos.at(t, c) += dx.at(s * T + t, c);
    }
    if (want(pe_w)) grad_of(pe_w) = matmul_tn(tc.patches, dx);
    if (want(pe_b)) grad_of(pe_b) = colsum(dx);
    if (want_input) {
      Matrix dpatches = matmul_nt(dx, *wv.ptr[pe_w]);
      scatter_patches(cfg, dpatches, out.input_grad);
    }
  } else {
    MlpCache mc = mlp_forward(params, wv, batch);
    Matrix dlogits;
    *loss_out = softmax_ce(mc.logits, batch.labels, forced_target, &dlogits);
    const int nl = static_cast<int>(cfg.mlp_hidden.size());
    const Matrix& last = nl > 0 ? mc.act.back() : mc.input;
    const int head_w = params.index_of("head.w"), head_b = params.index_of("head.b");
    if (want(head_w)) grad_of(head_w) = matmul_tn(last, dlogits);
    if (want(head_b)) grad_of(head_b) = colsum(dlogits);
    Matrix dx = matmul_nt(dlogits, *wv.ptr[head_w]);
    for (int i = nl - 1; i >= 0; --i) {
      for (size_t j = 0; j < dx.data.size(); ++j) dx.data[j] *= gelu_deriv(mc.pre[i].data[j]);
      const std::string pre = "fc" + std::to_string(i) + ".";
      const int w = params.index_of(pre + "w"), bi = params.index_of(pre + "b");
      const Matrix& in = i > 0 ? mc.act[i - 1] : mc.input;
      if (want(w)) grad_of(w) = matmul_tn(in, dx);
      if (want(bi)) grad_of(bi) = colsum(dx);
      dx = matmul_nt(dx, *wv.ptr[w]);
    }
    if (want_input) out.input_grad = dx.data;
  }
  return out;
}

}  // namespace

LossGrad loss_and_grad(const ModelParams& params, const LoraAdapterSet* adapters, const Batch& batch,
                       const TrainableLayout& layout) {
  batch.validate(params.config);
  WeightView wv(params, adapters);
  std::vector<bool> need(params.tensors.size(), false);
  for (const auto& seg : layout.segments)
    if (seg.kind == TrainableLayout::Kind::kBase) need[seg.index] = true;

  double loss = 0.0;
  BackwardOutput bo = backward(params, wv, batch, -1, need, false, &loss);

  LossGrad lg;
  lg.loss = loss;
  lg.grad.assign(layout.dim, 0.0);
  for (const auto& seg : layout.segments) {
    if (seg.kind == TrainableLayout::Kind::kBase) {
      const Matrix& g = bo.tensor_grads[seg.index];
      if (g.size() != 0) std::copy(g.data.begin(), g.data.end(), lg.grad.begin() + seg.offset);
    } else {
      const LoraAdapter& ad = adapters->adapters[seg.index];
      const int ti = params.index_of(ad.target);
      const Matrix& dw = bo.tensor_grads[ti];
      if (dw.size() == 0) continue;
      if (seg.kind == TrainableLayout::Kind::kLoraA) {
        Matrix da = matmul_nt(dw, ad.b);  // dW * B^T
        std::copy(da.data.begin(), da.data.end(), lg.grad.begin() + seg.offset);
      } else {
        Matrix db = matmul_tn(ad.a, dw);  // A^T * dW
        std::copy(db.data.begin(), db.data.end(), lg.grad.begin() + seg.offset);
      }
    }
  }
  return lg;
}

std::vector<double> input_grad(const ModelParams& params, const LoraAdapterSet* adapters,
                               const Batch& batch, int target_label) {
  batch.validate(params.config);
  if (target_label < 0 || target_label >= params.config.classes)
    throw InvalidInputError("input_grad: target label out of range");
  WeightView wv(params, adapters);
  std::vector<bool> need(params.tensors.size(), false);
  double loss = 0.0;
  BackwardOutput bo = backward(params, wv, batch, target_label, need, true, &loss);
  return std::move(bo.input_grad);
}

double eval_loss(const ModelParams& params, const LoraAdapterSet* adapters, const Batch& batch) {
  ForwardResult fr = forward(params, adapters, batch);
  return softmax_ce(fr.logits, batch.labels, -1, nullptr);
}

double eval_loss_toward(const ModelParams& params, const LoraAdapterSet* adapters, const Batch& batch,
                        int target_label) {
  ForwardResult fr = forward(params, adapters, batch);
  return softmax_ce(fr.logits, batch.labels, target_label, nullptr);
}

// ---------------------------------------------------------------------------
// Pretraining

namespace {

double batch_accuracy(const Matrix& logits, const std::vector<int>& labels) {
  int correct = 0;
  for (int r = 0; r < logits.rows; ++r) {
    const double* row = &logits.data[static_cast<size_t>(r) * logits.cols];
    int best = 0;
    for (int c = 1; c < logits.cols; ++c)
      if (row[c] > row[best]) best = c;  // ties keep the lowest index
    if (best == labels[r]) ++correct;
  }
  return static_cast<double>(correct) / logits.rows;
}

Batch slice_batch(const Batch& src, const ModelConfig& cfg, const std::vector<int>& order, int begin,
                  int end) {
  Batch out;
  out.n = end - begin;
  const int px = cfg.pixels();
  out.images.resize(static_cast<size_t>(out.n) * px);
  out.labels.resize(out.n);
  for (int i = begin; i < end; ++i) {
    const int src_i = order[i];
    std::copy(src.images.begin() + static_cast<size_t>(src_i) * px,
              src.images.begin() + static_cast<size_t>(src_i + 1) * px,
              out.images.begin() + static_cast<size_t>(i - begin) * px);
    out.labels[i - begin] = src.labels[src_i];
  }
  return out;
}

}  // namespace

void sgd_train(ModelParams& params, LoraAdapterSet* adapters, const TrainableLayout& layout,
               const Batch& data, int epochs, double lr, int batch_size, RngStream rng) {
  data.validate(params.config);
  if (batch_size < 1) throw ConfigError("sgd: batch size must be >= 1");
  if (data.n == 0) return;
  for (int e = 0; e < epochs; ++e) {
    std::vector<int> order = rng.derive({kRngShuffle, static_cast<uint64_t>(e)}).shuffled_indices(data.n);
    for (int begin = 0; begin < data.n; begin += batch_size) {
      const int end = std::min(data.n, begin + batch_size);
      Batch mb = slice_batch(data, params.config, order, begin, end);
      LossGrad lg = loss_and_grad(params, adapters, mb, layout);
      std::vector<double> flat = layout.gather(params, adapters);
      for (size_t i = 0; i < flat.size(); ++i) flat[i] -= lr * lg.grad[i];
      layout.scatter(flat, params, adapters);
    }
  }
}

PretrainResult pretrain(const ModelConfig& config, const Batch& train, const Batch& val, int epochs,
                        double lr, int batch_size, double accuracy_floor, RngStream rng) {
  train.validate(config);
  val.validate(config);
  ModelParams params = build(config, rng.derive(kRngModelInit));
  TrainableLayout layout = TrainableLayout::make(params, nullptr);

  PretrainResult best;
  best.params = params;
  best.val_accuracy = batch_accuracy(forward(params, nullptr, val).logits, val.labels);

  RngStream shuffle_rng = rng.derive(kRngPretrain);
  for (int e = 0; e < epochs; ++e) {
    sgd_train(params, nullptr, layout, train, 1, lr, batch_size,
              shuffle_rng.derive(static_cast<uint64_t>(e)));
    const double acc = batch_accuracy(forward(params, nullptr, val).logits, val.labels);
    if (acc > best.val_accuracy) {
      best.val_accuracy = acc;
      best.params = params;
    }
  }
  best.floor_reached = best.val_accuracy >= accuracy_floor;
  return best;
}

// ---------------------------------------------------------------------------
// Checkpoint IO

namespace {

constexpr uint64_t kCkptMagic = 0x54504B43524F4C46ULL;  // "FLORCKPT"
constexpr uint32_t kCkptVersion = 1;

void write_u32(std::ostream& os, uint32_t v) { os.write(reinterpret_cast<const char*>(&v), 4); }
void write_u64(std::ostream& os, uint64_t v) { os.write(reinterpret_cast<const char*>(&v), 8); }
uint32_t read_u32(std::istream& is) {
  uint32_t v = 0;
  is.read(reinterpret_cast<char*>(&v), 4);
  return v;
}
uint64_t read_u64(std::istream& is) {
  uint64_t v = 0;
  is.read(reinterpret_cast<char*>(&v), 8);
  return v;
}

void write_string(std::ostream& os, const std::string& s) {
  write_u32(os, static_cast<uint32_t>(s.size()));
  os.write(s.data(), static_cast<std::streamsize>(s.size()));
}

std::string read_string(std::istream& is) {
  const uint32_t len = read_u32(is);
  std::string s(len, '\0');
  is.read(s.data(), len);
  return s;
}

void write_matrix(std::ostream& os, const Matrix& m) {
  write_u32(os, static_cast<uint32_t>(m.rows));
  write_u32(os, static_cast<uint32_t>(m.cols));
  os.write(reinterpret_cast<const char*>(m.data.data()),
           static_cast<std::streamsize>(m.data.size() * sizeof(double)));
}

Matrix read_matrix(std::istream& is) {
  const uint32_t rows = read_u32(is), cols = read_u32(is);
  Matrix m(static_cast<int>(rows), static_cast<int>(cols));
  is.read(reinterpret_cast<char*>(m.data.data()),
          static_cast<std::streamsize>(m.data.size() * sizeof(double)));
  return m;
}

}  // namespace

void save_checkpoint(const std::string& path, const ModelParams& params,
                     const LoraAdapterSet* adapters, uint64_t config_digest) {
  std::ofstream os(path, std::ios::binary);
  if (!os) throw FormatError("cannot open checkpoint for writing: " + path);
  write_u64(os, kCkptMagic);
  write_u32(os, kCkptVersion);
  write_u64(os, config_digest);
  write_u32(os, static_cast<uint32_t>(params.tensors.size()));
  for (const auto& t : params.tensors) {
    write_string(os, t.name);
    write_matrix(os, t.value);
  }
  const uint32_t n_adapters = adapters ? static_cast<uint32_t>(adapters->adapters.size()) : 0;
  write_u32(os, n_adapters);
  if (adapters) {
    for (const auto& ad : adapters->adapters) {
      write_string(os, ad.target);
      write_u32(os, static_cast<uint32_t>(ad.rank));
      write_matrix(os, ad.a);
      write_matrix(os, ad.b);
      write_matrix(os, ad.w_res);
      write_matrix(os, ad.a0);
      write_matrix(os, ad.b0);
    }
  }
  if (!os) throw FormatError("short write on checkpoint: " + path);
}

Checkpoint load_checkpoint(const std::string& path, const ModelConfig& config) {
  std::ifstream is(path, std::ios::binary);
  if (!is) throw FormatError("cannot open checkpoint: " + path);
  if (read_u64(is) != kCkptMagic) throw FormatError("bad checkpoint magic: " + path);
  if (read_u32(is) != kCkptVersion) throw FormatError("unsupported checkpoint version: " + path);
  Checkpoint ck;
  ck.config_digest = read_u64(is);
  ck.params.config = config;
  const uint32_t n_tensors = read_u32(is);
  for (uint32_t i = 0; i < n_tensors; ++i) {
    std::string name = read_string(is);
    ck.params.tensors.push_back({std::move(name), read_matrix(is)});
  }
  const uint32_t n_adapters = read_u32(is);
  if (n_adapters > 0) {
    LoraAdapterSet set;
    for (uint32_t i = 0; i < n_adapters; ++i) {
      LoraAdapter ad;
      ad.target = read_string(is);
      ad.rank = static_cast<int>(read_u32(is));
      ad.a = read_matrix(is);
      ad.b = read_matrix(is);
      ad.w_res = read_matrix(is);
      ad.a0 = read_matrix(is);
      ad.b0 = read_matrix(is);
      set.adapters.push_back(std::move(ad));
    }
    ck.adapters = std::move(set);
  }
  if (!is) throw FormatError("truncated checkpoint: " + path);
  return ck;
}

}  // namespace fedlora
