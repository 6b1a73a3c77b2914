#include "s2me/models.hpp"

#include <cmath>
#include <set>
#include <stdexcept>

namespace s2me::models {

const char* model_name(ModelKind k) { return k == ModelKind::Unet ? "unet" : "ynet"; }

ModelKind model_from_name(const std::string& name) {
  if (name == "unet") return ModelKind::Unet;
  if (name == "ynet") return ModelKind::Ynet;
  throw std::invalid_argument("unknown model kind '" + name + "' (want unet|ynet)");
}

const char* norm_name(NormKind k) { return k == NormKind::Batch ? "batch" : "instance"; }

NormKind norm_from_name(const std::string& name) {
  if (name == "batch") return NormKind::Batch;
  if (name == "instance") return NormKind::Instance;
  throw std::invalid_argument("unknown norm kind '" + name + "' (want batch|instance)");
}

namespace {

// Deterministic parameter factory: creation order defines both the rng
// stream and the checkpoint layout.
struct Builder {
  Rng rng;
  std::vector<Parameter>* sink;
  std::set<std::string> names;

  Parameter make(const std::string& name, Tensor t) {
    if (!names.insert(name).second) throw std::invalid_argument("duplicate parameter name " + name);
    Parameter p(name, std::move(t));
    sink->push_back(p);
    return p;
  }

  ConvLayer conv(const std::string& name, int cin, int cout, int k, int pad) {
    Tensor w({cout, cin, k, k});
    const double bound = std::sqrt(6.0 / (static_cast<double>(cin) * k * k));
    for (std::size_t i = 0; i < w.size(); ++i) w[i] = static_cast<float>(rng.uniform(-bound, bound));
    ConvLayer l;
    l.w = make(name + ".weight", std::move(w));
    l.b = make(name + ".bias", Tensor({cout}));
    l.pad = pad;
    l.stride = 1;
    return l;
  }

  NormLayer norm(const std::string& name, int c, NormKind kind) {
    NormLayer l;
    l.kind = kind;
    l.gamma = make(name + ".gamma", Tensor::full({c}, 1.0f));
    l.beta = make(name + ".beta", Tensor({c}));
    l.stats.running_mean = Tensor({c});
    l.stats.running_var = Tensor::full({c}, 1.0f);
    return l;
  }

  ConvBlock block(const std::string& name, int cin, int cout, NormKind kind) {
    ConvBlock b;
    b.c1 = conv(name + ".conv1", cin, cout, 3, 1);
    b.n1 = norm(name + ".norm1", cout, kind);
    b.c2 = conv(name + ".conv2", cout, cout, 3, 1);
    b.n2 = norm(name + ".norm2", cout, kind);
    return b;
  }

  FfcBlock ffc(const std::string& name, const FfcBlockConfig& cfg, NormKind kind) {
    if (cfg.channels < 2) throw std::invalid_argument("ffc block needs at least 2 channels");
    if (!(cfg.local_ratio > 0.0 && cfg.local_ratio < 1.0)) {
      throw std::invalid_argument("ffc local_ratio must lie in (0, 1), got " + std::to_string(cfg.local_ratio));
    }
    FfcBlock b;
    b.c_local = static_cast<int>(std::lround(cfg.channels * cfg.local_ratio));
    b.c_global = cfg.channels - b.c_local;
    if (b.c_local < 1 || b.c_global < 1) {
      throw std::invalid_argument("ffc local_ratio " + std::to_string(cfg.local_ratio) + " leaves an empty path for " +
                                  std::to_string(cfg.channels) + " channels");
    }
    b.local = conv(name + ".local", b.c_local, b.c_local, 3, 1);
    b.spectral = conv(name + ".spectral", 2 * b.c_global, 2 * b.c_global, 1, 0);
    b.norm = norm(name + ".norm", cfg.channels, kind);
    return b;
  }
};

int stage_width(int base, int i) { return base << i; }

}  // namespace

Var conv_forward(Var x, const ConvLayer& l) { return ops::conv2d(x, l.w.var, l.b.var, l.pad, l.stride); }

Var norm_forward(Var x, NormLayer& l, bool training) {
  if (l.kind == NormKind::Batch) return ops::batch_norm(x, l.gamma.var, l.beta.var, &l.stats, training);
  return ops::instance_norm(x, l.gamma.var, l.beta.var);
}

Var block_forward(Var x, ConvBlock& b, bool training) {
  x = ops::relu(norm_forward(conv_forward(x, b.c1), b.n1, training));
  x = ops::relu(norm_forward(conv_forward(x, b.c2), b.n2, training));
  return x;
}

Var ffc_forward(Var x, FfcBlock& b, bool training, bool with_act_norm) {
  const Shape& s = x.shape();
  if (s.size() != 4 || s[1] != b.c_local + b.c_global) {
    throw std::invalid_argument("ffc_forward: input " + shape_str(s) + " does not match block channels " +
                                std::to_string(b.c_local + b.c_global));
  }
  if (s[2] < 4 || s[3] < 4) {
    throw std::invalid_argument("ffc_forward: needs H, W >= 4, got " + shape_str(s));
  }
  Var local_in = ops::slice_channels(x, 0, b.c_local);
  Var global_in = ops::slice_channels(x, b.c_local, b.c_local + b.c_global);

  Var local_out = conv_forward(local_in, b.local);

  ops::SpectrumVar sp = ops::rfft2(global_in);
  Var stacked = ops::concat_channels(sp.real, sp.imag);
  Var mixed = conv_forward(stacked, b.spectral);
  ops::SpectrumVar mixed_sp{ops::slice_channels(mixed, 0, b.c_global),
                            ops::slice_channels(mixed, b.c_global, 2 * b.c_global)};
  Var global_out = ops::irfft2(mixed_sp, s[3]);

  Var y = ops::concat_channels(local_out, global_out);
  if (!with_act_norm) return y;
  return ops::relu(norm_forward(y, b.norm, training));
}

FfcBlock build_ffc_block(const FfcBlockConfig& cfg, NormKind norm, std::uint64_t seed) {
  std::vector<Parameter> sink;
  Builder builder{Rng(mix_seed(seed, 0xffc)), &sink, {}};
  return builder.ffc("ffc", cfg, norm);
}

BranchModel build_model(const ModelConfig& cfg) {
  if (cfg.depth < 2) throw std::invalid_argument("model depth must be >= 2, got " + std::to_string(cfg.depth));
  if (cfg.base_width < 2) throw std::invalid_argument("base_width must be >= 2");
  BranchModel m;
  m.cfg_ = cfg;
  Builder b{Rng(mix_seed(cfg.seed, cfg.kind == ModelKind::Unet ? 0x11 : 0x22)), &m.params_, {}};

  const bool ynet = cfg.kind == ModelKind::Ynet;
  for (int i = 0; i < cfg.depth; ++i) {
    const int cin = i == 0 ? cfg.in_channels : stage_width(cfg.base_width, i - 1);
    const int cout = stage_width(cfg.base_width, i);
    m.enc_.push_back(b.block("enc" + std::to_string(i + 1), cin, cout, cfg.norm));
    if (ynet) {
      SpectralStage st;
      st.entry = b.conv("spec" + std::to_string(i + 1) + ".entry", cin, cout, 3, 1);
      st.entry_norm = b.norm("spec" + std::to_string(i + 1) + ".entry_norm", cout, cfg.norm);
      st.ffc = b.ffc("spec" + std::to_string(i + 1) + ".ffc", FfcBlockConfig{cout, cfg.local_ratio}, cfg.norm);
      m.enc_spec_.push_back(std::move(st));
    }
  }
  const int deepest = stage_width(cfg.base_width, cfg.depth - 1);
  const int bottom = stage_width(cfg.base_width, cfg.depth);
  m.bottleneck_ = b.block("bottleneck", ynet ? 2 * deepest : deepest, bottom, cfg.norm);
  for (int i = cfg.depth - 1; i >= 0; --i) {
    const int skip = (ynet ? 2 : 1) * stage_width(cfg.base_width, i);
    const int above = i == cfg.depth - 1 ? bottom : stage_width(cfg.base_width, i + 1);
    m.dec_.push_back(b.block("dec" + std::to_string(i + 1), above + skip, stage_width(cfg.base_width, i), cfg.norm));
  }
  m.head_ = b.conv("head", cfg.base_width, cfg.num_classes, 1, 0);
  return m;
}

BranchModel build_unet(int base_width, int depth, std::uint64_t seed) {
  ModelConfig cfg;
  cfg.kind = ModelKind::Unet;
  cfg.base_width = base_width;
  cfg.depth = depth;
  cfg.seed = seed;
  return build_model(cfg);
}

BranchModel build_ynet(int base_width, int depth, std::uint64_t seed) {
  ModelConfig cfg;
  cfg.kind = ModelKind::Ynet;
  cfg.base_width = base_width;
  cfg.depth = depth;
  cfg.seed = seed;
  return build_model(cfg);
}

Var BranchModel::forward(const Tensor& images, bool training) { return forward(Var(images, false), training); }

Var BranchModel::forward(Var x, bool training) {
  const Shape& s = x.shape();
  if (s.size() != 4 || s[1] != cfg_.in_channels) {
    throw std::invalid_argument("forward: expected N×" + std::to_string(cfg_.in_channels) + "×H×W, got " +
                                shape_str(s));
  }
  const int div = 1 << cfg_.depth;
  if (s[2] % div != 0) {
    throw std::invalid_argument("forward: H=" + std::to_string(s[2]) + " not divisible by 2^depth=" +
                                std::to_string(div));
  }
  if (s[3] % div != 0) {
    throw std::invalid_argument("forward: W=" + std::to_string(s[3]) + " not divisible by 2^depth=" +
                                std::to_string(div));
  }

  const bool ynet = cfg_.kind == ModelKind::Ynet;
  std::vector<Var> skips;
  Var cur = x;
  Var cur_spec = x;
  for (int i = 0; i < cfg_.depth; ++i) {
    Var e = block_forward(cur, enc_[static_cast<std::size_t>(i)], training);
    if (ynet) {
      SpectralStage& st = enc_spec_[static_cast<std::size_t>(i)];
      Var f = ops::relu(norm_forward(conv_forward(cur_spec, st.entry), st.entry_norm, training));
      f = ffc_forward(f, st.ffc, training);
      skips.push_back(ops::concat_channels(e, f));
      cur = ops::maxpool2(e);
      cur_spec = ops::maxpool2(f);
    } else {
      skips.push_back(e);
      cur = ops::maxpool2(e);
    }
  }
  if (ynet) cur = ops::concat_channels(cur, cur_spec);
  cur = block_forward(cur, bottleneck_, training);
  for (int i = cfg_.depth - 1; i >= 0; --i) {
    cur = ops::upsample_bilinear2(cur);
    cur = ops::concat_channels(cur, skips[static_cast<std::size_t>(i)]);
    cur = block_forward(cur, dec_[static_cast<std::size_t>(cfg_.depth - 1 - i)], training);
  }
  return conv_forward(cur, head_);
}

std::size_t BranchModel::param_count() const {
  std::size_t n = 0;
  for (const auto& p : params_) n += p.value().size();
  return n;
}

std::vector<std::pair<std::string, Tensor*>> BranchModel::state_entries() {
  std::vector<std::pair<std::string, Tensor*>> out;
  for (auto& p : params_) out.emplace_back(p.name, &p.value());
  auto add_stats = [&out](const std::string& name, NormLayer& l) {
    out.emplace_back(name + ".running_mean", &l.stats.running_mean);
    out.emplace_back(name + ".running_var", &l.stats.running_var);
  };
  for (std::size_t i = 0; i < enc_.size(); ++i) {
    add_stats("enc" + std::to_string(i + 1) + ".norm1", enc_[i].n1);
    add_stats("enc" + std::to_string(i + 1) + ".norm2", enc_[i].n2);
  }
  for (std::size_t i = 0; i < enc_spec_.size(); ++i) {
    add_stats("spec" + std::to_string(i + 1) + ".entry_norm", enc_spec_[i].entry_norm);
    add_stats("spec" + std::to_string(i + 1) + ".ffc.norm", enc_spec_[i].ffc.norm);
  }
  add_stats("bottleneck.norm1", bottleneck_.n1);
  add_stats("bottleneck.norm2", bottleneck_.n2);
  for (std::size_t i = 0; i < dec_.size(); ++i) {
    const std::size_t stage = dec_.size() - i;  // dec blocks are stored deep-to-shallow
    add_stats("dec" + std::to_string(stage) + ".norm1", dec_[i].n1);
    add_stats("dec" + std::to_string(stage) + ".norm2", dec_[i].n2);
  }
  return out;
}

}  // namespace s2me::models
