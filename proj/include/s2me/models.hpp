#pragma once

#include <span>
#include <string>
#include <utility>
#include <vector>

#include "s2me/ops.hpp"

namespace s2me::models {

using ad::Parameter;
using ad::Var;

enum class ModelKind { Unet, Ynet };
enum class NormKind { Batch, Instance };

const char* model_name(ModelKind k);
ModelKind model_from_name(const std::string& name);
const char* norm_name(NormKind k);
NormKind norm_from_name(const std::string& name);

struct ModelConfig {
  ModelKind kind = ModelKind::Unet;
  int base_width = 16;
  int depth = 3;
  int in_channels = 3;
  int num_classes = 2;
  NormKind norm = NormKind::Batch;
  double local_ratio = 0.5;
  std::uint64_t seed = 0;
};

struct ConvLayer {
  Parameter w, b;
  int pad = 1;
  int stride = 1;
};

struct NormLayer {
  Parameter gamma, beta;
  ops::NormStats stats;
  NormKind kind = NormKind::Batch;
};

// conv3×3 → norm → relu, twice
struct ConvBlock {
  ConvLayer c1, c2;
  NormLayer n1, n2;
};

struct FfcBlockConfig {
  int channels = 0;
  double local_ratio = 0.5;
};

// Two-path block: a 3×3 convolution over the local channel split and a
// frequency-domain 1×1 convolution (rfft2 → conv over stacked real/imag
// channels → irfft2) over the global split, re-joined per the split.
struct FfcBlock {
  int c_local = 0;
  int c_global = 0;
  ConvLayer local;     // 3×3 on c_local channels
  ConvLayer spectral;  // 1×1 on 2·c_global stacked (re, im) channels
  NormLayer norm;
};

struct SpectralStage {
  ConvLayer entry;
  NormLayer entry_norm;
  FfcBlock ffc;
};

Var conv_forward(Var x, const ConvLayer& l);
Var norm_forward(Var x, NormLayer& l, bool training);
Var block_forward(Var x, ConvBlock& b, bool training);
Var ffc_forward(Var x, FfcBlock& b, bool training, bool with_act_norm = true);

// Standalone FFC block for direct use/tests; the spectral encoder builds its
// own through the same path.
FfcBlock build_ffc_block(const FfcBlockConfig& cfg, NormKind norm, std::uint64_t seed);

// Encoder-decoder branch producing N×num_classes×H×W logits.
class BranchModel {
 public:
  Var forward(const Tensor& images, bool training);
  Var forward(Var x, bool training);

  std::span<Parameter> params() { return params_; }
  std::size_t param_count() const;
  const ModelConfig& config() const { return cfg_; }

  // parameters plus normalization running statistics, in checkpoint order
  std::vector<std::pair<std::string, Tensor*>> state_entries();

  friend BranchModel build_unet(int base_width, int depth, std::uint64_t seed);
  friend BranchModel build_ynet(int base_width, int depth, std::uint64_t seed);
  friend BranchModel build_model(const ModelConfig& cfg);

 private:
  ModelConfig cfg_;
  std::vector<Parameter> params_;

  std::vector<ConvBlock> enc_;
  std::vector<SpectralStage> enc_spec_;  // YNet only
  ConvBlock bottleneck_;
  std::vector<ConvBlock> dec_;
  ConvLayer head_;
};

BranchModel build_model(const ModelConfig& cfg);
BranchModel build_unet(int base_width, int depth, std::uint64_t seed);
BranchModel build_ynet(int base_width, int depth, std::uint64_t seed);

}  // namespace s2me::models
