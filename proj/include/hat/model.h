#pragma once

#include <cstdint>
#include <string>
#include <string_view>
#include <utility>
#include <vector>

#include "hat/attention.h"
#include "hat/config.h"
#include "hat/tensor.h"

namespace hat {

template <typename T>
struct LinearParams {
  Tensor<T> weight;  // [out, in]
  Tensor<T> bias;    // [out]
};

template <typename T>
struct ConvParams {
  Tensor<T> weight;  // [out, in, k, k]
  Tensor<T> bias;    // [out]
};

template <typename T>
struct NormParams {
  Tensor<T> gamma;
  Tensor<T> beta;
};

template <typename T>
struct MlpParams {
  LinearParams<T> fc1, fc2;
};

// conv3x3 C->C/beta, GELU, conv3x3 C/beta->C, then channel attention.
template <typename T>
struct CabParams {
  ConvParams<T> conv1, conv2;
  LinearParams<T> ca_down, ca_up;
};

template <typename T>
struct HabParams {
  NormParams<T> norm1;
  AttentionParams<T> attn;
  bool has_cab = true;
  CabParams<T> cab;
  NormParams<T> norm2;
  MlpParams<T> mlp;
};

template <typename T>
struct OcabParams {
  NormParams<T> norm1;
  AttentionParams<T> attn;
  NormParams<T> norm2;
  MlpParams<T> mlp;
};

template <typename T>
struct RhagParams {
  std::vector<HabParams<T>> blocks;
  bool has_ocab = true;
  OcabParams<T> ocab;
  ConvParams<T> conv;
};

// Pixel-shuffle chain, or two convolutions for same-resolution output.
template <typename T>
struct HeadParams {
  ConvParams<T> conv_before;
  std::vector<ConvParams<T>> up;
  std::vector<int> factors;
  ConvParams<T> conv_last;
};

// Block forwards take token-major features [N,H,W,C] (or [H,W,C]).
template <typename T> Tensor<T> mlp_forward(const Tensor<T>& x, const MlpParams<T>& p);
template <typename T> Tensor<T> cab_forward(const Tensor<T>& x, const CabParams<T>& p);
// X_M = (S)W-MSA(LN(x)) + alpha * CAB(LN(x)) + x;  Y = MLP(LN(X_M)) + X_M.
template <typename T>
Tensor<T> hab_forward(const Tensor<T>& x, const HabParams<T>& p, const WindowSpec& spec, T alpha);
template <typename T>
Tensor<T> ocab_forward(const Tensor<T>& x, const OcabParams<T>& p, const WindowSpec& spec);
template <typename T>
Tensor<T> rhag_forward(const Tensor<T>& x, const RhagParams<T>& p, const ModelConfig& cfg);
template <typename T>
Tensor<T> head_forward(const Tensor<T>& features, const HeadParams<T>& p);

// Shift for the block at `index` inside a group: even 0, odd window / 2.
int block_shift(int index, int window);

template <typename T>
class HatModel {
 public:
  using Parameter = std::pair<std::string, Tensor<T>>;

  explicit HatModel(ModelConfig config, std::uint64_t seed = 0);

  const ModelConfig& config() const { return config_; }

  // img [N, in_channels, H, W] -> [N, out_channels, scale*H, scale*W].
  Tensor<T> forward(const Tensor<T>& img) const;

  // Stable enumeration order, unique dotted paths.
  const std::vector<Parameter>& parameters() const { return params_; }
  const Tensor<T>& parameter(std::string_view path) const;
  std::int64_t parameter_count() const;
  void set_requires_grad(bool flag);
  void zero_grad();

  ConvParams<T> conv_first;
  std::vector<RhagParams<T>> groups;
  ConvParams<T> conv_after_body;
  HeadParams<T> head;

 private:
  ModelConfig config_;
  std::vector<Parameter> params_;
};

template <typename T> Tensor<T> hat_forward(const Tensor<T>& img, const HatModel<T>& model);

extern template class HatModel<float>;
extern template class HatModel<double>;

}  // namespace hat
