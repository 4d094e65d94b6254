#pragma once

#include <memory>
#include <optional>
#include <string>
#include <vector>

#include "layers.hpp"

namespace sb {

struct InverseModelConfig {
  int h = 2;  // patch half-width; patch width is 2h+1
  int cnn_channels = 8;
  std::vector<int> dilations = {1, 3, 6};  // time-axis, width dilation is 1
  int kernel_t = 5;
  int kernel_w = 3;
  int gru_hidden = 16;
  int gru_layers = 3;
  bool upsample = false;  // two x2 deconvolutions (AI at 4x seismic sampling)
  int upsample_kernel = 5;
  int regression_hidden = 16;
  int groupnorm_groups = 4;
  double groupnorm_eps = 1e-5;
};

struct ForwardModelConfig {
  int channels = 8;
  int kernel1 = 9;
  int kernel2 = 5;
  bool strided = false;  // stride-4 first conv when AI is 4x seismic
  std::string activation = "tanh";  // or "identity"
};

void validate_inverse_config(const InverseModelConfig& cfg);
void validate_forward_config(const ForwardModelConfig& cfg);

// Seismic patches -> AI traces. A GRU stack reads the center trace of each
// patch; the 2-d CNN block reads the whole patch; the summed features are
// optionally upsampled and regressed to the AI scale.
class InverseModel {
 public:
  InverseModel(const InverseModelConfig& cfg, Rng& rng);

  // patches: [B, 2h+1, T] -> [B, T] or [B, 4T] with upsampling.
  Tensor forward(const Tensor& patches, Rng* rng = nullptr) const;
  // Mean path regardless of mode (all layers on their mu parameters).
  Tensor forward_mean(const Tensor& patches) const;

  LayerMode mode() const { return mode_; }
  void init_variational(double rho0);

  void collect_mu(std::vector<ParamRef>& out) const;
  void collect_rho(std::vector<ParamRef>& out) const;
  void collect_vps(std::vector<const VariationalParam*>& out) const;
  double max_sigma() const;

  const InverseModelConfig& config() const { return cfg_; }

 private:
  Tensor run(const Tensor& patches, Rng* rng, bool variational) const;
  Tensor cnn_branch(const Tensor& patches, Rng* rng, bool variational) const;

  InverseModelConfig cfg_;
  LayerMode mode_ = LayerMode::Deterministic;
  bool pool1_ = false;  // width pooling after the parallel convs
  bool pool2_ = false;  // width pooling after the first serial conv

  std::vector<GruLayer> gru_stack_;
  std::vector<Conv2dLayer> parallel_;
  std::vector<GroupNormLayer> parallel_gn_;
  std::unique_ptr<Conv2dLayer> serial1_;
  std::unique_ptr<GroupNormLayer> serial1_gn_;
  std::unique_ptr<Conv1dLayer> serial2_;
  std::unique_ptr<GroupNormLayer> serial2_gn_;
  std::unique_ptr<Conv1dLayer> serial3_;
  std::vector<TConv1dLayer> upsample_;
  std::unique_ptr<GruLayer> reg_gru_;
  std::unique_ptr<Dense> head_;
};

// AI traces -> synthetic seismic, a 2-layer CNN.
class ForwardModel {
 public:
  ForwardModel(const ForwardModelConfig& cfg, Rng& rng);

  // ai: [B, Ty] -> [B, T] where T = Ty / (strided ? 4 : 1).
  Tensor forward(const Tensor& ai, Rng* rng = nullptr) const;

  LayerMode mode() const { return mode_; }
  void init_variational(double rho0);

  void collect_mu(std::vector<ParamRef>& out) const;
  void collect_rho(std::vector<ParamRef>& out) const;
  void collect_vps(std::vector<const VariationalParam*>& out) const;
  double max_sigma() const;

  const ForwardModelConfig& config() const { return cfg_; }

 private:
  ForwardModelConfig cfg_;
  LayerMode mode_ = LayerMode::Deterministic;
  std::unique_ptr<Conv1dLayer> conv1_;
  std::unique_ptr<Conv1dLayer> conv2_;
};

// The trained pair plus everything the training loops need from it.
class SeisModels {
 public:
  SeisModels(const InverseModelConfig& inv_cfg, const ForwardModelConfig& fwd_cfg,
             std::uint64_t seed);

  InverseModel& inverse() { return *inverse_; }
  const InverseModel& inverse() const { return *inverse_; }
  ForwardModel& forward_model() { return *forward_; }
  const ForwardModel& forward_model() const { return *forward_; }

  void init_variational(double rho0);
  bool variational() const;

  std::vector<ParamRef> mu_params() const;
  std::vector<ParamRef> rho_params() const;
  std::vector<Tensor> mu_tensors() const;
  std::vector<Tensor> rho_tensors() const;

  void set_mu_trainable(bool on);
  void set_rho_trainable(bool on);

  // Sum of kl_to_prior over every variational parameter in both models.
  Tensor total_kl(const PriorConfig& prior) const;
  double total_kl_full(const PriorConfig& prior) const;
  std::size_t variational_scalar_count() const;
  double max_sigma() const;

  std::uint64_t mu_checksum() const;

  void save(const std::string& path) const;
  static SeisModels load(const std::string& path);

  const InverseModelConfig& inverse_config() const { return inv_cfg_; }
  const ForwardModelConfig& forward_config() const { return fwd_cfg_; }

 private:
  InverseModelConfig inv_cfg_;
  ForwardModelConfig fwd_cfg_;
  std::unique_ptr<InverseModel> inverse_;
  std::unique_ptr<ForwardModel> forward_;
};

}  // namespace sb
