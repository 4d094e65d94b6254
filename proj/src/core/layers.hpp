#pragma once

#include <string>
#include <vector>

#include "variational.hpp"

namespace sb {

struct ParamRef {
  std::string name;
  Tensor tensor;
};

enum class LayerMode { Deterministic, Variational };

Tensor effective_sigma(const Tensor& rho);

// Fully connected layer, x: [m,in] -> [m,out].
class Dense {
 public:
  Dense(int in, int out, Rng& rng);

  Tensor forward(const Tensor& x) const;
  Moments var_moments(const Tensor& x) const;
  Tensor forward_var(const Tensor& x, Rng& rng) const;

  void init_variational(double rho0);
  void collect_mu(const std::string& p, std::vector<ParamRef>& out) const;
  void collect_rho(const std::string& p, std::vector<ParamRef>& out) const;
  void collect_vps(std::vector<const VariationalParam*>& out) const;
  double max_sigma() const;

  VariationalParam w;  // [in,out]
  VariationalParam b;  // [out]
};

class Conv1dLayer {
 public:
  Conv1dLayer(int c_in, int c_out, int k, int stride, int dilation, Rng& rng);

  Tensor forward(const Tensor& x) const;  // x: [B,Ci,T]
  Moments var_moments(const Tensor& x) const;
  Tensor forward_var(const Tensor& x, Rng& rng) const;

  void init_variational(double rho0);
  void collect_mu(const std::string& p, std::vector<ParamRef>& out) const;
  void collect_rho(const std::string& p, std::vector<ParamRef>& out) const;
  void collect_vps(std::vector<const VariationalParam*>& out) const;
  double max_sigma() const;

  VariationalParam kernel;  // [Co,Ci,K]
  VariationalParam bias;    // [Co]
  int stride = 1;
  int dilation = 1;
};

class Conv2dLayer {
 public:
  Conv2dLayer(int c_in, int c_out, int k_t, int k_w, int dil_t, int dil_w,
              Rng& rng);

  Tensor forward(const Tensor& x) const;  // x: [B,Ci,T,W]
  Moments var_moments(const Tensor& x) const;
  Tensor forward_var(const Tensor& x, Rng& rng) const;

  void init_variational(double rho0);
  void collect_mu(const std::string& p, std::vector<ParamRef>& out) const;
  void collect_rho(const std::string& p, std::vector<ParamRef>& out) const;
  void collect_vps(std::vector<const VariationalParam*>& out) const;
  double max_sigma() const;

  VariationalParam kernel;  // [Co,Ci,Kt,Kw]
  VariationalParam bias;    // [Co]
  int dil_t = 1;
  int dil_w = 1;
};

// Stride-2 upsampling deconvolution; output length is exactly 2T.
class TConv1dLayer {
 public:
  TConv1dLayer(int c_in, int c_out, int k, Rng& rng);

  Tensor forward(const Tensor& x) const;  // x: [B,Ci,T] -> [B,Co,2T]
  Moments var_moments(const Tensor& x) const;
  Tensor forward_var(const Tensor& x, Rng& rng) const;

  void init_variational(double rho0);
  void collect_mu(const std::string& p, std::vector<ParamRef>& out) const;
  void collect_rho(const std::string& p, std::vector<ParamRef>& out) const;
  void collect_vps(std::vector<const VariationalParam*>& out) const;
  double max_sigma() const;

  VariationalParam kernel;  // [Ci,Co,K]
  VariationalParam bias;    // [Co]
  int stride = 2;
  int pad = 0;
  int output_pad = 0;
};

// Group normalization with variational affine parameters. In variational mode
// the normalization statistics come from the incoming activations and act as
// fixed linear coefficients; only gain/bias carry posterior variance.
class GroupNormLayer {
 public:
  GroupNormLayer(int channels, int groups, double eps);

  Tensor forward(const Tensor& x) const;
  Moments var_moments(const Tensor& x) const;
  Tensor forward_var(const Tensor& x, Rng& rng) const;

  void init_variational(double rho0);
  void collect_mu(const std::string& p, std::vector<ParamRef>& out) const;
  void collect_rho(const std::string& p, std::vector<ParamRef>& out) const;
  void collect_vps(std::vector<const VariationalParam*>& out) const;
  double max_sigma() const;

  VariationalParam gain;  // [C]
  VariationalParam bias;  // [C]
  int channels;
  int groups;
  double eps;

 private:
  Tensor ones_;
  Tensor zeros_;
};

// GRU stack element. Gate parameters stay deterministic; posterior variance
// enters through the linear surrogate (tw, tb) of the whole layer, whose
// means are unused (the mean path is the recurrence itself).
class GruLayer {
 public:
  GruLayer(int in_features, int hidden, Rng& rng);

  Tensor forward(const Tensor& x) const;  // x: [B,T,F] -> [B,T,H]
  Moments var_moments(const Tensor& x) const;
  Tensor forward_var(const Tensor& x, Rng& rng) const;

  void init_variational(double rho0);
  void collect_mu(const std::string& p, std::vector<ParamRef>& out) const;
  void collect_rho(const std::string& p, std::vector<ParamRef>& out) const;
  void collect_vps(std::vector<const VariationalParam*>& out) const;
  double max_sigma() const;

  VariationalParam wi;  // [F,3H]
  VariationalParam wh;  // [H,3H]
  VariationalParam bi;  // [3H]
  VariationalParam bh;  // [3H]
  VariationalParam tw;  // surrogate [F,H]
  VariationalParam tb;  // surrogate [H]
  int in_features;
  int hidden;
};

}  // namespace sb
