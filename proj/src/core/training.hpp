#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include "dataset.hpp"
#include "model.hpp"

namespace sb {

struct TrainConfig {
  double alpha1 = -1.0;  // < 0: default 1/N_l
  double alpha2 = -1.0;  // < 0: default 1/(5 N_u)
  int epochs_pretrain = 1000;
  int epochs_uq = 3000;
  double lr_pretrain = 1e-3;
  double lr_uq = 1e-3;
  double beta = 1.0;
  int mc_train_samples = 1;    // M
  int mc_predict_samples = 40; // N
  int batch_size = 0;          // 0 = full batch
  double rho0 = -6.0;
  std::uint64_t seed = 1234;
  std::string predictive_mean = "mc";  // or "pretrained"
};

void validate_train_config(const TrainConfig& cfg);

struct EpochLog {
  int epoch = 0;
  double supervised = 0.0;
  double reconstruction = 0.0;
  double kl = 0.0;
  double objective = 0.0;
  double wall_ms = 0.0;
};
using TrainLog = std::vector<EpochLog>;

void write_train_log(const TrainLog& log, const std::string& path,
                     const std::vector<std::string>& header_lines = {});

// What the loops need from a model pair; SeisModels provides the real thing,
// test doubles provide toys.
class ModelPairI {
 public:
  virtual ~ModelPairI() = default;
  virtual Tensor inverse_forward(const Tensor& patches, Rng* rng) = 0;
  virtual Tensor inverse_forward_mean(const Tensor& patches) = 0;
  virtual Tensor forward_forward(const Tensor& ai, Rng* rng) = 0;
  virtual std::vector<Tensor> mu_tensors() = 0;
  virtual std::vector<Tensor> rho_tensors() = 0;
  virtual void set_mu_trainable(bool on) = 0;
  virtual void set_rho_trainable(bool on) = 0;
  virtual Tensor total_kl(const PriorConfig& prior) = 0;
  virtual bool variational() const = 0;
  virtual std::uint64_t mu_checksum() = 0;
};

class SeisModelPair : public ModelPairI {
 public:
  explicit SeisModelPair(SeisModels& models) : models_(models) {}
  Tensor inverse_forward(const Tensor& patches, Rng* rng) override;
  Tensor inverse_forward_mean(const Tensor& patches) override;
  Tensor forward_forward(const Tensor& ai, Rng* rng) override;
  std::vector<Tensor> mu_tensors() override { return models_.mu_tensors(); }
  std::vector<Tensor> rho_tensors() override { return models_.rho_tensors(); }
  void set_mu_trainable(bool on) override { models_.set_mu_trainable(on); }
  void set_rho_trainable(bool on) override { models_.set_rho_trainable(on); }
  Tensor total_kl(const PriorConfig& prior) override {
    return models_.total_kl(prior);
  }
  bool variational() const override { return models_.variational(); }
  std::uint64_t mu_checksum() override { return models_.mu_checksum(); }

 private:
  SeisModels& models_;
};

// Standardized tensors the loops actually consume.
struct TrainingData {
  Tensor patches;   // [N, 2h+1, T]
  Tensor seismic;   // [N, T]
  Tensor ai_wells;  // [N_l, Ty]
  std::vector<int> wells;
  int n_traces = 0;
  int n_labeled = 0;
};

TrainingData prepare_training_data(const TraceDataset& ds);

// Stage 1: deterministic pre-training of the means.
TrainLog pretrain(ModelPairI& pair, const TrainingData& data,
                  const TrainConfig& cfg);

// Stage 2: variational fit of the rho parameters, means frozen.
TrainLog fit_variational(ModelPairI& pair, const TrainingData& data,
                         const TrainConfig& cfg, const PriorConfig& prior);

struct PredictiveSummary {
  Grid2D mean;
  Grid2D std;
  int n_samples = 0;
};

// N Monte Carlo passes with independent seeded streams; per-cell mean and
// population variance accumulated in a fixed order (Welford), so identical
// samples give an exactly zero std grid. Honors SEISBAYES_THREADS.
PredictiveSummary predict_mc(ModelPairI& pair, const Tensor& patches, int n,
                             std::uint64_t seed,
                             const std::string& mean_mode = "mc");

double coverage_2sigma(const PredictiveSummary& summary, const Grid2D& truth);

}  // namespace sb
