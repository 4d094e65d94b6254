#include "training.hpp"

#include <algorithm>
#include <chrono>
#include <cmath>
#include <cstdlib>
#include <fstream>
#include <mutex>
#include <thread>

namespace sb {

namespace {

double ms_since(const std::chrono::steady_clock::time_point& t0) {
  return std::chrono::duration<double, std::milli>(
             std::chrono::steady_clock::now() - t0)
      .count();
}

std::vector<std::pair<int, int>> chunk_ranges(int n, int batch_size) {
  std::vector<std::pair<int, int>> out;
  if (batch_size <= 0 || batch_size >= n) {
    out.push_back({0, n});
    return out;
  }
  for (int s = 0; s < n; s += batch_size)
    out.push_back({s, std::min(n, s + batch_size)});
  return out;
}

}  // namespace

void validate_train_config(const TrainConfig& cfg) {
  if (!(cfg.beta > 0.0)) throw ConfigError("train: beta must be positive");
  if (cfg.mc_train_samples < 1) throw ConfigError("train: M must be >= 1");
  if (cfg.mc_predict_samples < 2) throw ConfigError("train: N must be >= 2");
  if (cfg.epochs_pretrain < 1 || cfg.epochs_uq < 1)
    throw ConfigError("train: epochs must be >= 1");
  if (!(cfg.lr_pretrain > 0.0) || !(cfg.lr_uq > 0.0))
    throw ConfigError("train: learning rates must be positive");
  if (cfg.batch_size < 0) throw ConfigError("train: batch_size must be >= 0");
  if (cfg.predictive_mean != "mc" && cfg.predictive_mean != "pretrained")
    throw ConfigError("train: predictive_mean must be 'mc' or 'pretrained'");
  if (!std::isfinite(cfg.rho0)) throw ConfigError("train: rho0 must be finite");
}

void write_train_log(const TrainLog& log, const std::string& path,
                     const std::vector<std::string>& header_lines) {
  std::ofstream os(path);
  if (!os) throw IoError("train log: cannot open '" + path + "'");
  for (const auto& h : header_lines) os << "# " << h << '\n';
  os << "epoch,supervised,reconstruction,kl,objective,wall_ms\n";
  char buf[256];
  for (const auto& e : log) {
    std::snprintf(buf, sizeof(buf), "%d,%.9g,%.9g,%.9g,%.9g,%.3f\n", e.epoch,
                  e.supervised, e.reconstruction, e.kl, e.objective, e.wall_ms);
    os << buf;
  }
  if (!os) throw IoError("train log: write failed for '" + path + "'");
}

Tensor SeisModelPair::inverse_forward(const Tensor& patches, Rng* rng) {
  return models_.inverse().forward(patches, rng);
}

Tensor SeisModelPair::inverse_forward_mean(const Tensor& patches) {
  return models_.inverse().forward_mean(patches);
}

Tensor SeisModelPair::forward_forward(const Tensor& ai, Rng* rng) {
  return models_.forward_model().forward(ai, rng);
}

TrainingData prepare_training_data(const TraceDataset& ds) {
  validate_dataset(ds);
  Grid2D seis = apply_stats(ds.seismic, ds.seismic_stats);
  Grid2D ai = apply_stats(ds.ai, ds.ai_stats);

  TrainingData data;
  data.patches = make_patches(seis, ds.h);
  data.seismic = Tensor::from({seis.n_traces, seis.n_samples}, seis.values);
  data.wells = ds.well_indices;
  data.n_traces = seis.n_traces;
  data.n_labeled = static_cast<int>(ds.well_indices.size());
  if (!ds.well_indices.empty()) {
    std::vector<double> wv;
    wv.reserve(ds.well_indices.size() * static_cast<std::size_t>(ai.n_samples));
    for (int w : ds.well_indices)
      wv.insert(wv.end(),
                ai.values.begin() + static_cast<std::size_t>(w) * ai.n_samples,
                ai.values.begin() +
                    static_cast<std::size_t>(w + 1) * ai.n_samples);
    data.ai_wells = Tensor::from(
        {static_cast<int>(ds.well_indices.size()), ai.n_samples}, std::move(wv));
  }
  return data;
}

TrainLog pretrain(ModelPairI& pair, const TrainingData& data,
                  const TrainConfig& cfg) {
  validate_train_config(cfg);
  if (data.wells.empty())
    throw ConfigError("pretrain: the well set is empty");
  const int n = data.n_traces;
  const double a1 = cfg.alpha1 >= 0.0 ? cfg.alpha1 : 1.0 / data.n_labeled;
  const double a2 = cfg.alpha2 >= 0.0 ? cfg.alpha2 : 1.0 / (5.0 * n);

  pair.set_mu_trainable(true);
  pair.set_rho_trainable(false);
  auto params = pair.mu_tensors();
  AdamState state;
  AdamConfig adam{cfg.lr_pretrain, 0.9, 0.999, 1e-8};
  const auto ranges = chunk_ranges(n, cfg.batch_size);

  TrainLog log;
  for (int epoch = 1; epoch <= cfg.epochs_pretrain; ++epoch) {
    const auto t0 = std::chrono::steady_clock::now();
    double sup_total = 0.0, rec_total = 0.0;
    try {
      for (const auto& [s, e] : ranges) {
        std::vector<int> chunk_wells, local_wells;
        for (std::size_t wi = 0; wi < data.wells.size(); ++wi) {
          if (data.wells[wi] >= s && data.wells[wi] < e) {
            chunk_wells.push_back(static_cast<int>(wi));
            local_wells.push_back(data.wells[wi] - s);
          }
        }
        for (auto& p : params) p.zero_grad();
        Tape tape;
        Tensor patches = ranges.size() == 1 ? data.patches
                                            : slice(data.patches, 0, s, e - s);
        Tensor target = ranges.size() == 1 ? data.seismic
                                           : slice(data.seismic, 0, s, e - s);
        Tensor pred = pair.inverse_forward(patches, nullptr);
        Tensor loss;
        if (!local_wells.empty()) {
          Tensor at_wells = gather_rows(pred, local_wells);
          Tensor labels = gather_rows(data.ai_wells, chunk_wells);
          Tensor sup = sum(square(sub(at_wells, labels)));
          sup_total += a1 * sup.item();
          loss = scale(sup, a1);
        }
        Tensor recon = sum(square(sub(pair.forward_forward(pred, nullptr), target)));
        rec_total += a2 * recon.item();
        Tensor rl = scale(recon, a2);
        loss = loss.defined() ? add(loss, rl) : rl;
        tape.backward(loss);
        adam_step(params, state, adam);
      }
    } catch (const NumericError& e) {
      throw TrainError("pre-training diverged at epoch " +
                       std::to_string(epoch) + ": " + e.what());
    }
    log.push_back({epoch, sup_total, rec_total, 0.0, sup_total + rec_total,
                   ms_since(t0)});
  }
  return log;
}

TrainLog fit_variational(ModelPairI& pair, const TrainingData& data,
                         const TrainConfig& cfg, const PriorConfig& prior) {
  validate_train_config(cfg);
  validate_prior(prior);
  if (!pair.variational())
    throw ConfigError("fit_variational: model is not in variational mode");
  if (data.wells.empty() || data.n_traces == 0)
    throw ConfigError("fit_variational: dataset has no wells or no traces");

  const std::uint64_t mu_before = pair.mu_checksum();
  pair.set_mu_trainable(false);
  pair.set_rho_trainable(true);
  auto params = pair.rho_tensors();
  AdamState state;
  AdamConfig adam{cfg.lr_uq, 0.9, 0.999, 1e-8};
  const int n = data.n_traces;
  const int M = cfg.mc_train_samples;
  const auto ranges = chunk_ranges(n, cfg.batch_size);
  Rng base = Rng(cfg.seed).fork(0xF17);

  TrainLog log;
  for (int epoch = 1; epoch <= cfg.epochs_uq; ++epoch) {
    const auto t0 = std::chrono::steady_clock::now();
    Rng erng = base.fork(static_cast<std::uint64_t>(epoch));
    double sup_total = 0.0, rec_total = 0.0, kl_total = 0.0;
    try {
      for (std::size_t ci = 0; ci < ranges.size(); ++ci) {
        const auto [s, e] = ranges[ci];
        std::vector<int> chunk_wells, local_wells;
        for (std::size_t wi = 0; wi < data.wells.size(); ++wi) {
          if (data.wells[wi] >= s && data.wells[wi] < e) {
            chunk_wells.push_back(static_cast<int>(wi));
            local_wells.push_back(data.wells[wi] - s);
          }
        }
        for (auto& p : params) p.zero_grad();
        Tape tape;
        Tensor patches = ranges.size() == 1 ? data.patches
                                            : slice(data.patches, 0, s, e - s);
        Tensor target = ranges.size() == 1 ? data.seismic
                                           : slice(data.seismic, 0, s, e - s);
        Tensor misfit;
        double sup_raw = 0.0, rec_raw = 0.0;
        for (int m = 0; m < M; ++m) {
          Rng stream = erng.fork(ci * static_cast<std::size_t>(M) + m);
          Tensor pred = pair.inverse_forward(patches, &stream);
          if (!local_wells.empty()) {
            Tensor sup = sum(square(
                sub(gather_rows(pred, local_wells),
                    gather_rows(data.ai_wells, chunk_wells))));
            sup_raw += sup.item();
            misfit = misfit.defined() ? add(misfit, sup) : sup;
          }
          Tensor recon = sum(
              square(sub(pair.forward_forward(pred, &stream), target)));
          rec_raw += recon.item();
          misfit = misfit.defined() ? add(misfit, recon) : recon;
        }
        const double kl_scale =
            static_cast<double>(e - s) / static_cast<double>(n);
        Tensor kl = pair.total_kl(prior);
        Tensor objective =
            add(scale(misfit, 1.0 / (cfg.beta * M)), scale(kl, kl_scale));
        tape.backward(objective);
        adam_step(params, state, adam);
        sup_total += sup_raw;
        rec_total += rec_raw;
        kl_total += kl_scale * kl.item();
      }
    } catch (const NumericError& e) {
      throw TrainError("variational fit diverged at epoch " +
                       std::to_string(epoch) + ": " + e.what());
    }
    const double objective =
        (sup_total + rec_total) / (cfg.beta * M) + kl_total;
    log.push_back(
        {epoch, sup_total, rec_total, kl_total, objective, ms_since(t0)});
  }
  if (pair.mu_checksum() != mu_before)
    throw Error("internal invariant violation: mu changed during the "
                "variational fit");
  return log;
}

namespace {

int mc_thread_count(int n_samples) {
  const char* env = std::getenv("SEISBAYES_THREADS");
  int threads = static_cast<int>(std::thread::hardware_concurrency());
  if (threads < 1) threads = 1;
  if (env != nullptr && env[0] != '\0') {
    char* end = nullptr;
    const long v = std::strtol(env, &end, 10);
    if (end == nullptr || *end != '\0' || v < 1)
      throw ConfigError("SEISBAYES_THREADS must be a positive integer");
    threads = static_cast<int>(v);
  }
  return std::min(threads, n_samples);
}

}  // namespace

PredictiveSummary predict_mc(ModelPairI& pair, const Tensor& patches, int n,
                             std::uint64_t seed, const std::string& mean_mode) {
  if (n < 2) throw ConfigError("predict_mc: N must be >= 2");
  if (mean_mode != "mc" && mean_mode != "pretrained")
    throw ConfigError("predict_mc: mean mode must be 'mc' or 'pretrained'");

  std::vector<std::vector<double>> samples(static_cast<std::size_t>(n));
  Shape out_shape;
  const int threads = mc_thread_count(n);
  std::exception_ptr first_error;
  std::mutex err_mu;

  auto worker = [&](int t) {
    try {
      for (int i = t; i < n; i += threads) {
        Rng rng = Rng(seed).fork(static_cast<std::uint64_t>(i));
        Tensor out = pair.inverse_forward(patches, &rng);
        samples[static_cast<std::size_t>(i)] = out.values();
        if (i == 0) out_shape = out.shape();
      }
    } catch (...) {
      std::lock_guard<std::mutex> lock(err_mu);
      if (!first_error) first_error = std::current_exception();
    }
  };
  if (threads <= 1) {
    worker(0);
  } else {
    std::vector<std::thread> pool;
    for (int t = 0; t < threads; ++t) pool.emplace_back(worker, t);
    for (auto& th : pool) th.join();
  }
  if (first_error) std::rethrow_exception(first_error);
  if (out_shape.size() != 2)
    throw DimError("predict_mc: expected [B,Ty] predictions");

  const int b = out_shape[0], ty = out_shape[1];
  const std::size_t cells = samples[0].size();
  std::vector<double> mean(cells, 0.0), m2(cells, 0.0);
  for (int i = 0; i < n; ++i) {
    const auto& x = samples[static_cast<std::size_t>(i)];
    if (x.size() != cells)
      throw DimError("predict_mc: sample shapes drifted between draws");
    for (std::size_t c = 0; c < cells; ++c) {
      const double d = x[c] - mean[c];
      mean[c] += d / (i + 1);
      m2[c] += d * (x[c] - mean[c]);
    }
  }

  PredictiveSummary out;
  out.n_samples = n;
  out.mean = make_grid(b, ty, GridKind::Impedance);
  out.std = make_grid(b, ty, GridKind::Uncertainty);
  if (mean_mode == "pretrained") {
    Tensor det = pair.inverse_forward_mean(patches);
    out.mean.values = det.values();
  } else {
    out.mean.values = std::move(mean);
  }
  for (std::size_t c = 0; c < cells; ++c)
    out.std.values[c] = std::sqrt(m2[c] / n);
  validate_grid(out.mean, "predict_mc mean");
  validate_grid(out.std, "predict_mc std");
  return out;
}

double coverage_2sigma(const PredictiveSummary& summary, const Grid2D& truth) {
  validate_grid(truth, "coverage");
  if (truth.n_traces != summary.mean.n_traces ||
      truth.n_samples != summary.mean.n_samples)
    throw DimError("coverage: truth shape does not match the prediction");
  std::size_t inside = 0;
  for (std::size_t i = 0; i < truth.values.size(); ++i) {
    if (std::fabs(truth.values[i] - summary.mean.values[i]) <
        2.0 * summary.std.values[i])
      ++inside;
  }
  return static_cast<double>(inside) / static_cast<double>(truth.values.size());
}

}  // namespace sb
