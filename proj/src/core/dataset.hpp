#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include "tensor.hpp"

namespace sb {

enum class GridKind { Seismic, Impedance, Uncertainty, Difference };

std::string grid_kind_name(GridKind k);
GridKind grid_kind_from_name(const std::string& s);

// Trace-major 2-d grid; values[trace * n_samples + sample].
struct Grid2D {
  int n_traces = 0;
  int n_samples = 0;
  std::vector<double> values;
  GridKind kind = GridKind::Seismic;

  double at(int trace, int sample) const {
    return values[static_cast<std::size_t>(trace) * n_samples + sample];
  }
  double& at(int trace, int sample) {
    return values[static_cast<std::size_t>(trace) * n_samples + sample];
  }
  std::size_t size() const { return values.size(); }
};

Grid2D make_grid(int n_traces, int n_samples, GridKind kind);
void validate_grid(const Grid2D& g, const char* where);

struct NormStats {
  double mean = 0.0;
  double std = 1.0;
};

struct TraceDataset {
  Grid2D seismic;
  Grid2D ai;
  std::vector<int> well_indices;
  int h = 0;
  NormStats seismic_stats;
  NormStats ai_stats;
};

void validate_dataset(const TraceDataset& ds);

struct SynthConfig {
  int n_traces = 200;
  int n_samples = 256;
  int min_layers = 8;
  int max_layers = 16;
  double log_ai_min = 8.0;   // ln of impedance floor, ~3 km/s * 2 g/cc scale
  double log_ai_max = 9.2;
  double max_log_step = 0.35;
  double wavelet_freq_hz = 25.0;
  double dt_s = 0.002;
  double noise_std = 0.01;
  double dip_max_samples = 12.0;      // interface dip across the section
  double wobble_amp_samples = 6.0;    // smooth lateral undulation
  double fault_throw_samples = 8.0;   // vertical throw at one fault, 0 = off
  int ai_oversample = 1;              // 4 exercises the upsampling path
  std::uint64_t seed = 1234;
};

void validate_synth_config(const SynthConfig& cfg);

// Ricker wavelet samples at spacing dt, centered; length 2*half+1.
std::vector<double> ricker_wavelet(double freq_hz, double dt_s);

// Same-length convolution with a centered odd-length kernel, zero padded.
std::vector<double> convolve_same(const std::vector<double>& signal,
                                  const std::vector<double>& kernel);

// Layered earth with laterally correlated interfaces; AI is piecewise
// constant per trace, seismic is reflectivity convolved with a Ricker
// wavelet plus Gaussian noise. Deterministic for a given config.
TraceDataset generate_synthetic(const SynthConfig& cfg);

// Evenly spread trace indices: floor((j + 0.5) * n_traces / n_wells),
// deduplicated and sorted.
std::vector<int> select_wells(int n_traces, int n_wells);

NormStats compute_stats(const Grid2D& g);
Grid2D apply_stats(const Grid2D& g, const NormStats& s);
Grid2D destandardize(const Grid2D& g, const NormStats& s);
std::pair<Grid2D, NormStats> standardize(const Grid2D& g);

// Patches [N, 2h+1, T]; rows are traces i-h..i+h with zeros past the edges.
Tensor make_patches(const Grid2D& seismic, int h);

// Grid files. Binary: "SBGRID01" magic, u32le header length, JSON header,
// f32le payload. CSV: one trace per row, 9 significant digits. save_grid
// picks CSV for a .csv path; load_grid sniffs the magic.
void save_grid(const Grid2D& g, const std::string& path);
Grid2D load_grid(const std::string& path);

// Manifest JSON tying the files, wells, h and normalization together.
void save_manifest(const TraceDataset& ds, const std::string& manifest_path,
                   const std::string& seismic_rel, const std::string& ai_rel);
TraceDataset load_manifest(const std::string& manifest_path);

}  // namespace sb
