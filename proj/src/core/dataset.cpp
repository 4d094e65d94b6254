#include "dataset.hpp"

#include <algorithm>
#include <cmath>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <sstream>

#include <json.hpp>

namespace sb {

namespace fs = std::filesystem;
using nlohmann::json;

std::string grid_kind_name(GridKind k) {
  switch (k) {
    case GridKind::Seismic: return "seismic";
    case GridKind::Impedance: return "impedance";
    case GridKind::Uncertainty: return "uncertainty";
    case GridKind::Difference: return "difference";
  }
  return "seismic";
}

GridKind grid_kind_from_name(const std::string& s) {
  if (s == "seismic") return GridKind::Seismic;
  if (s == "impedance") return GridKind::Impedance;
  if (s == "uncertainty") return GridKind::Uncertainty;
  if (s == "difference") return GridKind::Difference;
  throw IoError("unknown grid kind '" + s + "'");
}

Grid2D make_grid(int n_traces, int n_samples, GridKind kind) {
  if (n_traces < 1 || n_samples < 1)
    throw ConfigError("grid extents must be positive");
  Grid2D g;
  g.n_traces = n_traces;
  g.n_samples = n_samples;
  g.kind = kind;
  g.values.assign(static_cast<std::size_t>(n_traces) * n_samples, 0.0);
  return g;
}

void validate_grid(const Grid2D& g, const char* where) {
  if (g.n_traces < 1 || g.n_samples < 1 ||
      g.values.size() != static_cast<std::size_t>(g.n_traces) * g.n_samples)
    throw DimError(std::string(where) + ": inconsistent grid extents");
  for (std::size_t i = 0; i < g.values.size(); ++i)
    if (!std::isfinite(g.values[i]))
      throw NumericError(std::string(where) + ": non-finite value at offset " +
                         std::to_string(i));
}

void validate_dataset(const TraceDataset& ds) {
  validate_grid(ds.seismic, "dataset seismic");
  validate_grid(ds.ai, "dataset ai");
  if (ds.ai.n_traces != ds.seismic.n_traces)
    throw DimError("dataset: trace counts differ");
  if (ds.ai.n_samples != ds.seismic.n_samples &&
      ds.ai.n_samples != 4 * ds.seismic.n_samples)
    throw DimError("dataset: AI length must equal seismic length or 4x it");
  if (ds.h < 0) throw ConfigError("dataset: h must be >= 0");
  int prev = -1;
  for (int w : ds.well_indices) {
    if (w < 0 || w >= ds.seismic.n_traces)
      throw ConfigError("dataset: well index " + std::to_string(w) +
                        " out of range");
    if (w <= prev) throw ConfigError("dataset: well indices must increase");
    prev = w;
  }
}

void validate_synth_config(const SynthConfig& cfg) {
  if (cfg.n_traces < 1 || cfg.n_samples < 2)
    throw ConfigError("synth: n_traces >= 1 and n_samples >= 2 required");
  if (cfg.min_layers < 1 || cfg.max_layers < cfg.min_layers)
    throw ConfigError("synth: bad layer count range");
  if (!(cfg.log_ai_max >= cfg.log_ai_min))
    throw ConfigError("synth: bad impedance range");
  if (!(cfg.wavelet_freq_hz > 0.0) || !(cfg.dt_s > 0.0))
    throw ConfigError("synth: wavelet frequency and dt must be positive");
  if (cfg.noise_std < 0.0) throw ConfigError("synth: noise std must be >= 0");
  if (cfg.ai_oversample != 1 && cfg.ai_oversample != 4)
    throw ConfigError("synth: ai_oversample must be 1 or 4");
  if (cfg.max_log_step <= 0.0) throw ConfigError("synth: max_log_step > 0");
}

std::vector<double> ricker_wavelet(double freq_hz, double dt_s) {
  const int half = static_cast<int>(std::ceil(1.5 / (freq_hz * dt_s)));
  std::vector<double> w(2 * half + 1);
  const double pf = M_PI * freq_hz;
  for (int i = -half; i <= half; ++i) {
    const double tau = i * dt_s;
    const double a = pf * pf * tau * tau;
    w[i + half] = (1.0 - 2.0 * a) * std::exp(-a);
  }
  return w;
}

std::vector<double> convolve_same(const std::vector<double>& signal,
                                  const std::vector<double>& kernel) {
  if (kernel.size() % 2 == 0)
    throw ConfigError("convolve_same: kernel length must be odd");
  const int n = static_cast<int>(signal.size());
  const int half = (static_cast<int>(kernel.size()) - 1) / 2;
  std::vector<double> out(signal.size(), 0.0);
  for (int t = 0; t < n; ++t) {
    double s = 0.0;
    for (int k = -half; k <= half; ++k) {
      const int j = t - k;
      if (j >= 0 && j < n) s += kernel[k + half] * signal[j];
    }
    out[t] = s;
  }
  return out;
}

TraceDataset generate_synthetic(const SynthConfig& cfg) {
  validate_synth_config(cfg);
  Rng rng(cfg.seed);

  const int n = cfg.n_traces;
  const int t_ai = cfg.n_samples * cfg.ai_oversample;
  const int n_layers =
      cfg.min_layers +
      static_cast<int>(rng.uniform() * (cfg.max_layers - cfg.min_layers + 1)) %
          (cfg.max_layers - cfg.min_layers + 1);

  // per-layer log impedance, random walk inside the configured band
  std::vector<double> log_ai(n_layers);
  log_ai[0] = rng.uniform(cfg.log_ai_min, cfg.log_ai_max);
  for (int l = 1; l < n_layers; ++l) {
    double step = rng.uniform(-cfg.max_log_step, cfg.max_log_step);
    double v = log_ai[l - 1] + step;
    if (v < cfg.log_ai_min) v = cfg.log_ai_min + (cfg.log_ai_min - v);
    if (v > cfg.log_ai_max) v = cfg.log_ai_max - (v - cfg.log_ai_max);
    v = std::clamp(v, cfg.log_ai_min, cfg.log_ai_max);
    log_ai[l] = v;
  }

  // base interface depths in AI samples, evenly spread then jittered
  const int n_if = n_layers - 1;
  std::vector<double> base(n_if);
  for (int i = 0; i < n_if; ++i) {
    const double nominal = (i + 1.0) / n_layers * t_ai;
    const double jitter = 0.25 * t_ai / n_layers;
    base[i] = nominal + rng.uniform(-jitter, jitter);
  }

  // lateral structure per interface: dip plus a smooth undulation
  std::vector<double> dip(n_if), amp(n_if), phase(n_if), cycles(n_if);
  const double os = static_cast<double>(cfg.ai_oversample);
  for (int i = 0; i < n_if; ++i) {
    dip[i] = rng.uniform(-cfg.dip_max_samples, cfg.dip_max_samples) * os;
    amp[i] = rng.uniform(0.0, cfg.wobble_amp_samples) * os;
    phase[i] = rng.uniform(0.0, 2.0 * M_PI);
    cycles[i] = rng.uniform(0.5, 2.0);
  }
  const int fault_trace =
      cfg.fault_throw_samples > 0.0 && n > 4
          ? static_cast<int>(rng.uniform(0.25, 0.75) * n)
          : -1;
  const double fault_throw =
      fault_trace >= 0
          ? rng.uniform(-cfg.fault_throw_samples, cfg.fault_throw_samples) * os
          : 0.0;

  TraceDataset ds;
  ds.ai = make_grid(n, t_ai, GridKind::Impedance);
  ds.seismic = make_grid(n, cfg.n_samples, GridKind::Seismic);

  const double dt_ai = cfg.dt_s / cfg.ai_oversample;
  const std::vector<double> wavelet = ricker_wavelet(cfg.wavelet_freq_hz, dt_ai);

  std::vector<double> refl(t_ai), synth(t_ai);
  for (int x = 0; x < n; ++x) {
    const double lateral = (x - 0.5 * n) / std::max(1, n - 1);
    const double shift_fault = (fault_trace >= 0 && x > fault_trace)
                                   ? fault_throw
                                   : 0.0;
    // interface depths for this trace, kept ordered
    std::vector<double> depth(n_if);
    for (int i = 0; i < n_if; ++i) {
      depth[i] = base[i] + dip[i] * lateral +
                 amp[i] * std::sin(2.0 * M_PI * cycles[i] * x / std::max(1, n) +
                                   phase[i]) +
                 shift_fault;
    }
    std::sort(depth.begin(), depth.end());

    int layer = 0;
    for (int t = 0; t < t_ai; ++t) {
      while (layer < n_if && t >= depth[layer]) ++layer;
      ds.ai.at(x, t) = std::exp(log_ai[layer]);
    }

    for (int t = 0; t < t_ai - 1; ++t) {
      const double a0 = ds.ai.at(x, t), a1 = ds.ai.at(x, t + 1);
      refl[t] = (a1 - a0) / (a1 + a0);
    }
    refl[t_ai - 1] = 0.0;

    synth = convolve_same(refl, wavelet);
    for (int t = 0; t < cfg.n_samples; ++t) {
      double v = synth[static_cast<std::size_t>(t) * cfg.ai_oversample];
      if (cfg.noise_std > 0.0) v += cfg.noise_std * rng.normal();
      ds.seismic.at(x, t) = v;
    }
  }
  validate_dataset(ds);
  return ds;
}

std::vector<int> select_wells(int n_traces, int n_wells) {
  if (n_traces < 1) throw ConfigError("select_wells: n_traces >= 1");
  if (n_wells < 1) throw ConfigError("select_wells: n_wells >= 1");
  std::vector<int> idx;
  idx.reserve(n_wells);
  for (int j = 0; j < n_wells; ++j) {
    const double pos = (j + 0.5) * static_cast<double>(n_traces) / n_wells;
    int i = static_cast<int>(pos);
    i = std::clamp(i, 0, n_traces - 1);
    if (idx.empty() || i != idx.back()) idx.push_back(i);
  }
  return idx;
}

NormStats compute_stats(const Grid2D& g) {
  validate_grid(g, "compute_stats");
  double mean = 0.0;
  for (double v : g.values) mean += v;
  mean /= static_cast<double>(g.values.size());
  double var = 0.0;
  for (double v : g.values) var += (v - mean) * (v - mean);
  var /= static_cast<double>(g.values.size());
  if (!(var > 0.0))
    throw ConfigError("standardize: grid is constant (zero variance)");
  return {mean, std::sqrt(var)};
}

Grid2D apply_stats(const Grid2D& g, const NormStats& s) {
  Grid2D out = g;
  for (auto& v : out.values) v = (v - s.mean) / s.std;
  return out;
}

Grid2D destandardize(const Grid2D& g, const NormStats& s) {
  Grid2D out = g;
  for (auto& v : out.values) v = v * s.std + s.mean;
  return out;
}

std::pair<Grid2D, NormStats> standardize(const Grid2D& g) {
  NormStats s = compute_stats(g);
  return {apply_stats(g, s), s};
}

Tensor make_patches(const Grid2D& seismic, int h) {
  validate_grid(seismic, "make_patches");
  if (h < 0) throw ConfigError("make_patches: h must be >= 0");
  const int n = seismic.n_traces, T = seismic.n_samples, w = 2 * h + 1;
  std::vector<double> v(static_cast<std::size_t>(n) * w * T, 0.0);
  for (int i = 0; i < n; ++i) {
    for (int j = 0; j < w; ++j) {
      const int src = i - h + j;
      if (src < 0 || src >= n) continue;  // boundary traces stay zero
      std::memcpy(v.data() + (static_cast<std::size_t>(i) * w + j) * T,
                  seismic.values.data() + static_cast<std::size_t>(src) * T,
                  sizeof(double) * T);
    }
  }
  return Tensor::from({n, w, T}, std::move(v));
}

// ---- grid files --------------------------------------------------------------

namespace {

constexpr char kGridMagic[8] = {'S', 'B', 'G', 'R', 'I', 'D', '0', '1'};

void save_grid_binary(const Grid2D& g, const std::string& path) {
  json header{{"n_traces", g.n_traces},
              {"n_samples", g.n_samples},
              {"kind", grid_kind_name(g.kind)},
              {"dtype", "f32le"},
              {"layout", "trace-major"}};
  const std::string hs = header.dump();
  std::ofstream os(path, std::ios::binary);
  if (!os) throw IoError("save_grid: cannot open '" + path + "'");
  os.write(kGridMagic, 8);
  const std::uint32_t len = static_cast<std::uint32_t>(hs.size());
  unsigned char lb[4] = {static_cast<unsigned char>(len & 0xff),
                         static_cast<unsigned char>((len >> 8) & 0xff),
                         static_cast<unsigned char>((len >> 16) & 0xff),
                         static_cast<unsigned char>((len >> 24) & 0xff)};
  os.write(reinterpret_cast<const char*>(lb), 4);
  os.write(hs.data(), static_cast<std::streamsize>(hs.size()));
  std::vector<float> payload(g.values.size());
  for (std::size_t i = 0; i < payload.size(); ++i)
    payload[i] = static_cast<float>(g.values[i]);
  os.write(reinterpret_cast<const char*>(payload.data()),
           static_cast<std::streamsize>(payload.size() * sizeof(float)));
  if (!os) throw IoError("save_grid: write failed for '" + path + "'");
}

void save_grid_csv(const Grid2D& g, const std::string& path) {
  std::ofstream os(path);
  if (!os) throw IoError("save_grid: cannot open '" + path + "'");
  char buf[40];
  for (int i = 0; i < g.n_traces; ++i) {
    for (int t = 0; t < g.n_samples; ++t) {
      std::snprintf(buf, sizeof(buf), "%.9g", g.at(i, t));
      if (t) os << ',';
      os << buf;
    }
    os << '\n';
  }
  if (!os) throw IoError("save_grid: write failed for '" + path + "'");
}

Grid2D load_grid_binary(std::ifstream& is, const std::string& path) {
  unsigned char lb[4];
  is.read(reinterpret_cast<char*>(lb), 4);
  if (!is) throw IoError("load_grid: truncated header length in '" + path + "'");
  const std::uint32_t len = static_cast<std::uint32_t>(lb[0]) |
                            (static_cast<std::uint32_t>(lb[1]) << 8) |
                            (static_cast<std::uint32_t>(lb[2]) << 16) |
                            (static_cast<std::uint32_t>(lb[3]) << 24);
  std::string hs(len, '\0');
  is.read(hs.data(), len);
  if (!is) throw IoError("load_grid: truncated header in '" + path + "'");
  json header;
  try {
    header = json::parse(hs);
  } catch (const json::exception& e) {
    throw IoError("load_grid: bad header JSON in '" + path + "': " + e.what());
  }
  const int n_traces = header.at("n_traces").get<int>();
  const int n_samples = header.at("n_samples").get<int>();
  if (header.at("dtype").get<std::string>() != "f32le")
    throw IoError("load_grid: unsupported dtype in '" + path + "'");
  if (header.at("layout").get<std::string>() != "trace-major")
    throw IoError("load_grid: unsupported layout in '" + path + "'");
  if (n_traces < 1 || n_samples < 1)
    throw IoError("load_grid: bad extents in '" + path + "'");

  const std::size_t count =
      static_cast<std::size_t>(n_traces) * static_cast<std::size_t>(n_samples);
  std::vector<float> payload(count);
  is.read(reinterpret_cast<char*>(payload.data()),
          static_cast<std::streamsize>(count * sizeof(float)));
  const std::streamsize got = is.gcount();
  if (static_cast<std::size_t>(got) != count * sizeof(float))
    throw IoError("load_grid: truncated payload in '" + path + "': expected " +
                  std::to_string(count * sizeof(float)) + " bytes, got " +
                  std::to_string(got));
  is.peek();
  if (!is.eof())
    throw IoError("load_grid: trailing bytes after payload in '" + path + "'");

  Grid2D g = make_grid(n_traces, n_samples,
                       grid_kind_from_name(header.at("kind").get<std::string>()));
  for (std::size_t i = 0; i < count; ++i) {
    const double v = static_cast<double>(payload[i]);
    if (!std::isfinite(v))
      throw IoError("load_grid: non-finite value at offset " +
                    std::to_string(i) + " in '" + path + "'");
    g.values[i] = v;
  }
  return g;
}

Grid2D load_grid_csv(const std::string& path) {
  std::ifstream is(path);
  if (!is) throw IoError("load_grid: cannot open '" + path + "'");
  std::vector<double> values;
  int n_samples = -1, n_traces = 0;
  std::string line;
  while (std::getline(is, line)) {
    if (line.empty()) continue;
    std::stringstream ss(line);
    std::string cell;
    int count = 0;
    while (std::getline(ss, cell, ',')) {
      std::size_t pos = 0;
      double v;
      try {
        v = std::stod(cell, &pos);
      } catch (const std::exception&) {
        throw IoError("load_grid: bad number '" + cell + "' at row " +
                      std::to_string(n_traces) + " in '" + path + "'");
      }
      if (!std::isfinite(v))
        throw IoError("load_grid: non-finite value at row " +
                      std::to_string(n_traces) + " in '" + path + "'");
      values.push_back(v);
      ++count;
    }
    if (n_samples < 0) n_samples = count;
    if (count != n_samples)
      throw IoError("load_grid: ragged row " + std::to_string(n_traces) +
                    " in '" + path + "': expected " +
                    std::to_string(n_samples) + " cells, got " +
                    std::to_string(count));
    ++n_traces;
  }
  if (n_traces == 0) throw IoError("load_grid: empty CSV '" + path + "'");
  Grid2D g = make_grid(n_traces, n_samples, GridKind::Seismic);
  g.values = std::move(values);
  return g;
}

}  // namespace

void save_grid(const Grid2D& g, const std::string& path) {
  validate_grid(g, "save_grid");
  if (path.size() >= 4 && path.substr(path.size() - 4) == ".csv")
    save_grid_csv(g, path);
  else
    save_grid_binary(g, path);
}

Grid2D load_grid(const std::string& path) {
  std::ifstream is(path, std::ios::binary);
  if (!is) throw IoError("load_grid: cannot open '" + path + "'");
  char magic[8] = {0};
  is.read(magic, 8);
  if (is && std::memcmp(magic, kGridMagic, 8) == 0)
    return load_grid_binary(is, path);
  is.close();
  return load_grid_csv(path);
}

// ---- manifest -----------------------------------------------------------------

void save_manifest(const TraceDataset& ds, const std::string& manifest_path,
                   const std::string& seismic_rel, const std::string& ai_rel) {
  validate_dataset(ds);
  json j{{"format", "seisbayes-dataset-1"},
         {"seismic", seismic_rel},
         {"ai", ai_rel},
         {"wells", ds.well_indices},
         {"h", ds.h},
         {"stats",
          {{"seismic", {{"mean", ds.seismic_stats.mean}, {"std", ds.seismic_stats.std}}},
           {"ai", {{"mean", ds.ai_stats.mean}, {"std", ds.ai_stats.std}}}}}};
  std::ofstream os(manifest_path);
  if (!os) throw IoError("save_manifest: cannot open '" + manifest_path + "'");
  os << j.dump(2) << '\n';
  if (!os) throw IoError("save_manifest: write failed");
}

TraceDataset load_manifest(const std::string& manifest_path) {
  std::ifstream is(manifest_path);
  if (!is) throw IoError("load_manifest: cannot open '" + manifest_path + "'");
  json j;
  try {
    is >> j;
  } catch (const json::exception& e) {
    throw IoError("load_manifest: bad JSON in '" + manifest_path +
                  "': " + e.what());
  }
  if (j.value("format", "") != "seisbayes-dataset-1")
    throw IoError("load_manifest: unknown format in '" + manifest_path + "'");
  const fs::path dir = fs::path(manifest_path).parent_path();
  TraceDataset ds;
  ds.seismic = load_grid((dir / j.at("seismic").get<std::string>()).string());
  ds.ai = load_grid((dir / j.at("ai").get<std::string>()).string());
  ds.well_indices = j.at("wells").get<std::vector<int>>();
  ds.h = j.at("h").get<int>();
  ds.seismic_stats = {j.at("stats").at("seismic").at("mean").get<double>(),
                      j.at("stats").at("seismic").at("std").get<double>()};
  ds.ai_stats = {j.at("stats").at("ai").at("mean").get<double>(),
                 j.at("stats").at("ai").at("std").get<double>()};
  validate_dataset(ds);
  return ds;
}

}  // namespace sb
