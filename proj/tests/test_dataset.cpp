#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <cmath>
#include <filesystem>
#include <fstream>

#include "core/dataset.hpp"
#include "testutil.hpp"

using namespace sb;
namespace fs = std::filesystem;

namespace {

SynthConfig flat_cfg(int layers) {
  SynthConfig cfg;
  cfg.n_traces = 12;
  cfg.n_samples = 64;
  cfg.min_layers = layers;
  cfg.max_layers = layers;
  cfg.noise_std = 0.0;
  cfg.dip_max_samples = 0.0;
  cfg.wobble_amp_samples = 0.0;
  cfg.fault_throw_samples = 0.0;
  return cfg;
}

}  // namespace

TEST_CASE("single constant layer gives zero seismic") {
  TraceDataset ds = generate_synthetic(flat_cfg(1));
  for (double v : ds.seismic.values) CHECK(v == 0.0);
  const double a0 = ds.ai.values[0];
  for (double v : ds.ai.values) CHECK(v == a0);
}

TEST_CASE("two-layer model is a single scaled wavelet at the interface") {
  TraceDataset ds = generate_synthetic(flat_cfg(2));
  const auto wavelet = ricker_wavelet(25.0, 0.002);
  const int half = (static_cast<int>(wavelet.size()) - 1) / 2;
  for (int x = 0; x < ds.seismic.n_traces; ++x) {
    // locate the interface and its reflection coefficient by hand
    int t0 = -1;
    double r0 = 0.0;
    for (int t = 0; t + 1 < ds.ai.n_samples; ++t) {
      const double a = ds.ai.at(x, t), b = ds.ai.at(x, t + 1);
      if (a != b) {
        REQUIRE(t0 == -1);  // exactly one interface
        t0 = t;
        r0 = (b - a) / (b + a);
      }
    }
    REQUIRE(t0 >= 0);
    for (int t = 0; t < ds.seismic.n_samples; ++t) {
      const int k = t - t0;
      const double expected =
          (k >= -half && k <= half) ? r0 * wavelet[k + half] : 0.0;
      CHECK(ds.seismic.at(x, t) == doctest::Approx(expected).epsilon(1e-12));
    }
  }
}

TEST_CASE("generator is deterministic for a fixed seed") {
  SynthConfig cfg;
  cfg.n_traces = 20;
  cfg.n_samples = 48;
  cfg.seed = 77;
  TraceDataset a = generate_synthetic(cfg);
  TraceDataset b = generate_synthetic(cfg);
  CHECK(a.seismic.values == b.seismic.values);
  CHECK(a.ai.values == b.ai.values);
  cfg.seed = 78;
  TraceDataset c = generate_synthetic(cfg);
  CHECK(c.ai.values != a.ai.values);
}

TEST_CASE("reflectivity magnitudes stay below one") {
  SynthConfig cfg;
  cfg.n_traces = 30;
  cfg.n_samples = 100;
  cfg.max_log_step = 3.0;  // aggressive contrasts
  cfg.seed = 5;
  TraceDataset ds = generate_synthetic(cfg);
  for (int x = 0; x < ds.ai.n_traces; ++x)
    for (int t = 0; t + 1 < ds.ai.n_samples; ++t) {
      const double a = ds.ai.at(x, t), b = ds.ai.at(x, t + 1);
      CHECK(std::fabs((b - a) / (b + a)) < 1.0);
    }
}

TEST_CASE("seismic is linear in the reflectivity at zero noise") {
  Rng rng(9);
  std::vector<double> refl(64, 0.0);
  for (int i = 5; i < 60; i += 7) refl[i] = rng.uniform(-0.4, 0.4);
  const auto wavelet = ricker_wavelet(25.0, 0.002);
  auto s1 = convolve_same(refl, wavelet);
  std::vector<double> refl2(refl);
  for (auto& v : refl2) v *= 3.0;
  auto s2 = convolve_same(refl2, wavelet);
  for (std::size_t i = 0; i < s1.size(); ++i)
    CHECK(s2[i] == doctest::Approx(3.0 * s1[i]).epsilon(1e-12));
}

TEST_CASE("ai_oversample=4 produces a 4x AI grid") {
  SynthConfig cfg;
  cfg.n_traces = 10;
  cfg.n_samples = 32;
  cfg.ai_oversample = 4;
  TraceDataset ds = generate_synthetic(cfg);
  CHECK(ds.ai.n_samples == 128);
  CHECK(ds.seismic.n_samples == 32);
  validate_dataset(ds);
}

TEST_CASE("select_wells spacing and counts") {
  auto w20 = select_wells(2721, 20);
  CHECK(w20.size() == 20);
  for (std::size_t i = 1; i < w20.size(); ++i) CHECK(w20[i] > w20[i - 1]);
  CHECK(w20.front() >= 0);
  CHECK(w20.back() < 2721);
  // spacing close to uniform
  for (std::size_t i = 1; i < w20.size(); ++i)
    CHECK(std::abs((w20[i] - w20[i - 1]) - 136) <= 1);

  auto w10 = select_wells(501, 10);
  CHECK(w10.size() == 10);

  auto wall = select_wells(7, 7);
  CHECK(wall == std::vector<int>{0, 1, 2, 3, 4, 5, 6});

  auto wover = select_wells(5, 11);
  CHECK(wover.size() <= 5);
}

TEST_CASE("standardize and destandardize") {
  Rng rng(11);
  Grid2D g = make_grid(6, 10, GridKind::Impedance);
  for (auto& v : g.values) v = rng.uniform(500.0, 1500.0);
  auto [z, stats] = standardize(g);
  NormStats zs = compute_stats(z);
  CHECK(std::fabs(zs.mean) < 1e-12);
  CHECK(zs.std == doctest::Approx(1.0).epsilon(1e-12));

  // already standardized input is unchanged
  auto [z2, stats2] = standardize(z);
  CHECK(sbtest::max_abs_diff(z2.values, z.values) < 1e-12);

  Grid2D back = destandardize(z, stats);
  for (std::size_t i = 0; i < g.values.size(); ++i)
    CHECK(back.values[i] == doctest::Approx(g.values[i]).epsilon(1e-10));

  Grid2D flat = make_grid(3, 3, GridKind::Seismic);
  for (auto& v : flat.values) v = 2.5;
  CHECK_THROWS_AS(standardize(flat), ConfigError);
}

TEST_CASE("patch construction and boundary rule") {
  Grid2D g = make_grid(5, 4, GridKind::Seismic);
  Rng rng(13);
  for (auto& v : g.values) v = rng.uniform(-1.0, 1.0);

  Tensor p1 = make_patches(g, 1);
  CHECK(p1.shape() == Shape{5, 3, 4});
  for (int t = 0; t < 4; ++t) {
    CHECK(p1.at({0, 0, t}) == 0.0);               // x_{-1} = 0
    CHECK(p1.at({0, 1, t}) == g.at(0, t));        // center
    CHECK(p1.at({4, 2, t}) == 0.0);               // x_{N} = 0
    CHECK(p1.at({2, 0, t}) == g.at(1, t));        // interior verbatim
    CHECK(p1.at({2, 2, t}) == g.at(3, t));
  }

  Tensor p0 = make_patches(g, 0);
  CHECK(p0.shape() == Shape{5, 1, 4});
  for (int i = 0; i < 5; ++i)
    for (int t = 0; t < 4; ++t) CHECK(p0.at({i, 0, t}) == g.at(i, t));

  // center-column projection reproduces the grid exactly
  Tensor p2 = make_patches(g, 2);
  for (int i = 0; i < 5; ++i)
    for (int t = 0; t < 4; ++t) CHECK(p2.at({i, 2, t}) == g.at(i, t));
}

TEST_CASE("binary grid round trip is bit-identical") {
  const std::string path = (fs::temp_directory_path() / "sb_grid_rt.grid").string();
  Grid2D g = make_grid(7, 9, GridKind::Uncertainty);
  Rng rng(17);
  for (auto& v : g.values) v = static_cast<float>(rng.uniform(-2.0, 2.0));
  save_grid(g, path);
  Grid2D h = load_grid(path);
  CHECK(h.n_traces == 7);
  CHECK(h.n_samples == 9);
  CHECK(h.kind == GridKind::Uncertainty);
  CHECK(h.values == g.values);  // values were f32-representable

  // file-level: save(load(file)) is byte-identical
  const std::string path2 = (fs::temp_directory_path() / "sb_grid_rt2.grid").string();
  save_grid(h, path2);
  std::ifstream f1(path, std::ios::binary), f2(path2, std::ios::binary);
  std::string b1((std::istreambuf_iterator<char>(f1)), {});
  std::string b2((std::istreambuf_iterator<char>(f2)), {});
  CHECK(b1 == b2);
  fs::remove(path);
  fs::remove(path2);
}

TEST_CASE("truncated grid payload names the byte counts") {
  const std::string path = (fs::temp_directory_path() / "sb_grid_tr.grid").string();
  Grid2D g = make_grid(4, 8, GridKind::Seismic);
  save_grid(g, path);
  fs::resize_file(path, fs::file_size(path) - 7);
  try {
    load_grid(path);
    FAIL("expected IoError");
  } catch (const IoError& e) {
    const std::string msg = e.what();
    CHECK(msg.find("expected") != std::string::npos);
    CHECK(msg.find("128") != std::string::npos);  // 4*8*4 bytes
    CHECK(msg.find("121") != std::string::npos);
  }
  fs::remove(path);
}

TEST_CASE("csv and binary encodings agree within 1e-7") {
  const std::string pb = (fs::temp_directory_path() / "sb_grid_x.grid").string();
  const std::string pc = (fs::temp_directory_path() / "sb_grid_x.csv").string();
  Grid2D g = make_grid(5, 6, GridKind::Seismic);
  Rng rng(19);
  for (auto& v : g.values) v = rng.uniform(-1.0, 1.0);
  save_grid(g, pb);
  save_grid(g, pc);
  Grid2D gb = load_grid(pb);
  Grid2D gc = load_grid(pc);
  CHECK(gc.n_traces == g.n_traces);
  CHECK(sbtest::max_abs_diff(gb.values, gc.values) < 1e-7);
  fs::remove(pb);
  fs::remove(pc);
}

TEST_CASE("csv loader rejects ragged and non-numeric rows") {
  const std::string path = (fs::temp_directory_path() / "sb_bad.csv").string();
  {
    std::ofstream os(path);
    os << "1,2,3\n4,5\n";
  }
  CHECK_THROWS_AS(load_grid(path), IoError);
  {
    std::ofstream os(path);
    os << "1,2\n3,abc\n";
  }
  CHECK_THROWS_AS(load_grid(path), IoError);
  fs::remove(path);
}

TEST_CASE("manifest round trip") {
  const auto dir = fs::temp_directory_path() / "sb_manifest_test";
  fs::create_directories(dir);
  SynthConfig cfg;
  cfg.n_traces = 16;
  cfg.n_samples = 40;
  TraceDataset ds = generate_synthetic(cfg);
  ds.well_indices = select_wells(16, 4);
  ds.h = 2;
  ds.seismic_stats = compute_stats(ds.seismic);
  ds.ai_stats = compute_stats(ds.ai);
  save_grid(ds.seismic, (dir / "seismic.grid").string());
  save_grid(ds.ai, (dir / "ai.grid").string());
  save_manifest(ds, (dir / "manifest.json").string(), "seismic.grid", "ai.grid");

  TraceDataset back = load_manifest((dir / "manifest.json").string());
  CHECK(back.h == 2);
  CHECK(back.well_indices == ds.well_indices);
  CHECK(back.seismic.n_traces == 16);
  CHECK(back.ai_stats.mean == doctest::Approx(ds.ai_stats.mean).epsilon(1e-12));
  fs::remove_all(dir);
}

TEST_CASE("impossible synth ranges are rejected") {
  SynthConfig cfg;
  cfg.min_layers = 5;
  cfg.max_layers = 2;
  CHECK_THROWS_AS(generate_synthetic(cfg), ConfigError);
  SynthConfig cfg2;
  cfg2.noise_std = -0.1;
  CHECK_THROWS_AS(generate_synthetic(cfg2), ConfigError);
  SynthConfig cfg3;
  cfg3.ai_oversample = 2;
  CHECK_THROWS_AS(generate_synthetic(cfg3), ConfigError);
}
