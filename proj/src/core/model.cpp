#include "model.hpp"

#include <cstring>
#include <fstream>

#include <json.hpp>

namespace sb {

using nlohmann::json;

void validate_inverse_config(const InverseModelConfig& cfg) {
  if (cfg.h < 0) throw ConfigError("inverse model: h must be >= 0");
  if (cfg.dilations.size() != 3)
    throw ConfigError("inverse model: exactly 3 parallel dilated branches");
  for (int d : cfg.dilations)
    if (d < 1) throw ConfigError("inverse model: dilations must be >= 1");
  if (cfg.cnn_channels < 1 || cfg.gru_hidden < 1 || cfg.regression_hidden < 1)
    throw ConfigError("inverse model: sizes must be positive");
  if (cfg.kernel_t % 2 == 0 || cfg.kernel_w % 2 == 0)
    throw ConfigError("inverse model: kernels must be odd");
  if (cfg.gru_layers < 1) throw ConfigError("inverse model: gru_layers >= 1");
  if (cfg.cnn_channels % cfg.groupnorm_groups != 0 ||
      (3 * cfg.cnn_channels) % cfg.groupnorm_groups != 0)
    throw ConfigError("inverse model: channels not divisible by groupnorm groups");
  if (cfg.upsample_kernel % 2 == 0)
    throw ConfigError("inverse model: upsample kernel must be odd");
}

void validate_forward_config(const ForwardModelConfig& cfg) {
  if (cfg.channels < 1) throw ConfigError("forward model: channels >= 1");
  if (cfg.kernel1 % 2 == 0 || cfg.kernel2 % 2 == 0)
    throw ConfigError("forward model: kernels must be odd");
  if (cfg.activation != "tanh" && cfg.activation != "identity")
    throw ConfigError("forward model: unknown activation '" + cfg.activation +
                      "'");
}

// ---- InverseModel ----------------------------------------------------------

InverseModel::InverseModel(const InverseModelConfig& cfg, Rng& rng)
    : cfg_(cfg) {
  validate_inverse_config(cfg);
  const int H = cfg.gru_hidden;
  int in = 1;
  for (int i = 0; i < cfg.gru_layers; ++i) {
    gru_stack_.emplace_back(in, H, rng);
    in = H;
  }
  // CNN activations run as [B, C, W, T]; the time axis sits last so the
  // convolution inner loops stream over contiguous memory.
  for (int i = 0; i < 3; ++i) {
    parallel_.emplace_back(1, cfg.cnn_channels, cfg.kernel_w, cfg.kernel_t, 1,
                           cfg.dilations[i], rng);
    parallel_gn_.emplace_back(cfg.cnn_channels, cfg.groupnorm_groups,
                              cfg.groupnorm_eps);
  }
  serial1_ = std::make_unique<Conv2dLayer>(3 * cfg.cnn_channels,
                                           cfg.cnn_channels, cfg.kernel_w,
                                           cfg.kernel_t, 1, 1, rng);
  serial1_gn_ = std::make_unique<GroupNormLayer>(
      cfg.cnn_channels, cfg.groupnorm_groups, cfg.groupnorm_eps);
  serial2_ = std::make_unique<Conv1dLayer>(cfg.cnn_channels, cfg.cnn_channels,
                                           cfg.kernel_t, 1, 1, rng);
  serial2_gn_ = std::make_unique<GroupNormLayer>(
      cfg.cnn_channels, cfg.groupnorm_groups, cfg.groupnorm_eps);
  serial3_ =
      std::make_unique<Conv1dLayer>(cfg.cnn_channels, H, cfg.kernel_t, 1, 1, rng);
  if (cfg.upsample) {
    upsample_.emplace_back(H, H, cfg.upsample_kernel, rng);
    upsample_.emplace_back(H, H, cfg.upsample_kernel, rng);
  }
  reg_gru_ = std::make_unique<GruLayer>(H, cfg.regression_hidden, rng);
  head_ = std::make_unique<Dense>(cfg.regression_hidden, 1, rng);

  // width trajectory of the patch axis decides where pooling applies
  const int w0 = 2 * cfg.h + 1;
  pool1_ = w0 >= 2;
  const int w1 = pool1_ ? (w0 - 2) / 2 + 1 : w0;
  pool2_ = w1 >= 2;
}

namespace {
template <typename L>
Tensor apply_layer(const L& layer, const Tensor& x, Rng* rng, bool variational) {
  return variational ? layer.forward_var(x, *rng) : layer.forward(x);
}
}  // namespace

Tensor InverseModel::cnn_branch(const Tensor& patches, Rng* rng,
                                bool variational) const {
  const int B = patches.dim(0), W0 = patches.dim(1), T = patches.dim(2);
  Tensor x = reshape(patches, {B, 1, W0, T});
  std::vector<Tensor> branches;
  for (int i = 0; i < 3; ++i) {
    Tensor y = apply_layer(parallel_[i], x, rng, variational);
    y = apply_layer(parallel_gn_[i], y, rng, variational);
    if (pool1_) y = maxpool2d(y, 2, 1, 2, 1);
    branches.push_back(y);
  }
  Tensor cat = concat(branches, 1);
  Tensor s = apply_layer(*serial1_, cat, rng, variational);
  s = apply_layer(*serial1_gn_, s, rng, variational);
  if (pool2_) s = maxpool2d(s, 2, 1, 2, 1);
  Tensor flat = mean_axis(s, 2);  // [B,C,T]
  flat = apply_layer(*serial2_, flat, rng, variational);
  flat = apply_layer(*serial2_gn_, flat, rng, variational);
  return apply_layer(*serial3_, flat, rng, variational);  // [B,H,T]
}

Tensor InverseModel::run(const Tensor& patches, Rng* rng,
                         bool variational) const {
  const int B = patches.dim(0), T = patches.dim(2);
  Tensor center = reshape(slice(patches, 1, cfg_.h, 1), {B, T, 1});
  Tensor g = center;
  for (const auto& l : gru_stack_)
    g = apply_layer(l, g, rng, variational);  // [B,T,H]
  Tensor gru_out = transpose_last2(g);        // [B,H,T]

  Tensor cnn_out = cnn_branch(patches, rng, variational);  // [B,H,T]
  Tensor s = add(gru_out, cnn_out);
  for (const auto& up : upsample_)
    s = apply_layer(up, s, rng, variational);  // [B,H,Ty]

  Tensor r = transpose_last2(s);                // [B,Ty,H]
  r = apply_layer(*reg_gru_, r, rng, variational);  // [B,Ty,Hr]
  const int Ty = r.dim(1);
  Tensor flat = reshape(r, {B * Ty, cfg_.regression_hidden});
  Tensor out = apply_layer(*head_, flat, rng, variational);  // [B*Ty,1]
  return reshape(out, {B, Ty});
}

Tensor InverseModel::forward(const Tensor& patches, Rng* rng) const {
  if (patches.ndim() != 3)
    throw DimError("inverse model: patches must be [B,2h+1,T]");
  const int W0 = patches.dim(1);
  if (W0 != 2 * cfg_.h + 1)
    throw DimError("inverse model: patch width " + std::to_string(W0) +
                   " does not match 2h+1 = " + std::to_string(2 * cfg_.h + 1));
  const bool variational = mode_ == LayerMode::Variational;
  if (variational && rng == nullptr)
    throw ConfigError("inverse model: variational forward needs an RNG");
  return run(patches, rng, variational);
}

Tensor InverseModel::forward_mean(const Tensor& patches) const {
  if (patches.ndim() != 3 || patches.dim(1) != 2 * cfg_.h + 1)
    throw DimError("inverse model: patches must be [B,2h+1,T]");
  return run(patches, nullptr, false);
}

void InverseModel::init_variational(double rho0) {
  for (auto& l : gru_stack_) l.init_variational(rho0);
  for (auto& l : parallel_) l.init_variational(rho0);
  for (auto& l : parallel_gn_) l.init_variational(rho0);
  serial1_->init_variational(rho0);
  serial1_gn_->init_variational(rho0);
  serial2_->init_variational(rho0);
  serial2_gn_->init_variational(rho0);
  serial3_->init_variational(rho0);
  for (auto& l : upsample_) l.init_variational(rho0);
  reg_gru_->init_variational(rho0);
  head_->init_variational(rho0);
  mode_ = LayerMode::Variational;
}

void InverseModel::collect_mu(std::vector<ParamRef>& out) const {
  for (std::size_t i = 0; i < gru_stack_.size(); ++i)
    gru_stack_[i].collect_mu("inv.gru" + std::to_string(i), out);
  for (int i = 0; i < 3; ++i) {
    parallel_[i].collect_mu("inv.par" + std::to_string(i), out);
    parallel_gn_[i].collect_mu("inv.par" + std::to_string(i) + "_gn", out);
  }
  serial1_->collect_mu("inv.ser1", out);
  serial1_gn_->collect_mu("inv.ser1_gn", out);
  serial2_->collect_mu("inv.ser2", out);
  serial2_gn_->collect_mu("inv.ser2_gn", out);
  serial3_->collect_mu("inv.ser3", out);
  for (std::size_t i = 0; i < upsample_.size(); ++i)
    upsample_[i].collect_mu("inv.up" + std::to_string(i), out);
  reg_gru_->collect_mu("inv.reg_gru", out);
  head_->collect_mu("inv.head", out);
}

void InverseModel::collect_rho(std::vector<ParamRef>& out) const {
  for (std::size_t i = 0; i < gru_stack_.size(); ++i)
    gru_stack_[i].collect_rho("inv.gru" + std::to_string(i), out);
  for (int i = 0; i < 3; ++i) {
    parallel_[i].collect_rho("inv.par" + std::to_string(i), out);
    parallel_gn_[i].collect_rho("inv.par" + std::to_string(i) + "_gn", out);
  }
  serial1_->collect_rho("inv.ser1", out);
  serial1_gn_->collect_rho("inv.ser1_gn", out);
  serial2_->collect_rho("inv.ser2", out);
  serial2_gn_->collect_rho("inv.ser2_gn", out);
  serial3_->collect_rho("inv.ser3", out);
  for (std::size_t i = 0; i < upsample_.size(); ++i)
    upsample_[i].collect_rho("inv.up" + std::to_string(i), out);
  reg_gru_->collect_rho("inv.reg_gru", out);
  head_->collect_rho("inv.head", out);
}

void InverseModel::collect_vps(std::vector<const VariationalParam*>& out) const {
  for (const auto& l : gru_stack_) l.collect_vps(out);
  for (const auto& l : parallel_) l.collect_vps(out);
  for (const auto& l : parallel_gn_) l.collect_vps(out);
  serial1_->collect_vps(out);
  serial1_gn_->collect_vps(out);
  serial2_->collect_vps(out);
  serial2_gn_->collect_vps(out);
  serial3_->collect_vps(out);
  for (const auto& l : upsample_) l.collect_vps(out);
  reg_gru_->collect_vps(out);
  head_->collect_vps(out);
}

double InverseModel::max_sigma() const {
  double m = 0.0;
  std::vector<const VariationalParam*> vps;
  collect_vps(vps);
  for (const auto* vp : vps)
    if (vp->has_rho())
      for (std::size_t i = 0; i < vp->rho.numel(); ++i) {
        const double r = vp->rho.value(i);
        const double s =
            r > 0.0 ? r + std::log1p(std::exp(-r)) : std::log1p(std::exp(r));
        m = std::max(m, s);
      }
  return m;
}

// ---- ForwardModel ----------------------------------------------------------

ForwardModel::ForwardModel(const ForwardModelConfig& cfg, Rng& rng)
    : cfg_(cfg) {
  validate_forward_config(cfg);
  conv1_ = std::make_unique<Conv1dLayer>(1, cfg.channels, cfg.kernel1,
                                         cfg.strided ? 4 : 1, 1, rng);
  conv2_ = std::make_unique<Conv1dLayer>(cfg.channels, 1, cfg.kernel2, 1, 1, rng);
}

Tensor ForwardModel::forward(const Tensor& ai, Rng* rng) const {
  if (ai.ndim() != 2) throw DimError("forward model: ai must be [B,Ty]");
  if (mode_ == LayerMode::Variational && rng == nullptr)
    throw ConfigError("forward model: variational forward needs an RNG");
  const int B = ai.dim(0), Ty = ai.dim(1);
  Tensor x = reshape(ai, {B, 1, Ty});
  Tensor y = mode_ == LayerMode::Variational ? conv1_->forward_var(x, *rng)
                                             : conv1_->forward(x);
  if (cfg_.activation == "tanh") y = tanh_op(y);
  y = mode_ == LayerMode::Variational ? conv2_->forward_var(y, *rng)
                                      : conv2_->forward(y);
  return reshape(y, {B, y.dim(2)});
}

void ForwardModel::init_variational(double rho0) {
  conv1_->init_variational(rho0);
  conv2_->init_variational(rho0);
  mode_ = LayerMode::Variational;
}

void ForwardModel::collect_mu(std::vector<ParamRef>& out) const {
  conv1_->collect_mu("fwd.conv1", out);
  conv2_->collect_mu("fwd.conv2", out);
}

void ForwardModel::collect_rho(std::vector<ParamRef>& out) const {
  conv1_->collect_rho("fwd.conv1", out);
  conv2_->collect_rho("fwd.conv2", out);
}

void ForwardModel::collect_vps(std::vector<const VariationalParam*>& out) const {
  conv1_->collect_vps(out);
  conv2_->collect_vps(out);
}

double ForwardModel::max_sigma() const {
  return std::max(conv1_->max_sigma(), conv2_->max_sigma());
}

// ---- SeisModels ------------------------------------------------------------

SeisModels::SeisModels(const InverseModelConfig& inv_cfg,
                       const ForwardModelConfig& fwd_cfg, std::uint64_t seed)
    : inv_cfg_(inv_cfg), fwd_cfg_(fwd_cfg) {
  Rng rng(seed);
  Rng inv_rng = rng.fork(1);
  Rng fwd_rng = rng.fork(2);
  inverse_ = std::make_unique<InverseModel>(inv_cfg, inv_rng);
  forward_ = std::make_unique<ForwardModel>(fwd_cfg, fwd_rng);
}

void SeisModels::init_variational(double rho0) {
  inverse_->init_variational(rho0);
  forward_->init_variational(rho0);
}

bool SeisModels::variational() const {
  return inverse_->mode() == LayerMode::Variational;
}

std::vector<ParamRef> SeisModels::mu_params() const {
  std::vector<ParamRef> out;
  inverse_->collect_mu(out);
  forward_->collect_mu(out);
  return out;
}

std::vector<ParamRef> SeisModels::rho_params() const {
  std::vector<ParamRef> out;
  inverse_->collect_rho(out);
  forward_->collect_rho(out);
  return out;
}

std::vector<Tensor> SeisModels::mu_tensors() const {
  std::vector<Tensor> out;
  for (auto& p : mu_params()) out.push_back(p.tensor);
  return out;
}

std::vector<Tensor> SeisModels::rho_tensors() const {
  std::vector<Tensor> out;
  for (auto& p : rho_params()) out.push_back(p.tensor);
  return out;
}

void SeisModels::set_mu_trainable(bool on) {
  for (auto& p : mu_params()) p.tensor.set_requires_grad(on);
}

void SeisModels::set_rho_trainable(bool on) {
  for (auto& p : rho_params()) p.tensor.set_requires_grad(on);
}

Tensor SeisModels::total_kl(const PriorConfig& prior) const {
  std::vector<const VariationalParam*> vps;
  inverse_->collect_vps(vps);
  forward_->collect_vps(vps);
  Tensor total;
  for (const auto* vp : vps) {
    Tensor k = kl_to_prior(*vp, prior);
    total = total.defined() ? add(total, k) : k;
  }
  return total;
}

double SeisModels::total_kl_full(const PriorConfig& prior) const {
  std::vector<const VariationalParam*> vps;
  inverse_->collect_vps(vps);
  forward_->collect_vps(vps);
  double total = 0.0;
  for (const auto* vp : vps) total += kl_full(*vp, prior);
  return total;
}

std::size_t SeisModels::variational_scalar_count() const {
  std::vector<const VariationalParam*> vps;
  inverse_->collect_vps(vps);
  forward_->collect_vps(vps);
  std::size_t n = 0;
  for (const auto* vp : vps) n += vp->mu.numel();
  return n;
}

double SeisModels::max_sigma() const {
  return std::max(inverse_->max_sigma(), forward_->max_sigma());
}

std::uint64_t SeisModels::mu_checksum() const {
  std::uint64_t h = 0xcbf29ce484222325ULL;
  for (const auto& p : mu_params()) {
    h = fnv1a(p.name.data(), p.name.size(), h);
    h = fnv1a(p.tensor.values().data(), p.tensor.numel() * sizeof(double), h);
  }
  return h;
}

// ---- checkpoint ------------------------------------------------------------

namespace {

json inv_cfg_to_json(const InverseModelConfig& c) {
  return json{{"h", c.h},
              {"cnn_channels", c.cnn_channels},
              {"dilations", c.dilations},
              {"kernel_t", c.kernel_t},
              {"kernel_w", c.kernel_w},
              {"gru_hidden", c.gru_hidden},
              {"gru_layers", c.gru_layers},
              {"upsample", c.upsample},
              {"upsample_kernel", c.upsample_kernel},
              {"regression_hidden", c.regression_hidden},
              {"groupnorm_groups", c.groupnorm_groups},
              {"groupnorm_eps", c.groupnorm_eps}};
}

InverseModelConfig inv_cfg_from_json(const json& j) {
  InverseModelConfig c;
  c.h = j.at("h").get<int>();
  c.cnn_channels = j.at("cnn_channels").get<int>();
  c.dilations = j.at("dilations").get<std::vector<int>>();
  c.kernel_t = j.at("kernel_t").get<int>();
  c.kernel_w = j.at("kernel_w").get<int>();
  c.gru_hidden = j.at("gru_hidden").get<int>();
  c.gru_layers = j.at("gru_layers").get<int>();
  c.upsample = j.at("upsample").get<bool>();
  c.upsample_kernel = j.at("upsample_kernel").get<int>();
  c.regression_hidden = j.at("regression_hidden").get<int>();
  c.groupnorm_groups = j.at("groupnorm_groups").get<int>();
  c.groupnorm_eps = j.at("groupnorm_eps").get<double>();
  return c;
}

json fwd_cfg_to_json(const ForwardModelConfig& c) {
  return json{{"channels", c.channels},
              {"kernel1", c.kernel1},
              {"kernel2", c.kernel2},
              {"strided", c.strided},
              {"activation", c.activation}};
}

ForwardModelConfig fwd_cfg_from_json(const json& j) {
  ForwardModelConfig c;
  c.channels = j.at("channels").get<int>();
  c.kernel1 = j.at("kernel1").get<int>();
  c.kernel2 = j.at("kernel2").get<int>();
  c.strided = j.at("strided").get<bool>();
  c.activation = j.at("activation").get<std::string>();
  return c;
}

void write_u32(std::ostream& os, std::uint32_t v) {
  unsigned char b[4] = {static_cast<unsigned char>(v & 0xff),
                        static_cast<unsigned char>((v >> 8) & 0xff),
                        static_cast<unsigned char>((v >> 16) & 0xff),
                        static_cast<unsigned char>((v >> 24) & 0xff)};
  os.write(reinterpret_cast<const char*>(b), 4);
}

std::uint32_t read_u32(std::istream& is) {
  unsigned char b[4];
  is.read(reinterpret_cast<char*>(b), 4);
  if (!is) throw IoError("checkpoint: truncated length prefix");
  return static_cast<std::uint32_t>(b[0]) |
         (static_cast<std::uint32_t>(b[1]) << 8) |
         (static_cast<std::uint32_t>(b[2]) << 16) |
         (static_cast<std::uint32_t>(b[3]) << 24);
}

void write_f64le_block(std::ostream& os, const std::vector<double>& v) {
  // assumes little-endian host; asserted at configure time for this artifact
  os.write(reinterpret_cast<const char*>(v.data()),
           static_cast<std::streamsize>(v.size() * sizeof(double)));
}

}  // namespace

void SeisModels::save(const std::string& path) const {
  json header;
  header["format"] = "seisbayes-checkpoint-1";
  header["mode"] = variational() ? "variational" : "deterministic";
  header["inverse_config"] = inv_cfg_to_json(inv_cfg_);
  header["forward_config"] = fwd_cfg_to_json(fwd_cfg_);
  char buf[32];
  std::snprintf(buf, sizeof(buf), "%016llx",
                static_cast<unsigned long long>(mu_checksum()));
  header["mu_checksum"] = std::string(buf);

  std::vector<ParamRef> blocks = mu_params();
  const std::size_t n_mu = blocks.size();
  {
    auto rho = rho_params();
    blocks.insert(blocks.end(), rho.begin(), rho.end());
  }
  json jblocks = json::array();
  for (std::size_t i = 0; i < blocks.size(); ++i) {
    jblocks.push_back(json{{"name", blocks[i].name},
                           {"shape", blocks[i].tensor.shape()},
                           {"kind", i < n_mu ? "mu" : "rho"}});
  }
  header["blocks"] = jblocks;

  std::ofstream os(path, std::ios::binary);
  if (!os) throw IoError("checkpoint: cannot open '" + path + "' for writing");
  const std::string hs = header.dump();
  write_u32(os, static_cast<std::uint32_t>(hs.size()));
  os.write(hs.data(), static_cast<std::streamsize>(hs.size()));
  for (const auto& blk : blocks) write_f64le_block(os, blk.tensor.values());
  if (!os) throw IoError("checkpoint: write failed for '" + path + "'");
}

SeisModels SeisModels::load(const std::string& path) {
  std::ifstream is(path, std::ios::binary);
  if (!is) throw IoError("checkpoint: cannot open '" + path + "'");
  const std::uint32_t hlen = read_u32(is);
  std::string hs(hlen, '\0');
  is.read(hs.data(), hlen);
  if (!is) throw IoError("checkpoint: truncated header in '" + path + "'");
  json header;
  try {
    header = json::parse(hs);
  } catch (const json::exception& e) {
    throw IoError("checkpoint: bad header JSON in '" + path + "': " + e.what());
  }
  if (header.value("format", "") != "seisbayes-checkpoint-1")
    throw IoError("checkpoint: unknown format in '" + path + "'");

  SeisModels models(inv_cfg_from_json(header.at("inverse_config")),
                    fwd_cfg_from_json(header.at("forward_config")), 0);
  const bool variational = header.at("mode").get<std::string>() == "variational";
  if (variational) models.init_variational(0.0);

  std::vector<ParamRef> expect = models.mu_params();
  {
    auto rho = models.rho_params();
    expect.insert(expect.end(), rho.begin(), rho.end());
  }
  const json& jblocks = header.at("blocks");
  if (jblocks.size() != expect.size())
    throw IoError("checkpoint: block count mismatch in '" + path + "'");
  for (std::size_t i = 0; i < expect.size(); ++i) {
    const auto& jb = jblocks.at(i);
    if (jb.at("name").get<std::string>() != expect[i].name)
      throw IoError("checkpoint: block '" + jb.at("name").get<std::string>() +
                    "' does not match expected '" + expect[i].name + "'");
    const auto shp = jb.at("shape").get<Shape>();
    if (shp != expect[i].tensor.shape())
      throw IoError("checkpoint: shape mismatch for block '" + expect[i].name +
                    "'");
    auto& vals = expect[i].tensor.mutable_values();
    is.read(reinterpret_cast<char*>(vals.data()),
            static_cast<std::streamsize>(vals.size() * sizeof(double)));
    if (!is)
      throw IoError("checkpoint: truncated payload at block '" +
                    expect[i].name + "'");
    check_finite(vals, "checkpoint block");
  }
  return models;
}

}  // namespace sb
