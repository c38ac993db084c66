// Video noise prediction network: a Tucker-based structured filter plus a
// token-based global residual branch, z_hat = T(z) + beta * R(z + e_text).
//
// Every forward pass is recorded on an ad::Tape so the same code serves
// inference and training. The plain-tensor entry points at the bottom build
// a throwaway tape.
#pragma once

#include <array>
#include <map>
#include <optional>
#include <sstream>
#include <string>
#include <vector>

#include "autodiff.hpp"
#include "params.hpp"
#include "prompt.hpp"
#include "rng.hpp"
#include "tensor.hpp"
#include "tucker.hpp"

namespace fastinit {

enum class FilterVariant { Tucker, SVD, MLP };

// Per-component statistic fed to the gate and mask networks.
//   CoreEnergy: row norms of the mode-i core unfolding over ||G||_F, i.e. the
//               normalized mode-i singular values.
//   ColumnNorm: L2 norms of the factor columns (all 1 for an HOSVD factor).
enum class GateFeature { CoreEnergy, ColumnNorm };

inline std::string to_string(FilterVariant v) {
  switch (v) {
    case FilterVariant::Tucker: return "tucker";
    case FilterVariant::SVD: return "svd";
    case FilterVariant::MLP: return "mlp";
  }
  return "?";
}

inline FilterVariant parse_variant(const std::string& s) {
  if (s == "tucker") return FilterVariant::Tucker;
  if (s == "svd") return FilterVariant::SVD;
  if (s == "mlp") return FilterVariant::MLP;
  detail::fail("unknown filter variant '", s, "' (expected tucker, svd or mlp)");
}

inline std::string to_string(GateFeature g) { return g == GateFeature::CoreEnergy ? "core-energy" : "column-norm"; }

inline GateFeature parse_gate_feature(const std::string& s) {
  if (s == "core-energy") return GateFeature::CoreEnergy;
  if (s == "column-norm") return GateFeature::ColumnNorm;
  detail::fail("unknown gate feature '", s, "' (expected core-energy or column-norm)");
}

struct Window {
  std::size_t t = 0, h = 0, w = 0;  // all zero = global attention
  bool global() const { return t == 0 && h == 0 && w == 0; }
  std::string str() const {
    return global() ? "global" : std::to_string(t) + "x" + std::to_string(h) + "x" + std::to_string(w);
  }
  static Window parse(const std::string& s) {
    if (s == "global") return {};
    const Dims4 d = Dims4::parse("1x" + s);
    return {d.t, d.h, d.w};
  }
};

struct GcrmStage {
  std::size_t depth = 2;
  std::size_t dim = 32;
  Window window{2, 2, 2};
};

struct GcrmConfig {
  std::size_t patch = 4;
  std::size_t head_dim = 16;
  std::size_t mlp_ratio = 4;
  double drop_path = 0.0;
  std::vector<GcrmStage> stages{GcrmStage{}};

  static GcrmConfig tiny() { return {}; }

  /// Four-stage configuration. `global_late` selects full attention in
  /// stages 3-4; otherwise they use 8x8x4 windows.
  static GcrmConfig paper(bool global_late = true) {
    GcrmConfig g;
    g.head_dim = 64;
    g.drop_path = 0.3;
    const Window early{5, 5, 5};
    const Window late = global_late ? Window{} : Window{8, 8, 4};
    g.stages = {{5, 64, early}, {8, 128, early}, {20, 320, late}, {7, 512, late}};
    return g;
  }

  std::size_t heads(std::size_t stage) const { return std::max<std::size_t>(1, stages[stage].dim / head_dim); }

  std::string describe() const {
    std::ostringstream os;
    os << "depths [";
    for (std::size_t i = 0; i < stages.size(); ++i) os << (i ? ", " : "") << stages[i].depth;
    os << "], dims [";
    for (std::size_t i = 0; i < stages.size(); ++i) os << (i ? ", " : "") << stages[i].dim;
    os << "], windows [";
    for (std::size_t i = 0; i < stages.size(); ++i) os << (i ? ", " : "") << stages[i].window.str();
    os << "], head dim " << head_dim << ", patch " << patch << ", drop path " << drop_path;
    return os.str();
  }

  void validate(const Dims4& dims) const {
    detail::require(patch >= 1, "gcrm: patch size must be positive");
    detail::require(!stages.empty(), "gcrm: at least one stage is required");
    detail::require(drop_path >= 0.0 && drop_path < 1.0, "gcrm: drop path must be in [0, 1), got ", drop_path);
    const char* names[3] = {"T", "H", "W"};
    const std::size_t ext[3] = {dims.t, dims.h, dims.w};
    for (int a = 0; a < 3; ++a)
      detail::require(ext[a] % patch == 0, "gcrm: axis ", names[a], " extent ", ext[a],
                      " is not divisible by patch size ", patch);
    for (const auto& s : stages) {
      detail::require(s.depth >= 1 && s.dim >= 1, "gcrm: stage depth and dim must be positive");
      detail::require(s.dim % heads(static_cast<std::size_t>(&s - stages.data())) == 0,
                      "gcrm: stage dim ", s.dim, " not divisible by its head count");
    }
  }
};

struct VnpnetConfig {
  Dims4 dims{4, 8, 16, 16};
  TuckerRanks ranks = TuckerRanks::for_dims(Dims4{4, 8, 16, 16});
  std::size_t embed_dim = 64;
  FilterVariant variant = FilterVariant::Tucker;
  GateFeature gate_feature = GateFeature::CoreEnergy;
  bool gate_rescale = false;      // multiply softmax gates by R_i
  bool bypass_core_mask = false;  // Gamma fixed at 1
  double dropout = 0.1;
  std::size_t gate_hidden = 16;
  std::size_t phi_dim = 16;
  std::size_t fusion_hidden = 128;
  std::size_t mlp_hidden = 64;
  double beta_init = 0.1;
  GcrmConfig gcrm = GcrmConfig::tiny();

  static VnpnetConfig for_dims(Dims4 d) {
    VnpnetConfig c;
    c.dims = d;
    c.ranks = TuckerRanks::for_dims(d);
    return c;
  }

  void validate() const {
    detail::require(dims.positive(), "vnpnet: dims must be positive, got ", dims.str());
    ranks.validate(dims);
    detail::require(embed_dim >= 1, "vnpnet: embedding dim must be positive");
    detail::require(dropout >= 0.0 && dropout < 1.0, "vnpnet: dropout must be in [0, 1), got ", dropout);
    gcrm.validate(dims);
  }

  Meta to_meta() const {
    auto join = [&](auto get) {
      std::string s;
      for (std::size_t i = 0; i < gcrm.stages.size(); ++i) s += (i ? "," : "") + get(gcrm.stages[i]);
      return s;
    };
    auto num = [](double v) {
      std::ostringstream os;
      os.precision(17);
      os << v;
      return os.str();
    };
    return {
        {"dims", dims.str()},
        {"ranks", ranks.core_dims().str()},
        {"embed_dim", std::to_string(embed_dim)},
        {"variant", to_string(variant)},
        {"gate_feature", to_string(gate_feature)},
        {"gate_rescale", gate_rescale ? "1" : "0"},
        {"bypass_core_mask", bypass_core_mask ? "1" : "0"},
        {"dropout", num(dropout)},
        {"gate_hidden", std::to_string(gate_hidden)},
        {"phi_dim", std::to_string(phi_dim)},
        {"fusion_hidden", std::to_string(fusion_hidden)},
        {"mlp_hidden", std::to_string(mlp_hidden)},
        {"beta_init", num(beta_init)},
        {"gcrm.patch", std::to_string(gcrm.patch)},
        {"gcrm.head_dim", std::to_string(gcrm.head_dim)},
        {"gcrm.mlp_ratio", std::to_string(gcrm.mlp_ratio)},
        {"gcrm.drop_path", num(gcrm.drop_path)},
        {"gcrm.depths", join([](const GcrmStage& s) { return std::to_string(s.depth); })},
        {"gcrm.dims", join([](const GcrmStage& s) { return std::to_string(s.dim); })},
        {"gcrm.windows", join([](const GcrmStage& s) { return s.window.str(); })},
    };
  }

  static VnpnetConfig from_meta(const Meta& m) {
    auto get = [&](const std::string& k) -> const std::string& {
      auto it = m.find(k);
      detail::require(it != m.end(), "checkpoint metadata lacks '", k, "'");
      return it->second;
    };
    auto split = [](const std::string& s) {
      std::vector<std::string> out;
      std::size_t start = 0;
      while (true) {
        const auto comma = s.find(',', start);
        out.push_back(s.substr(start, comma - start));
        if (comma == std::string::npos) break;
        start = comma + 1;
      }
      return out;
    };
    auto to_size = [](const std::string& s) { return static_cast<std::size_t>(std::stoull(s)); };
    VnpnetConfig c;
    c.dims = Dims4::parse(get("dims"));
    const Dims4 r = Dims4::parse(get("ranks"));
    c.ranks = {r.c, r.t, r.h, r.w};
    c.embed_dim = to_size(get("embed_dim"));
    c.variant = parse_variant(get("variant"));
    c.gate_feature = parse_gate_feature(get("gate_feature"));
    c.gate_rescale = get("gate_rescale") == "1";
    c.bypass_core_mask = get("bypass_core_mask") == "1";
    c.dropout = std::stod(get("dropout"));
    c.gate_hidden = to_size(get("gate_hidden"));
    c.phi_dim = to_size(get("phi_dim"));
    c.fusion_hidden = to_size(get("fusion_hidden"));
    c.mlp_hidden = to_size(get("mlp_hidden"));
    c.beta_init = std::stod(get("beta_init"));
    c.gcrm.patch = to_size(get("gcrm.patch"));
    c.gcrm.head_dim = to_size(get("gcrm.head_dim"));
    c.gcrm.mlp_ratio = to_size(get("gcrm.mlp_ratio"));
    c.gcrm.drop_path = std::stod(get("gcrm.drop_path"));
    const auto depths = split(get("gcrm.depths")), sdims = split(get("gcrm.dims")), wins = split(get("gcrm.windows"));
    detail::require(depths.size() == sdims.size() && depths.size() == wins.size(),
                    "checkpoint metadata: stage lists differ in length");
    c.gcrm.stages.clear();
    for (std::size_t i = 0; i < depths.size(); ++i)
      c.gcrm.stages.push_back({to_size(depths[i]), to_size(sdims[i]), Window::parse(wins[i])});
    c.validate();
    return c;
  }
};

// ---- token grids -------------------------------------------------------------------

struct Grid {
  std::size_t t = 1, h = 1, w = 1;
  std::size_t size() const { return t * h * w; }
  std::size_t index(std::size_t a, std::size_t b, std::size_t c) const { return (a * h + b) * w + c; }
  std::array<std::size_t, 3> arr() const { return {t, h, w}; }
  friend bool operator==(const Grid&, const Grid&) = default;
};

/// Token grid of each stage: the patch grid, then halved per axis (an axis
/// already at extent 1 stays at 1, odd extents round up).
inline std::vector<Grid> stage_grids(const Dims4& dims, const GcrmConfig& g) {
  std::vector<Grid> out{{dims.t / g.patch, dims.h / g.patch, dims.w / g.patch}};
  auto halve = [](std::size_t n) { return n > 1 ? (n + 1) / 2 : 1; };
  for (std::size_t s = 1; s < g.stages.size(); ++s) {
    const Grid& p = out.back();
    out.push_back({halve(p.t), halve(p.h), halve(p.w)});
  }
  return out;
}

/// Non-overlapping windows tiling the grid; border windows may be partial.
inline ad::GroupsPtr window_groups(const Grid& grid, const Window& win) {
  auto groups = std::make_shared<ad::Groups>();
  if (win.global()) {
    groups->emplace_back(grid.size());
    std::iota(groups->back().begin(), groups->back().end(), 0u);
    return groups;
  }
  const std::size_t wt = std::min(win.t, grid.t), wh = std::min(win.h, grid.h), ww = std::min(win.w, grid.w);
  for (std::size_t t0 = 0; t0 < grid.t; t0 += wt)
    for (std::size_t h0 = 0; h0 < grid.h; h0 += wh)
      for (std::size_t w0 = 0; w0 < grid.w; w0 += ww) {
        std::vector<std::uint32_t> g;
        for (std::size_t t = t0; t < std::min(t0 + wt, grid.t); ++t)
          for (std::size_t h = h0; h < std::min(h0 + wh, grid.h); ++h)
            for (std::size_t w = w0; w < std::min(w0 + ww, grid.w); ++w)
              g.push_back(static_cast<std::uint32_t>(grid.index(t, h, w)));
        groups->push_back(std::move(g));
      }
  return groups;
}

/// For each token of `fine`, the token of `coarse` that covers it.
inline std::vector<std::uint32_t> ancestors(const Grid& fine, const Grid& coarse) {
  std::vector<std::uint32_t> out(fine.size());
  const std::size_t ft = (fine.t + coarse.t - 1) / coarse.t, fh = (fine.h + coarse.h - 1) / coarse.h,
                    fw = (fine.w + coarse.w - 1) / coarse.w;
  for (std::size_t t = 0; t < fine.t; ++t)
    for (std::size_t h = 0; h < fine.h; ++h)
      for (std::size_t w = 0; w < fine.w; ++w)
        out[fine.index(t, h, w)] = static_cast<std::uint32_t>(coarse.index(t / ft, h / fh, w / fw));
  return out;
}

inline ad::GroupsPtr pooling_groups(const Grid& fine, const Grid& coarse) {
  auto groups = std::make_shared<ad::Groups>(coarse.size());
  const auto anc = ancestors(fine, coarse);
  for (std::size_t i = 0; i < anc.size(); ++i) (*groups)[anc[i]].push_back(static_cast<std::uint32_t>(i));
  return groups;
}

/// Source index in the (C,T,H,W) latent of every element of the patch token
/// matrix [N, C*P^3], features ordered (c, pt, ph, pw).
inline std::vector<std::uint32_t> patchify_index(const Dims4& d, std::size_t p) {
  const Grid g{d.t / p, d.h / p, d.w / p};
  const std::size_t feat = d.c * p * p * p;
  std::vector<std::uint32_t> idx(g.size() * feat);
  for (std::size_t gt = 0; gt < g.t; ++gt)
    for (std::size_t gh = 0; gh < g.h; ++gh)
      for (std::size_t gw = 0; gw < g.w; ++gw) {
        const std::size_t n = g.index(gt, gh, gw);
        std::size_t f = 0;
        for (std::size_t c = 0; c < d.c; ++c)
          for (std::size_t a = 0; a < p; ++a)
            for (std::size_t b = 0; b < p; ++b)
              for (std::size_t e = 0; e < p; ++e, ++f)
                idx[n * feat + f] = static_cast<std::uint32_t>(
                    ((c * d.t + gt * p + a) * d.h + gh * p + b) * d.w + gw * p + e);
      }
  return idx;
}

inline std::vector<std::uint32_t> invert_permutation(const std::vector<std::uint32_t>& p) {
  std::vector<std::uint32_t> inv(p.size());
  for (std::size_t i = 0; i < p.size(); ++i) inv[p[i]] = static_cast<std::uint32_t>(i);
  return inv;
}

/// Position in the latent of every entry of the mode-2 (time) unfolding.
inline std::vector<std::uint32_t> time_unfold_index(const Dims4& d) {
  Tensor4<double> iota(d);
  for (std::size_t i = 0; i < iota.size(); ++i) iota[i] = static_cast<double>(i);
  const auto m = unfold(iota, 2);
  std::vector<std::uint32_t> idx(m.storage().size());
  for (std::size_t i = 0; i < idx.size(); ++i) idx[i] = static_cast<std::uint32_t>(m.storage()[i]);
  return idx;
}

inline std::size_t token_count(const Dims4& d, std::size_t patch) {
  return (d.t / patch) * (d.h / patch) * (d.w / patch);
}

// ---- parameters ----------------------------------------------------------------------

inline const char* mode_name(std::size_t i) {
  static const char* names[4] = {"c", "t", "h", "w"};
  return names[i];
}

/// Deterministic initialization: linear weights and biases uniform in
/// +-1/sqrt(fan_in), layer norms at identity, positional codes N(0, 0.02^2),
/// beta at beta_init. Drawn in double so every scalar type gets the same values.
template <class T>
ParamStore<T> init_params(const VnpnetConfig& cfg, RngSeed seed) {
  cfg.validate();
  GaussianStream rng(RngSeed{mix_seed(seed.value ^ 0x5eedf00dull)});
  ParamStore<T> ps;
  auto uniform = [&](std::size_t n, std::size_t fan_in) {
    const double bound = 1.0 / std::sqrt(static_cast<double>(fan_in));
    std::vector<T> v(n);
    for (auto& x : v) x = static_cast<T>((2.0 * rng.uniform() - 1.0) * bound);
    return v;
  };
  auto linear = [&](const std::string& name, std::size_t out, std::size_t in) {
    ps.add(name + ".w", {out, in}, uniform(out * in, in));
    ps.add(name + ".b", {out}, uniform(out, in));
  };
  auto norm = [&](const std::string& name, std::size_t d) {
    ps.add(name + ".g", {d}, std::vector<T>(d, T(1)));
    ps.add(name + ".b", {d}, std::vector<T>(d, T(0)));
  };

  const auto& r = cfg.ranks;
  switch (cfg.variant) {
    case FilterVariant::Tucker:
      for (std::size_t i = 0; i < 4; ++i) {
        const std::string m = std::string("tbnf.gate.") + mode_name(i);
        linear(m + ".fc1", cfg.gate_hidden, r[i]);
        linear(m + ".fc2", r[i], cfg.gate_hidden);
      }
      for (std::size_t i = 0; i < 4; ++i) linear(std::string("tbnf.phi.") + mode_name(i), cfg.phi_dim, r[i]);
      linear("tbnf.fuse.fc1", cfg.fusion_hidden, 4 * cfg.phi_dim + cfg.embed_dim);
      linear("tbnf.fuse.fc2", r.core_size(), cfg.fusion_hidden);
      break;
    case FilterVariant::SVD:
      linear("tbnf.svd.fc1", cfg.gate_hidden, r.t);
      linear("tbnf.svd.fc2", r.t, cfg.gate_hidden);
      break;
    case FilterVariant::MLP: {
      const std::size_t frame = cfg.dims.c * cfg.dims.h * cfg.dims.w;
      linear("tbnf.mlp.fc1", cfg.mlp_hidden, frame);
      linear("tbnf.mlp.fc2", frame, cfg.mlp_hidden);
      break;
    }
  }

  ps.add("text.w", {cfg.dims.c, cfg.embed_dim}, uniform(cfg.dims.c * cfg.embed_dim, cfg.embed_dim));
  ps.add("beta", {1}, {static_cast<T>(cfg.beta_init)});

  const auto& g = cfg.gcrm;
  const std::size_t patch_feat = cfg.dims.c * g.patch * g.patch * g.patch;
  const std::size_t n0 = token_count(cfg.dims, g.patch);
  const std::size_t d0 = g.stages[0].dim;
  linear("gcrm.embed", d0, patch_feat);
  {
    std::vector<T> pos(n0 * d0);
    for (auto& x : pos) x = static_cast<T>(0.02 * rng.normal());
    ps.add("gcrm.pos", {n0, d0}, std::move(pos));
  }
  for (std::size_t s = 0; s < g.stages.size(); ++s) {
    const std::size_t d = g.stages[s].dim;
    if (s > 0) linear("gcrm.down" + std::to_string(s), d, g.stages[s - 1].dim);
    for (std::size_t b = 0; b < g.stages[s].depth; ++b) {
      const std::string p = "gcrm.s" + std::to_string(s) + ".b" + std::to_string(b);
      ps.add(p + ".dpe.k", {d, 27}, uniform(d * 27, 27));
      ps.add(p + ".dpe.b", {d}, uniform(d, 27));
      norm(p + ".ln1", d);
      linear(p + ".qkv", 3 * d, d);
      linear(p + ".proj", d, d);
      norm(p + ".ln2", d);
      linear(p + ".ffn1", g.mlp_ratio * d, d);
      linear(p + ".ffn2", d, g.mlp_ratio * d);
    }
  }
  if (g.stages.size() > 1) linear("gcrm.up", d0, g.stages.back().dim);
  norm("gcrm.norm", d0);
  linear("gcrm.head", patch_feat, d0);
  return ps;
}

// ---- per-sample constants -----------------------------------------------------------

/// Non-trainable per-sample inputs of the structured filter. HOSVD and the
/// truncated time-mode SVD are treated as constants (no gradient).
template <class T>
struct FilterCache {
  FilterVariant variant = FilterVariant::Tucker;
  TuckerFactorization<T> tucker;
  std::array<std::vector<T>, 4> gate_features;
  Matrix<T> svd_u;             // T x R_t
  Matrix<T> svd_proj;          // R_t x CHW, U^T X_(2)
  std::vector<T> svd_feature;  // s / ||s||
};

template <class T>
std::array<std::vector<T>, 4> gate_features(const TuckerFactorization<T>& f, GateFeature kind) {
  std::array<std::vector<T>, 4> out;
  if (kind == GateFeature::ColumnNorm) {
    for (std::size_t i = 0; i < 4; ++i) {
      const auto& u = f.factors[i];
      out[i].assign(u.cols(), T(0));
      for (std::size_t j = 0; j < u.cols(); ++j) {
        double acc = 0;
        for (std::size_t r = 0; r < u.rows(); ++r) acc += static_cast<double>(u(r, j)) * u(r, j);
        out[i][j] = static_cast<T>(std::sqrt(acc));
      }
    }
    return out;
  }
  const double total = static_cast<double>(frobenius_norm(f.core));
  for (int mode = 1; mode <= 4; ++mode) {
    const auto m = unfold(f.core, mode);
    auto& v = out[mode - 1];
    v.assign(m.rows(), T(0));
    if (total == 0) continue;
    for (std::size_t j = 0; j < m.rows(); ++j) {
      double acc = 0;
      for (std::size_t k = 0; k < m.cols(); ++k) acc += static_cast<double>(m(j, k)) * m(j, k);
      v[j] = static_cast<T>(std::sqrt(acc) / total);
    }
  }
  return out;
}

template <class T>
FilterCache<T> prepare_filter(const Tensor4<T>& z, const VnpnetConfig& cfg) {
  detail::require(z.dims() == cfg.dims, "vnpnet: input dims ", z.dims().str(), " do not match configured ",
                  cfg.dims.str());
  FilterCache<T> fc;
  fc.variant = cfg.variant;
  if (cfg.variant == FilterVariant::Tucker) {
    fc.tucker = hosvd(z, cfg.ranks);
    fc.gate_features = gate_features(fc.tucker, cfg.gate_feature);
  } else if (cfg.variant == FilterVariant::SVD) {
    const auto x2 = unfold(z, 2);
    std::vector<T> s;
    fc.svd_u = leading_left_singular_vectors(x2, cfg.ranks.t, &s);
    fc.svd_proj = matmul(fc.svd_u.transposed(), x2);
    double norm = 0;
    for (T v : s) norm += static_cast<double>(v) * v;
    norm = std::sqrt(norm);
    fc.svd_feature.assign(s.size(), T(0));
    if (norm > 0)
      for (std::size_t i = 0; i < s.size(); ++i) fc.svd_feature[i] = static_cast<T>(s[i] / norm);
  }
  return fc;
}

// ---- graph construction --------------------------------------------------------------

/// Binds parameters to a tape on first use and owns the stochastic stream
/// for dropout / drop-path masks.
template <class T>
class GraphBuilder {
 public:
  GraphBuilder(ad::Tape<T>& tape, const ParamStore<T>& params, bool train_mode)
      : tape_(tape), params_(params), train_(train_mode) {}

  ad::Tape<T>& tape() { return tape_; }
  bool train_mode() const { return train_; }

  ad::Var param(const std::string& name) {
    if (auto it = bound_.find(name); it != bound_.end()) return it->second;
    const auto& p = params_.at(name);
    const ad::Var v = tape_.parameter(p.shape, p.value);
    bound_[name] = v;
    return v;
  }
  const std::map<std::string, ad::Var>& bound() const { return bound_; }

  ad::Var constant(ad::Shape shape, std::vector<T> values) { return tape_.constant(std::move(shape), std::move(values)); }

  ad::Var linear(ad::Var x, const std::string& name) { return ad::linear(tape_, x, param(name + ".w"), param(name + ".b")); }
  ad::Var norm(ad::Var x, const std::string& name) { return ad::layer_norm(tape_, x, param(name + ".g"), param(name + ".b")); }

  void reseed(std::uint64_t seed) { stream_.emplace(RngSeed{seed}); }

  /// Inverted dropout with a mask drawn now and frozen on the tape.
  ad::Var dropout(ad::Var x, double p) {
    if (!train_ || p <= 0.0) return x;
    std::vector<T> mask(tape_.size(x));
    const T keep = static_cast<T>(1.0 / (1.0 - p));
    for (auto& m : mask) m = stream().uniform() < p ? T(0) : keep;
    return ad::mul(tape_, x, constant(tape_.shape(x), std::move(mask)));
  }

  /// Per-sample stochastic depth on a residual branch.
  ad::Var drop_path(ad::Var branch, double p) {
    if (!train_ || p <= 0.0) return branch;
    const bool drop = stream().uniform() < p;
    return ad::scale_const(tape_, branch, drop ? T(0) : static_cast<T>(1.0 / (1.0 - p)));
  }

 private:
  GaussianStream& stream() {
    if (!stream_) stream_.emplace(RngSeed{0});
    return *stream_;
  }

  ad::Tape<T>& tape_;
  const ParamStore<T>& params_;
  bool train_;
  std::map<std::string, ad::Var> bound_;
  std::optional<GaussianStream> stream_;
};

namespace detail {
inline std::uint64_t tbnf_seed(std::uint64_t s) { return mix_seed(s ^ 0x7b9full); }
inline std::uint64_t gcrm_seed(std::uint64_t s) { return mix_seed(s ^ 0x6c3aull); }

// [1, R] features -> softmax gate [1, R]
template <class T>
ad::Var gate_network(GraphBuilder<T>& gb, const std::vector<T>& feature, const std::string& name,
                     const VnpnetConfig& cfg) {
  auto& tape = gb.tape();
  const std::size_t r = feature.size();
  ad::Var x = gb.constant({1, r}, feature);
  ad::Var h = ad::gelu(tape, gb.linear(x, name + ".fc1"));
  h = gb.dropout(h, cfg.dropout);
  ad::Var w = ad::softmax(tape, gb.linear(h, name + ".fc2"));
  if (cfg.gate_rescale) w = ad::scale_const(tape, w, static_cast<T>(r));
  return w;
}

// Column scaling of a constant [rows, R] matrix by a gate node of length R.
template <class T>
ad::Var scale_columns(GraphBuilder<T>& gb, const Matrix<T>& u, ad::Var w) {
  auto& tape = gb.tape();
  const std::size_t rows = u.rows(), r = u.cols();
  auto idx = std::make_shared<ad::Index>(rows * r);
  for (std::size_t i = 0; i < idx->size(); ++i) (*idx)[i] = static_cast<std::uint32_t>(i % r);
  ad::Var wb = ad::gather(tape, w, idx, {rows, r});
  return ad::mul(tape, gb.constant({rows, r}, u.storage()), wb);
}
}  // namespace detail

template <class T>
struct TuckerGraph {
  std::array<ad::Var, 4> gates;
  std::optional<ad::Var> mask;
  ad::Var out;
};

template <class T>
TuckerGraph<T> tucker_graph(GraphBuilder<T>& gb, const FilterCache<T>& fc, const PromptEmbedding& prompt,
                            const VnpnetConfig& cfg) {
  auto& tape = gb.tape();
  const auto& f = fc.tucker;
  TuckerGraph<T> g;
  for (std::size_t i = 0; i < 4; ++i)
    g.gates[i] = detail::gate_network(gb, fc.gate_features[i], std::string("tbnf.gate.") + mode_name(i), cfg);

  ad::Var core = tape.constant(f.core);
  if (!cfg.bypass_core_mask) {
    std::vector<ad::Var> parts;
    for (std::size_t i = 0; i < 4; ++i) {
      ad::Var x = gb.constant({1, fc.gate_features[i].size()}, fc.gate_features[i]);
      parts.push_back(gb.linear(x, std::string("tbnf.phi.") + mode_name(i)));
    }
    parts.push_back(gb.constant({1, prompt.dim()}, std::vector<T>(prompt.values.begin(), prompt.values.end())));
    ad::Var feat = ad::concat(tape, parts);
    ad::Var h = ad::gelu(tape, gb.linear(feat, "tbnf.fuse.fc1"));
    h = gb.dropout(h, cfg.dropout);
    ad::Var gamma = ad::sigmoid(tape, gb.linear(h, "tbnf.fuse.fc2"));
    const Dims4 cd = f.core.dims();
    gamma = ad::reshape(tape, gamma, {cd.c, cd.t, cd.h, cd.w});
    g.mask = gamma;
    core = ad::mul(tape, gamma, core);
  }
  // Expand the largest modes last so intermediates stay small.
  ad::Var x = core;
  for (int mode = 1; mode <= 4; ++mode)
    x = ad::mode_product(tape, x, detail::scale_columns(gb, f.factors[mode - 1], g.gates[mode - 1]), mode);
  g.out = x;
  return g;
}

template <class T>
ad::Var tbnf_graph(GraphBuilder<T>& gb, const Tensor4<T>& z, const FilterCache<T>& fc,
                   const PromptEmbedding& prompt, const VnpnetConfig& cfg, std::uint64_t seed) {
  detail::require(fc.variant == cfg.variant, "vnpnet: filter cache was prepared for variant ",
                  to_string(fc.variant), ", config says ", to_string(cfg.variant));
  detail::require(prompt.dim() == cfg.embed_dim, "vnpnet: prompt embedding has dim ", prompt.dim(),
                  ", network expects ", cfg.embed_dim);
  gb.reseed(detail::tbnf_seed(seed));
  auto& tape = gb.tape();
  const Dims4& d = cfg.dims;
  switch (cfg.variant) {
    case FilterVariant::Tucker:
      return tucker_graph(gb, fc, prompt, cfg).out;
    case FilterVariant::SVD: {
      ad::Var w = detail::gate_network(gb, fc.svd_feature, "tbnf.svd", cfg);
      ad::Var uw = detail::scale_columns(gb, fc.svd_u, w);
      ad::Var frames = ad::matmul(tape, uw, gb.constant({fc.svd_proj.rows(), fc.svd_proj.cols()}, fc.svd_proj.storage()));
      auto fold_idx = std::make_shared<ad::Index>(invert_permutation(time_unfold_index(d)));
      return ad::gather(tape, frames, fold_idx, {d.c, d.t, d.h, d.w});
    }
    case FilterVariant::MLP: {
      const auto unf = unfold(z, 2);
      ad::Var frames = gb.constant({d.t, d.c * d.h * d.w}, unf.storage());
      ad::Var h = ad::gelu(tape, gb.linear(frames, "tbnf.mlp.fc1"));
      h = gb.dropout(h, cfg.dropout);
      ad::Var y = gb.linear(h, "tbnf.mlp.fc2");
      auto fold_idx = std::make_shared<ad::Index>(invert_permutation(time_unfold_index(d)));
      return ad::gather(tape, y, fold_idx, {d.c, d.t, d.h, d.w});
    }
  }
  detail::fail("unreachable");
}

/// W_text p broadcast over (T, H, W).
template <class T>
ad::Var text_embed_graph(GraphBuilder<T>& gb, const PromptEmbedding& prompt, const VnpnetConfig& cfg) {
  detail::require(prompt.dim() == cfg.embed_dim, "text_embed: prompt embedding has dim ", prompt.dim(),
                  ", network expects ", cfg.embed_dim);
  auto& tape = gb.tape();
  const Dims4& d = cfg.dims;
  ad::Var p = gb.constant({1, prompt.dim()}, std::vector<T>(prompt.values.begin(), prompt.values.end()));
  ad::Var zero_bias = gb.constant({d.c}, std::vector<T>(d.c, T(0)));
  ad::Var e = ad::linear(tape, p, gb.param("text.w"), zero_bias);
  const std::size_t vol = d.t * d.h * d.w;
  auto idx = std::make_shared<ad::Index>(d.size());
  for (std::size_t i = 0; i < idx->size(); ++i) (*idx)[i] = static_cast<std::uint32_t>(i / vol);
  return ad::gather(tape, e, idx, {d.c, d.t, d.h, d.w});
}

template <class T>
ad::Var gcrm_graph(GraphBuilder<T>& gb, ad::Var x, const VnpnetConfig& cfg, std::uint64_t seed) {
  const auto& g = cfg.gcrm;
  const Dims4& d = cfg.dims;
  g.validate(d);
  gb.reseed(detail::gcrm_seed(seed));
  auto& tape = gb.tape();
  const auto grids = stage_grids(d, g);
  const std::size_t p = g.patch;
  const std::size_t feat = d.c * p * p * p;
  const std::size_t n0 = grids[0].size();

  auto pidx = std::make_shared<ad::Index>(patchify_index(d, p));
  ad::Var h = ad::gather(tape, x, pidx, {n0, feat});
  h = gb.linear(h, "gcrm.embed");
  h = ad::add(tape, h, gb.param("gcrm.pos"));

  for (std::size_t s = 0; s < g.stages.size(); ++s) {
    const auto& st = g.stages[s];
    if (s > 0) {
      h = ad::group_mean(tape, h, pooling_groups(grids[s - 1], grids[s]), g.stages[s - 1].dim);
      h = gb.linear(h, "gcrm.down" + std::to_string(s));
    }
    const auto groups = window_groups(grids[s], st.window);
    for (std::size_t b = 0; b < st.depth; ++b) {
      const std::string pre = "gcrm.s" + std::to_string(s) + ".b" + std::to_string(b);
      h = ad::add(tape, h, ad::dwconv3d(tape, h, gb.param(pre + ".dpe.k"), gb.param(pre + ".dpe.b"), grids[s].arr()));
      ad::Var a = gb.norm(h, pre + ".ln1");
      a = ad::attention(tape, gb.linear(a, pre + ".qkv"), g.heads(s), groups);
      a = gb.linear(a, pre + ".proj");
      h = ad::add(tape, h, gb.drop_path(a, g.drop_path));
      ad::Var m = gb.norm(h, pre + ".ln2");
      m = gb.linear(ad::gelu(tape, gb.linear(m, pre + ".ffn1")), pre + ".ffn2");
      h = ad::add(tape, h, gb.drop_path(m, g.drop_path));
    }
  }
  if (g.stages.size() > 1) {
    const std::size_t dl = g.stages.back().dim;
    const auto anc = ancestors(grids[0], grids.back());
    auto idx = std::make_shared<ad::Index>(n0 * dl);
    for (std::size_t n = 0; n < n0; ++n)
      for (std::size_t c = 0; c < dl; ++c) (*idx)[n * dl + c] = static_cast<std::uint32_t>(anc[n] * dl + c);
    h = ad::gather(tape, h, idx, {n0, dl});
    h = gb.linear(h, "gcrm.up");
  }
  h = gb.norm(h, "gcrm.norm");
  h = gb.linear(h, "gcrm.head");
  auto uidx = std::make_shared<ad::Index>(invert_permutation(*pidx));
  return ad::gather(tape, h, uidx, {d.c, d.t, d.h, d.w});
}

template <class T>
struct VnpnetGraph {
  ad::Var tbnf, text, residual, out;
};

template <class T>
VnpnetGraph<T> vnpnet_graph(GraphBuilder<T>& gb, const Tensor4<T>& z, const FilterCache<T>& fc,
                            const PromptEmbedding& prompt, const VnpnetConfig& cfg, std::uint64_t seed) {
  auto& tape = gb.tape();
  VnpnetGraph<T> g;
  g.tbnf = tbnf_graph(gb, z, fc, prompt, cfg, seed);
  g.text = text_embed_graph(gb, prompt, cfg);
  ad::Var x = ad::add(tape, tape.constant(z), g.text);
  g.residual = gcrm_graph(gb, x, cfg, seed);
  g.out = ad::residual_mix(tape, g.tbnf, g.residual, gb.param("beta"));
  return g;
}

// ---- plain-tensor entry points ---------------------------------------------------------

struct ForwardOptions {
  bool train_mode = false;
  std::uint64_t seed = 0;
};

template <class T>
std::array<std::vector<T>, 4> factor_gates(const TuckerFactorization<T>& f, const ParamStore<T>& params,
                                           const VnpnetConfig& cfg, ForwardOptions opt = {}) {
  f.validate();
  for (std::size_t i = 0; i < 4; ++i)
    detail::require(f.factors[i].cols() == cfg.ranks[i], "factor_gates: factor ", i + 1, " has rank ",
                    f.factors[i].cols(), ", network expects ", cfg.ranks[i]);
  ad::Tape<T> tape;
  GraphBuilder<T> gb(tape, params, opt.train_mode);
  gb.reseed(detail::tbnf_seed(opt.seed));
  const auto feats = gate_features(f, cfg.gate_feature);
  std::array<std::vector<T>, 4> out;
  for (std::size_t i = 0; i < 4; ++i)
    out[i] = tape.value(detail::gate_network(gb, feats[i], std::string("tbnf.gate.") + mode_name(i), cfg));
  return out;
}

/// U_i diag(w_i) for every mode; the core is left unchanged.
template <class T>
TuckerFactorization<T> apply_factor_scaling(const TuckerFactorization<T>& f, const std::array<std::vector<T>, 4>& w) {
  f.validate();
  TuckerFactorization<T> out = f;
  for (std::size_t i = 0; i < 4; ++i) {
    auto& u = out.factors[i];
    detail::require(w[i].size() == u.cols(), "apply_factor_scaling: mode ", i + 1, " weight vector has length ",
                    w[i].size(), " but the factor has ", u.cols(), " columns");
    for (std::size_t r = 0; r < u.rows(); ++r)
      for (std::size_t j = 0; j < u.cols(); ++j) u(r, j) *= w[i][j];
  }
  return out;
}

template <class T>
Tensor4<T> core_mask(const TuckerFactorization<T>& f, const PromptEmbedding& prompt, const ParamStore<T>& params,
                     const VnpnetConfig& cfg, ForwardOptions opt = {}) {
  detail::require(prompt.dim() == cfg.embed_dim, "core_mask: prompt embedding has dim ", prompt.dim(),
                  ", network expects ", cfg.embed_dim);
  detail::require(!cfg.bypass_core_mask, "core_mask: mask is bypassed in this configuration");
  FilterCache<T> fc;
  fc.tucker = f;
  fc.gate_features = gate_features(f, cfg.gate_feature);
  ad::Tape<T> tape;
  GraphBuilder<T> gb(tape, params, opt.train_mode);
  gb.reseed(detail::tbnf_seed(opt.seed));
  return tape.tensor(*tucker_graph(gb, fc, prompt, cfg).mask);
}

template <class T>
Tensor4<T> tbnf_forward(const Tensor4<T>& z, const PromptEmbedding& prompt, const ParamStore<T>& params,
                        const VnpnetConfig& cfg, ForwardOptions opt = {}) {
  const auto fc = prepare_filter(z, cfg);
  ad::Tape<T> tape;
  GraphBuilder<T> gb(tape, params, opt.train_mode);
  return tape.tensor(tbnf_graph(gb, z, fc, prompt, cfg, opt.seed));
}

template <class T>
Tensor4<T> text_embed(const PromptEmbedding& prompt, const ParamStore<T>& params, const VnpnetConfig& cfg) {
  ad::Tape<T> tape;
  GraphBuilder<T> gb(tape, params, false);
  return tape.tensor(text_embed_graph(gb, prompt, cfg));
}

template <class T>
Tensor4<T> gcrm_forward(const Tensor4<T>& x, const ParamStore<T>& params, const VnpnetConfig& cfg,
                        ForwardOptions opt = {}) {
  detail::require(x.dims() == cfg.dims, "gcrm: input dims ", x.dims().str(), " do not match configured ",
                  cfg.dims.str());
  ad::Tape<T> tape;
  GraphBuilder<T> gb(tape, params, opt.train_mode);
  return tape.tensor(gcrm_graph(gb, tape.constant(x), cfg, opt.seed));
}

template <class T>
Tensor4<T> vnpnet_forward(const Tensor4<T>& z, const PromptEmbedding& prompt, const ParamStore<T>& params,
                          const VnpnetConfig& cfg, ForwardOptions opt = {}) {
  const auto fc = prepare_filter(z, cfg);
  ad::Tape<T> tape;
  GraphBuilder<T> gb(tape, params, opt.train_mode);
  return tape.tensor(vnpnet_graph(gb, z, fc, prompt, cfg, opt.seed).out);
}

// ---- checkpoints -------------------------------------------------------------------------

struct VnpnetModel {
  VnpnetConfig config;
  ParamStore<float> params;
};

inline void save_model(const std::filesystem::path& path, const VnpnetModel& m, Meta extra = {}) {
  Checkpoint ck;
  ck.meta = m.config.to_meta();
  for (auto& [k, v] : extra) ck.meta["info." + k] = v;
  ck.params = m.params;
  save_checkpoint(path, ck);
}

inline VnpnetModel load_model(const std::filesystem::path& path) {
  Checkpoint ck = load_checkpoint(path);
  VnpnetModel m{VnpnetConfig::from_meta(ck.meta), std::move(ck.params)};
  const auto expected = init_params<float>(m.config, RngSeed{0});
  for (const auto& p : expected.all()) {
    detail::require(m.params.contains(p.name), "checkpoint lacks parameter '", p.name, "'");
    detail::require(m.params.at(p.name).shape == p.shape, "checkpoint parameter '", p.name, "' has the wrong shape");
  }
  detail::require(m.params.size() == expected.size(), "checkpoint has ", m.params.size(), " parameters, expected ",
                  expected.size());
  return m;
}

}  // namespace fastinit
