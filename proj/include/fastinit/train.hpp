// Loss, AdamW, cosine schedule, finite-difference gradient checking and the
// mini-batch training loop over PND1 noise pairs.
#pragma once

#include <algorithm>
#include <cmath>
#include <functional>
#include <numbers>
#include <random>
#include <string>
#include <vector>

#include "autodiff.hpp"
#include "pndata.hpp"
#include "vnpnet.hpp"

namespace fastinit {

/// Mean squared difference, accumulated in double.
template <class T>
double mse_loss(const Tensor4<T>& pred, const Tensor4<T>& target) {
  detail::require(pred.dims() == target.dims(), "mse_loss: dims ", pred.dims().str(), " and ",
                  target.dims().str(), " differ");
  double acc = 0;
  for (std::size_t i = 0; i < pred.size(); ++i) {
    const double d = static_cast<double>(pred[i]) - static_cast<double>(target[i]);
    acc += d * d;
  }
  return acc / static_cast<double>(pred.size());
}

inline double cosine_lr(std::size_t step, std::size_t total_steps, double lr0, double lr1) {
  detail::require(total_steps >= 1, "cosine_lr: total steps must be positive");
  detail::require(step <= total_steps, "cosine_lr: step ", step, " beyond total ", total_steps);
  const double frac = static_cast<double>(step) / static_cast<double>(total_steps);
  return lr1 + 0.5 * (lr0 - lr1) * (1.0 + std::cos(std::numbers::pi * frac));
}

struct TrainConfig {
  std::size_t steps = 500;
  std::size_t epochs = 0;  // when > 0, steps = epochs * ceil(records / batch)
  std::size_t batch = 8;
  double lr0 = 2e-4;
  double lr1 = 1e-6;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double weight_decay = 0.01;
  double eps = 1e-8;
  std::uint64_t seed = 0;
  bool train_mode = true;  // dropout / drop path active

  void validate() const {
    detail::require(batch >= 1, "train: batch must be >= 1");
    detail::require(lr0 > lr1 && lr1 > 0, "train: need lr0 > lr1 > 0, got ", lr0, " and ", lr1);
    detail::require(steps >= 1 || epochs >= 1, "train: steps must be >= 1");
    detail::require(beta1 >= 0 && beta1 < 1 && beta2 >= 0 && beta2 < 1, "train: Adam betas must be in [0, 1)");
    detail::require(weight_decay >= 0, "train: weight decay must be >= 0");
  }

  std::size_t total_steps(std::size_t records) const {
    if (epochs == 0) return steps;
    return epochs * ((records + batch - 1) / batch);
  }
};

template <class T>
struct AdamState {
  std::vector<std::vector<T>> m, v;
  std::size_t t = 0;
};

/// One AdamW update with decoupled decay; `grads` is aligned with params.all().
template <class T>
void adamw_step(ParamStore<T>& params, const std::vector<std::vector<T>>& grads, AdamState<T>& state, double lr,
                const TrainConfig& cfg) {
  auto& ps = params.all();
  detail::require(grads.size() == ps.size(), "adamw: ", grads.size(), " gradients for ", ps.size(), " parameters");
  if (state.m.empty()) {
    state.m.resize(ps.size());
    state.v.resize(ps.size());
    for (std::size_t i = 0; i < ps.size(); ++i) {
      state.m[i].assign(ps[i].value.size(), T(0));
      state.v[i].assign(ps[i].value.size(), T(0));
    }
  }
  for (std::size_t i = 0; i < ps.size(); ++i) {
    detail::require(grads[i].size() == ps[i].value.size(), "adamw: gradient for '", ps[i].name, "' has ",
                    grads[i].size(), " entries, parameter has ", ps[i].value.size());
    for (T g : grads[i])
      detail::require(std::isfinite(static_cast<double>(g)), "adamw: non-finite gradient for parameter '",
                      ps[i].name, "'");
  }
  ++state.t;
  const double bc1 = 1.0 - std::pow(cfg.beta1, static_cast<double>(state.t));
  const double bc2 = 1.0 - std::pow(cfg.beta2, static_cast<double>(state.t));
  const T decay = static_cast<T>(1.0 - lr * cfg.weight_decay);
  const T b1 = static_cast<T>(cfg.beta1), b2 = static_cast<T>(cfg.beta2);
  for (std::size_t i = 0; i < ps.size(); ++i) {
    auto& p = ps[i].value;
    auto &m = state.m[i], &v = state.v[i];
    const auto& g = grads[i];
    for (std::size_t k = 0; k < p.size(); ++k) {
      p[k] *= decay;
      m[k] = b1 * m[k] + (T(1) - b1) * g[k];
      v[k] = b2 * v[k] + (T(1) - b2) * g[k] * g[k];
      const double mh = static_cast<double>(m[k]) / bc1;
      const double vh = static_cast<double>(v[k]) / bc2;
      p[k] -= static_cast<T>(lr * mh / (std::sqrt(vh) + cfg.eps));
    }
  }
}

/// Adjoints for every parameter, zero for those the graph never touched.
template <class T>
std::vector<std::vector<T>> collect_grads(ad::Tape<T>& tape, const GraphBuilder<T>& gb, const ParamStore<T>& params) {
  std::vector<std::vector<T>> out;
  out.reserve(params.size());
  for (const auto& p : params.all()) {
    auto it = gb.bound().find(p.name);
    if (it != gb.bound().end() && tape.has_grad(it->second))
      out.push_back(tape.grad(it->second));
    else
      out.emplace_back(p.value.size(), T(0));
  }
  return out;
}

/// A training example with its per-sample filter constants.
template <class T>
struct Sample {
  Tensor4<T> input;
  std::shared_ptr<const std::vector<T>> target;
  PromptEmbedding prompt;
  FilterCache<T> cache;
};

template <class T>
Sample<T> make_sample(const NoisePairRecord& r, const VnpnetConfig& cfg) {
  Sample<T> s;
  s.input = r.z_rand.cast<T>();
  const auto& t = r.z_refined.storage();
  s.target = std::make_shared<const std::vector<T>>(t.begin(), t.end());
  s.prompt = r.embedding;
  s.cache = prepare_filter(s.input, cfg);
  return s;
}

template <class T>
struct LossAndGrads {
  double loss = 0;
  std::vector<std::vector<T>> grads;
};

template <class T>
LossAndGrads<T> sample_loss_and_grads(const ParamStore<T>& params, const VnpnetConfig& cfg, const Sample<T>& s,
                                      bool train_mode, std::uint64_t seed) {
  ad::Tape<T> tape;
  GraphBuilder<T> gb(tape, params, train_mode);
  const auto g = vnpnet_graph(gb, s.input, s.cache, s.prompt, cfg, seed);
  const ad::Var loss = ad::mse(tape, g.out, s.target);
  tape.backward(loss);
  return {static_cast<double>(tape.scalar(loss)), collect_grads(tape, gb, params)};
}

// ---- gradient checking -------------------------------------------------------------------

struct GradCheckOptions {
  double eps = 1e-5;
  std::size_t coordinates = 200;  // minimum; every parameter tensor gets at least one
  double floor = 1e-5;            // denominators below this are clamped (finite-difference noise)
  std::uint64_t seed = 0;
};

struct GradCheckEntry {
  std::string name;
  std::size_t index = 0;
  double analytic = 0, numeric = 0, rel_error = 0;
};

struct GradCheckReport {
  double max_rel_error = 0;
  std::vector<GradCheckEntry> entries;
  std::map<std::string, double> worst_by_param;

  const GradCheckEntry& worst() const {
    return *std::max_element(entries.begin(), entries.end(),
                             [](const auto& a, const auto& b) { return a.rel_error < b.rel_error; });
  }
};

/// Compares reverse-mode adjoints with central differences. `build` records a
/// scalar loss on the builder's tape; the tape is recorded once and replayed
/// for every perturbation, so stochastic masks stay frozen.
template <class T>
GradCheckReport grad_check(ParamStore<T>& params, const std::function<ad::Var(GraphBuilder<T>&)>& build,
                           const GradCheckOptions& opt = {}, bool train_mode = false) {
  ad::Tape<T> tape;
  GraphBuilder<T> gb(tape, params, train_mode);
  const ad::Var loss = build(gb);
  detail::require(std::isfinite(static_cast<double>(tape.scalar(loss))), "grad_check: non-finite loss");
  tape.backward(loss);
  const auto grads = collect_grads(tape, gb, params);

  std::vector<std::pair<std::size_t, std::size_t>> coords;
  std::mt19937_64 rng(opt.seed);
  auto& ps = params.all();
  std::size_t total = 0;
  for (std::size_t i = 0; i < ps.size(); ++i) {
    total += ps[i].value.size();
    coords.emplace_back(i, std::uniform_int_distribution<std::size_t>(0, ps[i].value.size() - 1)(rng));
  }
  const std::size_t want = std::min(total, std::max(opt.coordinates, coords.size()));
  while (coords.size() < want) {
    std::size_t flat = std::uniform_int_distribution<std::size_t>(0, total - 1)(rng);
    std::size_t i = 0;
    while (flat >= ps[i].value.size()) flat -= ps[i++].value.size();
    if (std::find(coords.begin(), coords.end(), std::pair{i, flat}) == coords.end()) coords.emplace_back(i, flat);
  }

  GradCheckReport rep;
  for (auto [i, k] : coords) {
    T& x = ps[i].value[k];
    const T saved = x;
    x = saved + static_cast<T>(opt.eps);
    tape.replay();
    const double up = static_cast<double>(tape.scalar(loss));
    x = saved - static_cast<T>(opt.eps);
    tape.replay();
    const double down = static_cast<double>(tape.scalar(loss));
    x = saved;
    detail::require(std::isfinite(up) && std::isfinite(down), "grad_check: non-finite loss while perturbing '",
                    ps[i].name, "'");
    const double numeric = (up - down) / (2.0 * opt.eps);
    const double analytic = static_cast<double>(grads[i][k]);
    const double denom = std::max({std::abs(analytic), std::abs(numeric), opt.floor});
    const double rel = std::abs(analytic - numeric) / denom;
    rep.entries.push_back({ps[i].name, k, analytic, numeric, rel});
    rep.max_rel_error = std::max(rep.max_rel_error, rel);
    auto& w = rep.worst_by_param[ps[i].name];
    w = std::max(w, rel);
  }
  tape.replay();
  return rep;
}

/// grad_check of the MSE loss of the full network on one sample.
template <class T>
GradCheckReport grad_check_vnpnet(ParamStore<T>& params, const VnpnetConfig& cfg, const Sample<T>& s,
                                  const GradCheckOptions& opt = {}, bool train_mode = false) {
  return grad_check<T>(
      params,
      [&](GraphBuilder<T>& gb) {
        const auto g = vnpnet_graph(gb, s.input, s.cache, s.prompt, cfg, opt.seed);
        return ad::mse(gb.tape(), g.out, s.target);
      },
      opt, train_mode);
}

// ---- training loop ---------------------------------------------------------------------------

struct StepRecord {
  std::size_t step = 0;
  double lr = 0;
  double loss = 0;
};

struct TrainResult {
  ParamStore<float> params;
  std::vector<StepRecord> history;
};

inline std::string history_csv(const std::vector<StepRecord>& h) {
  std::string out = "step,lr,loss\n";
  char buf[96];
  for (const auto& r : h) {
    std::snprintf(buf, sizeof buf, "%zu,%.9g,%.9g\n", r.step, r.lr, r.loss);
    out += buf;
  }
  return out;
}

template <class T = float>
TrainResult train(const std::vector<NoisePairRecord>& records, const VnpnetConfig& net, const TrainConfig& cfg,
                  std::optional<ParamStore<float>> init = {},
                  const std::function<void(const StepRecord&)>& on_step = {}) {
  cfg.validate();
  net.validate();
  detail::require(!records.empty(), "train: dataset is empty");
  for (const auto& r : records) {
    detail::require(r.z_rand.dims() == net.dims, "train: record dims ", r.z_rand.dims().str(),
                    " do not match network dims ", net.dims.str());
    detail::require(r.embedding.dim() == net.embed_dim, "train: record embedding dim ", r.embedding.dim(),
                    " does not match network embedding dim ", net.embed_dim);
  }
  ParamStore<T> params = init ? init->cast<T>() : init_params<T>(net, RngSeed{cfg.seed});
  std::vector<Sample<T>> samples;
  samples.reserve(records.size());
  for (const auto& r : records) samples.push_back(make_sample<T>(r, net));

  const std::size_t total = cfg.total_steps(records.size());
  std::mt19937_64 shuffle_rng(mix_seed(cfg.seed ^ 0x51ull));
  std::vector<std::size_t> order(records.size());
  std::iota(order.begin(), order.end(), 0);
  std::size_t cursor = order.size();

  AdamState<T> state;
  TrainResult result;
  for (std::size_t step = 0; step < total; ++step) {
    std::vector<std::vector<T>> acc;
    double loss = 0;
    const std::size_t b = std::min(cfg.batch, records.size());
    for (std::size_t k = 0; k < b; ++k) {
      if (cursor == order.size()) {
        std::shuffle(order.begin(), order.end(), shuffle_rng);
        cursor = 0;
      }
      const auto& s = samples[order[cursor++]];
      auto lg = sample_loss_and_grads(params, net, s, cfg.train_mode, mix_seed(cfg.seed + step * 1000003ull + k));
      if (!std::isfinite(lg.loss)) detail::fail("train: non-finite loss at step ", step);
      loss += lg.loss;
      if (acc.empty()) {
        acc = std::move(lg.grads);
      } else {
        for (std::size_t i = 0; i < acc.size(); ++i)
          for (std::size_t j = 0; j < acc[i].size(); ++j) acc[i][j] += lg.grads[i][j];
      }
    }
    const T inv = T(1) / static_cast<T>(b);
    for (auto& g : acc)
      for (auto& v : g) v *= inv;
    loss /= static_cast<double>(b);
    const double lr = cosine_lr(step, total, cfg.lr0, cfg.lr1);
    adamw_step(params, acc, state, lr, cfg);
    result.history.push_back({step, lr, loss});
    if (on_step) on_step(result.history.back());
  }
  result.params = params.template cast<float>();
  return result;
}

inline TrainResult train(const std::filesystem::path& dataset, const VnpnetConfig& net, const TrainConfig& cfg,
                         const std::function<void(const StepRecord&)>& on_step = {}) {
  return train<float>(read_dataset(dataset).read_all(), net, cfg, std::nullopt, on_step);
}

struct EvalResult {
  double mse = 0;           // network prediction vs target
  double identity_mse = 0;  // z_rand vs target
  double tc_in = 0, tc_out = 0, tc_target = 0;
  std::size_t count = 0;
};

/// Eval-mode metrics averaged over records.
template <class T = float>
EvalResult evaluate(const std::vector<NoisePairRecord>& records, const ParamStore<float>& params,
                    const VnpnetConfig& net) {
  EvalResult e;
  if (records.empty()) return e;
  const ParamStore<T> p = params.cast<T>();
  for (const auto& r : records) {
    const Tensor4<T> z = r.z_rand.cast<T>(), target = r.z_refined.cast<T>();
    const Tensor4<T> pred = vnpnet_forward(z, r.embedding, p, net);
    e.mse += mse_loss(pred, target);
    e.identity_mse += mse_loss(z, target);
    e.tc_in += static_cast<double>(temporal_correlation(z));
    e.tc_out += static_cast<double>(temporal_correlation(pred));
    e.tc_target += static_cast<double>(temporal_correlation(target));
  }
  const double n = static_cast<double>(records.size());
  e.mse /= n;
  e.identity_mse /= n;
  e.tc_in /= n;
  e.tc_out /= n;
  e.tc_target /= n;
  e.count = records.size();
  return e;
}

}  // namespace fastinit
