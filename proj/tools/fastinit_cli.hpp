// Command-line front end: gen-data, train, refine, bench, eval.
//
// Exit codes: 0 success, 1 runtime failure, 2 usage error. Every subcommand
// accepts --config FILE with key=value lines whose keys are the long option
// names; explicit flags win over file values.
#pragma once

#include <CLI11.hpp>

#include <algorithm>
#include <chrono>
#include <cstdio>
#include <fstream>
#include <iomanip>
#include <ostream>
#include <sstream>
#include <string>
#include <vector>

#if defined(__unix__) || defined(__APPLE__)
#include <sys/resource.h>
#endif

#include "fastinit/latent_file.hpp"
#include "fastinit/pndata.hpp"
#include "fastinit/refine.hpp"
#include "fastinit/train.hpp"
#include "fastinit/vnpnet.hpp"

namespace fastinit::cli {

enum ExitCode { kOk = 0, kRuntime = 1, kUsage = 2 };

class UsageError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

namespace detail {

inline std::string trim(const std::string& s) {
  const auto a = s.find_first_not_of(" \t\r");
  if (a == std::string::npos) return "";
  const auto b = s.find_last_not_of(" \t\r");
  return s.substr(a, b - a + 1);
}

// Fills options the command line left unset from a key=value file.
inline void apply_config_file(CLI::App& sub, const std::string& path) {
  std::ifstream in(path);
  if (!in) throw UsageError("cannot open config file '" + path + "'");
  std::string line;
  int lineno = 0;
  while (std::getline(in, line)) {
    ++lineno;
    if (auto hash = line.find('#'); hash != std::string::npos) line.erase(hash);
    line = trim(line);
    if (line.empty()) continue;
    const auto eq = line.find('=');
    if (eq == std::string::npos)
      throw UsageError(path + ":" + std::to_string(lineno) + ": expected key=value, got '" + line + "'");
    std::string key = trim(line.substr(0, eq)), value = trim(line.substr(eq + 1));
    std::replace(key.begin(), key.end(), '_', '-');
    if (value.size() >= 2 && value.front() == '"' && value.back() == '"') value = value.substr(1, value.size() - 2);
    CLI::Option* opt = key == "config" || key == "help" ? nullptr : sub.get_option_no_throw("--" + key);
    if (!opt) throw UsageError("unknown config key '" + key + "' in " + path + ":" + std::to_string(lineno));
    if (opt->count() > 0) continue;
    try {
      opt->add_result(value);
      opt->run_callback();
    } catch (const CLI::Error& e) {
      throw UsageError("config key '" + key + "' in " + path + ": " + e.what());
    }
  }
}

inline void echo_config(const CLI::App& sub, std::ostream& out) {
  std::istringstream lines(sub.config_to_str(true, false));
  out << "# effective config (" << sub.get_name() << ")\n";
  for (std::string line; std::getline(lines, line);)
    if (line.rfind("config=", 0) != 0) out << line << "\n";
}

inline void require_set(const CLI::Option* opt) {
  if (opt->count() == 0) throw UsageError(opt->get_name() + " is required");
}

inline const CLI::Validator kDims(
    [](std::string& s) {
      try {
        Dims4::parse(s);
        return std::string();
      } catch (const std::exception& e) {
        return std::string(e.what());
      }
    },
    "CxTxHxW");

inline const CLI::Validator kRanks(
    [](std::string& s) {
      if (s == "auto") return std::string();
      try {
        Dims4::parse(s);
        return std::string();
      } catch (const std::exception& e) {
        return std::string(e.what());
      }
    },
    "auto|CxTxHxW");

template <class F>
double seconds_of(F&& f) {
  const auto t0 = std::chrono::steady_clock::now();
  f();
  return std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
}

inline double median(std::vector<double> v) {
  std::sort(v.begin(), v.end());
  const std::size_t n = v.size();
  return n % 2 ? v[n / 2] : 0.5 * (v[n / 2 - 1] + v[n / 2]);
}

// Peak resident set size in MiB, or a negative value when unavailable.
inline double peak_rss_mib() {
#if defined(__unix__) || defined(__APPLE__)
  rusage u{};
  if (getrusage(RUSAGE_SELF, &u) != 0) return -1;
#if defined(__APPLE__)
  return static_cast<double>(u.ru_maxrss) / (1024.0 * 1024.0);
#else
  return static_cast<double>(u.ru_maxrss) / 1024.0;
#endif
#else
  return -1;
#endif
}

inline void write_text_atomic(const std::filesystem::path& path, const std::string& text) {
  write_file_atomic(path, std::span(reinterpret_cast<const std::uint8_t*>(text.data()), text.size()));
}

inline std::string fmt(double v, int prec = 6) {
  std::ostringstream os;
  os << std::setprecision(prec) << v;
  return os.str();
}

}  // namespace detail

// ---- gen-data ------------------------------------------------------------------------

struct GenDataArgs {
  std::string prompts, out, dims = "4x8x16x16", renoise = "initial";
  RefineConfig refine;
  SyntheticDenoiser denoiser;
  std::size_t embed_dim = 64;
  std::uint64_t seed = 0;
  bool renormalize = false;
  CLI::Option *prompts_opt = nullptr, *out_opt = nullptr;
};

inline void add_gen_data(CLI::App& sub, GenDataArgs& a) {
  a.prompts_opt = sub.add_option("--prompts", a.prompts, "prompts file, one per line")->check(CLI::ExistingFile);
  a.out_opt = sub.add_option("--out", a.out, "output PND1 dataset");
  sub.add_option("--dims", a.dims, "latent dims")->check(detail::kDims)->capture_default_str();
  sub.add_option("--iters", a.refine.iterations, "refinement rounds K")->check(CLI::PositiveNumber)->capture_default_str();
  sub.add_option("--d0", a.refine.cutoff, "low-pass cutoff")->check(CLI::PositiveNumber)->capture_default_str();
  sub.add_option("--alpha-bar", a.refine.alpha_bar, "re-noise coefficient")
      ->check(CLI::Range(0.0, 1.0))
      ->capture_default_str();
  sub.add_option("--renoise", a.renoise, "re-noise source")->check(CLI::IsMember({"initial", "fresh"}))->capture_default_str();
  sub.add_flag("--renormalize", a.renormalize, "renormalize recombined spectral variance");
  sub.add_option("--temporal-blend", a.denoiser.temporal_blend, "denoiser EMA weight")->capture_default_str();
  sub.add_option("--sigma", a.denoiser.spatial_sigma, "denoiser blur sigma")->capture_default_str();
  sub.add_option("--embed-dim", a.embed_dim, "prompt embedding dim")->check(CLI::PositiveNumber)->capture_default_str();
  sub.add_option("--seed", a.seed, "base seed; record i uses seed + i")->capture_default_str();
}

inline int run_gen_data(GenDataArgs& a, std::ostream& out) {
  detail::require_set(a.prompts_opt);
  detail::require_set(a.out_opt);
  a.refine.source = a.renoise == "fresh" ? RenoiseSource::Fresh : RenoiseSource::InitialNoise;
  a.refine.renormalize_variance = a.renormalize;
  const auto prompts = read_prompts_file(a.prompts);
  GenerationOptions go;
  go.dims = Dims4::parse(a.dims);
  go.embedding_dim = a.embed_dim;
  go.seed = a.seed;
  const auto rep = generate_pndata<real_t>(prompts, go, a.refine, make_denoiser<real_t>(a.denoiser), a.out);
  out << "wrote " << rep.entries.size() << " records to " << a.out << "\n";
  out << "mean delta temporal_correlation " << detail::fmt(rep.mean_delta_temporal_correlation) << "\n";
  out << "mean delta low_freq_ratio " << detail::fmt(rep.mean_delta_low_freq_ratio) << "\n";
  out << "wall time " << detail::fmt(rep.seconds, 4) << " s\n";
  return kOk;
}

// ---- network flags shared by train and bench ----------------------------------------------

struct NetArgs {
  std::string variant = "tucker", preset = "tiny", late_attention = "global", ranks = "auto";
  std::string gate_feature = "core-energy";
  bool gate_rescale = false, bypass_core_mask = false;
  double dropout = 0.1, beta_init = 0.1;
};

inline void add_net(CLI::App& sub, NetArgs& a) {
  sub.add_option("--variant", a.variant, "structured filter")->check(CLI::IsMember({"tucker", "svd", "mlp"}))->capture_default_str();
  sub.add_option("--preset", a.preset, "GCRM preset")->check(CLI::IsMember({"tiny", "paper"}))->capture_default_str();
  sub.add_option("--late-attention", a.late_attention, "paper preset stages 3-4")
      ->check(CLI::IsMember({"global", "window"}))
      ->capture_default_str();
  sub.add_option("--ranks", a.ranks, "Tucker ranks")->check(detail::kRanks)->capture_default_str();
  sub.add_option("--gate-feature", a.gate_feature, "gate input statistic")
      ->check(CLI::IsMember({"core-energy", "column-norm"}))
      ->capture_default_str();
  sub.add_flag("--gate-rescale", a.gate_rescale, "multiply softmax gates by the rank");
  sub.add_flag("--bypass-core-mask", a.bypass_core_mask, "fix the core mask at 1");
  sub.add_option("--dropout", a.dropout, "gate / mask dropout")->check(CLI::Range(0.0, 0.99))->capture_default_str();
  sub.add_option("--beta-init", a.beta_init, "initial residual weight")->capture_default_str();
}

inline VnpnetConfig make_net(const NetArgs& a, Dims4 dims, std::size_t embed_dim, std::ostream& out) {
  VnpnetConfig c = VnpnetConfig::for_dims(dims);
  c.embed_dim = embed_dim;
  if (a.ranks != "auto") {
    const Dims4 r = Dims4::parse(a.ranks);
    c.ranks = {r.c, r.t, r.h, r.w};
  }
  c.variant = parse_variant(a.variant);
  c.gate_feature = parse_gate_feature(a.gate_feature);
  c.gate_rescale = a.gate_rescale;
  c.bypass_core_mask = a.bypass_core_mask;
  c.dropout = a.dropout;
  c.beta_init = a.beta_init;
  if (a.preset == "paper") {
    c.gcrm = GcrmConfig::paper(a.late_attention == "global");
    out << "preset paper: " << c.gcrm.describe() << "\n";
  }
  c.validate();
  return c;
}

// ---- train ---------------------------------------------------------------------------------

struct TrainArgs {
  std::string data, out, loss_csv;
  TrainConfig cfg;
  NetArgs net;
  bool eval_mode = false;
  std::size_t log_every = 50;
  CLI::Option *data_opt = nullptr, *out_opt = nullptr;
};

inline void add_train(CLI::App& sub, TrainArgs& a) {
  a.data_opt = sub.add_option("--data", a.data, "PND1 dataset")->check(CLI::ExistingFile);
  a.out_opt = sub.add_option("--out", a.out, "output VNP1 checkpoint");
  sub.add_option("--loss-csv", a.loss_csv, "loss history CSV (default <out>.loss.csv)");
  sub.add_option("--steps", a.cfg.steps, "optimizer steps")->capture_default_str();
  sub.add_option("--epochs", a.cfg.epochs, "when > 0, overrides --steps")->capture_default_str();
  sub.add_option("--batch", a.cfg.batch, "batch size")->check(CLI::PositiveNumber)->capture_default_str();
  sub.add_option("--lr0", a.cfg.lr0, "initial learning rate")->check(CLI::PositiveNumber)->capture_default_str();
  sub.add_option("--lr1", a.cfg.lr1, "final learning rate")->check(CLI::PositiveNumber)->capture_default_str();
  sub.add_option("--weight-decay", a.cfg.weight_decay, "AdamW decay")->capture_default_str();
  sub.add_option("--seed", a.cfg.seed, "initialization / shuffling seed")->capture_default_str();
  sub.add_flag("--eval-mode", a.eval_mode, "train without dropout / drop path");
  sub.add_option("--log-every", a.log_every, "print the loss every N steps (0 = never)")->capture_default_str();
  add_net(sub, a.net);
}

inline int run_train(TrainArgs& a, std::ostream& out) {
  detail::require_set(a.data_opt);
  detail::require_set(a.out_opt);
  if (a.loss_csv.empty()) a.loss_csv = a.out + ".loss.csv";
  a.cfg.train_mode = !a.eval_mode;
  a.cfg.validate();
  auto records = read_dataset(a.data).read_all();
  if (records.empty()) throw std::runtime_error("dataset '" + a.data + "' has no records");
  const VnpnetConfig net = make_net(a.net, records.front().z_rand.dims(), records.front().embedding.dim(), out);
  const std::size_t total = a.cfg.total_steps(records.size());
  out << "training " << to_string(net.variant) << " on " << records.size() << " records, " << total << " steps, "
      << init_params<float>(net, RngSeed{0}).scalar_count() << " parameters\n";
  auto res = train<real_t>(records, net, a.cfg, std::nullopt, [&](const StepRecord& r) {
    if (a.log_every && (r.step % a.log_every == 0 || r.step + 1 == total))
      out << "step " << r.step << " lr " << detail::fmt(r.lr, 4) << " loss " << detail::fmt(r.loss) << "\n";
  });
  const double final_loss = res.history.back().loss;
  save_model(a.out, {net, res.params},
             {{"steps", std::to_string(total)}, {"seed", std::to_string(a.cfg.seed)}, {"final_loss", detail::fmt(final_loss, 9)}});
  detail::write_text_atomic(a.loss_csv, history_csv(res.history));
  const auto e = evaluate<real_t>(records, res.params, net);
  out << "final loss " << detail::fmt(final_loss) << "\n";
  out << "eval-mode mse " << detail::fmt(e.mse) << "\n";
  out << "identity baseline mse " << detail::fmt(e.identity_mse) << "\n";
  out << "checkpoint " << a.out << ", loss history " << a.loss_csv << "\n";
  return kOk;
}

// ---- refine ---------------------------------------------------------------------------------

struct RefineArgs {
  std::string checkpoint, out, prompt, input;
  std::uint64_t seed = 0;
  double d0 = 0.25;
  CLI::Option *ckpt_opt = nullptr, *out_opt = nullptr, *prompt_opt = nullptr;
};

inline void add_refine(CLI::App& sub, RefineArgs& a) {
  a.ckpt_opt = sub.add_option("--checkpoint", a.checkpoint, "VNP1 checkpoint")->check(CLI::ExistingFile);
  a.out_opt = sub.add_option("--out", a.out, "output LAT1 latent");
  a.prompt_opt = sub.add_option("--prompt", a.prompt, "prompt text");
  sub.add_option("--input", a.input, "input LAT1 latent (default: sample from --seed)")->check(CLI::ExistingFile);
  sub.add_option("--seed", a.seed, "noise seed when --input is absent")->capture_default_str();
  sub.add_option("--d0", a.d0, "cutoff for the reported low-frequency ratio")->check(CLI::PositiveNumber)->capture_default_str();
}

inline int run_refine(RefineArgs& a, std::ostream& out) {
  detail::require_set(a.ckpt_opt);
  detail::require_set(a.out_opt);
  detail::require_set(a.prompt_opt);
  const VnpnetModel m = load_model(a.checkpoint);
  const Dims4 dims = m.config.dims;
  Tensor4<real_t> z;
  if (!a.input.empty()) {
    z = load_latent(a.input).cast<real_t>();
    fastinit::detail::require(z.dims() == dims, "input latent dims ", z.dims().str(), " do not match checkpoint dims ",
                              dims.str());
  } else {
    z = sample_gaussian<real_t>(dims, RngSeed{a.seed});
  }
  const auto prompt = embed_prompt(a.prompt, m.config.embed_dim);
  const Tensor4<real_t> y = vnpnet_forward(z, prompt, m.params.cast<real_t>(), m.config);
  save_latent(a.out, y.cast<float>());
  const auto mask = gaussian_lowpass_mask<real_t>(GridDims::of(dims), static_cast<real_t>(a.d0));
  out << "temporal_correlation in " << detail::fmt(temporal_correlation(z)) << " out "
      << detail::fmt(temporal_correlation(y)) << "\n";
  out << "low_freq_ratio in " << detail::fmt(low_freq_energy_ratio(z, mask)) << " out "
      << detail::fmt(low_freq_energy_ratio(y, mask)) << "\n";
  out << "wrote " << a.out << " (" << dims.str() << ")\n";
  return kOk;
}

// ---- bench ----------------------------------------------------------------------------------

struct BenchArgs {
  std::string checkpoint, dims = "4x16x64x64";
  std::size_t trials = 5;
  int iters = 5;
  std::uint64_t seed = 0;
  NetArgs net;
};

inline void add_bench(CLI::App& sub, BenchArgs& a) {
  sub.add_option("--checkpoint", a.checkpoint, "VNP1 checkpoint (default: fresh parameters at --dims)")
      ->check(CLI::ExistingFile);
  sub.add_option("--dims", a.dims, "latent dims without a checkpoint")->check(detail::kDims)->capture_default_str();
  sub.add_option("--trials", a.trials, "timed repetitions")->check(CLI::PositiveNumber)->capture_default_str();
  sub.add_option("--iters", a.iters, "refinement rounds K")->check(CLI::PositiveNumber)->capture_default_str();
  sub.add_option("--seed", a.seed, "noise / parameter seed")->capture_default_str();
  add_net(sub, a.net);
}

inline int run_bench(BenchArgs& a, std::ostream& out) {
  VnpnetModel m;
  if (!a.checkpoint.empty()) {
    m = load_model(a.checkpoint);
  } else {
    m.config = make_net(a.net, Dims4::parse(a.dims), 64, out);
    m.params = init_params<float>(m.config, RngSeed{a.seed});
  }
  const Dims4 dims = m.config.dims;
  const auto params = m.params.cast<real_t>();
  const Tensor4<real_t> z = sample_gaussian<real_t>(dims, RngSeed{a.seed});
  const auto prompt = embed_prompt("a timelapse of clouds over a mountain lake", m.config.embed_dim);
  RefineConfig rc;
  rc.iterations = a.iters;
  rc.seed = RngSeed{a.seed};
  const auto denoiser = make_denoiser<real_t>({});
  std::vector<double> fwd, ref;
  double sink = 0;
  for (std::size_t i = 0; i < a.trials; ++i) {
    fwd.push_back(detail::seconds_of([&] { sink += vnpnet_forward(z, prompt, params, m.config)[0]; }));
    ref.push_back(detail::seconds_of([&] { sink += refine_iterative(z, prompt, rc, denoiser)[0]; }));
  }
  const double f = detail::median(fwd), r = detail::median(ref);
  out << "dims " << dims.str() << ", variant " << to_string(m.config.variant) << ", " << a.trials << " trial"
      << (a.trials == 1 ? "" : "s") << (a.trials < 3 ? " (unstable: too few trials for a median)" : "") << "\n";
  out << "vnpnet_forward median " << detail::fmt(f, 4) << " s\n";
  out << "refine_iterative K=" << a.iters << " median " << detail::fmt(r, 4) << " s\n";
  out << "ratio " << detail::fmt(r / f, 4) << "\n";
  if (const double rss = detail::peak_rss_mib(); rss >= 0) out << "peak RSS " << detail::fmt(rss, 4) << " MiB\n";
  if (!std::isfinite(sink)) out << "warning: non-finite output\n";
  return kOk;
}

// ---- eval ------------------------------------------------------------------------------------

struct EvalArgs {
  std::string data;
  std::vector<std::string> checkpoints;
  double d0 = 0.25;
  bool per_record = false;
  CLI::Option* data_opt = nullptr;
};

inline void add_eval(CLI::App& sub, EvalArgs& a) {
  a.data_opt = sub.add_option("--data", a.data, "PND1 dataset")->check(CLI::ExistingFile);
  sub.add_option("--checkpoint", a.checkpoints, "VNP1 checkpoint; repeat for an ablation table")->check(CLI::ExistingFile);
  sub.add_option("--d0", a.d0, "low-frequency cutoff")->check(CLI::PositiveNumber)->capture_default_str();
  sub.add_flag("--per-record", a.per_record, "print statistics for every record");
}

inline int run_eval(EvalArgs& a, std::ostream& out) {
  detail::require_set(a.data_opt);
  const StatsReport st = dataset_stats(a.data, a.d0);
  auto g = [](double v) { return detail::fmt(v, 9); };
  out << "dataset " << a.data << ": " << st.records.size() << " records, dims " << st.header.dims.str() << "\n";
  if (a.per_record)
    for (std::size_t i = 0; i < st.records.size(); ++i) {
      const auto& r = st.records[i];
      out << "record " << i << " std " << g(r.std_rand) << " " << g(r.std_refined) << " tc " << g(r.tc_rand) << " "
          << g(r.tc_refined) << " lfr " << g(r.lfr_rand) << " " << g(r.lfr_refined) << "\n";
    }
  if (st.mean) {
    const auto& m = *st.mean;
    out << "mean        std          temporal_corr  low_freq_ratio\n";
    out << "z_rand      " << g(m.std_rand) << "  " << g(m.tc_rand) << "  " << g(m.lfr_rand) << "\n";
    out << "z_refined   " << g(m.std_refined) << "  " << g(m.tc_refined) << "  " << g(m.lfr_refined) << "\n";
  } else {
    out << "no records, no aggregate statistics\n";
  }
  if (a.checkpoints.empty()) return kOk;
  auto records = read_dataset(a.data).read_all();
  out << "variant  mse  identity_mse  ratio  tc_in  tc_out  tc_target  checkpoint\n";
  if (records.empty()) return kOk;
  for (const auto& path : a.checkpoints) {
    const VnpnetModel m = load_model(path);
    fastinit::detail::require(m.config.dims == st.header.dims, "checkpoint '", path, "' expects dims ",
                              m.config.dims.str(), ", dataset has ", st.header.dims.str());
    const auto e = evaluate<real_t>(records, m.params, m.config);
    out << to_string(m.config.variant) << "  " << g(e.mse) << "  " << g(e.identity_mse) << "  "
        << g(e.mse / e.identity_mse) << "  " << g(e.tc_in) << "  " << g(e.tc_out) << "  " << g(e.tc_target) << "  "
        << path << "\n";
  }
  return kOk;
}

// ---- entry -----------------------------------------------------------------------------------

inline int run(int argc, const char* const* argv, std::ostream& out, std::ostream& err) {
  CLI::App app{"Structured noise initialization for video diffusion: data generation, training, refinement."};
  app.require_subcommand(1);
  app.set_help_all_flag("--help-all", "expand all help");

  GenDataArgs gen;
  TrainArgs tr;
  RefineArgs rf;
  BenchArgs be;
  EvalArgs ev;
  std::map<CLI::App*, std::string> configs;
  auto sub = [&](const char* name, const char* desc) {
    CLI::App* s = app.add_subcommand(name, desc);
    s->add_option("--config", configs[s], "key=value config file")->check(CLI::ExistingFile);
    return s;
  };
  CLI::App* s_gen = sub("gen-data", "generate a PND1 dataset with the refinement oracle");
  CLI::App* s_train = sub("train", "train a network on a PND1 dataset");
  CLI::App* s_refine = sub("refine", "refine one latent with a trained checkpoint");
  CLI::App* s_bench = sub("bench", "time one network pass against the K-round oracle");
  CLI::App* s_eval = sub("eval", "dataset statistics and per-checkpoint held-out metrics");
  add_gen_data(*s_gen, gen);
  add_train(*s_train, tr);
  add_refine(*s_refine, rf);
  add_bench(*s_bench, be);
  add_eval(*s_eval, ev);

  try {
    app.parse(argc, argv);
  } catch (const CLI::CallForHelp&) {
    out << app.help();
    return kOk;
  } catch (const CLI::CallForAllHelp&) {
    out << app.help("", CLI::AppFormatMode::All);
    return kOk;
  } catch (const CLI::ParseError& e) {
    err << "usage error: " << e.what() << "\n";
    return kUsage;
  }

  CLI::App* chosen = app.get_subcommands().front();
  try {
    if (const auto& path = configs[chosen]; !path.empty()) detail::apply_config_file(*chosen, path);
    detail::echo_config(*chosen, out);
    if (chosen == s_gen) return run_gen_data(gen, out);
    if (chosen == s_train) return run_train(tr, out);
    if (chosen == s_refine) return run_refine(rf, out);
    if (chosen == s_bench) return run_bench(be, out);
    return run_eval(ev, out);
  } catch (const UsageError& e) {
    err << "usage error: " << e.what() << "\n";
    return kUsage;
  } catch (const std::exception& e) {
    err << "error: " << e.what() << "\n";
    return kRuntime;
  }
}

}  // namespace fastinit::cli
