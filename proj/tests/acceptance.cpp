// One PASS/FAIL line per acceptance criterion. Exit status 1 if any fail.
#include <bit>
#include <chrono>
#include <cstdio>
#include <cstring>
#include <filesystem>
#include <functional>
#include <random>
#include <sstream>
#include <unistd.h>

#include "fastinit/pndata.hpp"
#include "fastinit/refine.hpp"
#include "fastinit/train.hpp"

using namespace fastinit;

namespace {

struct Verdict {
  bool pass = true;
  std::string detail;
};

std::string num(double v, int prec = 4) {
  std::ostringstream os;
  os.precision(prec);
  os << v;
  return os.str();
}

struct Rng {
  std::mt19937_64 eng;
  explicit Rng(std::uint64_t s) : eng(s) {}
  double normal() { return std::normal_distribution<double>()(eng); }
  std::size_t size(std::size_t lo, std::size_t hi) { return std::uniform_int_distribution<std::size_t>(lo, hi)(eng); }
  Tensor4<double> tensor(Dims4 d) {
    Tensor4<double> x(d);
    for (auto& v : x.storage()) v = normal();
    return x;
  }
  Matrix<double> orthonormal(std::size_t n, std::size_t r) {
    Matrix<double> q(n, r);
    for (std::size_t j = 0; j < r; ++j) {
      std::vector<double> v(n);
      for (auto& x : v) x = normal();
      for (std::size_t k = 0; k < j; ++k) {
        double d = 0;
        for (std::size_t i = 0; i < n; ++i) d += q(i, k) * v[i];
        for (std::size_t i = 0; i < n; ++i) v[i] -= d * q(i, k);
      }
      double nn = 0;
      for (double x : v) nn += x * x;
      nn = std::sqrt(nn);
      for (std::size_t i = 0; i < n; ++i) q(i, j) = v[i] / nn;
    }
    return q;
  }
};

struct Scratch {
  std::filesystem::path root;
  Scratch() {
    root = std::filesystem::temp_directory_path() / ("fastinit-acceptance-" + std::to_string(::getpid()));
    std::filesystem::create_directories(root);
  }
  ~Scratch() {
    std::error_code ec;
    std::filesystem::remove_all(root, ec);
  }
};

double seconds_since(std::chrono::steady_clock::time_point t0) {
  return std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
}

double median(std::vector<double> v) {
  std::sort(v.begin(), v.end());
  return v.size() % 2 ? v[v.size() / 2] : 0.5 * (v[v.size() / 2 - 1] + v[v.size() / 2]);
}

// ---- 1 ----------------------------------------------------------------------------------

Verdict tensor_algebra() {
  Rng g(1);
  double worst = 0;
  bool folds = true;
  for (int trial = 0; trial < 50; ++trial) {
    const Dims4 d{g.size(1, 6), g.size(1, 6), g.size(1, 6), g.size(1, 6)};
    const auto x = g.tensor(d);
    const std::size_t n[4] = {d.c, d.t, d.h, d.w};
    for (int mode = 1; mode <= 4; ++mode) {
      Matrix<double> a(g.size(1, 6), n[mode - 1]);
      for (auto& v : a.storage()) v = g.normal();
      const auto y = mode_product(x, a, mode);
      std::size_t o[4] = {d.c, d.t, d.h, d.w};
      o[mode - 1] = a.rows();
      for (std::size_t i0 = 0; i0 < o[0]; ++i0)
        for (std::size_t i1 = 0; i1 < o[1]; ++i1)
          for (std::size_t i2 = 0; i2 < o[2]; ++i2)
            for (std::size_t i3 = 0; i3 < o[3]; ++i3) {
              std::size_t s[4] = {i0, i1, i2, i3};
              const std::size_t row = s[mode - 1];
              double acc = 0;
              for (std::size_t j = 0; j < n[mode - 1]; ++j) {
                s[mode - 1] = j;
                acc += a(row, j) * x(s[0], s[1], s[2], s[3]);
              }
              worst = std::max(worst, std::abs(acc - y(i0, i1, i2, i3)));
            }
      folds = folds && fold(unfold(x, mode), mode, d).storage() == x.storage();
    }
  }
  return {worst <= 1e-12 && folds, "max |mode_product - naive| " + num(worst) + ", fold(unfold) bit-exact " +
                                       (folds ? "yes" : "no")};
}

// ---- 2 ----------------------------------------------------------------------------------

Verdict hosvd_correctness() {
  Rng g(2);
  double ortho = 0, recovery = 0;
  bool monotone = true;
  for (int trial = 0; trial < 30; ++trial) {
    const Dims4 d{g.size(1, 7), g.size(1, 7), g.size(1, 7), g.size(1, 7)};
    const TuckerRanks r{g.size(1, d.c), g.size(1, d.t), g.size(1, d.h), g.size(1, d.w)};
    auto core = g.tensor(r.core_dims());
    const std::size_t n[4] = {d.c, d.t, d.h, d.w};
    for (int m = 1; m <= 4; ++m) core = mode_product(core, g.orthonormal(n[m - 1], r[m - 1]), m);
    const auto f = hosvd(core, r);
    recovery = std::max(recovery, relative_error(core, reconstruct(f)));
    for (const auto& u : f.factors)
      for (std::size_t p = 0; p < u.cols(); ++p)
        for (std::size_t q = 0; q < u.cols(); ++q) {
          double s = 0;
          for (std::size_t i = 0; i < u.rows(); ++i) s += u(i, p) * u(i, q);
          ortho = std::max(ortho, std::abs(s - (p == q)));
        }
  }
  for (int trial = 0; trial < 4; ++trial) {
    const auto x = g.tensor({6, 6, 6, 6});
    for (int mode = 0; mode < 4; ++mode) {
      double prev = 2;
      for (std::size_t k = 1; k <= 6; ++k) {
        TuckerRanks r{3, 3, 3, 3};
        std::array<std::size_t*, 4> slot{&r.c, &r.t, &r.h, &r.w};
        *slot[mode] = k;
        const double e = relative_error(x, reconstruct(hosvd(x, r)));
        monotone = monotone && e <= prev + 1e-12;
        prev = e;
      }
    }
  }
  return {ortho <= 1e-6 && recovery <= 1e-8 && monotone,
          "orthonormality defect " + num(ortho) + ", planted recovery " + num(recovery) + ", monotone in ranks " +
              (monotone ? "yes" : "no")};
}

// ---- 3 ----------------------------------------------------------------------------------

Verdict compression() {
  const double r = compression_ratio({4, 16, 64, 64}, TuckerRanks{4, 8, 32, 32});
  return {std::abs(r - 262144.0 / 37008.0) < 1e-12 && std::abs(r - 7.08) <= 0.01,
          "ratio " + num(r, 6) + " (262144 / 37008)"};
}

// ---- 4 ----------------------------------------------------------------------------------

Verdict spectral_suite() {
  const auto xf = sample_gaussian<float>({4, 16, 64, 64}, RngSeed{4});
  const auto yf = ifft3(fft3(xf));
  double num2 = 0, den = 0;
  for (std::size_t i = 0; i < xf.size(); ++i) {
    num2 += std::pow(double(yf[i]) - xf[i], 2);
    den += double(xf[i]) * xf[i];
  }
  const double roundtrip = std::sqrt(num2 / den);

  const auto xd = sample_gaussian<double>({4, 16, 64, 64}, RngSeed{5});
  double time = 0, freq = 0;
  for (double v : xd.data()) time += v * v;
  for (const auto& z : fft3(xd).data) freq += std::norm(z);
  const double parseval = std::abs(time - freq / (16 * 64 * 64)) / time;

  const auto a = sample_gaussian<float>({4, 8, 16, 16}, RngSeed{6});
  const auto b = sample_gaussian<float>({4, 8, 16, 16}, RngSeed{7});
  const GridDims gd = GridDims::of(a.dims());
  const auto one = freq_recombine(a, b, SpectralMask<float>::constant(gd, 1.0f));
  const auto zero = freq_recombine(a, b, SpectralMask<float>::constant(gd, 0.0f));
  double ident = 0;
  for (std::size_t i = 0; i < a.size(); ++i)
    ident = std::max({ident, std::abs(double(one[i]) - a[i]), std::abs(double(zero[i]) - b[i])});

  const Dims4 d{4, 16, 64, 64};
  const auto mask = gaussian_lowpass_mask<double>(GridDims::of(d), 0.25);
  const double n = static_cast<double>(mask.values.size());
  double m2 = 0;
  for (double m : mask.values) m2 += m * m;
  m2 /= n;
  double var = 0;
  for (double m : mask.values) var += 2 * (m * m - m2) * (m * m - m2);
  const double se = std::sqrt(var / (n * n) / static_cast<double>(d.c));
  const double ratio = low_freq_energy_ratio(xd, mask);
  const double z = std::abs(ratio - m2) / se;

  return {roundtrip <= 1e-5 && parseval <= 1e-6 && ident <= 1e-5 && z <= 3,
          "fft round trip (f32) " + num(roundtrip) + ", Parseval " + num(parseval) + ", mask identities " +
              num(ident) + ", flat-spectrum ratio " + num(ratio, 5) + " vs " + num(m2, 5) + " (" + num(z, 3) +
              " SE)"};
}

// ---- 5 ----------------------------------------------------------------------------------

Verdict oracle_behavior() {
  const Dims4 d{4, 8, 16, 16};
  const auto mask = gaussian_lowpass_mask<double>(GridDims::of(d), 0.25);
  const auto denoiser = make_denoiser<double>({});
  const auto prompt = embed_prompt("a horse galloping along a beach");
  double dtc = 0, dlfr = 0;
  const int seeds = 16;
  for (int s = 0; s < seeds; ++s) {
    const auto z = sample_gaussian<double>(d, RngSeed{static_cast<std::uint64_t>(500 + s)});
    RefineConfig cfg;
    cfg.seed = RngSeed{static_cast<std::uint64_t>(900 + s)};
    const auto y = refine_iterative(z, prompt, cfg, denoiser);
    dtc += temporal_correlation(y) - temporal_correlation(z);
    dlfr += low_freq_energy_ratio(y, mask) - low_freq_energy_ratio(z, mask);
  }
  dtc /= seeds;
  dlfr /= seeds;
  return {dtc > 0.05 && dlfr > 0, "K=5, 16 seeds: mean delta temporal_correlation " + num(dtc) +
                                      ", mean delta low_freq_ratio " + num(dlfr) + " (alpha_bar " +
                                      num(RefineConfig::kDeskAlphaBar) + ")"};
}

// ---- 6 ----------------------------------------------------------------------------------

Verdict gradient_fidelity() {
  const auto cfg = VnpnetConfig::for_dims({4, 4, 8, 8});
  auto ps = init_params<double>(cfg, RngSeed{6});
  NoisePairRecord r;
  // Many tokens, so most embedding slots (and text.w columns) are live.
  r.embedding = embed_prompt(
      "a small brown dog chasing a red ball across wet green grass under low grey clouds while children laugh "
      "near an old stone wall and two birds circle above tall pine trees in the evening wind");
  r.z_rand = sample_gaussian<float>(cfg.dims, RngSeed{60});
  r.z_refined = sample_gaussian<float>(cfg.dims, RngSeed{61});
  const auto s = make_sample<double>(r, cfg);
  GradCheckOptions opt;
  opt.coordinates = 1000;
  opt.seed = 62;
  const auto rep = grad_check_vnpnet(ps, cfg, s, opt, true);
  // Worst error and count of coordinates with a non-zero gradient, per group.
  std::map<std::string, std::pair<double, int>> groups;
  for (const auto& e : rep.entries) {
    std::string grp = e.name.substr(0, e.name.find('.'));
    if (e.name.rfind("tbnf.gate", 0) == 0) grp = "gates";
    else if (grp == "tbnf") grp = "mask";
    auto& [err, live] = groups[grp];
    err = std::max(err, e.rel_error);
    live += std::abs(e.analytic) > 1e-8;
  }
  std::string detail = "max rel error " + num(rep.max_rel_error) + " over " + std::to_string(rep.entries.size()) +
                       " coordinates;";
  bool covered = rep.worst_by_param.size() == ps.size() && groups.size() == 5;
  for (const auto& [grp, g] : groups) {
    detail += " " + grp + " " + num(g.first, 2) + " (" + std::to_string(g.second) + " live)";
    covered = covered && g.second > 0;
  }
  return {rep.max_rel_error <= 1e-4 && covered, detail};
}

// ---- 7 and 11 share a dataset ------------------------------------------------------------

struct DeskData {
  std::vector<NoisePairRecord> train, held_out;
  double gen_seconds = 0;
};

DeskData desk_data(const Scratch& tmp) {
  std::vector<std::string> prompts;
  const char* subjects[] = {"a cat walking on a fence", "ocean waves at dusk", "a train crossing a bridge",
                            "leaves falling in a park"};
  for (int i = 0; i < 48; ++i) prompts.push_back(std::string(subjects[i % 4]) + ", take " + std::to_string(i));
  GenerationOptions go;
  go.dims = {4, 8, 16, 16};
  go.seed = 1000;
  const auto path = tmp.root / "desk.pnd";
  const auto rep = generate_pndata<float>(prompts, go, RefineConfig{}, make_denoiser<float>({}), path);
  auto all = read_dataset(path).read_all();
  DeskData d;
  d.train.assign(all.begin(), all.begin() + 32);
  d.held_out.assign(all.begin() + 32, all.end());
  d.gen_seconds = rep.seconds;
  return d;
}

Verdict training_efficacy(const DeskData& data) {
  const auto net = VnpnetConfig::for_dims({4, 8, 16, 16});
  TrainConfig tc;
  tc.steps = 500;
  tc.batch = 8;
  tc.seed = 5;
  const auto t0 = std::chrono::steady_clock::now();
  const auto res = train<float>(data.train, net, tc);
  const double secs = seconds_since(t0);
  const auto& h = res.history;
  auto avg = [&](std::size_t a, std::size_t b) {
    double s = 0;
    for (std::size_t i = a; i < b; ++i) s += h[i].loss;
    return s / static_cast<double>(b - a);
  };
  const double first = avg(0, 10), last = avg(h.size() - 10, h.size());
  const double reduction = 1 - last / first;
  const auto e = evaluate(data.held_out, res.params, net);
  const double ratio = e.mse / e.identity_mse;
  // The high band of every target is fresh noise, unpredictable from the
  // input; its per-element energy is mean((1 - M)^2).
  const auto mask = gaussian_lowpass_mask<double>(GridDims::of(net.dims), 0.25);
  double floor = 0;
  for (double m : mask.values) floor += (1 - m) * (1 - m);
  floor /= static_cast<double>(mask.values.size());
  return {reduction >= 0.5 && ratio <= 0.8,
          "training loss " + num(first) + " -> " + num(last) + " (reduction " + num(100 * reduction, 3) +
              "%, need >= 50%; high-band noise floor " + num(floor) + " caps it at " +
              num(100 * (1 - floor / first), 3) + "%), held-out mse / identity " + num(ratio, 3) +
              " (need <= 0.8), " + num(secs, 3) + " s"};
}

Verdict ablation(const DeskData& data) {
  std::string table;
  bool ok = true;
  for (auto v : {FilterVariant::Tucker, FilterVariant::SVD, FilterVariant::MLP}) {
    try {
      auto net = VnpnetConfig::for_dims({4, 8, 16, 16});
      net.variant = v;
      TrainConfig tc;
      tc.steps = 150;
      tc.seed = 11;
      const auto res = train<float>(data.train, net, tc);
      const auto e = evaluate(data.held_out, res.params, net);
      ok = ok && std::isfinite(e.mse) && e.count == data.held_out.size();
      table += " " + to_string(v) + " " + num(e.mse) + " (x" + num(e.mse / e.identity_mse, 3) + ")";
    } catch (const std::exception& ex) {
      ok = false;
      table += " " + to_string(v) + " crashed: " + ex.what();
    }
  }
  return {ok, "held-out mse after 150 steps:" + table};
}

// ---- 8 ----------------------------------------------------------------------------------

Verdict structural_identities() {
  const auto cfg = VnpnetConfig::for_dims({4, 8, 16, 16});
  auto ps = init_params<float>(cfg, RngSeed{8});
  const auto z = sample_gaussian<float>(cfg.dims, RngSeed{80});
  const auto prompt = embed_prompt("a lighthouse in a storm");
  ps.at("beta").value[0] = 0.0f;
  const bool beta0 = vnpnet_forward(z, prompt, ps, cfg).storage() == tbnf_forward(z, prompt, ps, cfg).storage();
  auto zeroed = ps;
  for (auto& p : zeroed.all())
    if (p.name.rfind("gcrm.", 0) == 0) std::fill(p.value.begin(), p.value.end(), 0.0f);
  zeroed.at("beta").value[0] = 0.3f;
  const auto a = vnpnet_forward(z, prompt, zeroed, cfg);
  zeroed.at("beta").value[0] = -7.0f;
  const bool beta_free = a.storage() == vnpnet_forward(z, prompt, zeroed, cfg).storage();
  ps.at("beta").value[0] = 0.1f;
  const auto e1 = vnpnet_forward(z, prompt, ps, cfg), e2 = vnpnet_forward(z, prompt, ps, cfg);
  const bool det = std::memcmp(e1.data().data(), e2.data().data(), e1.size() * sizeof(float)) == 0;
  auto yn = [](bool b) { return b ? "yes" : "no"; };
  return {beta0 && beta_free && det, std::string("beta=0 equals TBNF ") + yn(beta0) +
                                         ", zero GCRM beta-independent " + yn(beta_free) +
                                         ", eval bytes deterministic " + yn(det)};
}

// ---- 9 ----------------------------------------------------------------------------------

Verdict speed_structure() {
  const auto cfg = VnpnetConfig::for_dims({4, 16, 64, 64});
  const auto ps = init_params<float>(cfg, RngSeed{9});
  const auto z = sample_gaussian<float>(cfg.dims, RngSeed{90});
  const auto prompt = embed_prompt("a timelapse of clouds over a mountain lake");
  RefineConfig rc;
  const auto denoiser = make_denoiser<float>({});
  std::vector<double> fwd, ref;
  float sink = 0;
  for (int i = 0; i < 5; ++i) {
    auto t0 = std::chrono::steady_clock::now();
    sink += vnpnet_forward(z, prompt, ps, cfg)[0];
    fwd.push_back(seconds_since(t0));
    t0 = std::chrono::steady_clock::now();
    sink += refine_iterative(z, prompt, rc, denoiser)[0];
    ref.push_back(seconds_since(t0));
  }
  const double f = median(fwd), r = median(ref);
  return {r >= 3 * f && std::isfinite(sink), "median refine K=5 " + num(r, 3) + " s, vnpnet_forward " + num(f, 3) +
                                                 " s, ratio " + num(r / f, 3) + " (need >= 3)"};
}

// ---- 10 ---------------------------------------------------------------------------------

Verdict format_durability(const Scratch& tmp) {
  const float specials[] = {-0.0f, std::numeric_limits<float>::denorm_min(), -std::numeric_limits<float>::min() / 7,
                            std::numeric_limits<float>::max(), -1.5f};
  auto bits_equal = [](const std::vector<float>& a, const std::vector<float>& b) {
    return a.size() == b.size() && std::memcmp(a.data(), b.data(), a.size() * sizeof(float)) == 0;
  };
  auto corrupt_detected = [](const std::vector<std::uint8_t>& clean, std::size_t at,
                             const std::function<void(const std::vector<std::uint8_t>&)>& decode,
                             std::optional<std::uint64_t>& record) {
    auto bytes = clean;
    bytes[at] ^= 0x10;
    try {
      decode(bytes);
    } catch (const FormatError& e) {
      record = e.record();
      return true;
    }
    return false;
  };

  // PND1
  DatasetHeader h;
  h.dims = {2, 4, 4, 4};
  h.embedding_dim = 16;
  std::vector<NoisePairRecord> recs;
  for (int i = 0; i < 3; ++i) {
    NoisePairRecord r;
    r.embedding = embed_prompt("record " + std::to_string(i), 16);
    r.prompt_id = r.embedding.prompt_id;
    r.z_rand = sample_gaussian<float>(h.dims, RngSeed{static_cast<std::uint64_t>(i)});
    r.z_refined = sample_gaussian<float>(h.dims, RngSeed{static_cast<std::uint64_t>(i + 10)});
    for (std::size_t k = 0; k < std::size(specials); ++k) r.z_refined[k] = specials[k];
    recs.push_back(r);
  }
  const auto pnd = tmp.root / "fmt.pnd";
  write_dataset(pnd, h, recs);
  const auto back = read_dataset(pnd).read_all();
  bool pnd_ok = back.size() == recs.size();
  for (std::size_t i = 0; pnd_ok && i < recs.size(); ++i)
    pnd_ok = bits_equal(back[i].z_rand.storage(), recs[i].z_rand.storage()) &&
             bits_equal(back[i].z_refined.storage(), recs[i].z_refined.storage()) &&
             bits_equal(back[i].embedding.values, recs[i].embedding.values);
  const auto pnd_bytes = read_file(pnd);
  std::optional<std::uint64_t> pnd_record;
  const std::size_t pnd_at = DatasetHeader::kSize + 2 * h.record_stride() + 40;
  const bool pnd_detect = corrupt_detected(pnd_bytes, pnd_at, [&](const std::vector<std::uint8_t>& b) {
    write_file_atomic(tmp.root / "bad.pnd", b);
    read_dataset(tmp.root / "bad.pnd").read_all();
  }, pnd_record);

  // VNP1
  VnpnetModel m{VnpnetConfig::for_dims({4, 8, 16, 16}), {}};
  m.params = init_params<float>(m.config, RngSeed{10});
  for (std::size_t k = 0; k < std::size(specials); ++k) m.params.at("gcrm.head.w").value[k] = specials[k];
  const auto vnp = tmp.root / "fmt.vnp";
  save_model(vnp, m);
  const auto loaded = load_model(vnp);
  bool vnp_ok = loaded.params.size() == m.params.size();
  for (std::size_t i = 0; vnp_ok && i < m.params.size(); ++i)
    vnp_ok = bits_equal(loaded.params.all()[i].value, m.params.all()[i].value);
  const auto vnp_bytes = read_file(vnp);
  std::optional<std::uint64_t> vnp_record;
  const bool vnp_detect = corrupt_detected(vnp_bytes, vnp_bytes.size() - 100,
                                           [](const std::vector<std::uint8_t>& b) { decode_checkpoint(b); },
                                           vnp_record);
  const bool ok = pnd_ok && vnp_ok && pnd_detect && pnd_record == 2u && vnp_detect &&
                  vnp_record == m.params.size() - 1;
  auto yn = [](bool b) { return b ? "yes" : "no"; };
  auto rec = [](const std::optional<std::uint64_t>& r) { return r ? std::to_string(*r) : std::string("none"); };
  return {ok, std::string("PND1 round trip ") + yn(pnd_ok) + ", corruption in record 2 reported as record " +
                  rec(pnd_record) + "; VNP1 round trip " + yn(vnp_ok) + ", corruption in the last blob reported as blob " +
                  rec(vnp_record) + " of " + std::to_string(m.params.size())};
}

}  // namespace

int main() {
  Scratch tmp;
  int failed = 0;
  auto report = [&](int id, const char* name, const std::function<Verdict()>& f) {
    const auto t0 = std::chrono::steady_clock::now();
    Verdict v;
    try {
      v = f();
    } catch (const std::exception& e) {
      v = {false, std::string("threw: ") + e.what()};
    }
    failed += !v.pass;
    std::printf("%s  %2d %-28s %s [%.1f s]\n", v.pass ? "PASS" : "FAIL", id, name, v.detail.c_str(),
                seconds_since(t0));
    std::fflush(stdout);
  };
  report(1, "tensor algebra oracle", tensor_algebra);
  report(2, "hosvd correctness", hosvd_correctness);
  report(3, "compression ratio", compression);
  report(4, "spectral suite", spectral_suite);
  report(5, "refinement oracle behavior", oracle_behavior);
  report(6, "gradient fidelity", gradient_fidelity);
  std::optional<DeskData> data;
  try {
    data = desk_data(tmp);
  } catch (const std::exception& e) {
    std::printf("dataset generation failed: %s\n", e.what());
  }
  report(7, "training efficacy", [&] { return data ? training_efficacy(*data) : Verdict{false, "no dataset"}; });
  report(8, "residual structure", structural_identities);
  report(9, "speed structure", speed_structure);
  report(10, "format durability", [&] { return format_durability(tmp); });
  report(11, "filter ablation harness", [&] { return data ? ablation(*data) : Verdict{false, "no dataset"}; });
  std::printf("%d of 11 criteria pass\n", 11 - failed);
  return failed ? 1 : 0;
}
