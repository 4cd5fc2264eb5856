#pragma once

// Synthetic try-on samples with exact ground truth, and small image metrics.

#include <algorithm>
#include <array>
#include <cmath>
#include <cstdint>
#include <filesystem>
#include <fstream>
#include <functional>
#include <iomanip>
#include <ostream>
#include <sstream>
#include <string>
#include <tuple>
#include <vector>

#include "mcdit/conditioning.hpp"
#include "mcdit/errors.hpp"
#include "mcdit/image.hpp"
#include "mcdit/rng.hpp"

namespace mcdit {

inline constexpr std::size_t kCanvas = 32;

using Color = std::array<float, 3>;

enum class TextureKind { HStripes, VStripes, Checker };

inline const char* to_string(TextureKind k) {
  switch (k) {
    case TextureKind::HStripes:
      return "hstripes";
    case TextureKind::VStripes:
      return "vstripes";
    case TextureKind::Checker:
      return "checker";
  }
  return "?";
}

/// Everything that determines a sample. gen_sample draws these from the seed
/// and renders them; tests can render their own.
struct SceneParams {
  Color bg0{}, bg1{};
  bool bg_vertical = false;
  Color body{};
  double cy = 16, cx = 16, ry = 8, rx = 6;
  TextureKind texture = TextureKind::HStripes;
  Color tex0{}, tex1{};
  int period = 4;
  int phase_y = 0, phase_x = 0;
};

struct TryOnSample {
  std::uint64_t seed = 0;
  Image person;
  Image garment;
  Image mask;
  Image masked_person;
  Image truth;
};

namespace detail {

inline Color random_color(Rng& rng) {
  return {static_cast<float>(rng.uniform()), static_cast<float>(rng.uniform()), static_cast<float>(rng.uniform())};
}

inline float color_distance(const Color& a, const Color& b) {
  float d = 0;
  for (std::size_t c = 0; c < 3; ++c) d += std::abs(a[c] - b[c]);
  return d;
}

// Two colours at least `min_l1` apart (L1 over RGB).
inline std::pair<Color, Color> contrasting_pair(Rng& rng, float min_l1) {
  auto a = random_color(rng);
  auto b = random_color(rng);
  while (color_distance(a, b) < min_l1) b = random_color(rng);
  return {a, b};
}

}  // namespace detail

inline SceneParams draw_scene(std::uint64_t seed) {
  Rng rng(derive_seed(seed, 0x5CE7E));
  SceneParams s;
  std::tie(s.bg0, s.bg1) = detail::contrasting_pair(rng, 0.3f);
  s.bg_vertical = rng.uniform() < 0.5;
  s.body = detail::random_color(rng);
  s.cy = rng.uniform(13.0, 19.0);
  s.cx = rng.uniform(13.0, 19.0);
  s.ry = rng.uniform(8.0, 12.0);
  s.rx = rng.uniform(6.0, 10.0);
  s.texture = static_cast<TextureKind>(rng.uniform_int(0, 2));
  std::tie(s.tex0, s.tex1) = detail::contrasting_pair(rng, 0.9f);
  s.period = static_cast<int>(rng.uniform_int(2, 8));
  s.phase_y = static_cast<int>(rng.uniform_int(0, 2 * s.period - 1));
  s.phase_x = static_cast<int>(rng.uniform_int(0, 2 * s.period - 1));
  return s;
}

inline Image render_background(const SceneParams& s) {
  Image img(kCanvas, kCanvas, 3);
  for (std::size_t y = 0; y < kCanvas; ++y) {
    for (std::size_t x = 0; x < kCanvas; ++x) {
      const float u = static_cast<float>(s.bg_vertical ? y : x) / static_cast<float>(kCanvas - 1);
      for (std::size_t c = 0; c < 3; ++c) img.at(y, x, c) = (1 - u) * s.bg0[c] + u * s.bg1[c];
    }
  }
  return quantize(std::move(img));
}

inline Image render_mask(const SceneParams& s) {
  Image m(kCanvas, kCanvas, 1);
  for (std::size_t y = 0; y < kCanvas; ++y) {
    for (std::size_t x = 0; x < kCanvas; ++x) {
      const double dy = (static_cast<double>(y) + 0.5 - s.cy) / s.ry;
      const double dx = (static_cast<double>(x) + 0.5 - s.cx) / s.rx;
      m.at(y, x, 0) = dy * dy + dx * dx <= 1.0 ? 1.0f : 0.0f;
    }
  }
  return m;
}

/// Full-canvas two-colour texture. Stripes alternate every `period` pixels;
/// the checker alternates in both axes.
inline Image render_garment(const SceneParams& s) {
  Image g(kCanvas, kCanvas, 3);
  for (std::size_t y = 0; y < kCanvas; ++y) {
    for (std::size_t x = 0; x < kCanvas; ++x) {
      const int by = (static_cast<int>(y) + s.phase_y) / s.period;
      const int bx = (static_cast<int>(x) + s.phase_x) / s.period;
      int parity = 0;
      switch (s.texture) {
        case TextureKind::HStripes:
          parity = by & 1;
          break;
        case TextureKind::VStripes:
          parity = bx & 1;
          break;
        case TextureKind::Checker:
          parity = (by + bx) & 1;
          break;
      }
      const auto& col = parity ? s.tex1 : s.tex0;
      for (std::size_t c = 0; c < 3; ++c) g.at(y, x, c) = col[c];
    }
  }
  return quantize(std::move(g));
}

/// The compositing oracle: inside the mask the garment is pasted pixel for
/// pixel (the crop window is the whole canvas, centred on itself); outside
/// it the person is kept.
inline Image composite(const Image& person, const Image& garment, const Image& mask) {
  if (!person.same_shape(garment) || mask.channels != 1 || mask.height != person.height ||
      mask.width != person.width) {
    throw ContractError("composite: person, garment and mask canvases differ");
  }
  Image out = person;
  for (std::size_t y = 0; y < person.height; ++y)
    for (std::size_t x = 0; x < person.width; ++x)
      if (mask.at(y, x, 0) == 1.0f)
        for (std::size_t c = 0; c < person.channels; ++c) out.at(y, x, c) = garment.at(y, x, c);
  return out;
}

inline TryOnSample render_sample(const SceneParams& s, std::uint64_t seed) {
  TryOnSample out;
  out.seed = seed;
  out.mask = render_mask(s);
  out.person = render_background(s);
  Color body = s.body;
  for (auto& v : body) v = from_byte(to_byte(v));
  for (std::size_t y = 0; y < kCanvas; ++y)
    for (std::size_t x = 0; x < kCanvas; ++x)
      if (out.mask.at(y, x, 0) == 1.0f)
        for (std::size_t c = 0; c < 3; ++c) out.person.at(y, x, c) = body[c];
  out.garment = render_garment(s);
  out.truth = composite(out.person, out.garment, out.mask);
  out.masked_person = make_masked_person(out.truth, out.mask);
  return out;
}

inline TryOnSample gen_sample(std::uint64_t seed) { return render_sample(draw_scene(seed), seed); }

struct SplitConfig {
  std::uint64_t base_seed = 1234;
  std::size_t n_train = 2000;
  std::size_t n_test = 200;
};

inline constexpr std::uint64_t kTestSeedOffset = 1'000'000;

inline std::uint64_t train_seed(const SplitConfig& s, std::size_t i) { return s.base_seed + i; }
inline std::uint64_t test_seed(const SplitConfig& s, std::size_t i) { return s.base_seed + kTestSeedOffset + i; }

inline std::vector<TryOnSample> make_split(const SplitConfig& s, bool test) {
  std::vector<TryOnSample> out;
  const auto n = test ? s.n_test : s.n_train;
  out.reserve(n);
  for (std::size_t i = 0; i < n; ++i) out.push_back(gen_sample(test ? test_seed(s, i) : train_seed(s, i)));
  return out;
}

/// Writes `{seed}_{role}.ppm` for person, garment, masked_person and truth,
/// and `{seed}_mask.pgm`.
inline void dump_sample(const std::filesystem::path& dir, const TryOnSample& s) {
  const auto stem = std::to_string(s.seed) + "_";
  write_ppm(dir / (stem + "person.ppm"), s.person);
  write_ppm(dir / (stem + "garment.ppm"), s.garment);
  write_ppm(dir / (stem + "masked_person.ppm"), s.masked_person);
  write_ppm(dir / (stem + "truth.ppm"), s.truth);
  write_pgm(dir / (stem + "mask.pgm"), s.mask);
}

// ---------------------------------------------------------------------------
// Metrics
// ---------------------------------------------------------------------------

inline constexpr std::size_t kSsimWindow = 8;
inline constexpr std::size_t kSsimStride = 4;
inline constexpr double kSsimC1 = 0.01 * 0.01;
inline constexpr double kSsimC2 = 0.03 * 0.03;

namespace detail {

inline void require_same_shape(const Image& a, const Image& b, const char* what) {
  if (!a.same_shape(b)) throw DimensionError(std::string(what) + ": image shapes differ");
}

/// SSIM of one window in one channel, population statistics.
inline double window_ssim(const Image& a, const Image& b, std::size_t y0, std::size_t x0, std::size_t c) {
  const double n = static_cast<double>(kSsimWindow * kSsimWindow);
  double ma = 0, mb = 0;
  for (std::size_t y = y0; y < y0 + kSsimWindow; ++y)
    for (std::size_t x = x0; x < x0 + kSsimWindow; ++x) {
      ma += a.at(y, x, c);
      mb += b.at(y, x, c);
    }
  ma /= n;
  mb /= n;
  double va = 0, vb = 0, cov = 0;
  for (std::size_t y = y0; y < y0 + kSsimWindow; ++y)
    for (std::size_t x = x0; x < x0 + kSsimWindow; ++x) {
      const double da = a.at(y, x, c) - ma;
      const double db = b.at(y, x, c) - mb;
      va += da * da;
      vb += db * db;
      cov += da * db;
    }
  va /= n;
  vb /= n;
  cov /= n;
  return ((2 * ma * mb + kSsimC1) * (2 * cov + kSsimC2)) / ((ma * ma + mb * mb + kSsimC1) * (va + vb + kSsimC2));
}

// Mean SSIM over the windows accepted by `keep`, averaged over channels.
template <class Keep>
double windowed_ssim(const Image& a, const Image& b, Keep&& keep) {
  if (a.height < kSsimWindow || a.width < kSsimWindow) throw DimensionError("ssim: image smaller than window");
  double total = 0;
  std::size_t count = 0;
  for (std::size_t y0 = 0; y0 + kSsimWindow <= a.height; y0 += kSsimStride)
    for (std::size_t x0 = 0; x0 + kSsimWindow <= a.width; x0 += kSsimStride) {
      if (!keep(y0, x0)) continue;
      for (std::size_t c = 0; c < a.channels; ++c) total += window_ssim(a, b, y0, x0, c);
      count += a.channels;
    }
  if (count == 0) throw ContractError("ssim: no window qualifies");
  return total / static_cast<double>(count);
}

}  // namespace detail

inline double ssim(const Image& a, const Image& b) {
  detail::require_same_shape(a, b, "ssim");
  return detail::windowed_ssim(a, b, [](std::size_t, std::size_t) { return true; });
}

inline double mse(const Image& a, const Image& b) {
  detail::require_same_shape(a, b, "mse");
  double s = 0;
  for (std::size_t i = 0; i < a.pixels.size(); ++i) {
    const double d = a.pixels[i] - b.pixels[i];
    s += d * d;
  }
  return s / static_cast<double>(a.pixels.size());
}

inline constexpr double kPsnrCap = 100.0;

/// Peak 1.0; identical images report the cap.
inline double psnr(const Image& a, const Image& b) {
  const double m = mse(a, b);
  if (m <= 0) return kPsnrCap;
  return std::min(kPsnrCap, 10.0 * std::log10(1.0 / m));
}

struct MaskedMetrics {
  double ssim_masked = 0;
  double masked_mse = 0;
};

inline double mask_coverage(const Image& mask, std::size_t y0, std::size_t x0) {
  double on = 0;
  for (std::size_t y = y0; y < y0 + kSsimWindow; ++y)
    for (std::size_t x = x0; x < x0 + kSsimWindow; ++x) on += mask.at(y, x, 0);
  return on / static_cast<double>(kSsimWindow * kSsimWindow);
}

/// SSIM over windows at least half covered by the mask; MSE over mask pixels.
inline MaskedMetrics masked_metrics(const Image& pred, const Image& truth, const Image& mask) {
  detail::require_same_shape(pred, truth, "masked_metrics");
  if (mask.channels != 1 || mask.height != pred.height || mask.width != pred.width) {
    throw DimensionError("masked_metrics: mask canvas differs");
  }
  std::size_t on = 0;
  double sq = 0;
  for (std::size_t y = 0; y < pred.height; ++y)
    for (std::size_t x = 0; x < pred.width; ++x) {
      if (mask.at(y, x, 0) == 0.0f) continue;
      ++on;
      for (std::size_t c = 0; c < pred.channels; ++c) {
        const double d = pred.at(y, x, c) - truth.at(y, x, c);
        sq += d * d;
      }
    }
  if (on == 0) throw ContractError("masked_metrics: empty mask");
  MaskedMetrics m;
  m.masked_mse = sq / static_cast<double>(on * pred.channels);
  m.ssim_masked = detail::windowed_ssim(
      pred, truth, [&](std::size_t y0, std::size_t x0) { return mask_coverage(mask, y0, x0) >= 0.5; });
  return m;
}

inline constexpr std::size_t kHistBins = 8;

using Histogram = std::vector<std::array<double, kHistBins>>;  // [channel][bin], each channel sums to 1

/// Per-channel 8-bin histogram over pixels where `mask` is 1 (all pixels when
/// `mask` is null).
inline Histogram color_histogram(const Image& img, const Image* mask = nullptr) {
  Histogram h(img.channels);
  for (auto& ch : h) ch.fill(0.0);
  std::size_t n = 0;
  for (std::size_t y = 0; y < img.height; ++y)
    for (std::size_t x = 0; x < img.width; ++x) {
      if (mask && mask->at(y, x, 0) == 0.0f) continue;
      ++n;
      for (std::size_t c = 0; c < img.channels; ++c) {
        const auto bin = std::min<std::size_t>(kHistBins - 1, to_byte(img.at(y, x, c)) * kHistBins / 256);
        h[c][bin] += 1.0;
      }
    }
  if (n == 0) throw ContractError("color_histogram: no pixels selected");
  for (auto& ch : h)
    for (auto& v : ch) v /= static_cast<double>(n);
  return h;
}

/// Sum of bin-wise minima, averaged over channels; 1 means identical.
inline double histogram_intersection(const Histogram& a, const Histogram& b) {
  if (a.size() != b.size()) throw DimensionError("histogram channel counts differ");
  double total = 0;
  for (std::size_t c = 0; c < a.size(); ++c)
    for (std::size_t k = 0; k < kHistBins; ++k) total += std::min(a[c][k], b[c][k]);
  return total / static_cast<double>(a.size());
}

// ---------------------------------------------------------------------------
// Evaluation
// ---------------------------------------------------------------------------

enum class EvalMode { Paired, Unpaired };

inline const char* to_string(EvalMode m) { return m == EvalMode::Paired ? "paired" : "unpaired"; }

inline EvalMode parse_eval_mode(const std::string& s) {
  if (s == "paired") return EvalMode::Paired;
  if (s == "unpaired") return EvalMode::Unpaired;
  throw ConfigError("mode must be paired or unpaired, got '" + s + "'");
}

/// What a try-on system sees: the garment, the masked person and its mask,
/// plus a seed for any sampling noise.
struct TryOnQuery {
  const Image& garment;
  const Image& masked_person;
  const Image& mask;
  std::uint64_t seed;
};

using TryOnGenerator = std::function<Image(const TryOnQuery&)>;

struct SampleMetrics {
  std::uint64_t person_seed = 0;
  std::uint64_t garment_seed = 0;
  double ssim_full = 0, ssim_masked = 0, psnr = 0, masked_mse = 0, color_hist_intersection = 0;
};

struct MetricsReport {
  EvalMode mode = EvalMode::Paired;
  std::size_t n_samples = 0;
  double ssim_full = 0, ssim_masked = 0, psnr = 0, masked_mse = 0, color_hist_intersection = 0;
  std::vector<SampleMetrics> samples;
};

struct EvalOptions {
  EvalMode mode = EvalMode::Paired;
  std::size_t swap_offset = 1;  // unpaired: person i wears the garment of sample (i + offset) mod n
  bool paste_back = false;      // keep the known pixels outside the mask
};

/// Paired: each person is asked to wear its own garment. Unpaired: garments
/// are rotated between samples; the reference is then the oracle composite
/// of the person with the swapped garment. The colour histogram is always
/// taken over the generated masked region against the requested garment.
inline MetricsReport evaluate(const TryOnGenerator& generate, const std::vector<TryOnSample>& samples,
                              const EvalOptions& opts = {}) {
  if (samples.empty()) throw ContractError("evaluate: need at least one sample");
  MetricsReport r;
  r.mode = opts.mode;
  r.n_samples = samples.size();
  const auto n = samples.size();
  for (std::size_t i = 0; i < n; ++i) {
    const auto& person = samples[i];
    const auto& donor = opts.mode == EvalMode::Paired ? person : samples[(i + opts.swap_offset) % n];
    const Image reference = composite(person.person, donor.garment, person.mask);
    Image pred = generate({donor.garment, person.masked_person, person.mask, person.seed});
    detail::require_same_shape(pred, reference, "evaluate");
    if (opts.paste_back) pred = composite(person.masked_person, pred, person.mask);
    SampleMetrics m;
    m.person_seed = person.seed;
    m.garment_seed = donor.seed;
    m.ssim_full = ssim(pred, reference);
    const auto mm = masked_metrics(pred, reference, person.mask);
    m.ssim_masked = mm.ssim_masked;
    m.masked_mse = mm.masked_mse;
    m.psnr = psnr(pred, reference);
    m.color_hist_intersection =
        histogram_intersection(color_histogram(pred, &person.mask), color_histogram(donor.garment));
    r.ssim_full += m.ssim_full;
    r.ssim_masked += m.ssim_masked;
    r.psnr += m.psnr;
    r.masked_mse += m.masked_mse;
    r.color_hist_intersection += m.color_hist_intersection;
    r.samples.push_back(m);
  }
  const double inv = 1.0 / static_cast<double>(n);
  r.ssim_full *= inv;
  r.ssim_masked *= inv;
  r.psnr *= inv;
  r.masked_mse *= inv;
  r.color_hist_intersection *= inv;
  return r;
}

inline MetricsReport evaluate(const TryOnGenerator& generate, const SplitConfig& split, std::size_t n,
                              const EvalOptions& opts = {}) {
  if (n == 0) throw ContractError("evaluate: n must be positive");
  std::vector<TryOnSample> samples;
  samples.reserve(n);
  for (std::size_t i = 0; i < n; ++i) samples.push_back(gen_sample(test_seed(split, i)));
  return evaluate(generate, samples, opts);
}

/// Returns the exact answer; useful as an upper bound and for plumbing tests.
/// Needs the person image, so it looks the sample up by seed.
inline TryOnGenerator oracle_generator() {
  return [](const TryOnQuery& q) {
    const auto s = gen_sample(q.seed);
    return composite(s.person, q.garment, q.mask);
  };
}

/// Leaves the masked region at the fill gray.
inline TryOnGenerator gray_generator() {
  return [](const TryOnQuery& q) { return q.masked_person; };
}

/// One summary row, then one row per sample when `per_sample` is set.
inline void write_report_csv(std::ostream& out, const MetricsReport& r, bool per_sample) {
  out << "row,mode,person_seed,garment_seed,n_samples,ssim_full,ssim_masked,psnr,masked_mse,color_hist_intersection\n";
  out << std::setprecision(9);
  out << "summary," << to_string(r.mode) << ",,," << r.n_samples << ',' << r.ssim_full << ',' << r.ssim_masked << ','
      << r.psnr << ',' << r.masked_mse << ',' << r.color_hist_intersection << '\n';
  if (!per_sample) return;
  for (const auto& m : r.samples) {
    out << "sample," << to_string(r.mode) << ',' << m.person_seed << ',' << m.garment_seed << ",1," << m.ssim_full
        << ',' << m.ssim_masked << ',' << m.psnr << ',' << m.masked_mse << ',' << m.color_hist_intersection << '\n';
  }
}

}  // namespace mcdit
