#include "m3/synth.hpp"

#include "m3/png_io.hpp"

#include <algorithm>
#include <cmath>
#include <filesystem>
#include <fstream>

namespace m3 {

namespace fs = std::filesystem;

void SynthConfig::validate() const {
  require(n_participants >= 1, "synth: n_participants must be positive");
  require(visits_per_participant >= 1, "synth: visits_per_participant must be positive");
  require(image_size >= 16, "synth: image_size must be at least 16");
  require(prevalence > 0.0 && prevalence < 1.0,
          "synth: prevalence must lie strictly between 0 and 1");
  require(ga_prevalence >= 0.0 && ga_prevalence <= 1.0, "synth: ga_prevalence out of range");
  require(pigment_prevalence >= 0.0 && pigment_prevalence <= 1.0,
          "synth: pigment_prevalence out of range");
  require(lesion_count_max >= 5, "synth: lesion_count_max must be at least 5");
  require(faf_contrast > cfp_contrast,
          "synth: faf_contrast must exceed cfp_contrast (FAF is the conspicuous modality)");
  require(cfp_contrast > 0.0, "synth: cfp_contrast must be positive");
  require(noise_sigma >= 0.0, "synth: noise_sigma must be nonnegative");
}

SynthLatent sample_latent(const SynthConfig& cfg, std::mt19937_64& rng) {
  std::uniform_real_distribution<double> U(0.0, 1.0);
  SynthLatent lat;
  lat.eye = U(rng) < 0.5 ? "left" : "right";
  lat.base_level = 0.45 + 0.1 * U(rng);

  const int n_blobs = 4;
  for (int i = 0; i < n_blobs; ++i)
    lat.background.push_back({U(rng), U(rng), 0.2 + 0.3 * U(rng), -0.08 + 0.16 * U(rng)});

  const int n_vessels = 2 + (rng() % 2);
  for (int i = 0; i < n_vessels; ++i) {
    SynthLatent::Vessel v;
    v.y0 = U(rng);
    v.x0 = U(rng) * 0.2;  // start near the left edge
    v.y1 = U(rng);
    v.x1 = 0.3 + 0.4 * U(rng);
    v.y2 = U(rng);
    v.x2 = 0.8 + 0.2 * U(rng);
    v.thickness = 0.012 + 0.01 * U(rng);
    v.darkness = 0.10 + 0.10 * U(rng);
    lat.vessels.push_back(v);
  }

  const bool positive = U(rng) < cfg.prevalence;
  if (positive)
    lat.lesion_count =
        5 + int(rng() % static_cast<uint64_t>(cfg.lesion_count_max - 5 + 1));
  else
    lat.lesion_count = 2 + int(rng() % 3);  // keep negatives near the 5-disc boundary
  for (int i = 0; i < lat.lesion_count; ++i) {
    // Peripheral annulus placement around the image center.
    const double theta = 2.0 * M_PI * U(rng);
    const double rad = 0.25 + 0.17 * U(rng);
    SynthDisc d;
    d.y = 0.5 + rad * std::sin(theta);
    d.x = 0.5 + rad * std::cos(theta);
    d.r = 0.030 + 0.018 * U(rng);
    d.strength = 0.8 + 0.4 * U(rng);
    lat.lesions.push_back(d);
  }

  lat.ga = U(rng) < cfg.ga_prevalence;
  lat.ga_disc = {0.5 + 0.04 * (U(rng) - 0.5), 0.5 + 0.04 * (U(rng) - 0.5),
                 0.12 + 0.08 * U(rng), 1.0};
  lat.pigment = U(rng) < cfg.pigment_prevalence;
  if (lat.pigment) {
    const int k = 2 + int(rng() % 4);
    for (int i = 0; i < k; ++i) {
      // Pigment patches sit in the large-dot size class and their dark side
      // stays well below lesion depth, so the RPD signal remains separable
      // by size and by contrast on CFP.
      SynthDisc d;
      d.y = 0.2 + 0.6 * U(rng);
      d.x = 0.2 + 0.6 * U(rng);
      d.r = 0.045 + 0.020 * U(rng);
      d.strength = U(rng) < 0.5 ? -(0.06 + 0.06 * U(rng)) : (0.10 + 0.10 * U(rng));
      lat.pigment_patches.push_back(d);
    }
  }

  // CFP distractors: faded lesion-lookalike blobs, distinctly larger and
  // shallower than true lesions, anywhere in the frame.
  const int n_distract = 2 + int(rng() % 3);
  for (int i = 0; i < n_distract; ++i) {
    SynthDisc d;
    d.y = 0.1 + 0.8 * U(rng);
    d.x = 0.1 + 0.8 * U(rng);
    d.r = 0.055 + 0.030 * U(rng);
    d.strength = 0.25 + 0.30 * U(rng);
    lat.distractors.push_back(d);
  }
  return lat;
}

namespace {

// Additive accumulation of a soft disc (linear ~1.5px anti-aliased edge)
// into a weight plane; overlapping stamps keep the max weight.
void stamp_disc(Array<float>& plane, Dim size, double cy, double cx, double rad,
                double weight) {
  const double aa = 0.75;
  const Dim y0 = std::max<Dim>(0, Dim(std::floor(cy - rad - aa)));
  const Dim y1 = std::min<Dim>(size - 1, Dim(std::ceil(cy + rad + aa)));
  const Dim x0 = std::max<Dim>(0, Dim(std::floor(cx - rad - aa)));
  const Dim x1 = std::min<Dim>(size - 1, Dim(std::ceil(cx + rad + aa)));
  for (Dim y = y0; y <= y1; ++y)
    for (Dim x = x0; x <= x1; ++x) {
      const double dist = std::hypot(double(y) - cy, double(x) - cx);
      const double t = std::min(1.0, std::max(0.0, (rad + aa - dist) / (2 * aa)));
      if (t > 0) {
        float& p = plane[y * size + x];
        p = std::max(p, float(t * weight));
      }
    }
}

void stamp_disc_binary(Array<float>& plane, Dim size, double cy, double cx, double rad) {
  const Dim y0 = std::max<Dim>(0, Dim(std::floor(cy - rad)));
  const Dim y1 = std::min<Dim>(size - 1, Dim(std::ceil(cy + rad)));
  const Dim x0 = std::max<Dim>(0, Dim(std::floor(cx - rad)));
  const Dim x1 = std::min<Dim>(size - 1, Dim(std::ceil(cx + rad)));
  for (Dim y = y0; y <= y1; ++y)
    for (Dim x = x0; x <= x1; ++x)
      if (std::hypot(double(y) - cy, double(x) - cx) <= rad) plane[y * size + x] = 1.0f;
}

// Quadratic Bezier rasterized by stamping discs along the curve.
void stamp_vessel(Array<float>& plane, Dim size, const SynthLatent::Vessel& v, double dy,
                  double dx) {
  const double sz = double(size);
  const double rad = std::max(0.6, v.thickness * sz);
  const int steps = std::max(8, int(3.0 * sz / rad));
  for (int i = 0; i <= steps; ++i) {
    const double t = double(i) / double(steps);
    const double omt = 1.0 - t;
    const double by = omt * omt * v.y0 + 2 * omt * t * v.y1 + t * t * v.y2;
    const double bx = omt * omt * v.x0 + 2 * omt * t * v.x1 + t * t * v.x2;
    stamp_disc(plane, size, by * (sz - 1) + dy, bx * (sz - 1) + dx, rad, v.darkness);
  }
}

Array<float> background_field(const SynthLatent& lat, Dim size) {
  Array<float> field(size * size);
  const double sz = double(size - 1);
  for (Dim y = 0; y < size; ++y)
    for (Dim x = 0; x < size; ++x) {
      double v = lat.base_level;
      const double ny = double(y) / sz, nx = double(x) / sz;
      for (const auto& b : lat.background) {
        const double d2 = (ny - b.y) * (ny - b.y) + (nx - b.x) * (nx - b.x);
        v += b.amp * std::exp(-d2 / (2 * b.sigma * b.sigma));
      }
      field[y * size + x] = float(v);
    }
  return field;
}

}  // namespace

RenderedPair render_visit(const SynthConfig& cfg, const SynthLatent& latent,
                          std::mt19937_64& rng) {
  const Dim size = cfg.image_size;
  const double sz = double(size - 1);

  // Shared per-visit geometry jitter (whole-scene integer shift).
  std::uniform_int_distribution<int> jit(-2, 2);
  const double dy = jit(rng), dx = jit(rng);

  Array<float> bg = background_field(latent, size);

  Array<float> vessels = Array<float>::Zero(size * size);
  for (const auto& v : latent.vessels) stamp_vessel(vessels, size, v, dy, dx);

  Array<float> lesions = Array<float>::Zero(size * size);
  Array<float> mask = Array<float>::Zero(size * size);
  for (const auto& d : latent.lesions) {
    stamp_disc(lesions, size, d.y * sz + dy, d.x * sz + dx, d.r * sz, d.strength);
    stamp_disc_binary(mask, size, d.y * sz + dy, d.x * sz + dx, d.r * sz);
  }

  Array<float> ga = Array<float>::Zero(size * size);
  if (latent.ga)
    stamp_disc(ga, size, latent.ga_disc.y * sz + dy, latent.ga_disc.x * sz + dx,
               latent.ga_disc.r * sz, 1.0);

  Array<float> pig = Array<float>::Zero(size * size);
  Array<float> pig_neg = Array<float>::Zero(size * size);
  for (const auto& d : latent.pigment_patches) {
    Array<float>& plane = d.strength >= 0 ? pig : pig_neg;
    stamp_disc(plane, size, d.y * sz + dy, d.x * sz + dx, d.r * sz, std::abs(d.strength));
  }

  Array<float> distract = Array<float>::Zero(size * size);
  for (const auto& d : latent.distractors)
    stamp_disc(distract, size, d.y * sz + dy, d.x * sz + dx, d.r * sz, d.strength);

  std::normal_distribution<double> noise(0.0, cfg.noise_sigma);

  RenderedPair out;
  out.faf = Image(size, size);
  out.cfp = Image(size, size);
  out.lesion_mask = Image(size, size);
  out.lesion_mask.pix = mask;

  for (Dim i = 0; i < size * size; ++i) {
    // FAF: lesions and atrophy are strongly hypoautofluorescent.
    double f = bg[i];
    f *= 1.0 - 0.9 * vessels[i];
    f -= cfg.faf_contrast * lesions[i];
    f -= 0.35 * ga[i];
    f += 0.05 * (pig[i] - pig_neg[i]);
    f += noise(rng);
    out.faf.pix[i] = float(std::min(1.0, std::max(0.0, f)));
  }
  for (Dim i = 0; i < size * size; ++i) {
    // CFP: brighter tone, faint lesions, lookalike distractors, strong
    // pigment changes, pale atrophy.
    double c = bg[i] + 0.12;
    c *= 1.0 - 0.7 * vessels[i];
    c -= cfg.cfp_contrast * lesions[i];
    c -= cfg.cfp_contrast * distract[i];
    c += 0.12 * ga[i];
    c += pig[i] - pig_neg[i];
    c += noise(rng);
    out.cfp.pix[i] = float(std::min(1.0, std::max(0.0, c)));
  }
  return out;
}

std::vector<ExamRecord> generate_synthetic(const SynthConfig& cfg, const std::string& out_dir) {
  cfg.validate();
  std::error_code ec;
  fs::create_directories(fs::path(out_dir) / "images", ec);
  require(!ec, "synth: cannot create output directory " + out_dir + ": " + ec.message());
  fs::create_directories(fs::path(out_dir) / "masks", ec);
  require(!ec, "synth: cannot create output directory " + out_dir + ": " + ec.message());

  std::vector<ExamRecord> records;
  std::ofstream truth((fs::path(out_dir) / "truth.csv").string());
  require(static_cast<bool>(truth), "synth: cannot write truth.csv under " + out_dir);
  truth << "record_id,lesion_count,mask_path\n";

  for (Dim p = 0; p < cfg.n_participants; ++p) {
    // Odd streams: latent anatomy. Even streams: per-visit rendering.
    std::mt19937_64 latent_rng = seeded_rng(cfg.seed, uint64_t(p) * 2 + 1);
    const SynthLatent latent = sample_latent(cfg, latent_rng);

    char pid[24];
    std::snprintf(pid, sizeof(pid), "P%05lld", static_cast<long long>(p));

    for (int v = 0; v < cfg.visits_per_participant; ++v) {
      std::mt19937_64 visit_rng =
          seeded_rng(cfg.seed, (uint64_t(p) * uint64_t(cfg.visits_per_participant) +
                                uint64_t(v)) *
                                   2 +
                                   2);
      RenderedPair pair = render_visit(cfg, latent, visit_rng);

      ExamRecord r;
      r.participant_id = pid;
      r.eye = latent.eye;
      r.visit = "V" + std::to_string(v);
      r.labels = latent.labels();
      const std::string id = r.record_id();
      r.cfp_path = (fs::path(out_dir) / "images" / (id + "_cfp.png")).string();
      r.faf_path = (fs::path(out_dir) / "images" / (id + "_faf.png")).string();
      const std::string mask_path = (fs::path(out_dir) / "masks" / (id + "_mask.png")).string();

      write_png_gray(r.cfp_path, pair.cfp);
      write_png_gray(r.faf_path, pair.faf);
      write_png_gray(mask_path, pair.lesion_mask);
      truth << id << ',' << latent.lesion_count << ',' << mask_path << "\n";
      records.push_back(std::move(r));
    }
  }
  require(static_cast<bool>(truth), "synth: truth.csv write failed under " + out_dir);

  save_manifest((fs::path(out_dir) / "manifest.csv").string(), records);
  return records;
}

}  // namespace m3
