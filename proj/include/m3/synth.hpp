#pragma once

#include "m3/dataset.hpp"

#include <random>
#include <string>
#include <vector>

namespace m3 {

// Synthetic paired-modality generator. Each participant-eye carries one
// latent anatomy (smooth background, vessel curves, disease geometry)
// rendered per visit into an FAF-like image (lesions at high contrast) and a
// CFP-like image (same geometry at low contrast plus distractor blobs), so
// the RPD signal is conspicuous on FAF and hard on CFP — the asymmetry the
// framework is meant to exploit.
struct SynthConfig {
  Dim n_participants = 1000;
  int visits_per_participant = 2;
  Dim image_size = 64;
  double prevalence = 0.28;         // rpd positives
  double ga_prevalence = 0.194;     // central-atrophy label
  double pigment_prevalence = 0.827;
  int lesion_count_max = 9;         // positives draw 5..max lesion discs; negatives 2..4
  double faf_contrast = 0.5;
  double cfp_contrast = 0.30;
  double noise_sigma = 0.03;
  uint64_t seed = 1;

  void validate() const;
};

// Latent per-participant-eye scene description, all coordinates normalized
// to [0,1] and radii relative to image size.
struct SynthDisc {
  double y = 0, x = 0, r = 0;
  double strength = 1.0;  // per-disc contrast multiplier
};

struct SynthLatent {
  struct Blob {
    double y, x, sigma, amp;
  };
  struct Vessel {
    double y0, x0, y1, x1, y2, x2;  // quadratic Bezier control points
    double thickness, darkness;
  };
  std::string eye;
  double base_level = 0.5;
  std::vector<Blob> background;
  std::vector<Vessel> vessels;
  int lesion_count = 0;
  std::vector<SynthDisc> lesions;
  bool ga = false;
  SynthDisc ga_disc;
  bool pigment = false;
  std::vector<SynthDisc> pigment_patches;  // strength carries the sign
  std::vector<SynthDisc> distractors;      // CFP-only lookalike blobs

  Labels labels() const {
    Labels l;
    l.rpd = lesion_count >= 5 ? 1 : 0;
    l.ga = ga ? 1 : 0;
    l.pigment = pigment ? 1 : 0;
    return l;
  }
};

struct RenderedPair {
  Image cfp, faf;
  Image lesion_mask;  // binary 0/1, identical geometry for both modalities
};

// Deterministic draws from the participant's latent rng stream.
SynthLatent sample_latent(const SynthConfig& cfg, std::mt19937_64& rng);

// One visit: shared integer jitter for both modalities, independent sensor
// noise per modality.
RenderedPair render_visit(const SynthConfig& cfg, const SynthLatent& latent,
                          std::mt19937_64& rng);

// Full dataset: images/, masks/, manifest.csv, truth.csv under out_dir.
// Returns the records (paths already resolved).
std::vector<ExamRecord> generate_synthetic(const SynthConfig& cfg, const std::string& out_dir);

}  // namespace m3
