#pragma once

#include <cstdint>
#include <string>

#include "etg/headmodel.h"
#include "etg/manifest.h"

namespace etg {

// Desk-scale corpus: procedurally varied heads, scripted expression/jaw
// trajectories, reference renders from a ground-truth Gaussian cloud, and
// feature tracks (audio-like, AU-like, identity, teacher) correlated with
// the script. Deterministic under the seed.
struct SyntheticSpec {
  size_t identities = 4;
  size_t frames = 125;
  size_t resolution = 64;
  size_t expr_dim = 10;
  size_t gaussians = 2000;
  size_t audio_dim = 64;
  size_t au_dim = 17;
  size_t id_dim = 512;
  size_t rest_frames = 10;  // leading exact-rest frames per identity
  double fps = 25.0;
  bool emit_pseudo_gt = true;  // depth/normal maps for adaptation
};

// Writes the corpus under out_dir and returns the manifest (also saved as
// out_dir/manifest.txt).
TrainingManifest generate_synthetic_corpus(const std::string& out_dir,
                                           const SyntheticSpec& spec,
                                           uint64_t seed);

// The shared head topology (one jittered instance per identity comes out of
// the generator). Exposed for tests: the default desk head has 469 vertices.
HeadModelAssets build_synthetic_head(size_t expr_dim, uint64_t seed,
                                     double jitter = 0.0);

// Scripted per-frame motion and teacher state for one identity.
struct ScriptFrame {
  Tensor psi;     // K
  Vec3 jaw;
  double e = 0.0;
  size_t emotion_class = 6;  // neutral unless an episode is active
};

}  // namespace etg
