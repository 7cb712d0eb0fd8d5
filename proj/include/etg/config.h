#pragma once

#include <cstdint>
#include <string>

namespace etg {

// Every tunable of the pipeline, parsed from "key = value" text. Unknown
// keys are rejected. The architecture subset (marked) feeds arch_hash(),
// which checkpoints pin; run knobs (iterations, rates, paths) may differ
// between phases without invalidating a checkpoint.
struct RunConfig {
  // architecture / data shape (hashed)
  uint64_t seed = 1;
  size_t expr_dim = 10;
  size_t audio_dim = 64;
  size_t au_dim = 17;
  size_t id_dim = 512;
  size_t hidden = 64;
  size_t layers = 2;
  size_t heads = 4;
  size_t adain_hidden = 32;
  size_t head_hidden = 64;
  size_t gate_hidden = 32;
  size_t gaussians = 2000;
  size_t sh_degree = 0;
  size_t window = 25;
  double mouth_radius = 0.55;
  uint64_t cloud_seed = 77;

  // training (not hashed)
  size_t pretrain_iters = 6000;
  size_t adapt_iters = 1500;
  size_t stage1_iters = 1000;
  double lr_pretrain = 5e-3;   // paper default
  double lr_adapt = 5e-4;      // paper default
  double lr_decay_final = 1.0; // exponential decay to this fraction
  double weight_decay = 1e-2;
  double lambda_dssim = 0.2;   // paper default
  double lambda_depth = 1e-2;  // paper default
  double lambda_normal = 1e-3; // paper default
  double lambda_kl = 1.0;
  double lambda_score = 1.0;
  size_t frames_per_iter = 2;  // rendered frames per iteration
  double holdout_frac = 0.2;
  bool adapt_appearance = false;
  int threads = 1;
  size_t report_every = 100;

  static RunConfig parse(const std::string& text);
  static RunConfig load(const std::string& path);

  std::string to_text() const;       // full canonical dump
  uint64_t arch_hash() const;        // FNV-1a over the architecture subset
};

}  // namespace etg
