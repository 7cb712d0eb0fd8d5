#pragma once

#include <map>
#include <string>

#include "etg/checkpoint.h"
#include "etg/config.h"
#include "etg/manifest.h"

namespace etg {

enum class Phase { kPretrainStage1, kPretrainStage2, kAdapt };

// Exhaustive trainability mask over every parameter in the store:
// stage 1 -> cloud attributes only; stage 2 -> everything; adapt -> the
// identity's modulation parameters (plus its cloud when appearance tuning
// is enabled).
std::map<std::string, bool> set_trainable(const ParamStore& params,
                                          Phase phase,
                                          const std::string& adapt_identity,
                                          bool adapt_appearance);

// Two-stage pretraining over a multi-identity corpus. resume_from may name
// a mid-run checkpoint (config hash must match). The run report is written
// next to the output path.
Checkpoint pretrain(const TrainingManifest& manifest, const RunConfig& cfg,
                    const std::string& out_path,
                    const std::string& resume_from = "");

// Few-shot personalization: freezes everything except the new identity's
// modulation parameters (and optionally its cloud attributes).
Checkpoint adapt(const Checkpoint& pretrained, const TrainingManifest& clip,
                 const std::string& identity, const RunConfig& cfg,
                 const std::string& out_path);

struct InferInputs {
  std::string audio_path;
  std::string au_path;
  std::string camera_path;
  std::string pose_dir;  // optional pose_%05d.etgt files
  std::string identity;
};

// Drives the adapted model with new audio plus auxiliary pose/expression
// cues; writes frame tensors, png previews, landmark projections and a
// per-frame gate/emotion log under out_dir.
void infer(const Checkpoint& ck, const InferInputs& in, const RunConfig& cfg,
           const std::string& out_dir);

}  // namespace etg
