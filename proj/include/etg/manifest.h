#pragma once

#include <string>
#include <vector>

#include "etg/tensor.h"

namespace etg {

// One identity's clip: feature files plus per-frame image/camera/pose files
// under directories with fixed zero-padded names.
struct ManifestIdentity {
  std::string id;
  std::string head_model;
  size_t frames = 0;
  std::string audio, au, identity_embedding;
  std::string teacher_probs, teacher_score, teacher_mask;  // mask optional
  std::string landmarks;   // Lx2 reference-frame pixels for mouth seeding
  std::string ref_camera;
  std::string camera_dir, image_dir;
  std::string pose_dir, depth_dir, normal_dir, lm_dir;  // optional
  size_t rest_begin = 0, rest_end = 0;  // inclusive rest-pose frame range

  std::string frame_path(const std::string& dir, const char* prefix,
                         size_t index) const;
  bool has_pose() const { return !pose_dir.empty(); }
  bool has_pseudo_gt() const { return !depth_dir.empty() && !normal_dir.empty(); }
};

struct TrainingManifest {
  double fps = 25.0;
  size_t resolution = 0;
  std::string base_dir;
  std::vector<ManifestIdentity> identities;

  static TrainingManifest load(const std::string& path);
  void save(const std::string& path) const;

  // Existence and length-alignment of every referenced file.
  void validate() const;

  const ManifestIdentity& find(const std::string& id) const;
};

std::string frame_file_name(const char* prefix, size_t index);

}  // namespace etg
