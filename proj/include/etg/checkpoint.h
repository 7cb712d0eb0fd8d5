#pragma once

#include <array>
#include <map>
#include <string>
#include <vector>

#include "etg/config.h"
#include "etg/optim.h"
#include "etg/rig.h"
#include "etg/tensor.h"

namespace etg {

// Fixed per-Gaussian binding of one identity's cloud; the trainable
// attributes live in the parameter store under cloud/<identity>/...
struct CloudBinding {
  std::vector<uint32_t> parent_tri;
  Tensor bary;  // M x 3
  std::vector<uint8_t> mouth_mask;

  size_t size() const { return parent_tri.size(); }
  size_t mouth_count() const;

  // Topology-only cloud for the rig op (attribute tensors left empty).
  GaussianCloud topology() const;
};

// Versioned training state container, magic "ETGC", little-endian. Loading
// then saving is byte-identical; resuming requires a matching config hash.
struct Checkpoint {
  uint64_t iteration = 0;
  uint64_t seed = 0;
  uint64_t config_hash = 0;
  std::string config_text;
  std::string phase;  // "pretrain" or "adapt"
  std::array<uint64_t, 6> rng_state{};
  ParamStore params;
  std::map<std::string, CloudBinding> bindings;     // identity -> binding
  std::map<std::string, std::string> head_models;   // identity -> asset path
  std::map<std::string, Tensor> id_embeds;          // identity -> embedding
  size_t mouth_count = 0;

  void save(const std::string& path) const;
  static Checkpoint load(const std::string& path);

  std::vector<std::string> identities() const;
  // Assembles a full GaussianCloud from binding + parameters.
  GaussianCloud assemble_cloud(const std::string& identity) const;
};

}  // namespace etg
