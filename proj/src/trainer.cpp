#include "etg/trainer.h"

#include <chrono>
#include <cmath>
#include <cstring>
#include <filesystem>
#include <optional>
#include <sstream>

#include "etg/common.h"
#include "etg/grmn.h"
#include "etg/io.h"
#include "etg/losses.h"
#include "etg/metrics.h"
#include "etg/render.h"
#include "etg/rng.h"

namespace etg {

namespace {

namespace fs = std::filesystem;
using ad::Tape;
using ad::ValueRef;

Tensor slice_rows_plain(const Tensor& t, size_t r0, size_t r1) {
  const size_t cols = t.dim(1);
  std::vector<double> d(t.data() + r0 * cols, t.data() + r1 * cols);
  return Tensor({r1 - r0, cols}, std::move(d));
}

GrmnConfig grmn_config_from(const RunConfig& cfg, size_t mouth_count) {
  GrmnConfig g;
  g.audio_dim = cfg.audio_dim;
  g.au_dim = cfg.au_dim;
  g.id_dim = cfg.id_dim;
  g.hidden = cfg.hidden;
  g.layers = cfg.layers;
  g.heads = cfg.heads;
  g.expr_dim = cfg.expr_dim;
  g.mouth_count = mouth_count;
  g.adain_hidden = cfg.adain_hidden;
  g.head_hidden = cfg.head_hidden;
  g.gate_hidden = cfg.gate_hidden;
  return g;
}

struct IdentityData {
  ManifestIdentity meta;
  HeadModelAssets head;
  Tensor audio, aus, id_embed;
  TeacherSignals teacher;
  Camera ref_camera;
  std::vector<Camera> cameras;
  std::vector<Tensor> images;
  std::vector<std::optional<Tensor>> poses;
  std::vector<Tensor> depth_gt;
  std::vector<Tensor> normal_gt;
  Mesh rest_mesh;
};

IdentityData load_identity(const ManifestIdentity& mi, const RunConfig& cfg,
                           bool need_pseudo_gt) {
  IdentityData d;
  d.meta = mi;
  d.head = load_head_model(mi.head_model);
  if (d.head.expr_dim() != cfg.expr_dim)
    throw ValidationError("trainer: identity '" + mi.id + "' head model has " +
                          std::to_string(d.head.expr_dim()) +
                          " expression components, config wants " +
                          std::to_string(cfg.expr_dim));
  d.audio = io::read_tensor(mi.audio);
  d.aus = io::read_tensor(mi.au);
  d.id_embed = io::read_tensor(mi.identity_embedding);
  if (d.audio.dim(1) != cfg.audio_dim || d.aus.dim(1) != cfg.au_dim ||
      d.id_embed.size() != cfg.id_dim)
    throw ValidationError("trainer: identity '" + mi.id +
                          "' feature widths disagree with the config");
  d.teacher.p_emo = io::read_tensor(mi.teacher_probs);
  {
    const Tensor e = io::read_tensor(mi.teacher_score);
    d.teacher.e = Tensor({e.dim(0), 1},
                         std::vector<double>(e.data(), e.data() + e.size()));
  }
  d.teacher.present.assign(mi.frames, 1);
  if (!mi.teacher_mask.empty()) {
    const Tensor m = io::read_tensor(mi.teacher_mask);
    if (m.size() != mi.frames)
      throw ValidationError("trainer: teacher mask length mismatch");
    for (size_t t = 0; t < mi.frames; ++t)
      d.teacher.present[t] = m[t] != 0.0;
  }
  d.teacher.validate();
  d.ref_camera = Camera::from_tensor(io::read_tensor(mi.ref_camera));
  d.cameras.reserve(mi.frames);
  d.images.reserve(mi.frames);
  d.poses.resize(mi.frames);
  for (size_t t = 0; t < mi.frames; ++t) {
    d.cameras.push_back(Camera::from_tensor(
        io::read_tensor(mi.frame_path(mi.camera_dir, "cam", t))));
    d.images.push_back(io::read_tensor(mi.frame_path(mi.image_dir, "frame", t)));
    if (mi.has_pose()) {
      const std::string p = mi.frame_path(mi.pose_dir, "pose", t);
      if (fs::exists(p)) d.poses[t] = io::read_tensor(p);
    }
  }
  if (need_pseudo_gt) {
    if (!mi.has_pseudo_gt())
      throw ValidationError(
          "trainer: geometric loss weights are nonzero but identity '" +
          mi.id + "' provides no pseudo-GT depth/normal files");
    for (size_t t = 0; t < mi.frames; ++t) {
      d.depth_gt.push_back(
          io::read_tensor(mi.frame_path(mi.depth_dir, "depth", t)));
      d.normal_gt.push_back(
          io::read_tensor(mi.frame_path(mi.normal_dir, "normal", t)));
    }
  }
  d.rest_mesh = deform_mesh(d.head, {Tensor({cfg.expr_dim})}, {Vec3{}});
  return d;
}

void extend_sh(Tensor& sh, size_t bands) {
  if (sh.dim(2) == bands) return;
  const size_t m = sh.dim(0);
  Tensor out({m, 3, bands});
  for (size_t i = 0; i < m; ++i)
    for (size_t c = 0; c < 3; ++c)
      out[(i * 3 + c) * bands] = sh[(i * 3 + c) * sh.dim(2)];
  sh = std::move(out);
}

void init_cloud_params(ParamStore& store, const std::string& id,
                       GaussianCloud cloud, size_t bands) {
  extend_sh(cloud.sh_l, bands);
  const std::string p = "cloud/" + id + "/";
  store.create(p + "mu_l", std::move(cloud.mu_l));
  store.create(p + "rot_l", std::move(cloud.rot_l));
  store.create(p + "scale_l", std::move(cloud.scale_l));
  store.create(p + "alpha_l", std::move(cloud.alpha_l));
  store.create(p + "sh_l", std::move(cloud.sh_l));
}

struct CloudRefs {
  ValueRef mu_l, rot_l, scale_l, alpha_l, sh_l;
};

CloudRefs cloud_refs(Tape& t, ParamStore& store, const std::string& id) {
  const std::string p = "cloud/" + id + "/";
  return {t.param(p + "mu_l", &store.at(p + "mu_l").value),
          t.param(p + "rot_l", &store.at(p + "rot_l").value),
          t.param(p + "scale_l", &store.at(p + "scale_l").value),
          t.param(p + "alpha_l", &store.at(p + "alpha_l").value),
          t.param(p + "sh_l", &store.at(p + "sh_l").value)};
}

// Shared training state for both phases.
struct TrainerState {
  RunConfig cfg;
  GrmnConfig gcfg;
  ParamStore store;
  std::map<std::string, CloudBinding> bindings;
  std::map<std::string, IdentityData> data;
  std::vector<std::string> order;  // manifest order for sampling
  Rng rng{1};
  uint64_t iteration = 0;
  std::ostringstream report;
  double loss_avg = 0.0;
  size_t loss_count = 0;

  const IdentityData& ident(const std::string& id) const { return data.at(id); }
};

void apply_phase(TrainerState& st, Phase phase, const std::string& adapt_id) {
  const auto mask =
      set_trainable(st.store, phase, adapt_id, st.cfg.adapt_appearance);
  for (auto& [name, entry] : st.store.entries())
    entry.trainable = mask.at(name);
}

// Post-step projections keep the cloud attributes inside their invariants.
void project_cloud_params(ParamStore& store, const std::string& name) {
  if (name.rfind("cloud/", 0) != 0) return;
  Tensor& v = store.at(name).value;
  if (name.size() >= 6 && name.compare(name.size() - 6, 6, "/rot_l") == 0) {
    const size_t m = v.dim(0);
    for (size_t i = 0; i < m; ++i) {
      double n = 0.0;
      for (int c = 0; c < 4; ++c) n += v[i * 4 + c] * v[i * 4 + c];
      n = std::sqrt(n);
      if (n < 1e-12) {
        v[i * 4] = 1.0;
        v[i * 4 + 1] = v[i * 4 + 2] = v[i * 4 + 3] = 0.0;
      } else {
        for (int c = 0; c < 4; ++c) v[i * 4 + c] /= n;
      }
    }
  } else if (name.size() >= 8 &&
             name.compare(name.size() - 8, 8, "/scale_l") == 0) {
    for (size_t i = 0; i < v.size(); ++i) v[i] = std::max(v[i], 1e-6);
  } else if (name.size() >= 8 &&
             name.compare(name.size() - 8, 8, "/alpha_l") == 0) {
    for (size_t i = 0; i < v.size(); ++i)
      v[i] = std::clamp(v[i], 1e-3, 1.0 - 1e-3);
  }
}

void optimizer_step(TrainerState& st, Tape& tape, double lr,
                    const char* where) {
  AdamWConfig acfg;
  acfg.lr = lr;
  acfg.weight_decay = st.cfg.weight_decay;
  for (const auto& [name, ref] : tape.params()) {
    (void)ref;
    ParamStore::Entry& e = st.store.at(name);
    if (!e.trainable) continue;
    const Tensor g = tape.param_grad(name);
    try {
      adamw_step(e.opt, e.value, g, acfg);
    } catch (const NumericError& err) {
      throw NumericError(std::string(err.what()) + " (iteration " +
                         std::to_string(st.iteration) + ", " + where +
                         ", parameter " + name + ")");
    }
    project_cloud_params(st.store, name);
  }
}

struct FrameRender {
  RenderRefs refs;
  ValueRef loss;
};

// deform -> rig -> (residual) -> render -> L_Render for one frame.
FrameRender render_frame_loss(TrainerState& st, Tape& tape,
                              const std::string& id, size_t frame,
                              std::optional<ValueRef> face_row,
                              std::optional<ValueRef> mouth_row) {
  const IdentityData& d = st.ident(id);
  const CloudBinding& binding = st.bindings.at(id);
  const GaussianCloud topo = binding.topology();
  CloudRefs attrs = cloud_refs(tape, st.store, id);

  ValueRef verts;
  if (face_row) {
    const size_t K = st.cfg.expr_dim;
    ValueRef psi = tape.reshape(tape.slice_cols(*face_row, 0, K), {K});
    ValueRef jaw = tape.reshape(tape.slice_cols(*face_row, K, K + 3), {3});
    verts = deform_mesh_op(tape, d.head, psi, jaw);
  } else {
    verts = tape.constant(d.rest_mesh.vertices);
  }
  if (d.poses[frame]) {
    const Tensor& p = *d.poses[frame];
    const Mat3 r = rodrigues({p[0], p[1], p[2]});
    verts = rigid_transform_op(tape, verts, r, {p[3], p[4], p[5]});
  }
  RigOutputs rig =
      rig_to_global_op(tape, topo, d.head.faces, verts, attrs.mu_l,
                       attrs.rot_l, attrs.scale_l);
  ValueRef mu = rig.mu, rot = rig.rot, scale = rig.scale;
  if (mouth_row) {
    ResidualOutputs res = apply_mouth_residual_op(
        tape, binding.mouth_mask, rig.mu, rig.rot, rig.scale, *mouth_row);
    mu = res.mu;
    rot = res.rot;
    scale = res.scale;
  }
  RenderOptions ropts;
  ropts.threads = st.cfg.threads;
  FrameRender out;
  out.refs = render_op(tape, d.cameras[frame], mu, rot, scale, attrs.alpha_l,
                       attrs.sh_l, ropts);
  out.loss = loss_render_op(tape, out.refs.color, d.images[frame],
                            st.cfg.lambda_dssim);
  return out;
}

TeacherSignals teacher_window(const TeacherSignals& t, size_t w0, size_t w1) {
  TeacherSignals out;
  out.p_emo = slice_rows_plain(t.p_emo, w0, w1);
  out.e = slice_rows_plain(t.e, w0, w1);
  out.present.assign(t.present.begin() + w0, t.present.begin() + w1);
  return out;
}

size_t train_frames(const TrainerState& st, const std::string& id) {
  const size_t frames = st.ident(id).meta.frames;
  size_t n = size_t(std::floor(double(frames) * (1.0 - st.cfg.holdout_frac)));
  return std::max<size_t>(n, 1);
}

// One joint-phase iteration (pretrain stage 2 or adaptation).
void joint_iteration(TrainerState& st, const std::string& id, double lr,
                     TrainPhase phase) {
  const IdentityData& d = st.ident(id);
  const size_t usable = train_frames(st, id);
  const size_t W = std::min(st.cfg.window, usable);
  const size_t wstart = st.rng.below(usable - W + 1);
  std::vector<size_t> rendered;
  for (size_t i = 0; i < st.cfg.frames_per_iter; ++i)
    rendered.push_back(wstart + st.rng.below(W));

  Tape tape;
  const Tensor audio_w = slice_rows_plain(d.audio, wstart, wstart + W);
  const Tensor aus_w = slice_rows_plain(d.aus, wstart, wstart + W);
  WindowRefs motion =
      grmn_window_op(tape, st.store, st.gcfg, id, audio_w, aus_w, d.id_embed);
  const TeacherSignals teach = teacher_window(d.teacher, wstart, wstart + W);

  LossParts parts;
  parts.kl = loss_kl_op(tape, motion.z_e, teach);
  parts.score = loss_score_op(tape, motion.gate, teach);

  ValueRef render_acc;
  ValueRef geo_acc;
  bool have_geo = false;
  const bool want_geo =
      phase == TrainPhase::kAdapt &&
      (st.cfg.lambda_depth > 0.0 || st.cfg.lambda_normal > 0.0);
  for (size_t i = 0; i < rendered.size(); ++i) {
    const size_t frame = rendered[i];
    const size_t off = frame - wstart;
    ValueRef face_row = tape.slice_rows(motion.face, off, off + 1);
    ValueRef mouth_row = mouth_row_op(tape, st.store, st.gcfg, motion, off);
    FrameRender fr =
        render_frame_loss(st, tape, id, frame, face_row, mouth_row);
    render_acc = i == 0 ? fr.loss : tape.add(render_acc, fr.loss);

    if (want_geo) {
      const Tensor& dgt = d.depth_gt[frame];
      const Tensor& ngt = d.normal_gt[frame];
      Tensor valid;
      ValueRef normals = depth_to_normals_op(
          tape, fr.refs.depth, d.cameras[frame],
          tape.val(fr.refs.alpha), 0.5, &valid);
      // joint mask: rendered normals valid and the pseudo-GT is foreground
      Tensor mask = valid;
      size_t live = 0;
      for (size_t p = 0; p < mask.size(); ++p) {
        const bool gt_ok =
            dgt[p] < 0.5 * kFarDepth &&
            (ngt[p * 3] != 0.0 || ngt[p * 3 + 1] != 0.0 || ngt[p * 3 + 2] != 0.0);
        mask[p] = (mask[p] != 0.0 && gt_ok) ? 1.0 : 0.0;
        live += mask[p] != 0.0;
      }
      if (live > 0) {
        ValueRef g =
            loss_geo_op(tape, fr.refs.depth, normals, dgt, ngt, mask,
                        st.cfg.lambda_depth, st.cfg.lambda_normal);
        geo_acc = have_geo ? tape.add(geo_acc, g) : g;
        have_geo = true;
      }
    }
  }
  parts.render = tape.scale(render_acc, 1.0 / double(rendered.size()));
  if (have_geo) {
    parts.geo = tape.scale(geo_acc, 1.0 / double(rendered.size()));
    parts.has_geo = true;
  }
  LossWeights weights;
  weights.dssim = st.cfg.lambda_dssim;
  weights.depth = st.cfg.lambda_depth;
  weights.normal = st.cfg.lambda_normal;
  weights.kl = st.cfg.lambda_kl;
  weights.score = st.cfg.lambda_score;
  ValueRef total = total_loss_op(tape, parts, phase, weights);
  const double loss_value = tape.val(total)[0];
  tape.backward(total);
  optimizer_step(st, tape, lr,
                 ("identity " + id + " window@" + std::to_string(wstart))
                     .c_str());
  st.loss_avg += loss_value;
  st.loss_count += 1;
}

void stage1_iteration(TrainerState& st, const std::string& id, double lr) {
  const IdentityData& d = st.ident(id);
  const size_t rest_len = d.meta.rest_end - d.meta.rest_begin + 1;
  const size_t frame = d.meta.rest_begin + st.rng.below(rest_len);
  Tape tape;
  FrameRender fr =
      render_frame_loss(st, tape, id, frame, std::nullopt, std::nullopt);
  const double loss_value = tape.val(fr.loss)[0];
  tape.backward(fr.loss);
  optimizer_step(st, tape, lr,
                 ("identity " + id + " rest frame " + std::to_string(frame))
                     .c_str());
  st.loss_avg += loss_value;
  st.loss_count += 1;
}

void report_progress(TrainerState& st, const char* tag) {
  if (st.iteration % st.cfg.report_every != 0 || st.loss_count == 0) return;
  st.report << tag << " iter " << st.iteration << " loss "
            << st.loss_avg / double(st.loss_count) << "\n";
  st.loss_avg = 0.0;
  st.loss_count = 0;
}

double lr_at(const RunConfig& cfg, double base, uint64_t it, uint64_t total) {
  if (cfg.lr_decay_final >= 1.0 || total == 0) return base;
  const double progress = double(it) / double(total);
  return base * std::pow(cfg.lr_decay_final, progress);
}

Checkpoint make_checkpoint(const TrainerState& st, const std::string& phase) {
  Checkpoint ck;
  ck.iteration = st.iteration;
  ck.seed = st.cfg.seed;
  ck.config_hash = st.cfg.arch_hash();
  ck.config_text = st.cfg.to_text();
  ck.phase = phase;
  ck.rng_state = st.rng.save_state();
  ck.params = st.store;
  ck.bindings = st.bindings;
  ck.mouth_count = st.gcfg.mouth_count;
  for (const auto& [id, d] : st.data) {
    ck.head_models[id] = d.meta.head_model;
    ck.id_embeds[id] = d.id_embed;
  }
  return ck;
}

void write_report(const TrainerState& st, const std::string& out_path,
                  const char* phase, double base_lr, size_t iters,
                  double wall_seconds) {
  std::ostringstream os;
  os << "run report (" << phase << ")\n";
  os << "iterations = " << iters << "\n";
  os << "learning_rate = " << base_lr << " (paper default "
     << (std::string(phase) == "pretrain" ? "5e-3" : "5e-4") << ", matches: "
     << ((std::string(phase) == "pretrain" ? base_lr == 5e-3 : base_lr == 5e-4)
             ? "yes"
             : "no")
     << ")\n";
  os << "curriculum_stage1_iters = " << st.cfg.stage1_iters
     << " (paper default 1000, matches: "
     << (st.cfg.stage1_iters == 1000 ? "yes" : "no") << ")\n";
  os << "loss_weights: dssim = " << st.cfg.lambda_dssim
     << " depth = " << st.cfg.lambda_depth
     << " normal = " << st.cfg.lambda_normal << "\n";
  os << "wall_seconds = " << wall_seconds << "\n";
  os << "-- config --\n" << st.cfg.to_text();
  os << "-- loss trace --\n" << st.report.str();
  io::atomic_write_text(out_path, os.str());
}

}  // namespace

std::map<std::string, bool> set_trainable(const ParamStore& params,
                                          Phase phase,
                                          const std::string& adapt_identity,
                                          bool adapt_appearance) {
  std::map<std::string, bool> mask;
  for (const auto& [name, entry] : params.entries()) {
    (void)entry;
    bool on = false;
    switch (phase) {
      case Phase::kPretrainStage1:
        on = name.rfind("cloud/", 0) == 0;
        break;
      case Phase::kPretrainStage2:
        on = true;
        break;
      case Phase::kAdapt: {
        if (adapt_identity.empty())
          throw ValidationError("set_trainable: adapt needs an identity");
        const std::string adain = "adain/" + adapt_identity + "/";
        const std::string cloud = "cloud/" + adapt_identity + "/";
        on = name.rfind(adain, 0) == 0 ||
             (adapt_appearance && name.rfind(cloud, 0) == 0);
        break;
      }
    }
    mask[name] = on;
  }
  return mask;
}

Checkpoint pretrain(const TrainingManifest& manifest, const RunConfig& cfg,
                    const std::string& out_path,
                    const std::string& resume_from) {
  manifest.validate();
  if (manifest.identities.size() < 2)
    throw ValidationError("pretrain: need at least 2 identities");

  const auto t_start = std::chrono::steady_clock::now();
  TrainerState st;
  st.cfg = cfg;
  st.rng = Rng(cfg.seed);

  for (const ManifestIdentity& mi : manifest.identities) {
    st.order.push_back(mi.id);
    st.data.emplace(mi.id, load_identity(mi, cfg, false));
  }

  // intra-oral region from the reference identity, shared binding topology
  const IdentityData& ref = st.ident(st.order.front());
  const Tensor landmarks = io::read_tensor(ref.meta.landmarks);
  GaussianCloud ref_cloud =
      sample_bindings(ref.rest_mesh, cfg.gaussians, cfg.cloud_seed);
  auto anchors = anchor_landmarks(landmarks, ref.ref_camera, ref.rest_mesh);
  std::vector<LandmarkAnchor> seeds;
  for (const auto& a : anchors)
    if (a) seeds.push_back(*a);
  if (seeds.empty())
    throw ValidationError("pretrain: no mouth landmark hit the mesh");
  const std::vector<uint8_t> mouth_mask =
      select_mouth_region(ref.rest_mesh, ref_cloud, seeds, cfg.mouth_radius);
  const size_t bands = sh_basis_size(int(cfg.sh_degree));

  st.gcfg = grmn_config_from(cfg, [&mouth_mask] {
    size_t n = 0;
    for (uint8_t m : mouth_mask) n += m != 0;
    return n;
  }());

  if (resume_from.empty()) {
    Rng init_rng = Rng(cfg.seed).fork(1);
    init_grmn_params(st.store, st.gcfg, init_rng);
    for (const std::string& id : st.order) {
      Rng arng = Rng(cfg.seed).fork(1000 + std::hash<std::string>{}(id));
      init_adain_params(st.store, st.gcfg, id, arng);
      GaussianCloud cloud = sample_bindings(st.ident(id).rest_mesh,
                                            cfg.gaussians, cfg.cloud_seed);
      cloud.mouth_mask = mouth_mask;
      CloudBinding binding;
      binding.parent_tri = cloud.parent_tri;
      binding.bary = cloud.bary;
      binding.mouth_mask = mouth_mask;
      st.bindings.emplace(id, std::move(binding));
      init_cloud_params(st.store, id, std::move(cloud), bands);
    }
  } else {
    Checkpoint ck = Checkpoint::load(resume_from);
    if (ck.config_hash != cfg.arch_hash())
      throw ValidationError(
          "pretrain resume: config hash mismatch between checkpoint and "
          "supplied config");
    st.store = std::move(ck.params);
    st.bindings = std::move(ck.bindings);
    st.rng.restore_state(ck.rng_state);
    st.iteration = ck.iteration;
    st.gcfg.mouth_count = ck.mouth_count;
  }

  const uint64_t stage1_end =
      std::min<uint64_t>(cfg.stage1_iters, cfg.pretrain_iters);
  while (st.iteration < cfg.pretrain_iters) {
    const bool stage1 = st.iteration < stage1_end;
    apply_phase(st, stage1 ? Phase::kPretrainStage1 : Phase::kPretrainStage2,
                "");
    const double lr =
        lr_at(cfg, cfg.lr_pretrain, st.iteration, cfg.pretrain_iters);
    const std::string id = st.order[st.rng.below(st.order.size())];
    if (stage1)
      stage1_iteration(st, id, lr);
    else
      joint_iteration(st, id, lr, TrainPhase::kPretrain);
    st.iteration += 1;
    report_progress(st, "pretrain");
  }

  Checkpoint ck = make_checkpoint(st, "pretrain");
  ck.save(out_path);
  const double wall =
      std::chrono::duration<double>(std::chrono::steady_clock::now() - t_start)
          .count();
  write_report(st, out_path + ".report.txt", "pretrain", cfg.lr_pretrain,
               cfg.pretrain_iters, wall);
  return ck;
}

Checkpoint adapt(const Checkpoint& pretrained, const TrainingManifest& clip,
                 const std::string& identity, const RunConfig& cfg,
                 const std::string& out_path) {
  clip.validate();
  if (pretrained.config_hash != cfg.arch_hash())
    throw ValidationError(
        "adapt: config hash mismatch between checkpoint and supplied config");
  const auto t_start = std::chrono::steady_clock::now();

  const ManifestIdentity& mi = clip.find(identity);
  const bool want_geo = cfg.lambda_depth > 0.0 || cfg.lambda_normal > 0.0;

  TrainerState st;
  st.cfg = cfg;
  st.rng = Rng(cfg.seed ^ 0xadaf7ull);
  st.order = {identity};
  st.data.emplace(identity, load_identity(mi, cfg, want_geo));
  st.store = pretrained.params;
  st.bindings = pretrained.bindings;
  st.gcfg = grmn_config_from(cfg, pretrained.mouth_count);

  // snapshot for the freezing guarantee
  std::map<std::string, Tensor> before;
  for (const auto& [name, e] : st.store.entries()) before[name] = e.value;

  const size_t bands = sh_basis_size(int(cfg.sh_degree));
  if (!st.bindings.count(identity)) {
    // fresh identity: same binding topology (same seed and face layout),
    // intra-oral mask carried over from the pretrained reference binding
    GaussianCloud cloud = sample_bindings(st.ident(identity).rest_mesh,
                                          cfg.gaussians, cfg.cloud_seed);
    const CloudBinding& ref = st.bindings.begin()->second;
    if (ref.mouth_mask.size() != cloud.size())
      throw ValidationError("adapt: binding size mismatch with checkpoint");
    cloud.mouth_mask = ref.mouth_mask;
    CloudBinding binding;
    binding.parent_tri = cloud.parent_tri;
    binding.bary = cloud.bary;
    binding.mouth_mask = ref.mouth_mask;
    st.bindings.emplace(identity, std::move(binding));
    init_cloud_params(st.store, identity, std::move(cloud), bands);

    // warm-start the new identity's modulation from the pretrained mean
    Rng arng = Rng(cfg.seed).fork(7777);
    init_adain_params(st.store, st.gcfg, identity, arng);
    std::vector<std::string> prev;
    for (const auto& [id, b] : pretrained.bindings) {
      (void)b;
      prev.push_back(id);
    }
    for (const char* stream : {"audio", "au"}) {
      for (const char* leaf :
           {"/fc1/w", "/fc1/b", "/fc2/w", "/fc2/b"}) {
        Tensor& dst = st.store
                          .at("adain/" + identity + "/" + stream + leaf)
                          .value;
        for (size_t i = 0; i < dst.size(); ++i) dst[i] = 0.0;
        for (const std::string& id : prev) {
          const Tensor& src =
              st.store.at("adain/" + id + "/" + stream + leaf).value;
          for (size_t i = 0; i < dst.size(); ++i)
            dst[i] += src[i] / double(prev.size());
        }
      }
    }
  }

  apply_phase(st, Phase::kAdapt, identity);
  while (st.iteration < cfg.adapt_iters) {
    const double lr = lr_at(cfg, cfg.lr_adapt, st.iteration, cfg.adapt_iters);
    joint_iteration(st, identity, lr, TrainPhase::kAdapt);
    st.iteration += 1;
    report_progress(st, "adapt");
  }

  // every frozen parameter must be bitwise unchanged
  const auto mask = set_trainable(st.store, Phase::kAdapt, identity,
                                  cfg.adapt_appearance);
  for (const auto& [name, e] : st.store.entries()) {
    if (mask.at(name)) continue;
    auto it = before.find(name);
    if (it == before.end()) continue;  // created during adapt
    if (e.value.size() != it->second.size() ||
        std::memcmp(e.value.data(), it->second.data(),
                    e.value.size() * sizeof(double)) != 0)
      throw NumericError("adapt: frozen parameter '" + name + "' changed");
  }

  Checkpoint ck = make_checkpoint(st, "adapt");
  // keep the pretrained identities' heads/embeddings in the container
  for (const auto& [id, p] : pretrained.head_models)
    if (!ck.head_models.count(id)) ck.head_models[id] = p;
  for (const auto& [id, e] : pretrained.id_embeds)
    if (!ck.id_embeds.count(id)) ck.id_embeds[id] = e;
  ck.save(out_path);
  const double wall =
      std::chrono::duration<double>(std::chrono::steady_clock::now() - t_start)
          .count();
  write_report(st, out_path + ".report.txt", "adapt", cfg.lr_adapt,
               cfg.adapt_iters, wall);
  return ck;
}

void infer(const Checkpoint& ck, const InferInputs& in, const RunConfig& cfg,
           const std::string& out_dir) {
  if (ck.config_hash != cfg.arch_hash())
    throw ValidationError(
        "infer: config hash mismatch between checkpoint and supplied config");
  std::string identity = in.identity;
  if (identity.empty()) identity = ck.identities().back();
  if (!ck.bindings.count(identity))
    throw ValidationError("infer: identity '" + identity +
                          "' not present in the checkpoint");

  const Tensor audio = io::read_tensor(in.audio_path);
  const Tensor aus_raw = io::read_tensor(in.au_path);
  if (audio.dim(1) != cfg.audio_dim || aus_raw.dim(1) != cfg.au_dim)
    throw ValidationError("infer: feature widths disagree with the config");
  const Camera cam = Camera::from_tensor(io::read_tensor(in.camera_path));
  const size_t T = audio.dim(0);

  std::ostringstream log;
  // AU cues loop when shorter than the driving audio
  Tensor aus({T, cfg.au_dim});
  if (aus_raw.dim(0) < T)
    log << "# au sequence shorter than audio (" << aus_raw.dim(0) << " < " << T
        << "); looping\n";
  for (size_t t = 0; t < T; ++t)
    for (size_t cix = 0; cix < cfg.au_dim; ++cix)
      aus[t * cfg.au_dim + cix] =
          aus_raw[(t % aus_raw.dim(0)) * cfg.au_dim + cix];

  std::vector<Tensor> poses;
  if (!in.pose_dir.empty()) {
    for (size_t t = 0;; ++t) {
      const std::string p = in.pose_dir + "/" + frame_file_name("pose", t);
      if (!fs::exists(p)) break;
      poses.push_back(io::read_tensor(p));
    }
    if (!poses.empty() && poses.size() < T)
      log << "# pose sequence shorter than audio (" << poses.size() << " < "
          << T << "); looping\n";
  }

  const HeadModelAssets head = load_head_model(ck.head_models.at(identity));
  const GaussianCloud cloud = ck.assemble_cloud(identity);
  const Tensor& id_embed = ck.id_embeds.at(identity);
  const GrmnConfig gcfg = grmn_config_from(cfg, ck.mouth_count);
  ParamStore& store = const_cast<ParamStore&>(ck.params);

  fs::create_directories(out_dir);
  log << "# frame gate emotion\n";
  const RenderOptions ropts{cfg.threads};

  const size_t W = std::max<size_t>(cfg.window, 1);
  for (size_t w0 = 0; w0 < T; w0 += W) {
    const size_t w1 = std::min(w0 + W, T);
    Tape tape;
    const Tensor audio_w = slice_rows_plain(audio, w0, w1);
    const Tensor aus_w = slice_rows_plain(aus, w0, w1);
    MotionRefs motion =
        grmn_forward_op(tape, store, gcfg, identity, audio_w, aus_w, id_embed);
    const Tensor face = tape.val(motion.face);
    const Tensor mouth = tape.val(motion.mouth);
    const Tensor gate = tape.val(motion.gate);
    const Tensor z = tape.val(motion.z_e);
    const Tensor face_base = tape.val(motion.face_base);
    const Tensor face_res = tape.val(motion.face_residual);
    for (size_t off = 0; off < w1 - w0; ++off) {
      const size_t t = w0 + off;
      // MotionOutput invariant: fused = base + g * residual
      for (size_t c2 = 0; c2 < gcfg.face_dim(); ++c2) {
        const double expect = face_base[off * gcfg.face_dim() + c2] +
                              gate[off] * face_res[off * gcfg.face_dim() + c2];
        if (std::fabs(face[off * gcfg.face_dim() + c2] - expect) > 1e-12)
          throw NumericError("infer: fused motion violates the gate identity");
      }
      Tensor psi({cfg.expr_dim});
      for (size_t k = 0; k < cfg.expr_dim; ++k)
        psi[k] = face[off * gcfg.face_dim() + k];
      const Vec3 jaw{face[off * gcfg.face_dim() + cfg.expr_dim],
                     face[off * gcfg.face_dim() + cfg.expr_dim + 1],
                     face[off * gcfg.face_dim() + cfg.expr_dim + 2]};
      Mesh mesh = deform_mesh(head, {psi}, {jaw});
      if (!poses.empty()) {
        const Tensor& p = poses[t % poses.size()];
        mesh.vertices = rigid_transform(
            mesh.vertices, rodrigues({p[0], p[1], p[2]}), {p[3], p[4], p[5]});
      }
      GlobalCloud globals = rig_to_global(cloud, mesh);
      Tensor residual({gcfg.mouth_count, 9});
      for (size_t i = 0; i < residual.size(); ++i)
        residual[i] = mouth[off * gcfg.mouth_dim() + i];
      apply_mouth_residual(globals, cloud.mouth_mask, residual);
      const RenderOutput outp = render(globals, cam, ropts);
      io::write_tensor(out_dir + "/" + frame_file_name("frame", t),
                       outp.color);
      io::write_png_from_tensor(
          out_dir + "/frame_" + [t] {
            char b[16];
            std::snprintf(b, sizeof(b), "%05zu", t);
            return std::string(b);
          }() + ".png",
          outp.color);
      if (!head.landmark_vertices.empty()) {
        Tensor lms({head.landmark_vertices.size(), 2});
        for (size_t l = 0; l < head.landmark_vertices.size(); ++l) {
          const Vec3 v = mesh.vertex(head.landmark_vertices[l]);
          const Vec3 pc = cam.to_camera(v);
          lms[l * 2] = cam.fx * pc.x / pc.z + cam.cx;
          lms[l * 2 + 1] = cam.fy * pc.y / pc.z + cam.cy;
        }
        io::write_tensor(out_dir + "/" + frame_file_name("lm", t), lms);
      }
      size_t argmax = 0;
      for (size_t c2 = 1; c2 < 7; ++c2)
        if (z[off * 7 + c2] > z[off * 7 + argmax]) argmax = c2;
      log << t << " " << gate[off] << " " << kEmotionNames[argmax] << "\n";
    }
  }
  io::atomic_write_text(out_dir + "/motion_log.txt", log.str());
}

}  // namespace etg
