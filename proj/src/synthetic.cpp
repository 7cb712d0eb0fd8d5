#include "etg/synthetic.h"

#include <cmath>
#include <filesystem>
#include <sstream>

#include "etg/common.h"
#include "etg/grmn.h"
#include "etg/io.h"
#include "etg/losses.h"
#include "etg/render.h"
#include "etg/rig.h"
#include "etg/rng.h"

namespace etg {

namespace fs = std::filesystem;

namespace {

// lat-long sphere parameters chosen so the desk head lands on 469 vertices:
// 19*23 + 2 poles + 30 cavity vertices
constexpr size_t kRings = 19;
constexpr size_t kSegs = 23;
// mouth patch on the lower front: rows r0..r1, columns c0..c1 of the grid
constexpr size_t kPatchR0 = 11, kPatchR1 = 15;  // 4 cells tall
constexpr size_t kPatchC0 = 0, kPatchC1 = 5;    // 5 cells wide
constexpr double kCavityScale = 0.55;

size_t grid_index(size_t r, size_t c) { return r * kSegs + (c % kSegs); }

Vec3 sphere_point(size_t r, size_t c) {
  const double theta = M_PI * double(r + 1) / double(kRings + 1);
  // the mouth patch straddles phi = 0, which faces -z (toward the camera)
  const double phi =
      2.0 * M_PI * (double(c) - 2.5) / double(kSegs);
  return {std::sin(theta) * std::sin(phi), std::cos(theta),
          -std::sin(theta) * std::cos(phi)};
}

bool in_patch_cell(size_t r, size_t c) {
  return r >= kPatchR0 && r < kPatchR1 && c >= kPatchC0 && c < kPatchC1;
}

}  // namespace

HeadModelAssets build_synthetic_head(size_t expr_dim, uint64_t seed,
                                     double jitter) {
  Rng rng(seed);
  const size_t grid = kRings * kSegs;
  const size_t top = grid, bottom = grid + 1;
  const size_t patch_rows = kPatchR1 - kPatchR0 + 1;  // 5
  const size_t patch_cols = kPatchC1 - kPatchC0 + 1;  // 6
  const size_t cavity0 = grid + 2;
  const size_t n = grid + 2 + patch_rows * patch_cols;  // 469 at desk scale

  Tensor verts({n, 3});
  auto set = [&verts](size_t i, const Vec3& p) {
    verts[i * 3] = p.x;
    verts[i * 3 + 1] = p.y;
    verts[i * 3 + 2] = p.z;
  };
  for (size_t r = 0; r < kRings; ++r)
    for (size_t c = 0; c < kSegs; ++c) set(grid_index(r, c), sphere_point(r, c));
  set(top, {0, 1, 0});
  set(bottom, {0, -1, 0});
  auto cavity_index = [&](size_t pr, size_t pc) {
    return cavity0 + pr * patch_cols + pc;
  };
  for (size_t pr = 0; pr < patch_rows; ++pr)
    for (size_t pc = 0; pc < patch_cols; ++pc) {
      const Vec3 outer = sphere_point(kPatchR0 + pr, kPatchC0 + pc);
      set(cavity_index(pr, pc), outer * kCavityScale);
    }

  // per-identity jitter: smooth low-frequency warp plus a global scale
  if (jitter > 0.0) {
    const double ax = rng.uniform(1.5, 3.0), ay = rng.uniform(1.5, 3.0),
                 az = rng.uniform(1.5, 3.0);
    const double px = rng.uniform(0, 6.28), py = rng.uniform(0, 6.28),
                 pz = rng.uniform(0, 6.28);
    const double scale = 1.0 + jitter * rng.uniform(-1.0, 1.0);
    for (size_t i = 0; i < n; ++i) {
      Vec3 p{verts[i * 3], verts[i * 3 + 1], verts[i * 3 + 2]};
      const Vec3 warp{std::sin(ay * p.y + px), std::sin(az * p.z + py),
                      std::sin(ax * p.x + pz)};
      p = (p + warp * jitter) * scale;
      set(i, p);
    }
  }

  // faces: sphere shell minus the patch interior, plus fans at the poles
  std::vector<uint32_t> faces;
  auto tri = [&faces](size_t a, size_t b, size_t c) {
    faces.push_back(uint32_t(a));
    faces.push_back(uint32_t(b));
    faces.push_back(uint32_t(c));
  };
  for (size_t c = 0; c < kSegs; ++c) {
    // outward winding: seen from outside the sphere
    tri(top, grid_index(0, c + 1), grid_index(0, c));
    tri(bottom, grid_index(kRings - 1, c), grid_index(kRings - 1, c + 1));
  }
  for (size_t r = 0; r + 1 < kRings; ++r)
    for (size_t c = 0; c < kSegs; ++c) {
      if (in_patch_cell(r, c)) continue;  // the mouth opening
      const size_t a = grid_index(r, c), b = grid_index(r, c + 1);
      const size_t d = grid_index(r + 1, c), e = grid_index(r + 1, c + 1);
      tri(a, b, d);
      tri(b, e, d);
    }
  // cavity back wall: radially outward like the shell, so it faces the
  // opening
  for (size_t pr = 0; pr + 1 < patch_rows; ++pr)
    for (size_t pc = 0; pc + 1 < patch_cols; ++pc) {
      const size_t a = cavity_index(pr, pc), b = cavity_index(pr, pc + 1);
      const size_t d = cavity_index(pr + 1, pc), e = cavity_index(pr + 1, pc + 1);
      tri(a, b, d);
      tri(b, e, d);
    }
  // side walls between the outer rim and the inner rim
  auto outer_of = [&](size_t pr, size_t pc) {
    return grid_index(kPatchR0 + pr, kPatchC0 + pc);
  };
  std::vector<std::pair<size_t, size_t>> rim;  // patch-grid coordinates
  for (size_t pc = 0; pc + 1 < patch_cols; ++pc) rim.push_back({0, pc});
  for (size_t pr = 0; pr + 1 < patch_rows; ++pr)
    rim.push_back({pr, patch_cols - 1});
  for (size_t pc = patch_cols - 1; pc > 0; --pc)
    rim.push_back({patch_rows - 1, pc});
  for (size_t pr = patch_rows - 1; pr > 0; --pr) rim.push_back({pr, 0});
  for (size_t i = 0; i < rim.size(); ++i) {
    const auto [r0, c0] = rim[i];
    const auto [r1, c1] = rim[(i + 1) % rim.size()];
    tri(outer_of(r0, c0), outer_of(r1, c1), cavity_index(r0, c0));
    tri(outer_of(r1, c1), cavity_index(r1, c1), cavity_index(r0, c0));
  }

  HeadModelAssets m;
  m.template_verts = std::move(verts);
  m.faces = std::make_shared<const std::vector<uint32_t>>(std::move(faces));

  // expression basis: components 0/1 act on the mouth, the rest are smooth
  // global fields
  Tensor basis({n, 3, expr_dim});
  const Vec3 mouth_center = sphere_point((kPatchR0 + kPatchR1) / 2,
                                         (kPatchC0 + kPatchC1) / 2);
  Rng brng(seed ^ 0x9e3779b97f4a7c15ull);
  std::vector<double> freq(expr_dim), phase(expr_dim);
  for (size_t k = 0; k < expr_dim; ++k) {
    freq[k] = brng.uniform(1.0, 3.0);
    phase[k] = brng.uniform(0.0, 6.28);
  }
  for (size_t i = 0; i < n; ++i) {
    const Vec3 p{m.template_verts[i * 3], m.template_verts[i * 3 + 1],
                 m.template_verts[i * 3 + 2]};
    const double mouth_w = std::exp(-4.0 * (p - mouth_center).dot(p - mouth_center));
    for (size_t k = 0; k < expr_dim; ++k) {
      Vec3 d{};
      if (k == 0) {
        // lips part vertically
        d = Vec3{0, (p.y > mouth_center.y ? 0.08 : -0.08) * mouth_w, 0};
      } else if (k == 1) {
        // mouth widens
        d = Vec3{0.08 * mouth_w * (p.x >= 0 ? 1.0 : -1.0), 0, 0};
      } else {
        const double s = 0.05 * std::sin(freq[k] * (p.x + p.y + p.z) + phase[k]);
        d = Vec3{s * std::sin(freq[k] * p.y + phase[k]),
                 s * std::cos(freq[k] * p.z + phase[k]),
                 s * std::sin(freq[k] * p.x + 2.0 * phase[k])};
      }
      basis[(i * 3 + 0) * expr_dim + k] = d.x;
      basis[(i * 3 + 1) * expr_dim + k] = d.y;
      basis[(i * 3 + 2) * expr_dim + k] = d.z;
    }
  }
  m.expr_basis = std::move(basis);

  // skinning: lower-front region follows the jaw; the cavity's lower half
  // goes with it
  Tensor skin({n, 2});
  auto sigmoid = [](double x) { return 1.0 / (1.0 + std::exp(-x)); };
  for (size_t i = 0; i < n; ++i) {
    const Vec3 p{m.template_verts[i * 3], m.template_verts[i * 3 + 1],
                 m.template_verts[i * 3 + 2]};
    const double frontness = -p.z / std::max(0.3, p.norm());
    double wj = sigmoid((-p.y - 0.25) / 0.10) * sigmoid((frontness - 0.25) / 0.12);
    if (i >= cavity0) {
      const size_t pr = (i - cavity0) / patch_cols;
      wj = pr >= patch_rows / 2 ? 1.0 : 0.0;  // lower cavity = jaw side
    }
    skin[i * 2] = 1.0 - wj;
    skin[i * 2 + 1] = wj;
  }
  m.skin_weights = std::move(skin);
  m.jaw_pivot = {0.0, -0.15, 0.35};

  // landmark set: the outer mouth rim
  for (const auto& [pr, pc] : rim)
    m.landmark_vertices.push_back(uint32_t(outer_of(pr, pc)));

  m.validate();
  return m;
}

// ---------------------------------------------------------------------------

namespace {

struct Script {
  std::vector<ScriptFrame> frames;
};

// Global emotion directions in expression space, shared by every identity.
Tensor emotion_directions(size_t expr_dim, uint64_t seed) {
  Rng rng(seed ^ 0xabcdef1234567ull);
  const size_t usable = std::min<size_t>(6, expr_dim);
  return orthogonal_init(expr_dim, usable, 1.0, rng);
}

Script make_script(const SyntheticSpec& spec, const Tensor& emo_dirs,
                   Rng& rng) {
  Script sc;
  sc.frames.resize(spec.frames);
  const size_t K = spec.expr_dim;
  const size_t usable = emo_dirs.dim(1);

  // band-limited speech-like components
  struct Osc {
    double f, ph, amp;
  };
  std::vector<std::vector<Osc>> osc(K);
  for (size_t k = 0; k < K; ++k) {
    const double amp = k < 2 ? 0.45 : 0.18;
    for (int j = 0; j < 3; ++j)
      osc[k].push_back({rng.uniform(0.5, 3.0), rng.uniform(0.0, 6.28),
                        amp * rng.uniform(0.4, 1.0)});
  }
  std::vector<Osc> jaw_osc;
  for (int j = 0; j < 3; ++j)
    jaw_osc.push_back({rng.uniform(0.8, 3.0), rng.uniform(0.0, 6.28),
                       rng.uniform(0.4, 1.0)});

  // emotion episodes tile the non-rest span: gap, episode, gap, ...
  struct Episode {
    size_t begin, length, cls;
  };
  std::vector<Episode> episodes;
  size_t cursor = spec.rest_frames + 5;
  size_t cls_counter = rng.below(usable);
  while (cursor + 4 < spec.frames) {
    const size_t len =
        std::min<size_t>(26 + rng.below(10), spec.frames - cursor - 1);
    if (len < 4) break;
    episodes.push_back({cursor, len, cls_counter % usable});
    ++cls_counter;
    cursor += len + 8 + rng.below(8);
  }

  for (size_t t = 0; t < spec.frames; ++t) {
    ScriptFrame& f = sc.frames[t];
    f.psi = Tensor({K});
    if (t < spec.rest_frames) continue;  // exact rest pose

    const double tt = double(t) / spec.fps;
    // ramp speech in over a few frames after the rest block
    const double ramp =
        std::min(1.0, double(t - spec.rest_frames) / 5.0);
    for (size_t k = 0; k < K; ++k) {
      double v = 0.0;
      for (const Osc& o : osc[k])
        v += o.amp * std::sin(2.0 * M_PI * o.f * tt + o.ph);
      f.psi[k] = ramp * v / double(osc[k].size());
    }
    double jaw = 0.0;
    for (const Osc& o : jaw_osc)
      jaw += o.amp * std::sin(2.0 * M_PI * o.f * tt + o.ph);
    jaw = std::fabs(jaw) / double(jaw_osc.size());
    f.jaw = {-0.28 * ramp * jaw, 0.0, 0.0};  // negative x opens the mouth

    for (const Episode& ep : episodes) {
      if (t < ep.begin || t >= ep.begin + ep.length) continue;
      const double u = double(t - ep.begin) / double(ep.length - 1);
      f.e = 0.5 * (1.0 - std::cos(2.0 * M_PI * u));  // 0 -> 1 -> 0
      f.emotion_class = ep.cls;
      for (size_t k = 0; k < K; ++k)
        f.psi[k] += 0.5 * f.e * emo_dirs[k * emo_dirs.dim(1) + ep.cls];
    }
  }
  return sc;
}

Camera make_corpus_camera(size_t resolution) {
  Camera cam;
  cam.width = cam.height = resolution;
  cam.fx = cam.fy = 1.15 * double(resolution);
  cam.cx = cam.cy = double(resolution) / 2.0;
  cam.near = 0.2;
  cam.rot = Mat3::identity();
  cam.trans = {0.0, 0.0, 3.0};  // head at origin, camera 3 units in front
  return cam;
}

// identity-specific appearance painted onto the ground-truth cloud
void paint_cloud(GaussianCloud& cloud, const Mesh& mesh, Rng& rng,
                 size_t cavity_tri_begin) {
  const Vec3 fa{rng.uniform(2.0, 5.0), rng.uniform(2.0, 5.0),
                rng.uniform(2.0, 5.0)};
  const Vec3 ph{rng.uniform(0.0, 6.28), rng.uniform(0.0, 6.28),
                rng.uniform(0.0, 6.28)};
  const GlobalCloud rest = rig_to_global(cloud, mesh);
  for (size_t i = 0; i < cloud.size(); ++i) {
    const Vec3 p{rest.mu[i * 3], rest.mu[i * 3 + 1], rest.mu[i * 3 + 2]};
    double rgb[3] = {0.5 + 0.28 * std::sin(fa.x * (p.x + p.y) + ph.x),
                     0.5 + 0.28 * std::sin(fa.y * (p.y + p.z) + ph.y),
                     0.5 + 0.28 * std::sin(fa.z * (p.z + p.x) + ph.z)};
    if (cloud.parent_tri[i] >= cavity_tri_begin) {
      rgb[0] = 0.35 + 0.1 * std::sin(fa.x * p.x + ph.x);  // dark reddish cavity
      rgb[1] = 0.12;
      rgb[2] = 0.12;
    }
    for (int c = 0; c < 3; ++c) cloud.sh_l[i * 3 + c] = rgb[c];
    cloud.alpha_l[i] = 0.92;
    for (int c = 0; c < 3; ++c) cloud.scale_l[i * 3 + c] *= 1.4;
  }
}

}  // namespace

TrainingManifest generate_synthetic_corpus(const std::string& out_dir,
                                           const SyntheticSpec& spec,
                                           uint64_t seed) {
  if (spec.expr_dim < 2)
    throw ValidationError("synthetic corpus: expr_dim must be at least 2");
  std::error_code ec;
  fs::create_directories(out_dir, ec);
  if (ec || !fs::is_directory(out_dir))
    throw ValidationError(out_dir + ": cannot create output directory");
  {
    // writability probe so a bad destination fails before any heavy work
    const std::string probe = out_dir + "/.etg_probe";
    io::atomic_write_text(probe, "ok");
    fs::remove(probe);
  }

  Rng master(seed);
  const Tensor emo_dirs = emotion_directions(spec.expr_dim, seed);
  const Camera cam = make_corpus_camera(spec.resolution);
  // feature mixing matrices are global: the audio-to-motion mapping is the
  // shared structure the motion prior can learn
  Rng feat_rng = master.fork(17);
  const size_t xdim = spec.expr_dim + 3 + 1 + 4;
  const Tensor w_audio =
      orthogonal_init(spec.audio_dim, xdim, 2.0, feat_rng);
  const Tensor w_au =
      orthogonal_init(spec.au_dim, spec.expr_dim + 1, 2.0, feat_rng);

  TrainingManifest manifest;
  manifest.fps = spec.fps;
  manifest.resolution = spec.resolution;
  manifest.base_dir = out_dir;

  const size_t cavity_tri_begin =
      build_synthetic_head(spec.expr_dim, seed).tri_count() -
      ((kPatchR1 - kPatchR0) * (kPatchC1 - kPatchC0) * 2 +
       2 * ((kPatchR1 - kPatchR0) + (kPatchC1 - kPatchC0)) * 2);

  for (size_t ident = 0; ident < spec.identities; ++ident) {
    Rng rng = master.fork(1000 + ident);
    const std::string id = "id" + std::to_string(ident);
    const std::string dir = out_dir + "/" + id;
    fs::create_directories(dir + "/cams");
    fs::create_directories(dir + "/frames");
    fs::create_directories(dir + "/lm");
    if (spec.emit_pseudo_gt) {
      fs::create_directories(dir + "/depth");
      fs::create_directories(dir + "/normal");
    }
    fs::create_directories(dir + "/params");

    const HeadModelAssets head =
        build_synthetic_head(spec.expr_dim, seed ^ (0xbeef + ident), 0.02);
    save_head_model(dir + "/head.etga", head);

    // ground-truth appearance cloud
    const Mesh rest_mesh =
        deform_mesh(head, {Tensor({spec.expr_dim})}, {Vec3{}});
    GaussianCloud gt_cloud =
        sample_bindings(rest_mesh, spec.gaussians, seed ^ (0xc10d + ident));
    Rng paint_rng = rng.fork(3);
    paint_cloud(gt_cloud, rest_mesh, paint_rng, cavity_tri_begin);
    save_cloud(dir + "/gt_cloud.etgg", gt_cloud);

    // script and per-frame assets
    Rng script_rng = rng.fork(5);
    const Script script = make_script(spec, emo_dirs, script_rng);

    Tensor audio({spec.frames, spec.audio_dim});
    Tensor aus({spec.frames, spec.au_dim});
    Tensor probs({spec.frames, 7});
    Tensor score({spec.frames, 1});
    Rng noise_rng = rng.fork(7);
    std::vector<double> id_gain(spec.audio_dim);
    for (auto& g : id_gain) g = noise_rng.uniform(0.9, 1.1);
    std::vector<double> aux_f(4), aux_p(4);
    for (int j = 0; j < 4; ++j) {
      aux_f[j] = noise_rng.uniform(0.3, 2.0);
      aux_p[j] = noise_rng.uniform(0.0, 6.28);
    }

    const RenderOptions ropts;
    for (size_t t = 0; t < spec.frames; ++t) {
      const ScriptFrame& f = script.frames[t];
      // features
      std::vector<double> x(xdim, 0.0);
      for (size_t k = 0; k < spec.expr_dim; ++k) x[k] = f.psi[k];
      x[spec.expr_dim] = f.jaw.x;
      x[spec.expr_dim + 1] = f.jaw.y;
      x[spec.expr_dim + 2] = f.jaw.z;
      x[spec.expr_dim + 3] = f.e;
      for (int j = 0; j < 4; ++j)
        x[spec.expr_dim + 4 + j] =
            std::sin(2.0 * M_PI * aux_f[j] * double(t) / spec.fps + aux_p[j]);
      for (size_t a = 0; a < spec.audio_dim; ++a) {
        double acc = 0.0;
        for (size_t j = 0; j < xdim; ++j) acc += w_audio[a * xdim + j] * x[j];
        audio[t * spec.audio_dim + a] =
            id_gain[a] * acc + 0.01 * noise_rng.normal();
      }
      for (size_t a = 0; a < spec.au_dim; ++a) {
        double acc = 0.0;
        for (size_t k = 0; k < spec.expr_dim; ++k)
          acc += w_au[a * (spec.expr_dim + 1) + k] * f.psi[k];
        acc += w_au[a * (spec.expr_dim + 1) + spec.expr_dim] * f.e;
        // softplus keeps the intensities nonnegative
        aus[t * spec.au_dim + a] = std::log1p(std::exp(acc));
      }
      // teacher
      probs[t * 7 + kNeutralClass] = 1.0 - f.e;
      if (f.emotion_class != kNeutralClass)
        probs[t * 7 + f.emotion_class] = f.e;
      else
        probs[t * 7 + kNeutralClass] = 1.0;
      score[t] = f.e;

      // geometry, render, derived files
      const Mesh mesh = deform_mesh(head, {f.psi}, {f.jaw});
      const GlobalCloud globals = rig_to_global(gt_cloud, mesh);
      const RenderOutput out = render(globals, cam, ropts);
      io::write_tensor(dir + "/frames/" + frame_file_name("frame", t),
                       out.color);
      io::write_tensor(dir + "/cams/" + frame_file_name("cam", t),
                       cam.to_tensor(), io::Dtype::f64);
      // landmark projections of the deformed mesh
      Tensor lms({head.landmark_vertices.size(), 2});
      for (size_t l = 0; l < head.landmark_vertices.size(); ++l) {
        const Vec3 v = mesh.vertex(head.landmark_vertices[l]);
        const Vec3 pc = cam.to_camera(v);
        lms[l * 2] = cam.fx * pc.x / pc.z + cam.cx;
        lms[l * 2 + 1] = cam.fy * pc.y / pc.z + cam.cy;
      }
      io::write_tensor(dir + "/lm/" + frame_file_name("lm", t), lms);
      if (spec.emit_pseudo_gt) {
        io::write_tensor(dir + "/depth/" + frame_file_name("depth", t),
                         out.depth);
        const Tensor normals = depth_to_normals(out.depth, cam, out.alpha, 0.5);
        io::write_tensor(dir + "/normal/" + frame_file_name("normal", t),
                         normals);
      }
      Tensor pj({spec.expr_dim + 3});
      for (size_t k = 0; k < spec.expr_dim; ++k) pj[k] = f.psi[k];
      pj[spec.expr_dim] = f.jaw.x;
      pj[spec.expr_dim + 1] = f.jaw.y;
      pj[spec.expr_dim + 2] = f.jaw.z;
      io::write_tensor(dir + "/params/" + frame_file_name("psi_jaw", t), pj,
                       io::Dtype::f64);
      if (t == 0) {
        // reference-frame mouth landmarks seed the intra-oral region
        io::write_tensor(dir + "/landmarks.etgt", lms);
      }
    }
    io::write_tensor(dir + "/audio.etgt", audio);
    io::write_tensor(dir + "/au.etgt", aus);
    io::write_tensor(dir + "/teacher_probs.etgt", probs);
    io::write_tensor(dir + "/teacher_score.etgt", score);
    Tensor id_embed({spec.id_dim});
    Rng id_rng = rng.fork(11);
    for (size_t i = 0; i < spec.id_dim; ++i) id_embed[i] = id_rng.normal();
    io::write_tensor(dir + "/identity.etgt", id_embed);

    ManifestIdentity mi;
    mi.id = id;
    mi.head_model = dir + "/head.etga";
    mi.frames = spec.frames;
    mi.audio = dir + "/audio.etgt";
    mi.au = dir + "/au.etgt";
    mi.identity_embedding = dir + "/identity.etgt";
    mi.teacher_probs = dir + "/teacher_probs.etgt";
    mi.teacher_score = dir + "/teacher_score.etgt";
    mi.landmarks = dir + "/landmarks.etgt";
    mi.ref_camera = dir + "/cams/" + frame_file_name("cam", 0);
    mi.camera_dir = dir + "/cams";
    mi.image_dir = dir + "/frames";
    mi.lm_dir = dir + "/lm";
    if (spec.emit_pseudo_gt) {
      mi.depth_dir = dir + "/depth";
      mi.normal_dir = dir + "/normal";
    }
    mi.rest_begin = 0;
    mi.rest_end = spec.rest_frames - 1;
    manifest.identities.push_back(std::move(mi));
  }

  manifest.save(out_dir + "/manifest.txt");
  manifest.validate();
  return manifest;
}

}  // namespace etg
