// Command-line surface for the talking-head pipeline: synthetic data
// generation, pretraining, adaptation, inference, rendering, evaluation,
// gradient verification and file inspection.

#include <cstdio>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <sstream>

#include "CLI11.hpp"
#include "etg/checkpoint.h"
#include "etg/common.h"
#include "etg/config.h"
#include "etg/gradsuite.h"
#include "etg/io.h"
#include "etg/losses.h"
#include "etg/manifest.h"
#include "etg/metrics.h"
#include "etg/render.h"
#include "etg/synthetic.h"
#include "etg/trainer.h"

namespace fs = std::filesystem;
using namespace etg;

namespace {

std::string default_out_dir() {
  const char* env = std::getenv("ETG_OUT_DIR");
  return env ? env : ".";
}

RunConfig config_for_checkpoint(const Checkpoint& ck,
                                const std::string& config_path) {
  if (config_path.empty()) return RunConfig::parse(ck.config_text);
  RunConfig cfg = RunConfig::load(config_path);
  if (cfg.arch_hash() != ck.config_hash)
    throw ValidationError(
        "config hash mismatch between checkpoint and supplied config");
  return cfg;
}

std::vector<double> parse_csv(const std::string& s) {
  std::vector<double> out;
  std::istringstream is(s);
  std::string tok;
  while (std::getline(is, tok, ',')) out.push_back(std::stod(tok));
  return out;
}

int cmd_eval(const std::string& pred_dir, const std::string& gt_dir,
             const std::string& out_file) {
  std::ostringstream table;
  table << "frame\tpsnr\tssim\tlmd\n";
  double sum_psnr = 0, sum_ssim = 0, sum_lmd = 0;
  size_t n = 0, n_lmd = 0;
  for (size_t t = 0;; ++t) {
    const std::string a = pred_dir + "/" + frame_file_name("frame", t);
    const std::string b = gt_dir + "/" + frame_file_name("frame", t);
    if (!fs::exists(a) || !fs::exists(b)) break;
    const Tensor ia = io::read_tensor(a);
    const Tensor ib = io::read_tensor(b);
    const double p = psnr(ia, ib);
    const double s = ssim_metric(ia, ib);
    sum_psnr += p;
    sum_ssim += s;
    ++n;
    table << t << "\t" << p << "\t" << s << "\t";
    const std::string la = pred_dir + "/" + frame_file_name("lm", t);
    const std::string lb = gt_dir + "/" + frame_file_name("lm", t);
    if (fs::exists(la) && fs::exists(lb)) {
      const double d = lmd(io::read_tensor(la), io::read_tensor(lb));
      sum_lmd += d;
      ++n_lmd;
      table << d << "\n";
    } else {
      table << "-\n";
    }
  }
  if (n == 0) throw ValidationError("eval: no matching frame files");
  table << "mean\t" << sum_psnr / double(n) << "\t" << sum_ssim / double(n)
        << "\t";
  if (n_lmd)
    table << sum_lmd / double(n_lmd) << "\n";
  else
    table << "-\n";
  std::cout << table.str();
  if (!out_file.empty()) io::atomic_write_text(out_file, table.str());
  return 0;
}

int cmd_inspect(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw ValidationError(path + ": cannot open file");
  char magic[4] = {0, 0, 0, 0};
  in.read(magic, 4);
  const std::string m(magic, 4);
  if (m == "ETGT") {
    const Tensor t = io::read_tensor(path);
    std::cout << "ETGT tensor " << t.shape_str() << ", " << t.size()
              << " values\n";
  } else if (m == "ETGA" || m == "ETGG") {
    const char mg[4] = {magic[0], magic[1], magic[2], magic[3]};
    auto sections = io::read_sections(path, mg);
    std::cout << m << " container, " << sections.size() << " sections\n";
    for (const auto& s : sections) {
      std::cout << "  " << s.name;
      if (s.kind <= 1)
        std::cout << " tensor " << s.tensor.shape_str()
                  << (s.kind ? " f64" : " f32");
      else
        std::cout << " bytes[" << s.bytes.size() << "]";
      std::cout << "\n";
    }
  } else if (m == "ETGC") {
    const Checkpoint ck = Checkpoint::load(path);
    std::cout << "ETGC checkpoint\n";
    std::cout << "  phase      " << ck.phase << "\n";
    std::cout << "  iteration  " << ck.iteration << "\n";
    std::cout << "  seed       " << ck.seed << "\n";
    char hex[32];
    std::snprintf(hex, sizeof(hex), "%016llx",
                  (unsigned long long)ck.config_hash);
    std::cout << "  config     " << hex << "\n";
    std::cout << "  mouth      " << ck.mouth_count << " gaussians\n";
    std::cout << "  parameters " << ck.params.size() << " tensors\n";
    std::cout << "  identities";
    for (const auto& id : ck.identities()) std::cout << " " << id;
    std::cout << "\n";
  } else {
    throw ValidationError(path + ": unknown magic '" + m + "'");
  }
  return 0;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"triangle-rigged gaussian talking-head pipeline"};
  app.require_subcommand(1);

  // gen-data
  auto* gen = app.add_subcommand("gen-data", "generate a synthetic corpus");
  std::string gen_out = default_out_dir() + "/corpus";
  uint64_t gen_seed = 1;
  SyntheticSpec spec;
  gen->add_option("--out", gen_out, "output directory");
  gen->add_option("--seed", gen_seed, "corpus seed");
  gen->add_option("--identities", spec.identities);
  gen->add_option("--frames", spec.frames);
  gen->add_option("--resolution", spec.resolution);
  gen->add_option("--expr-dim", spec.expr_dim);
  gen->add_option("--gaussians", spec.gaussians);
  gen->add_option("--audio-dim", spec.audio_dim);
  gen->add_option("--au-dim", spec.au_dim);
  gen->add_option("--id-dim", spec.id_dim);
  bool no_pseudo = false;
  gen->add_flag("--no-pseudo-gt", no_pseudo, "skip depth/normal maps");

  // pretrain
  auto* pre = app.add_subcommand("pretrain", "learn the multi-identity prior");
  std::string pre_manifest, pre_config, pre_out, pre_resume;
  pre->add_option("--manifest", pre_manifest)->required();
  pre->add_option("--config", pre_config)->required();
  pre->add_option("--out", pre_out)->required();
  pre->add_option("--resume", pre_resume, "checkpoint to continue from");

  // adapt
  auto* ad = app.add_subcommand("adapt", "personalize to a new identity");
  std::string ad_ck, ad_manifest, ad_identity, ad_config, ad_out;
  ad->add_option("--checkpoint", ad_ck)->required();
  ad->add_option("--manifest", ad_manifest)->required();
  ad->add_option("--identity", ad_identity)->required();
  ad->add_option("--config", ad_config, "defaults to the checkpoint config");
  ad->add_option("--out", ad_out)->required();

  // infer
  auto* inf = app.add_subcommand("infer", "drive the avatar with new audio");
  std::string inf_ck, inf_config, inf_audio, inf_au, inf_cam, inf_pose,
      inf_identity;
  std::string inf_out = default_out_dir() + "/infer";
  inf->add_option("--checkpoint", inf_ck)->required();
  inf->add_option("--config", inf_config, "defaults to the checkpoint config");
  inf->add_option("--audio", inf_audio)->required();
  inf->add_option("--au", inf_au)->required();
  inf->add_option("--camera", inf_cam)->required();
  inf->add_option("--pose-dir", inf_pose);
  inf->add_option("--identity", inf_identity);
  inf->add_option("--out", inf_out);

  // render
  auto* ren = app.add_subcommand("render", "one-shot render at given params");
  std::string ren_ck, ren_config, ren_identity, ren_cam, ren_psi, ren_jaw;
  std::string ren_out = default_out_dir() + "/render.etgt";
  ren->add_option("--checkpoint", ren_ck)->required();
  ren->add_option("--config", ren_config);
  ren->add_option("--identity", ren_identity);
  ren->add_option("--camera", ren_cam)->required();
  ren->add_option("--psi", ren_psi, "comma-separated expression coefficients");
  ren->add_option("--jaw", ren_jaw, "comma-separated jaw axis-angle");
  ren->add_option("--out", ren_out);

  // eval
  auto* ev = app.add_subcommand("eval", "psnr/ssim/lmd between frame dirs");
  std::string ev_pred, ev_gt, ev_out;
  ev->add_option("--pred", ev_pred)->required();
  ev->add_option("--gt", ev_gt)->required();
  ev->add_option("--out", ev_out);

  // gradcheck
  auto* gc = app.add_subcommand("gradcheck", "finite-difference suite");
  bool gc_quick = false;
  gc->add_flag("--quick", gc_quick);

  // inspect
  auto* ins = app.add_subcommand("inspect", "print file metadata");
  std::string ins_file;
  ins->add_option("--file", ins_file)->required();

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    return app.exit(e);  // prints usage; nonzero on errors
  }

  try {
    if (gen->parsed()) {
      spec.emit_pseudo_gt = !no_pseudo;
      generate_synthetic_corpus(gen_out, spec, gen_seed);
      std::cout << "corpus written to " << gen_out << "\n";
    } else if (pre->parsed()) {
      const TrainingManifest manifest = TrainingManifest::load(pre_manifest);
      const RunConfig cfg = RunConfig::load(pre_config);
      pretrain(manifest, cfg, pre_out, pre_resume);
      std::cout << "checkpoint written to " << pre_out << "\n";
    } else if (ad->parsed()) {
      const Checkpoint ck = Checkpoint::load(ad_ck);
      const RunConfig cfg = config_for_checkpoint(ck, ad_config);
      const TrainingManifest manifest = TrainingManifest::load(ad_manifest);
      adapt(ck, manifest, ad_identity, cfg, ad_out);
      std::cout << "checkpoint written to " << ad_out << "\n";
    } else if (inf->parsed()) {
      const Checkpoint ck = Checkpoint::load(inf_ck);
      const RunConfig cfg = config_for_checkpoint(ck, inf_config);
      InferInputs in;
      in.audio_path = inf_audio;
      in.au_path = inf_au;
      in.camera_path = inf_cam;
      in.pose_dir = inf_pose;
      in.identity = inf_identity;
      infer(ck, in, cfg, inf_out);
      std::cout << "frames written to " << inf_out << "\n";
    } else if (ren->parsed()) {
      const Checkpoint ck = Checkpoint::load(ren_ck);
      const RunConfig cfg = config_for_checkpoint(ck, ren_config);
      std::string identity = ren_identity;
      if (identity.empty()) identity = ck.identities().back();
      const HeadModelAssets head =
          load_head_model(ck.head_models.at(identity));
      Tensor psi({cfg.expr_dim});
      if (!ren_psi.empty()) {
        const auto vals = parse_csv(ren_psi);
        if (vals.size() != cfg.expr_dim)
          throw ValidationError("render: psi needs expr_dim values");
        for (size_t i = 0; i < vals.size(); ++i) psi[i] = vals[i];
      }
      Vec3 jaw{};
      if (!ren_jaw.empty()) {
        const auto vals = parse_csv(ren_jaw);
        if (vals.size() != 3) throw ValidationError("render: jaw needs 3 values");
        jaw = {vals[0], vals[1], vals[2]};
      }
      const Mesh mesh = deform_mesh(head, {psi}, {jaw});
      const GaussianCloud cloud = ck.assemble_cloud(identity);
      const GlobalCloud globals = rig_to_global(cloud, mesh);
      const Camera cam = Camera::from_tensor(io::read_tensor(ren_cam));
      RenderOptions ropts;
      ropts.threads = cfg.threads;
      const RenderOutput out = render(globals, cam, ropts);
      io::write_tensor(ren_out, out.color);
      if (ren_out.size() > 5)
        io::write_png_from_tensor(
            ren_out.substr(0, ren_out.size() - 5) + ".png", out.color);
      std::cout << "render written to " << ren_out << "\n";
    } else if (ev->parsed()) {
      return cmd_eval(ev_pred, ev_gt, ev_out);
    } else if (gc->parsed()) {
      if (!print_gradient_suite(gc_quick)) return 2;
      std::cout << "gradient suite passed\n";
    } else if (ins->parsed()) {
      return cmd_inspect(ins_file);
    }
  } catch (const ValidationError& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 1;
  } catch (const NumericError& e) {
    std::cerr << "numeric failure: " << e.what() << "\n";
    return 2;
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 1;
  }
  return 0;
}
