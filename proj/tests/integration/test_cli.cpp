// End-to-end checks of the command-line surface. The binary path arrives as
// the first CLI argument.

#define DOCTEST_CONFIG_IMPLEMENT
#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <sstream>

#include "doctest.h"

namespace fs = std::filesystem;

namespace {

std::string g_binary;

struct RunResult {
  int code;
  std::string output;
};

RunResult run(const std::string& args) {
  const std::string out_file =
      (fs::temp_directory_path() / "etg_cli_out.txt").string();
  const std::string cmd = g_binary + " " + args + " > " + out_file + " 2>&1";
  const int raw = std::system(cmd.c_str());
  std::ifstream in(out_file);
  std::ostringstream os;
  os << in.rdbuf();
  return {WEXITSTATUS(raw), os.str()};
}

struct TmpDir {
  std::string path;
  explicit TmpDir(const std::string& name) {
    path = (fs::temp_directory_path() / name).string();
    fs::remove_all(path);
    fs::create_directories(path);
  }
  ~TmpDir() { fs::remove_all(path); }
};

const char* kTinyConfig =
    "seed = 5\n"
    "expr_dim = 6\n"
    "audio_dim = 16\n"
    "au_dim = 8\n"
    "id_dim = 32\n"
    "hidden = 16\n"
    "layers = 1\n"
    "heads = 2\n"
    "adain_hidden = 8\n"
    "head_hidden = 12\n"
    "gate_hidden = 6\n"
    "gaussians = 950\n"
    "window = 8\n"
    "stage1_iters = 4\n"
    "pretrain_iters = 10\n"
    "adapt_iters = 4\n"
    "frames_per_iter = 1\n"
    "weight_decay = 0\n"
    "adapt_appearance = 1\n";

const char* kGenFlags =
    " --identities 3 --frames 16 --resolution 24 --expr-dim 6"
    " --gaussians 950 --audio-dim 16 --au-dim 8 --id-dim 32";

void write_file(const std::string& path, const std::string& text) {
  std::ofstream out(path);
  out << text;
}

}  // namespace

TEST_CASE("unknown subcommands and flags exit nonzero with usage text") {
  RunResult r = run("no-such-command");
  CHECK(r.code != 0);
  RunResult r2 = run("gradcheck --no-such-flag");
  CHECK(r2.code != 0);
  RunResult r3 = run("--help");
  CHECK(r3.code == 0);
  CHECK(r3.output.find("gen-data") != std::string::npos);
}

TEST_CASE("pipeline composes: gen-data, pretrain, adapt, infer, eval, inspect") {
  TmpDir dir("etg_cli_pipeline");
  write_file(dir.path + "/cfg.txt", kTinyConfig);

  RunResult gen =
      run("gen-data --out " + dir.path + "/corpus --seed 9" + kGenFlags);
  INFO(gen.output);
  REQUIRE(gen.code == 0);

  // train on the first two identities only: trim the manifest
  {
    std::ifstream in(dir.path + "/corpus/manifest.txt");
    std::ostringstream os;
    std::string line;
    bool skip = false;
    while (std::getline(in, line)) {
      if (line.rfind("identity id2", 0) == 0) skip = true;
      if (!skip) os << line << "\n";
      if (skip && line == "end") skip = false;
    }
    write_file(dir.path + "/corpus/pretrain_manifest.txt", os.str());
  }

  RunResult pre = run("pretrain --manifest " + dir.path +
                      "/corpus/pretrain_manifest.txt --config " + dir.path +
                      "/cfg.txt --out " + dir.path + "/pre.etgc");
  INFO(pre.output);
  REQUIRE(pre.code == 0);
  CHECK(fs::exists(dir.path + "/pre.etgc"));
  CHECK(fs::exists(dir.path + "/pre.etgc.report.txt"));

  RunResult ad = run("adapt --checkpoint " + dir.path +
                     "/pre.etgc --manifest " + dir.path +
                     "/corpus/manifest.txt --identity id2 --out " + dir.path +
                     "/post.etgc");
  INFO(ad.output);
  REQUIRE(ad.code == 0);

  RunResult inf = run("infer --checkpoint " + dir.path +
                      "/post.etgc --audio " + dir.path +
                      "/corpus/id2/audio.etgt --au " + dir.path +
                      "/corpus/id2/au.etgt --camera " + dir.path +
                      "/corpus/id2/cams/cam_00000.etgt --identity id2 --out " +
                      dir.path + "/out_frames");
  INFO(inf.output);
  REQUIRE(inf.code == 0);
  CHECK(fs::exists(dir.path + "/out_frames/frame_00000.etgt"));
  CHECK(fs::exists(dir.path + "/out_frames/frame_00000.png"));
  CHECK(fs::exists(dir.path + "/out_frames/motion_log.txt"));

  RunResult ren = run("render --checkpoint " + dir.path +
                      "/post.etgc --identity id2 --camera " + dir.path +
                      "/corpus/id2/cams/cam_00000.etgt --out " + dir.path +
                      "/oneshot.etgt");
  INFO(ren.output);
  REQUIRE(ren.code == 0);
  CHECK(fs::exists(dir.path + "/oneshot.etgt"));

  // eval a directory against itself: capped psnr and unit ssim
  RunResult ev = run("eval --pred " + dir.path + "/corpus/id2/frames --gt " +
                     dir.path + "/corpus/id2/frames");
  INFO(ev.output);
  REQUIRE(ev.code == 0);
  CHECK(ev.output.find("mean\t99\t1\t") != std::string::npos);

  RunResult ins = run("inspect --file " + dir.path + "/post.etgc");
  REQUIRE(ins.code == 0);
  CHECK(ins.output.find("id2") != std::string::npos);

  // truncated checkpoint: validation error with a byte-offset diagnosis
  {
    std::ifstream in(dir.path + "/post.etgc", std::ios::binary);
    std::ostringstream os;
    os << in.rdbuf();
    const std::string bytes = os.str();
    std::ofstream out(dir.path + "/broken.etgc", std::ios::binary);
    out.write(bytes.data(), std::streamsize(bytes.size() / 3));
  }
  RunResult broken = run("inspect --file " + dir.path + "/broken.etgc");
  CHECK(broken.code == 1);
  CHECK(broken.output.find("byte offset") != std::string::npos);

  // config hash mismatch is a hard error
  write_file(dir.path + "/other.txt",
             std::string(kTinyConfig) + "hidden = 32\n");
  RunResult bad = run("adapt --checkpoint " + dir.path +
                      "/pre.etgc --manifest " + dir.path +
                      "/corpus/manifest.txt --identity id2 --config " +
                      dir.path + "/other.txt --out " + dir.path + "/x.etgc");
  CHECK(bad.code == 1);
  CHECK(bad.output.find("hash mismatch") != std::string::npos);
}

TEST_CASE("gradcheck subcommand runs the quick suite") {
  RunResult r = run("gradcheck --quick");
  INFO(r.output);
  CHECK(r.code == 0);
  CHECK(r.output.find("render") != std::string::npos);
  CHECK(r.output.find("FAIL") == std::string::npos);
}

int main(int argc, char** argv) {
  doctest::Context ctx;
  if (argc > 1 && argv[1][0] != '-') {
    g_binary = argv[1];
    ctx.applyCommandLine(argc - 1, argv + 1);
  } else {
    ctx.applyCommandLine(argc, argv);
  }
  if (g_binary.empty()) {
    std::fprintf(stderr, "usage: etg_cli_tests <path-to-etg-binary>\n");
    return 1;
  }
  return ctx.run();
}
