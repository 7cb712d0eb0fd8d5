#include "etg/manifest.h"

#include <cstdio>
#include <filesystem>
#include <fstream>
#include <sstream>

#include "etg/common.h"
#include "etg/io.h"

namespace etg {

namespace fs = std::filesystem;

std::string frame_file_name(const char* prefix, size_t index) {
  char buf[64];
  std::snprintf(buf, sizeof(buf), "%s_%05zu.etgt", prefix, index);
  return buf;
}

std::string ManifestIdentity::frame_path(const std::string& dir,
                                         const char* prefix,
                                         size_t index) const {
  return dir + "/" + frame_file_name(prefix, index);
}

namespace {

std::string join(const std::string& base, const std::string& rel) {
  if (rel.empty() || rel.front() == '/') return rel;
  return base + "/" + rel;
}

}  // namespace

TrainingManifest TrainingManifest::load(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw ValidationError(path + ": cannot open manifest");
  TrainingManifest m;
  m.base_dir = fs::path(path).has_parent_path()
                   ? fs::path(path).parent_path().string()
                   : ".";
  std::string line;
  size_t lineno = 0;
  ManifestIdentity* cur = nullptr;
  bool header = false;
  while (std::getline(in, line)) {
    ++lineno;
    const size_t hash = line.find('#');
    if (hash != std::string::npos) line = line.substr(0, hash);
    std::istringstream ls(line);
    std::string key;
    if (!(ls >> key)) continue;
    auto rest = [&ls]() {
      std::string s;
      ls >> s;
      return s;
    };
    auto fail = [&](const std::string& why) {
      std::ostringstream os;
      os << path << ":" << lineno << ": " << why;
      throw ValidationError(os.str());
    };
    if (key == "etg-manifest") {
      if (rest() != "1") fail("unsupported manifest version");
      header = true;
    } else if (!header) {
      fail("missing 'etg-manifest 1' header");
    } else if (key == "fps") {
      m.fps = std::stod(rest());
    } else if (key == "resolution") {
      m.resolution = std::stoull(rest());
    } else if (key == "identity") {
      m.identities.emplace_back();
      cur = &m.identities.back();
      cur->id = rest();
      if (cur->id.empty()) fail("identity needs a name");
    } else if (key == "end") {
      cur = nullptr;
    } else if (cur == nullptr) {
      fail("key '" + key + "' outside an identity block");
    } else if (key == "head_model") {
      cur->head_model = rest();
    } else if (key == "frames") {
      cur->frames = std::stoull(rest());
    } else if (key == "audio") {
      cur->audio = rest();
    } else if (key == "au") {
      cur->au = rest();
    } else if (key == "identity_embedding") {
      cur->identity_embedding = rest();
    } else if (key == "teacher_probs") {
      cur->teacher_probs = rest();
    } else if (key == "teacher_score") {
      cur->teacher_score = rest();
    } else if (key == "teacher_mask") {
      cur->teacher_mask = rest();
    } else if (key == "landmarks") {
      cur->landmarks = rest();
    } else if (key == "ref_camera") {
      cur->ref_camera = rest();
    } else if (key == "camera_dir") {
      cur->camera_dir = rest();
    } else if (key == "image_dir") {
      cur->image_dir = rest();
    } else if (key == "pose_dir") {
      cur->pose_dir = rest();
    } else if (key == "depth_dir") {
      cur->depth_dir = rest();
    } else if (key == "normal_dir") {
      cur->normal_dir = rest();
    } else if (key == "lm_dir") {
      cur->lm_dir = rest();
    } else if (key == "rest_frames") {
      std::string a = rest(), b = rest();
      cur->rest_begin = std::stoull(a);
      cur->rest_end = std::stoull(b);
    } else {
      fail("unknown manifest key '" + key + "'");
    }
  }
  // resolve all paths against the manifest directory
  for (ManifestIdentity& ident : m.identities) {
    for (std::string* p :
         {&ident.head_model, &ident.audio, &ident.au,
          &ident.identity_embedding, &ident.teacher_probs,
          &ident.teacher_score, &ident.teacher_mask, &ident.landmarks,
          &ident.ref_camera, &ident.camera_dir, &ident.image_dir,
          &ident.pose_dir, &ident.depth_dir, &ident.normal_dir,
          &ident.lm_dir}) {
      if (!p->empty()) *p = join(m.base_dir, *p);
    }
  }
  return m;
}

void TrainingManifest::save(const std::string& path) const {
  std::ostringstream os;
  const std::string base = fs::path(path).has_parent_path()
                               ? fs::path(path).parent_path().string()
                               : ".";
  auto rel = [&base](const std::string& p) {
    if (p.rfind(base + "/", 0) == 0) return p.substr(base.size() + 1);
    return p;
  };
  os << "etg-manifest 1\n";
  os << "fps " << fps << "\n";
  os << "resolution " << resolution << "\n";
  for (const ManifestIdentity& id : identities) {
    os << "identity " << id.id << "\n";
    os << "  head_model " << rel(id.head_model) << "\n";
    os << "  frames " << id.frames << "\n";
    os << "  audio " << rel(id.audio) << "\n";
    os << "  au " << rel(id.au) << "\n";
    os << "  identity_embedding " << rel(id.identity_embedding) << "\n";
    os << "  teacher_probs " << rel(id.teacher_probs) << "\n";
    os << "  teacher_score " << rel(id.teacher_score) << "\n";
    if (!id.teacher_mask.empty())
      os << "  teacher_mask " << rel(id.teacher_mask) << "\n";
    os << "  landmarks " << rel(id.landmarks) << "\n";
    os << "  ref_camera " << rel(id.ref_camera) << "\n";
    os << "  camera_dir " << rel(id.camera_dir) << "\n";
    os << "  image_dir " << rel(id.image_dir) << "\n";
    if (!id.pose_dir.empty()) os << "  pose_dir " << rel(id.pose_dir) << "\n";
    if (!id.depth_dir.empty())
      os << "  depth_dir " << rel(id.depth_dir) << "\n";
    if (!id.normal_dir.empty())
      os << "  normal_dir " << rel(id.normal_dir) << "\n";
    if (!id.lm_dir.empty()) os << "  lm_dir " << rel(id.lm_dir) << "\n";
    os << "  rest_frames " << id.rest_begin << " " << id.rest_end << "\n";
    os << "end\n";
  }
  io::atomic_write_text(path, os.str());
}

void TrainingManifest::validate() const {
  if (identities.empty())
    throw ValidationError("manifest: no identities");
  for (const ManifestIdentity& id : identities) {
    auto need = [&id](const std::string& p, const char* what) {
      if (p.empty())
        throw ValidationError("manifest: identity '" + id.id +
                              "' missing " + what);
      if (!fs::exists(p))
        throw ValidationError("manifest: identity '" + id.id + "': " + what +
                              " file not found: " + p);
    };
    need(id.head_model, "head_model");
    need(id.audio, "audio");
    need(id.au, "au");
    need(id.identity_embedding, "identity_embedding");
    need(id.teacher_probs, "teacher_probs");
    need(id.teacher_score, "teacher_score");
    need(id.landmarks, "landmarks");
    need(id.ref_camera, "ref_camera");
    if (id.frames == 0)
      throw ValidationError("manifest: identity '" + id.id + "' has 0 frames");
    auto check_len = [&id](const std::string& path, size_t dim0,
                           const char* what) {
      const Tensor t = io::read_tensor(path);
      if (t.dim(0) != dim0)
        throw ValidationError("manifest: identity '" + id.id + "': " + what +
                              " has " + std::to_string(t.dim(0)) +
                              " frames, expected " + std::to_string(dim0));
    };
    check_len(id.audio, id.frames, "audio");
    check_len(id.au, id.frames, "au");
    check_len(id.teacher_probs, id.frames, "teacher_probs");
    check_len(id.teacher_score, id.frames, "teacher_score");
    for (const auto& [dir, prefix] :
         std::vector<std::pair<std::string, const char*>>{
             {id.camera_dir, "cam"}, {id.image_dir, "frame"}}) {
      if (dir.empty())
        throw ValidationError("manifest: identity '" + id.id +
                              "' missing camera/image dir");
      for (size_t f : {size_t(0), id.frames - 1})
        if (!fs::exists(id.frame_path(dir, prefix, f)))
          throw ValidationError("manifest: identity '" + id.id +
                                "': missing " +
                                id.frame_path(dir, prefix, f));
    }
    if (id.rest_end >= id.frames || id.rest_begin > id.rest_end)
      throw ValidationError("manifest: identity '" + id.id +
                            "' has an invalid rest_frames range");
  }
}

const ManifestIdentity& TrainingManifest::find(const std::string& id) const {
  for (const ManifestIdentity& ident : identities)
    if (ident.id == id) return ident;
  throw ValidationError("manifest: unknown identity '" + id + "'");
}

}  // namespace etg
