#include "etg/checkpoint.h"

#include <algorithm>
#include <cmath>

#include "etg/common.h"
#include "etg/io.h"

namespace etg {

namespace {
constexpr char kMagic[4] = {'E', 'T', 'G', 'C'};

Tensor u32_to_tensor(const std::vector<uint32_t>& v) {
  std::vector<double> d(v.begin(), v.end());
  return Tensor({v.size()}, std::move(d));
}

std::vector<uint32_t> tensor_to_u32(const Tensor& t, const char* what) {
  std::vector<uint32_t> out(t.size());
  for (size_t i = 0; i < t.size(); ++i) {
    if (t[i] < 0 || t[i] != std::floor(t[i]))
      throw ValidationError(std::string("checkpoint: non-integral ") + what);
    out[i] = uint32_t(t[i]);
  }
  return out;
}
}  // namespace

size_t CloudBinding::mouth_count() const {
  size_t n = 0;
  for (uint8_t m : mouth_mask) n += m != 0;
  return n;
}

GaussianCloud CloudBinding::topology() const {
  GaussianCloud c;
  c.parent_tri = parent_tri;
  c.bary = bary;
  c.mouth_mask = mouth_mask;
  return c;
}

void Checkpoint::save(const std::string& path) const {
  std::vector<io::Section> s;
  s.push_back(io::Section::of_u64("meta/iteration", iteration));
  s.push_back(io::Section::of_u64("meta/seed", seed));
  s.push_back(io::Section::of_u64("meta/config_hash", config_hash));
  s.push_back(io::Section::of_string("meta/config", config_text));
  s.push_back(io::Section::of_string("meta/phase", phase));
  s.push_back(io::Section::of_u64("meta/mouth_count", mouth_count));
  {
    std::vector<uint8_t> rb(48);
    for (int i = 0; i < 6; ++i)
      for (int b = 0; b < 8; ++b)
        rb[i * 8 + b] = uint8_t((rng_state[i] >> (8 * b)) & 0xff);
    s.push_back(io::Section::of_bytes("meta/rng", std::move(rb)));
  }
  {
    std::string ids;
    for (const auto& [id, b] : bindings) {
      (void)b;
      if (!ids.empty()) ids += ",";
      ids += id;
    }
    s.push_back(io::Section::of_string("meta/identities", ids));
  }
  for (const auto& [name, entry] : params.entries()) {
    s.push_back(io::Section::of_tensor("param/" + name, entry.value));
    s.push_back(io::Section::of_tensor("opt/" + name + "/m", entry.opt.m));
    s.push_back(io::Section::of_tensor("opt/" + name + "/v", entry.opt.v));
    s.push_back(io::Section::of_u64("opt/" + name + "/step", entry.opt.step));
  }
  for (const auto& [id, b] : bindings) {
    s.push_back(
        io::Section::of_tensor("bind/" + id + "/parent_tri",
                               u32_to_tensor(b.parent_tri)));
    s.push_back(io::Section::of_tensor("bind/" + id + "/bary", b.bary));
    std::vector<double> mm(b.mouth_mask.begin(), b.mouth_mask.end());
    s.push_back(io::Section::of_tensor(
        "bind/" + id + "/mouth_mask", Tensor({b.mouth_mask.size()},
                                             std::move(mm))));
  }
  for (const auto& [id, p] : head_models)
    s.push_back(io::Section::of_string("head/" + id, p));
  for (const auto& [id, e] : id_embeds)
    s.push_back(io::Section::of_tensor("embed/" + id, e));

  std::sort(s.begin(), s.end(),
            [](const io::Section& a, const io::Section& b) {
              return a.name < b.name;
            });
  io::write_sections(path, kMagic, 1, s);
}

Checkpoint Checkpoint::load(const std::string& path) {
  auto sections = io::read_sections(path, kMagic);
  Checkpoint ck;
  ck.iteration = io::find_section(sections, "meta/iteration").as_u64();
  ck.seed = io::find_section(sections, "meta/seed").as_u64();
  ck.config_hash = io::find_section(sections, "meta/config_hash").as_u64();
  ck.config_text = io::find_section(sections, "meta/config").as_string();
  ck.phase = io::find_section(sections, "meta/phase").as_string();
  ck.mouth_count = io::find_section(sections, "meta/mouth_count").as_u64();
  {
    const io::Section& r = io::find_section(sections, "meta/rng");
    if (r.kind != 2 || r.bytes.size() != 48)
      throw ValidationError(path + ": malformed rng state");
    for (int i = 0; i < 6; ++i) {
      uint64_t v = 0;
      for (int b = 0; b < 8; ++b)
        v |= uint64_t(r.bytes[i * 8 + b]) << (8 * b);
      ck.rng_state[i] = v;
    }
  }
  std::vector<std::string> ids;
  {
    const std::string s = io::find_section(sections, "meta/identities").as_string();
    size_t at = 0;
    while (at < s.size()) {
      size_t comma = s.find(',', at);
      if (comma == std::string::npos) comma = s.size();
      ids.push_back(s.substr(at, comma - at));
      at = comma + 1;
    }
  }
  for (const io::Section& sec : sections) {
    if (sec.name.rfind("param/", 0) == 0) {
      const std::string name = sec.name.substr(6);
      ck.params.create(name, sec.as_tensor());
    }
  }
  for (const io::Section& sec : sections) {
    if (sec.name.rfind("opt/", 0) == 0) {
      const std::string rest = sec.name.substr(4);
      const size_t slash = rest.rfind('/');
      const std::string name = rest.substr(0, slash);
      const std::string kind = rest.substr(slash + 1);
      ParamStore::Entry& e = ck.params.at(name);
      if (kind == "m")
        e.opt.m = sec.as_tensor();
      else if (kind == "v")
        e.opt.v = sec.as_tensor();
      else if (kind == "step")
        e.opt.step = sec.as_u64();
      else
        throw ValidationError(path + ": unknown optimizer section " + sec.name);
    }
  }
  for (const std::string& id : ids) {
    if (id.empty()) continue;
    CloudBinding b;
    b.parent_tri = tensor_to_u32(
        io::find_section(sections, "bind/" + id + "/parent_tri").as_tensor(),
        "parent_tri");
    b.bary = io::find_section(sections, "bind/" + id + "/bary").as_tensor();
    const Tensor& mm =
        io::find_section(sections, "bind/" + id + "/mouth_mask").as_tensor();
    b.mouth_mask.resize(mm.size());
    for (size_t i = 0; i < mm.size(); ++i) b.mouth_mask[i] = mm[i] != 0.0;
    ck.bindings.emplace(id, std::move(b));
    ck.head_models[id] =
        io::find_section(sections, "head/" + id).as_string();
    ck.id_embeds[id] = io::find_section(sections, "embed/" + id).as_tensor();
  }
  return ck;
}

std::vector<std::string> Checkpoint::identities() const {
  std::vector<std::string> out;
  for (const auto& [id, b] : bindings) {
    (void)b;
    out.push_back(id);
  }
  return out;
}

GaussianCloud Checkpoint::assemble_cloud(const std::string& identity) const {
  auto it = bindings.find(identity);
  if (it == bindings.end())
    throw ValidationError("checkpoint: unknown identity '" + identity + "'");
  GaussianCloud c = it->second.topology();
  const std::string p = "cloud/" + identity + "/";
  c.mu_l = params.at(p + "mu_l").value;
  c.rot_l = params.at(p + "rot_l").value;
  c.scale_l = params.at(p + "scale_l").value;
  c.alpha_l = params.at(p + "alpha_l").value;
  c.sh_l = params.at(p + "sh_l").value;
  return c;
}

}  // namespace etg
