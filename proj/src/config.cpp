#include "etg/config.h"

#include <cmath>
#include <cstdio>
#include <fstream>
#include <functional>
#include <map>
#include <sstream>
#include <vector>

#include "etg/common.h"

namespace etg {

namespace {

std::string fmt_double(double v) {
  char buf[40];
  std::snprintf(buf, sizeof(buf), "%.17g", v);
  return buf;
}

std::string trim(const std::string& s) {
  size_t a = s.find_first_not_of(" \t\r");
  if (a == std::string::npos) return "";
  size_t b = s.find_last_not_of(" \t\r");
  return s.substr(a, b - a + 1);
}

struct Field {
  enum Kind { kU64, kSize, kDouble, kBool, kInt } kind;
  void* ptr;
  bool arch;  // participates in arch_hash
};

std::map<std::string, Field> field_table(RunConfig& c) {
  return {
      {"seed", {Field::kU64, &c.seed, true}},
      {"expr_dim", {Field::kSize, &c.expr_dim, true}},
      {"audio_dim", {Field::kSize, &c.audio_dim, true}},
      {"au_dim", {Field::kSize, &c.au_dim, true}},
      {"id_dim", {Field::kSize, &c.id_dim, true}},
      {"hidden", {Field::kSize, &c.hidden, true}},
      {"layers", {Field::kSize, &c.layers, true}},
      {"heads", {Field::kSize, &c.heads, true}},
      {"adain_hidden", {Field::kSize, &c.adain_hidden, true}},
      {"head_hidden", {Field::kSize, &c.head_hidden, true}},
      {"gate_hidden", {Field::kSize, &c.gate_hidden, true}},
      {"gaussians", {Field::kSize, &c.gaussians, true}},
      {"sh_degree", {Field::kSize, &c.sh_degree, true}},
      {"window", {Field::kSize, &c.window, true}},
      {"mouth_radius", {Field::kDouble, &c.mouth_radius, true}},
      {"cloud_seed", {Field::kU64, &c.cloud_seed, true}},
      {"pretrain_iters", {Field::kSize, &c.pretrain_iters, false}},
      {"adapt_iters", {Field::kSize, &c.adapt_iters, false}},
      {"stage1_iters", {Field::kSize, &c.stage1_iters, false}},
      {"lr_pretrain", {Field::kDouble, &c.lr_pretrain, false}},
      {"lr_adapt", {Field::kDouble, &c.lr_adapt, false}},
      {"lr_decay_final", {Field::kDouble, &c.lr_decay_final, false}},
      {"weight_decay", {Field::kDouble, &c.weight_decay, false}},
      {"lambda_dssim", {Field::kDouble, &c.lambda_dssim, false}},
      {"lambda_depth", {Field::kDouble, &c.lambda_depth, false}},
      {"lambda_normal", {Field::kDouble, &c.lambda_normal, false}},
      {"lambda_kl", {Field::kDouble, &c.lambda_kl, false}},
      {"lambda_score", {Field::kDouble, &c.lambda_score, false}},
      {"frames_per_iter", {Field::kSize, &c.frames_per_iter, false}},
      {"holdout_frac", {Field::kDouble, &c.holdout_frac, false}},
      {"adapt_appearance", {Field::kBool, &c.adapt_appearance, false}},
      {"threads", {Field::kInt, &c.threads, false}},
      {"report_every", {Field::kSize, &c.report_every, false}},
  };
}

std::string field_value(const Field& f) {
  switch (f.kind) {
    case Field::kU64:
      return std::to_string(*static_cast<uint64_t*>(f.ptr));
    case Field::kSize:
      return std::to_string(*static_cast<size_t*>(f.ptr));
    case Field::kDouble:
      return fmt_double(*static_cast<double*>(f.ptr));
    case Field::kBool:
      return *static_cast<bool*>(f.ptr) ? "1" : "0";
    case Field::kInt:
      return std::to_string(*static_cast<int*>(f.ptr));
  }
  return "";
}

void set_field(Field& f, const std::string& key, const std::string& value) {
  try {
    switch (f.kind) {
      case Field::kU64:
        *static_cast<uint64_t*>(f.ptr) = std::stoull(value);
        return;
      case Field::kSize:
        *static_cast<size_t*>(f.ptr) = std::stoull(value);
        return;
      case Field::kDouble:
        *static_cast<double*>(f.ptr) = std::stod(value);
        return;
      case Field::kBool: {
        if (value == "1" || value == "true")
          *static_cast<bool*>(f.ptr) = true;
        else if (value == "0" || value == "false")
          *static_cast<bool*>(f.ptr) = false;
        else
          throw ValidationError("");
        return;
      }
      case Field::kInt:
        *static_cast<int*>(f.ptr) = std::stoi(value);
        return;
    }
  } catch (const std::exception&) {
    throw ValidationError("config: bad value '" + value + "' for key '" +
                          key + "'");
  }
}

}  // namespace

RunConfig RunConfig::parse(const std::string& text) {
  RunConfig cfg;
  auto table = field_table(cfg);
  std::istringstream in(text);
  std::string line;
  size_t lineno = 0;
  while (std::getline(in, line)) {
    ++lineno;
    const size_t hash = line.find('#');
    if (hash != std::string::npos) line = line.substr(0, hash);
    line = trim(line);
    if (line.empty()) continue;
    const size_t eq = line.find('=');
    if (eq == std::string::npos) {
      std::ostringstream os;
      os << "config: line " << lineno << " is not 'key = value'";
      throw ValidationError(os.str());
    }
    const std::string key = trim(line.substr(0, eq));
    const std::string value = trim(line.substr(eq + 1));
    auto it = table.find(key);
    if (it == table.end())
      throw ValidationError("config: unknown key '" + key + "'");
    set_field(it->second, key, value);
  }
  if (cfg.hidden % cfg.heads != 0)
    throw ValidationError("config: hidden must be divisible by heads");
  if (cfg.holdout_frac < 0.0 || cfg.holdout_frac >= 1.0)
    throw ValidationError("config: holdout_frac must be in [0,1)");
  if (cfg.sh_degree > 3)
    throw ValidationError("config: sh_degree must be 0..3");
  return cfg;
}

RunConfig RunConfig::load(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw ValidationError(path + ": cannot open config");
  std::ostringstream os;
  os << in.rdbuf();
  return parse(os.str());
}

std::string RunConfig::to_text() const {
  RunConfig& self = const_cast<RunConfig&>(*this);
  auto table = field_table(self);
  std::ostringstream os;
  for (const auto& [key, field] : table)
    os << key << " = " << field_value(field) << "\n";
  return os.str();
}

uint64_t RunConfig::arch_hash() const {
  RunConfig& self = const_cast<RunConfig&>(*this);
  auto table = field_table(self);
  uint64_t h = 1469598103934665603ull;  // FNV-1a
  auto mix = [&h](const std::string& s) {
    for (unsigned char ch : s) {
      h ^= ch;
      h *= 1099511628211ull;
    }
  };
  for (const auto& [key, field] : table) {
    if (!field.arch) continue;
    mix(key);
    mix("=");
    mix(field_value(field));
    mix("\n");
  }
  return h;
}

}  // namespace etg
