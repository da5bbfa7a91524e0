#include "dihc/config.hpp"

#include <cstdio>
#include <fstream>
#include <sstream>

namespace dihc {

namespace {

std::string trim(const std::string& s) {
  const auto a = s.find_first_not_of(" \t\r");
  if (a == std::string::npos) return "";
  const auto b = s.find_last_not_of(" \t\r");
  return s.substr(a, b - a + 1);
}

bool parse_bool(const std::string& v, const std::string& key) {
  if (v == "true" || v == "1" || v == "on") return true;
  if (v == "false" || v == "0" || v == "off") return false;
  throw ConfigError("config: bad boolean for " + key + ": " + v);
}

double parse_num(const std::string& v, const std::string& key) {
  try {
    size_t pos = 0;
    const double x = std::stod(v, &pos);
    if (pos != v.size()) throw std::invalid_argument(v);
    return x;
  } catch (const std::exception&) {
    throw ConfigError("config: bad number for " + key + ": " + v);
  }
}

}  // namespace

void apply_config_line(TrainConfig& cfg, const std::string& key, const std::string& value) {
  if (key == "t_max") cfg.t_max = static_cast<int>(parse_num(value, key));
  else if (key == "lr") cfg.lr = static_cast<float>(parse_num(value, key));
  else if (key == "momentum") cfg.momentum = static_cast<float>(parse_num(value, key));
  else if (key == "weight_decay") cfg.weight_decay = static_cast<float>(parse_num(value, key));
  else if (key == "seed") cfg.seed = static_cast<uint64_t>(parse_num(value, key));
  else if (key == "labelled_fraction") cfg.labelled_fraction = parse_num(value, key);
  else if (key == "enable_imd") cfg.ablation.imd = parse_bool(value, key);
  else if (key == "enable_ms") cfg.ablation.ms = parse_bool(value, key);
  else if (key == "enable_dihc") cfg.ablation.dihc = parse_bool(value, key);
  else if (key == "consistency") cfg.consistency = parse_bool(value, key);
  else if (key == "detach_pseudo") cfg.detach_pseudo = parse_bool(value, key);
  else if (key == "ramp_squared") cfg.ramp_squared = parse_bool(value, key);
  else if (key == "eval_every") cfg.eval_every = static_cast<int>(parse_num(value, key));
  else if (key == "augment") cfg.augment = parse_bool(value, key);
  else if (key == "patch") cfg.patch = static_cast<int>(parse_num(value, key));
  else if (key == "base_channels") cfg.base_channels = static_cast<int>(parse_num(value, key));
  else if (key == "depth") cfg.depth = static_cast<int>(parse_num(value, key));
  else if (key == "labelled_per_batch") cfg.labelled_per_batch = static_cast<int>(parse_num(value, key));
  else if (key == "unlabelled_per_batch") cfg.unlabelled_per_batch = static_cast<int>(parse_num(value, key));
  else if (key == "alpha1") cfg.weights.alpha1 = static_cast<float>(parse_num(value, key));
  else if (key == "alpha2") cfg.weights.alpha2 = static_cast<float>(parse_num(value, key));
  else if (key == "alpha3") cfg.weights.alpha3 = static_cast<float>(parse_num(value, key));
  else if (key == "temperature") cfg.sharpen.temperature = static_cast<float>(parse_num(value, key));
  else if (key == "ramp_base") cfg.ramp_base = parse_num(value, key);
  else if (key == "lambda_sup") cfg.lambda_sup = parse_num(value, key);
  else if (key == "dice_smooth") cfg.dice_smooth = static_cast<float>(parse_num(value, key));
  else if (key == "test_count") cfg.test_count = static_cast<int>(parse_num(value, key));
  else throw ConfigError("config: unknown key: " + key);
}

void apply_config_file(TrainConfig& cfg, const std::string& path) {
  std::ifstream is(path);
  if (!is) throw ConfigError("config: cannot open " + path);
  std::string line;
  int lineno = 0;
  while (std::getline(is, line)) {
    ++lineno;
    const std::string t = trim(line);
    if (t.empty() || t[0] == '#') continue;
    const auto eq = t.find('=');
    if (eq == std::string::npos) {
      throw ConfigError("config: " + path + ":" + std::to_string(lineno) + ": expected key = value");
    }
    apply_config_line(cfg, trim(t.substr(0, eq)), trim(t.substr(eq + 1)));
  }
}

std::string dump_config(const TrainConfig& cfg) {
  std::ostringstream os;
  char buf[96];
  auto num = [&](const char* key, double v) {
    std::snprintf(buf, sizeof(buf), "%s = %.9g\n", key, v);
    os << buf;
  };
  auto flag = [&](const char* key, bool v) { os << key << " = " << (v ? "true" : "false") << "\n"; };
  num("t_max", cfg.t_max);
  num("lr", cfg.lr);
  num("momentum", cfg.momentum);
  num("weight_decay", cfg.weight_decay);
  num("seed", static_cast<double>(cfg.seed));
  num("labelled_fraction", cfg.labelled_fraction);
  flag("enable_imd", cfg.ablation.imd);
  flag("enable_ms", cfg.ablation.ms);
  flag("enable_dihc", cfg.ablation.dihc);
  flag("consistency", cfg.consistency);
  flag("detach_pseudo", cfg.detach_pseudo);
  flag("ramp_squared", cfg.ramp_squared);
  num("eval_every", cfg.eval_every);
  flag("augment", cfg.augment);
  num("patch", cfg.patch);
  num("base_channels", cfg.base_channels);
  num("depth", cfg.depth);
  num("labelled_per_batch", cfg.labelled_per_batch);
  num("unlabelled_per_batch", cfg.unlabelled_per_batch);
  num("alpha1", cfg.weights.alpha1);
  num("alpha2", cfg.weights.alpha2);
  num("alpha3", cfg.weights.alpha3);
  num("temperature", cfg.sharpen.temperature);
  num("ramp_base", cfg.ramp_base);
  num("lambda_sup", cfg.lambda_sup);
  num("dice_smooth", cfg.dice_smooth);
  num("test_count", cfg.test_count);
  return os.str();
}

}  // namespace dihc
