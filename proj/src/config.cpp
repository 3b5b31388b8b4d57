#include <cstdio>
#include <fstream>
#include <functional>
#include <map>
#include <sstream>
#include <string>

#include "arrowvid/experiment.hpp"

namespace arrowvid {

namespace {

std::string trim(const std::string& s) {
  size_t a = s.find_first_not_of(" \t\r");
  if (a == std::string::npos) return "";
  size_t b = s.find_last_not_of(" \t\r");
  return s.substr(a, b - a + 1);
}

double to_double(const std::string& key, const std::string& v) {
  try {
    size_t used = 0;
    double d = std::stod(v, &used);
    if (used != v.size()) throw std::invalid_argument(v);
    return d;
  } catch (const std::exception&) {
    throw ConfigError("config: " + key + " wants a number, got '" + v + "'");
  }
}

int64_t to_int(const std::string& key, const std::string& v) {
  try {
    size_t used = 0;
    long long i = std::stoll(v, &used);
    if (used != v.size()) throw std::invalid_argument(v);
    return i;
  } catch (const std::exception&) {
    throw ConfigError("config: " + key + " wants an integer, got '" + v + "'");
  }
}

uint64_t to_uint(const std::string& key, const std::string& v) {
  try {
    size_t used = 0;
    unsigned long long i = std::stoull(v, &used);
    if (used != v.size()) throw std::invalid_argument(v);
    return i;
  } catch (const std::exception&) {
    throw ConfigError("config: " + key + " wants a non-negative integer, got '" + v + "'");
  }
}

bool to_bool(const std::string& key, const std::string& v) {
  if (v == "true" || v == "1") return true;
  if (v == "false" || v == "0") return false;
  throw ConfigError("config: " + key + " wants true/false, got '" + v + "'");
}

std::string fmt(double d) {
  char buf[40];
  std::snprintf(buf, sizeof(buf), "%.17g", d);
  return buf;
}

}  // namespace

ExperimentConfig parse_experiment_config(const std::string& text) {
  ExperimentConfig c;
  TrainConfig& t = c.train;
  using Handler = std::function<void(const std::string&, const std::string&)>;
  const std::map<std::string, Handler> keys = {
      {"family", [&](const std::string&, const std::string& v) { t.family = family_from_string(v); }},
      {"categorical", [&](const std::string& k, const std::string& v) { t.categorical = to_bool(k, v); }},
      {"loss_mode", [&](const std::string&, const std::string& v) { t.loss_mode = loss_mode_from_string(v); }},
      {"aux", [&](const std::string&, const std::string& v) { t.aux = aux_task_from_string(v); }},
      {"alpha", [&](const std::string& k, const std::string& v) { t.weights.alpha = to_double(k, v); }},
      {"beta", [&](const std::string& k, const std::string& v) { t.weights.beta = to_double(k, v); }},
      {"lambda1", [&](const std::string& k, const std::string& v) { t.weights.lambda1 = to_double(k, v); }},
      {"lambda2", [&](const std::string& k, const std::string& v) { t.weights.lambda2 = to_double(k, v); }},
      {"lambda3", [&](const std::string& k, const std::string& v) { t.weights.lambda3 = to_double(k, v); }},
      {"lr", [&](const std::string& k, const std::string& v) { t.lr = to_double(k, v); }},
      {"adam_beta1", [&](const std::string& k, const std::string& v) { t.beta1 = to_double(k, v); }},
      {"adam_beta2", [&](const std::string& k, const std::string& v) { t.beta2 = to_double(k, v); }},
      {"noise_weight", [&](const std::string& k, const std::string& v) { t.noise_weight = to_double(k, v); }},
      {"gp_lambda", [&](const std::string& k, const std::string& v) { t.gp_lambda = to_double(k, v); }},
      {"non_saturating_g", [&](const std::string& k, const std::string& v) { t.non_saturating_g = to_bool(k, v); }},
      {"batch", [&](const std::string& k, const std::string& v) { t.batch = to_int(k, v); }},
      {"steps", [&](const std::string& k, const std::string& v) { t.steps = to_int(k, v); }},
      {"d_per_g", [&](const std::string& k, const std::string& v) { t.d_per_g = static_cast<int>(to_int(k, v)); }},
      {"frames", [&](const std::string& k, const std::string& v) { t.T = to_int(k, v); }},
      {"height", [&](const std::string& k, const std::string& v) { t.H = to_int(k, v); }},
      {"width", [&](const std::string& k, const std::string& v) { t.W = to_int(k, v); }},
      {"latent", [&](const std::string& k, const std::string& v) { t.latent = to_int(k, v); }},
      {"width_div", [&](const std::string& k, const std::string& v) { t.width_div = to_int(k, v); }},
      {"classes", [&](const std::string& k, const std::string& v) { t.classes = to_int(k, v); }},
      {"seed", [&](const std::string& k, const std::string& v) { t.seed = to_uint(k, v); }},
      {"aot_real_only", [&](const std::string& k, const std::string& v) { t.aot_real_only = to_bool(k, v); }},
      {"snapshot_every", [&](const std::string& k, const std::string& v) { t.snapshot_every = to_int(k, v); }},
      {"out_dir", [&](const std::string&, const std::string& v) { t.out_dir = v; }},
      {"data_manifest", [&](const std::string&, const std::string& v) { c.data_manifest = v; }},
      {"extractor", [&](const std::string&, const std::string& v) { c.extractor = v; }},
      {"eval_samples", [&](const std::string& k, const std::string& v) { c.eval.n_samples = to_int(k, v); }},
      {"eval_seeds", [&](const std::string& k, const std::string& v) { c.eval.n_seeds = static_cast<int>(to_int(k, v)); }},
      {"eval_batch", [&](const std::string& k, const std::string& v) { c.eval.batch = to_int(k, v); }},
      {"eval_is_splits", [&](const std::string& k, const std::string& v) { c.eval.is_splits = static_cast<int>(to_int(k, v)); }},
      {"eval_seed", [&](const std::string& k, const std::string& v) { c.eval.seed = to_uint(k, v); }},
  };

  std::istringstream in(text);
  std::string line;
  int lineno = 0;
  while (std::getline(in, line)) {
    ++lineno;
    std::string s = trim(line);
    if (s.empty() || s[0] == '#') continue;
    size_t eq = s.find('=');
    if (eq == std::string::npos)
      throw ConfigError("config line " + std::to_string(lineno) + ": expected key = value, got '" +
                        s + "'");
    std::string key = trim(s.substr(0, eq));
    std::string val = trim(s.substr(eq + 1));
    auto it = keys.find(key);
    if (it == keys.end())
      throw ConfigError("config line " + std::to_string(lineno) + ": unknown key '" + key + "'");
    try {
      it->second(key, val);
    } catch (const ConfigError&) {
      throw;
    } catch (const std::exception& e) {  // enum parsers throw runtime_error
      throw ConfigError("config line " + std::to_string(lineno) + ": " + e.what());
    }
  }
  return c;
}

ExperimentConfig load_experiment_config(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw ConfigError("cannot open config file " + path);
  std::stringstream ss;
  ss << in.rdbuf();
  return parse_experiment_config(ss.str());
}

std::string experiment_config_text(const ExperimentConfig& c) {
  const TrainConfig& t = c.train;
  std::ostringstream o;
  o << "# model\n";
  o << "family = " << family_name(t.family) << "\n";
  o << "categorical = " << (t.categorical ? "true" : "false") << "\n";
  o << "loss_mode = " << loss_mode_name(t.loss_mode) << "\n";
  o << "aux = " << aux_task_name(t.aux) << "\n";
  o << "frames = " << t.T << "\n";
  o << "height = " << t.H << "\n";
  o << "width = " << t.W << "\n";
  o << "latent = " << t.latent << "\n";
  o << "width_div = " << t.width_div << "\n";
  o << "classes = " << t.classes << "\n";
  o << "\n# objective\n";
  o << "alpha = " << fmt(t.weights.alpha) << "\n";
  o << "beta = " << fmt(t.weights.beta) << "\n";
  o << "lambda1 = " << fmt(t.weights.lambda1) << "\n";
  o << "lambda2 = " << fmt(t.weights.lambda2) << "\n";
  o << "lambda3 = " << fmt(t.weights.lambda3) << "\n";
  o << "gp_lambda = " << fmt(t.gp_lambda) << "\n";
  o << "non_saturating_g = " << (t.non_saturating_g ? "true" : "false") << "\n";
  o << "aot_real_only = " << (t.aot_real_only ? "true" : "false") << "\n";
  o << "\n# optimization\n";
  o << "lr = " << fmt(t.lr) << "\n";
  o << "adam_beta1 = " << fmt(t.beta1) << "\n";
  o << "adam_beta2 = " << fmt(t.beta2) << "\n";
  o << "noise_weight = " << fmt(t.noise_weight) << "\n";
  o << "batch = " << t.batch << "\n";
  o << "steps = " << t.steps << "\n";
  o << "d_per_g = " << t.d_per_g << "\n";
  o << "seed = " << t.seed << "\n";
  o << "snapshot_every = " << t.snapshot_every << "\n";
  o << "\n# files\n";
  o << "out_dir = " << t.out_dir << "\n";
  o << "data_manifest = " << c.data_manifest << "\n";
  o << "extractor = " << c.extractor << "\n";
  o << "\n# evaluation\n";
  o << "eval_samples = " << c.eval.n_samples << "\n";
  o << "eval_seeds = " << c.eval.n_seeds << "\n";
  o << "eval_batch = " << c.eval.batch << "\n";
  o << "eval_is_splits = " << c.eval.is_splits << "\n";
  o << "eval_seed = " << c.eval.seed << "\n";
  return o.str();
}

void save_experiment_config(const std::string& path, const ExperimentConfig& c) {
  std::ofstream out(path, std::ios::trunc);
  if (!out) throw std::runtime_error("cannot write " + path);
  out << experiment_config_text(c);
}

}  // namespace arrowvid
