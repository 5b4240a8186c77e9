#pragma once

#include <chrono>
#include <fstream>
#include <map>
#include <sstream>
#include <stdexcept>
#include <string>
#include <vector>

#include "kmorph/pipeline.hpp"

namespace kmorph {

// Plain-text key=value configuration, '#' comments. CLI flags override file
// values; the resolved snapshot goes into the run manifest.
class KeyValueConfig {
 public:
  KeyValueConfig() = default;

  static KeyValueConfig load_file(const std::string& path) {
    std::ifstream in(path);
    if (!in) throw std::runtime_error("cannot open config file " + path);
    KeyValueConfig cfg;
    std::string line;
    while (std::getline(in, line)) {
      auto hash = line.find('#');
      if (hash != std::string::npos) line.erase(hash);
      auto eq = line.find('=');
      if (eq == std::string::npos) continue;
      auto trim = [](std::string s) {
        auto b = s.find_first_not_of(" \t\r");
        auto e = s.find_last_not_of(" \t\r");
        return b == std::string::npos ? std::string() : s.substr(b, e - b + 1);
      };
      std::string key = trim(line.substr(0, eq));
      std::string val = trim(line.substr(eq + 1));
      if (!key.empty()) cfg.values_[key] = val;
    }
    return cfg;
  }

  void set(const std::string& key, const std::string& value) { values_[key] = value; }
  bool has(const std::string& key) const { return values_.count(key) != 0; }

  std::string get(const std::string& key, const std::string& def) const {
    auto it = values_.find(key);
    return it == values_.end() ? def : it->second;
  }
  double get(const std::string& key, double def) const {
    auto it = values_.find(key);
    return it == values_.end() ? def : std::stod(it->second);
  }
  long get(const std::string& key, long def) const {
    auto it = values_.find(key);
    return it == values_.end() ? def : std::stol(it->second);
  }

  const std::map<std::string, std::string>& values() const { return values_; }

 private:
  std::map<std::string, std::string> values_;
};

// Fig-style per-task conv channel defaults
inline std::array<int, 5> default_channels(const std::string& task_name) {
  if (task_name == "box_c") return {4, 8, 10, 12, 14};
  if (task_name == "door") return {2, 4, 8, 16, 32};
  return {2, 4, 6, 8, 10};
}

inline PipelineConfig pipeline_config_from(const KeyValueConfig& cfg) {
  PipelineConfig pc;
  std::string task_name = cfg.get("task", std::string("box_a"));
  if (!is_known_task(task_name)) throw std::invalid_argument("unknown task '" + task_name + "'");
  pc.task = make_task(task_name);
  if (cfg.has("schema_file"))
    pc.task.schema = ParamSchema::load_file(cfg.get("schema_file", std::string()), task_name);

  int cloud_w = int(cfg.get("cloud_width", 256L));
  int cloud_h = int(cfg.get("cloud_height", 192L));
  pc.downsample_factor = int(cfg.get("downsample_factor", 4L));
  pc.camera = default_camera(task_name, cloud_w, cloud_h);
  if (cfg.has("camera_distance") || cfg.has("camera_height")) {
    Eigen::Vector3d target(0, 0, task_name == "door" ? 1.0 : 0.15);
    double dist = cfg.get("camera_distance", task_name == "door" ? 3.2 : 2.0);
    double height = cfg.get("camera_height", task_name == "door" ? 1.3 : 0.9);
    pc.camera = Camera::look_at(cloud_w, cloud_h, cfg.get("hfov_deg", 60.0) * M_PI / 180.0,
                                {0.0, -dist, height}, target, cfg.get("near", pc.camera.near_m),
                                cfg.get("far", pc.camera.far_m));
  }

  pc.n_data = int(cfg.get("n_data", 1000L));
  pc.n_aug = int(cfg.get("n_aug", long(pc.n_data / 5)));
  pc.outer_rounds_max = int(cfg.get("outer_rounds", 4L));
  pc.stop_epsilon = cfg.get("stop_epsilon", 0.01);
  pc.split_fraction = cfg.get("split_fraction", 0.8);
  pc.early_stop_tol = cfg.get("early_stop_tol", 1e-3);
  pc.seed = std::uint64_t(cfg.get("seed", 1L));

  pc.train.learning_rate = cfg.get("learning_rate", 1e-3);
  pc.train.adam_beta1 = cfg.get("adam_beta1", 0.9);
  pc.train.adam_beta2 = cfg.get("adam_beta2", 0.999);
  pc.train.adam_epsilon = cfg.get("adam_epsilon", 1e-8);
  pc.train.batch_size = int(cfg.get("batch_size", 64L));
  pc.train.epochs = int(cfg.get("epochs", 20L));
  pc.train.validation_fraction = cfg.get("validation_fraction", 0.1);

  pc.channels = default_channels(task_name);
  if (cfg.has("channels")) {
    std::istringstream ss(cfg.get("channels", std::string()));
    std::string tok;
    int i = 0;
    while (std::getline(ss, tok, ',') && i < 5) pc.channels[i++] = std::stoi(tok);
    if (i != 5) throw std::invalid_argument("channels: expected 5 comma-separated integers");
  }
  if (pc.n_aug > pc.n_data) throw std::invalid_argument("n_aug must be <= n_data");
  return pc;
}

inline constexpr const char* kToolkitVersion = "0.1.0";

// Run manifest: resolved config snapshot plus produced artifacts, enough to
// reproduce the run byte-identically.
class RunManifest {
 public:
  RunManifest(std::string command, const KeyValueConfig& cfg, std::uint64_t seed)
      : command_(std::move(command)), seed_(seed), start_(std::chrono::steady_clock::now()) {
    for (const auto& [k, v] : cfg.values()) config_.emplace_back(k, v);
  }

  void add_artifact(const std::string& role, const std::string& path) {
    artifacts_.emplace_back(role, path);
  }
  void note(const std::string& line) { notes_.push_back(line); }

  void write(const std::string& path) const {
    std::ofstream out(path);
    if (!out) throw std::runtime_error("cannot write manifest " + path);
    auto elapsed = std::chrono::duration_cast<std::chrono::milliseconds>(
                       std::chrono::steady_clock::now() - start_)
                       .count();
    out << "command = " << command_ << "\n";
    out << "toolkit_version = " << kToolkitVersion << "\n";
    out << "master_seed = " << seed_ << "\n";
    out << "wall_clock_ms = " << elapsed << "\n";
    out << "[config]\n";
    for (const auto& [k, v] : config_) out << k << " = " << v << "\n";
    out << "[artifacts]\n";
    for (const auto& [role, p] : artifacts_) out << role << " = " << p << "\n";
    if (!notes_.empty()) {
      out << "[notes]\n";
      for (const auto& n : notes_) out << n << "\n";
    }
  }

 private:
  std::string command_;
  std::uint64_t seed_;
  std::chrono::steady_clock::time_point start_;
  std::vector<std::pair<std::string, std::string>> config_;
  std::vector<std::pair<std::string, std::string>> artifacts_;
  std::vector<std::string> notes_;
};

}  // namespace kmorph
