#pragma once

#include <map>
#include <memory>
#include <string>
#include <vector>

#include "escm/common.hpp"

namespace escm {

struct ParamEntry {
  std::string name;
  Mat value;
  Mat grad;
  Mat adam_m;
  Mat adam_v;
};

using ParamRef = ParamEntry*;

// Named trainable arrays. Entries keep stable addresses and a fixed
// registration order, so optimizer sweeps and checkpoints are deterministic.
class ParameterStore {
 public:
  ParamRef add(const std::string& name, int rows, int cols);
  ParamRef get(const std::string& name);
  const ParamEntry* find(const std::string& name) const;
  bool has(const std::string& name) const;

  void zero_grad();
  std::vector<ParamRef> entries();  // registration order
  std::vector<const ParamEntry*> entries() const;
  long long total_size() const;

 private:
  std::vector<std::unique_ptr<ParamEntry>> entries_;
  std::map<std::string, size_t> index_;
};

struct AdamOptimizer {
  double learning_rate = 1e-4;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double eps = 1e-8;
  double grad_clip = 0.0;  // 0 disables clipping
  long long step_count = 0;

  void step(ParameterStore& params);
};

// Checkpoint container: a format-versioned map of named f64 arrays plus a
// map of named strings (vocabulary, tag inventories, config text). Round
// trips are bit-exact.
struct Checkpoint {
  std::map<std::string, Mat> arrays;
  std::map<std::string, std::string> strings;

  static constexpr std::uint32_t kFormatVersion = 1;

  void save(const std::string& path) const;
  static Checkpoint load(const std::string& path);
};

// SHA-1 hex digest of "blob <size>\0<content>", i.e. the hash git would
// assign the file.
std::string git_blob_sha1(const std::string& content);

}  // namespace escm
