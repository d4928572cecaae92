#pragma once

// Shared helpers for the test binaries: scratch directories, small
// hand-built datasets, random draws and a subprocess runner for the CLI.

#include <unistd.h>
#include <sys/wait.h>

#include <atomic>
#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <random>
#include <sstream>
#include <string>
#include <vector>

#include <json.hpp>

#include "insdet/insdet.hpp"

namespace fixtures {

namespace fs = std::filesystem;

/// Fresh directory removed on destruction.
class TempDir {
 public:
  TempDir() {
    static std::atomic<int> counter{0};
    path_ = fs::temp_directory_path() /
            ("insdet-test-" + std::to_string(::getpid()) + "-" + std::to_string(counter++));
    fs::remove_all(path_);
    fs::create_directories(path_);
  }
  ~TempDir() {
    std::error_code ec;
    fs::remove_all(path_, ec);
  }
  TempDir(const TempDir&) = delete;
  TempDir& operator=(const TempDir&) = delete;

  const fs::path& path() const { return path_; }
  fs::path operator/(const std::string& name) const { return path_ / name; }

 private:
  fs::path path_;
};

inline std::string slurp(const fs::path& p) {
  std::ifstream in(p, std::ios::binary);
  std::ostringstream os;
  os << in.rdbuf();
  return os.str();
}

inline void spit(const fs::path& p, const std::string& text) {
  std::ofstream out(p, std::ios::binary);
  out << text;
}

inline insdet::EmbeddingMatrix random_embeddings(std::size_t n, std::size_t q, std::mt19937_64& rng) {
  std::normal_distribution<float> g(0.0f, 1.0f);
  insdet::EmbeddingMatrix m(n, q);
  for (float& v : m.data()) v = g(rng);
  return m;
}

inline std::vector<double> random_vector(std::size_t n, std::mt19937_64& rng) {
  std::normal_distribution<double> g(0.0, 1.0);
  std::vector<double> v(n);
  for (double& x : v) x = g(rng);
  return v;
}

/// Two instances with four references each along distinct axes, one scene
/// with a proposal per instance plus one distractor-like proposal.
/// Writes the embeddings and returns the manifest document.
inline nlohmann::json write_small_dataset(const fs::path& dir, std::size_t q = 4) {
  insdet::EmbeddingMatrix refs(0, q), props(0, q), dist(0, q);
  auto axis = [&](std::size_t k, float wobble) {
    std::vector<float> v(q, 0.0f);
    v[k % q] = 1.0f;
    v[(k + 1) % q] = wobble;
    return v;
  };
  nlohmann::json references = nlohmann::json::array();
  for (std::size_t inst = 0; inst < 2; ++inst) {
    for (std::size_t v = 0; v < 4; ++v) {
      const auto row = axis(inst, 0.05f * float(v));
      references.push_back({{"instance", inst},
                            {"file", "refs"},
                            {"row", refs.rows()},
                            {"origin", v < 3 ? "real" : "synthetic"},
                            {"view", v < 3 ? v : 0}});
      refs.append_row(std::span<const float>(row));
    }
  }
  props.append_row(std::span<const float>(axis(0, 0.1f)));
  props.append_row(std::span<const float>(axis(1, 0.1f)));
  props.append_row(std::span<const float>(axis(2, 0.0f)));
  for (std::size_t k = 0; k < 3; ++k) dist.append_row(std::span<const float>(axis(2 + k, 0.2f)));
  insdet::write_embeddings(refs, dir / "refs.idow");
  insdet::write_embeddings(props, dir / "props.idow");
  insdet::write_embeddings(dist, dir / "dist.idow");

  return {{"format_version", 1},
          {"dim", q},
          {"embedding_files", {{"refs", "refs.idow"}, {"props", "props.idow"}, {"dist", "dist.idow"}}},
          {"references", references},
          {"scenes",
           {{{"id", 5},
             {"width", 640},
             {"height", 480},
             {"difficulty", "easy"},
             {"proposals",
              {{{"file", "props"}, {"row", 0}, {"bbox", {10, 10, 50, 50}}},
               {{"file", "props"}, {"row", 1}, {"bbox", {100, 100, 20, 20}}, {"detector_score", 0.9}},
               {{"file", "props"}, {"row", 2}, {"bbox", {300, 200, 120, 120}}}}},
             {"ground_truth", {{{"instance", 0}, {"bbox", {10, 10, 50, 50}}}, {{"instance", 1}, {"bbox", {100, 100, 20, 20}}}}}}}},
          {"distractors", {{"file", "dist"}, {"count", 3}, {"source", "unit-test"}}}};
}

inline fs::path write_manifest(const fs::path& dir, const nlohmann::json& doc) {
  const auto p = dir / "manifest.json";
  spit(p, doc.dump(1));
  return p;
}

struct RunResult {
  int exit_code = -1;
  std::string out;
  std::string err;
};

/// Runs a shell command line, capturing stdout and stderr.
inline RunResult run(const std::string& command, const fs::path& scratch) {
  const auto out = scratch / "stdout.txt";
  const auto err = scratch / "stderr.txt";
  const std::string full = command + " >'" + out.string() + "' 2>'" + err.string() + "'";
  const int status = std::system(full.c_str());
  RunResult r;
  r.exit_code = WIFEXITED(status) ? WEXITSTATUS(status) : -1;
  r.out = slurp(out);
  r.err = slurp(err);
  return r;
}

}  // namespace fixtures
