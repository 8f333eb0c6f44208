#pragma once

#include <unistd.h>

#include <filesystem>
#include <map>
#include <random>
#include <sstream>
#include <string>
#include <vector>

#include "cbs/cbs.hpp"
#include "cbs/cli.hpp"

namespace testing_support {

namespace fs = std::filesystem;

// Fresh directory under the system temp dir, removed on destruction.
class TempDir {
public:
  explicit TempDir(const std::string& tag) {
    static int counter = 0;
    path_ = fs::temp_directory_path() /
            ("cbs_" + tag + "_" + std::to_string(::getpid()) + "_" + std::to_string(counter++));
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
  fs::path operator/(const std::string& s) const { return path_ / s; }

private:
  fs::path path_;
};

// relative path -> file bytes for every regular file below root.
inline std::map<std::string, std::string> snapshot(const fs::path& root) {
  std::map<std::string, std::string> out;
  for (const auto& e : fs::recursive_directory_iterator(root))
    if (e.is_regular_file()) out[fs::relative(e.path(), root).generic_string()] = cbs::io::read_file(e.path());
  return out;
}

struct CliResult {
  int code = 0;
  std::string out, err;
};

inline CliResult run_cli(const std::vector<std::string>& args) {
  std::ostringstream out, err;
  CliResult r;
  r.code = cbs::cli::run(args, out, err);
  r.out = out.str();
  r.err = err.str();
  return r;
}

inline cbs::Matrix random_matrix(std::mt19937_64& gen, Eigen::Index rows, Eigen::Index cols, double sd = 1.0) {
  std::normal_distribution<double> n(0.0, sd);
  cbs::Matrix m(rows, cols);
  for (Eigen::Index i = 0; i < rows; ++i)
    for (Eigen::Index j = 0; j < cols; ++j) m(i, j) = n(gen);
  return m;
}

inline cbs::Vector random_vector(std::mt19937_64& gen, Eigen::Index n, double sd = 1.0) {
  return random_matrix(gen, n, 1, sd).col(0);
}

// Small oracle configuration for fast tests.
inline cbs::oracle::SpaceConfig small_space(int n_stories = 40) {
  cbs::oracle::SpaceConfig c;
  c.n_stories = n_stories;
  c.hidden_dim = 16;
  return c;
}

#ifdef CBS_FIXTURES
inline fs::path fixture(const std::string& name) { return fs::path(CBS_FIXTURES) / name; }
#endif

} // namespace testing_support
