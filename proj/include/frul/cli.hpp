#pragma once

#include <filesystem>
#include <iosfwd>
#include <string>
#include <vector>

#include "frul/eval.hpp"

namespace frul::cli {

inline constexpr int kExitOk = 0;
inline constexpr int kExitValidation = 1;
inline constexpr int kExitRuntime = 2;

/// Parses and dispatches one invocation; never throws.
int run(const std::vector<std::string>& args, std::ostream& out, std::ostream& err);
int main(int argc, char** argv);

/// Fixed-width table of the four UE cells, values to 4 decimals.
std::string summary_table(const eval::EvalReport& report);

/// Bar chart of UE per cell. Bar height is ue * kSvgScale pixels.
inline constexpr double kSvgScale = 200.0;
std::string ue_svg(const eval::EvalReport& report);

/// Reads report.json from dir, prints the table and writes ue.svg into dir.
void summarize(const std::filesystem::path& report_dir, std::ostream& out, bool write_svg = true);

/// Exclusive lock on a directory, released on destruction. A lock left by a
/// process that no longer exists is taken over.
class DirLock {
  public:
    explicit DirLock(const std::filesystem::path& dir);
    ~DirLock();
    DirLock(const DirLock&) = delete;
    DirLock& operator=(const DirLock&) = delete;

  private:
    std::filesystem::path path_;
};

}  // namespace frul::cli
