#pragma once

#include <iosfwd>

namespace thinksafe {

inline constexpr int kExitOk = 0;
inline constexpr int kExitConfig = 2;
inline constexpr int kExitStage = 3;

// Entry point of the `thinksafe` command. Returns the process exit code.
int run_cli(int argc, char** argv, std::ostream& out, std::ostream& err);

}  // namespace thinksafe
