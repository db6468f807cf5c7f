#pragma once

#include <iosfwd>
#include <string>
#include <vector>

namespace phenoscope::cli {

// Exit codes: 0 success, 1 usage error, 2 data error, 3 internal error.
inline constexpr int kExitOk = 0;
inline constexpr int kExitUsage = 1;
inline constexpr int kExitData = 2;
inline constexpr int kExitInternal = 3;

// args excludes the program name.
int dispatch(const std::vector<std::string>& args, std::ostream& out, std::ostream& err);
int dispatch(int argc, char** argv);

}  // namespace phenoscope::cli
