#pragma once

#include <iosfwd>
#include <string>
#include <vector>

namespace deltakv::cli {

enum ExitCode : int { kOk = 0, kUsage = 1, kRuntime = 2 };

// Parses argv (argv[0] is the program name) and runs one command.
int run(const std::vector<std::string>& argv, std::ostream& out, std::ostream& err);
int run(int argc, const char* const* argv);

}  // namespace deltakv::cli
