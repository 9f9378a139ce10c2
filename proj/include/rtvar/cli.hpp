#pragma once

#include <ostream>
#include <string>
#include <vector>

namespace rtvar {

inline constexpr const char* kToolVersion = "0.1.0";

/// Entry point of the `rtvar` command line tool. `args` excludes the program
/// name. Returns the process exit code; failures print one line of the form
/// `error[<kind>]: <message>` to `err`.
int run_cli(std::vector<std::string> args, std::ostream& out, std::ostream& err);

}  // namespace rtvar
