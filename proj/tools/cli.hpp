#ifndef SEGCAL_TOOLS_CLI_HPP_
#define SEGCAL_TOOLS_CLI_HPP_

#include <string>
#include <vector>

namespace segcal::cli {

// Environment variable naming the default output directory.
inline constexpr const char* kOutputEnv = "SEGCAL_OUT";

// Runs one subcommand. Returns 0 on success, 1 on runtime errors (bad data,
// missing files, failed checks) and 2 on usage errors.
int run(int argc, const char* const* argv);
int run(const std::vector<std::string>& args);  // args exclude the program name

}  // namespace segcal::cli

#endif  // SEGCAL_TOOLS_CLI_HPP_
