#ifndef DYMO_TOOLS_CLI_H_
#define DYMO_TOOLS_CLI_H_

#include <iosfwd>

namespace dymo {

inline constexpr int kExitOk = 0;
inline constexpr int kExitRuntime = 1;
inline constexpr int kExitUsage = 2;

// Entry point of the `dymo` tool. Output goes to `out`, logs and errors to `err`.
int cli_main(int argc, const char* const* argv, std::ostream& out, std::ostream& err);

}  // namespace dymo

#endif  // DYMO_TOOLS_CLI_H_
