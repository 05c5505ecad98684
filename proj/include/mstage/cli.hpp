#pragma once

#include <iosfwd>

namespace mstage {

/// Entry point of the command-line tool. Returns the process exit code:
/// 0 on success, 1 on runtime failure, 2 on usage or configuration errors.
int run_cli(int argc, const char* const* argv, std::ostream& out, std::ostream& err);

}  // namespace mstage
