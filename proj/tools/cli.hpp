#pragma once

#include <iosfwd>

namespace mexit::cli {

/// Entry point of the command-line tool; returns the process exit status.
int run_cli(int argc, const char* const* argv);

}  // namespace mexit::cli
