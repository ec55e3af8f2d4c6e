#pragma once

#include <iosfwd>

namespace nes {

/// The `nes` command line. Returns 0 on success, 1 for invalid input (bad
/// flags, configs, files, failed checks) and 2 for internal errors.
int run_cli(int argc, const char* const* argv, std::ostream& out, std::ostream& err);

} // namespace nes
