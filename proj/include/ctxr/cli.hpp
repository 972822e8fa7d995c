#pragma once

namespace ctxr::cli {

// Parses argv and runs one subcommand. Returns the process exit code:
// 0 iff every requested artifact was produced.
int run(int argc, const char* const* argv);

}  // namespace ctxr::cli
