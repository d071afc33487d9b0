// CLI entry point (placeholder while the core is under construction).
#pragma once

namespace advseg {

int run_cli(int argc, char** argv);

inline int run_cli(int, char**) { return 0; }

}  // namespace advseg
