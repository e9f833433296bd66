#pragma once

#include <string>
#include <vector>

namespace lorakv {

// Command-line entry point shared by the binary and the test suites.
// Exit codes: 0 success, 1 verification failure, 2 usage/config error.
int cli_main(const std::vector<std::string>& args);
int cli_main(int argc, char** argv);

}  // namespace lorakv
