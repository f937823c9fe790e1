#pragma once

#include <string>
#include <vector>

namespace fedstil {

// Exit codes: 0 success, 2 configuration/usage error, 1 runtime error.
int cli_main(int argc, const char* const* argv);
int cli_main(const std::vector<std::string>& args);  // args without argv[0]

}  // namespace fedstil
