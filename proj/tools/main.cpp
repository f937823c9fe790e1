#include "fedstil/cli.hpp"

int main(int argc, char** argv) { return fedstil::cli_main(argc, argv); }
