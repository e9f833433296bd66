#include "lorakv/cli.hpp"

int main(int argc, char** argv) { return lorakv::cli_main(argc, argv); }
