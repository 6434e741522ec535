#include "fccl/cli.hpp"

int main(int argc, char** argv) { return fccl::cli_main(argc, argv); }
