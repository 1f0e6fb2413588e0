#include "gfsl/cli.hpp"

int main(int argc, char** argv) { return gfsl::run_cli(argc, argv); }
