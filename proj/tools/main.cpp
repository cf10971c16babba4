#include "cli.hpp"

int main(int argc, char** argv) { return saegis::cli::main(argc, argv); }
