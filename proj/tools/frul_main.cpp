#include "frul/cli.hpp"

int main(int argc, char** argv) { return frul::cli::main(argc, argv); }
