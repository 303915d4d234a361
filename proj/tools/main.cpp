#include <iostream>

#include "rgwsaw/cli.hpp"

int main(int argc, char** argv) { return rgwsaw::cli::run_cli(argc, argv, std::cout, std::cerr); }
