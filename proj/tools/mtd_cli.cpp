#include <iostream>

#include "mtd/cli.hpp"

int main(int argc, char** argv) { return mtd::run_cli(argc, argv, std::cout, std::cerr); }
