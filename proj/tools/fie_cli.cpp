#include <iostream>

#include "fie/cli.hpp"

int main(int argc, char** argv) { return fie::run_cli(argc, argv, std::cout, std::cerr); }
