#include "nes/cli.hpp"

#include <iostream>

int main(int argc, char** argv) { return nes::run_cli(argc, argv, std::cout, std::cerr); }
