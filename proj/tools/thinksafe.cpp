#include <iostream>

#include "thinksafe/cli.hpp"

int main(int argc, char** argv) { return thinksafe::run_cli(argc, argv, std::cout, std::cerr); }
