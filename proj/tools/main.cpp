#include <iostream>

#include "fastinit_cli.hpp"

int main(int argc, char** argv) { return fastinit::cli::run(argc, argv, std::cout, std::cerr); }
