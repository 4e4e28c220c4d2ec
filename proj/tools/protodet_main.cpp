#include "protodet/cli.hpp"

#include <iostream>

int main(int argc, char** argv) { return protodet::cli::run(argc, argv, std::cout, std::cerr); }
