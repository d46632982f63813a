#include <iostream>

#include "gpmpc/cli.hpp"

int main(int argc, char** argv) { return gpmpc::cli::run(argc, argv, std::cout, std::cerr); }
