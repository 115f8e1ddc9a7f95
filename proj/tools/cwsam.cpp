#include <iostream>

#include "cwsam/cli.hpp"

int main(int argc, char** argv) { return cwsam::cli::run(argc, argv, std::cout, std::cerr); }
