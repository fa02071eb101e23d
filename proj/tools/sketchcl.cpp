#include <iostream>

#include <sketchcl/cli.hpp>

int main(int argc, char** argv) { return sketchcl::run_cli(argc, argv, std::cout, std::cerr); }
