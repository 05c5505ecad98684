#include <iostream>

#include "mstage/cli.hpp"

int main(int argc, char** argv) { return mstage::run_cli(argc, argv, std::cout, std::cerr); }
