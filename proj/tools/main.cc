#include <iostream>

#include "cli.h"

int main(int argc, char** argv) { return dymo::cli_main(argc, argv, std::cout, std::cerr); }
