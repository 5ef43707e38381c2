#include <iostream>

#include "uwseg/cli.hpp"

int main(int argc, char** argv) { return uwseg::run_cli(argc, argv, std::cout, std::cerr); }
