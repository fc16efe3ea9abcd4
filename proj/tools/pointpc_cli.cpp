#include <iostream>

#include "pointpc/cli.hpp"

int main(int argc, char** argv) {
  return pointpc::cli::run_cli(std::vector<std::string>(argv + 1, argv + argc), std::cout, std::cerr);
}
