#include <iostream>
#include <string>
#include <vector>

#include "dcp/cli.hpp"

int main(int argc, char** argv) {
  return dcp::run_cli(std::vector<std::string>(argv + 1, argv + argc), std::cout, std::cerr);
}
