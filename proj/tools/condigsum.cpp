#include <iostream>
#include <string>
#include <vector>

#include "condigsum/cli.hpp"

int main(int argc, char** argv) {
  condigsum::configure_logging_from_env();
  return condigsum::run_cli(std::vector<std::string>(argv, argv + argc), std::cout, std::cerr);
}
