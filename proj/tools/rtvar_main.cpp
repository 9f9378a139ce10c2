#include <iostream>
#include <string>
#include <vector>

#include "rtvar/cli.hpp"

int main(int argc, char** argv) {
  std::vector<std::string> args(argv + 1, argv + argc);
  return rtvar::run_cli(std::move(args), std::cout, std::cerr);
}
