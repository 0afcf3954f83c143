#include <string>
#include <vector>

#include "relrisk/cli.hpp"

int main(int argc, char** argv) {
  std::vector<std::string> args(argv + 1, argv + argc);
  return relrisk::run_cli(args);
}
