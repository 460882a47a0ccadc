#include <string>
#include <vector>

#include "infomax/cli.hpp"

int main(int argc, char** argv) {
  std::vector<std::string> args(argv + 1, argv + argc);
  return infomax::cli::run(args);
}
