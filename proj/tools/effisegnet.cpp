#include "effisegnet/cli.hpp"

int main(int argc, char** argv) {
  return effisegnet::run_cli(std::vector<std::string>(argv, argv + argc));
}
